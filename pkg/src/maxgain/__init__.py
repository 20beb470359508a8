"""Feed-forward network training with per-layer empirical gain constraints.

The training loop measures, for every learned layer and minibatch, the largest
ratio ||Wx||_p / ||x||_p over the batch, and after each optimizer update
rescales the layer's weights by 1 / max(1, gamma_hat / gamma) so the measured
gain never exceeds the target gamma. The package also ships the measurement
tools (exact l1/linf operator norms, power iteration for l2, gain reports),
a disjoint-folds evaluation protocol with a paired t-test, and a CLI.
"""

from .checkpoint import load_network, network_from_text, network_to_text, save_network
from .data import (
    Dataset,
    Fold,
    FoldProtocol,
    augment,
    flip_images,
    load_csv,
    load_idx,
    make_folds,
    pad_crop_images,
    synth_blobs,
    synth_spirals,
)
from .errors import (
    AdjointMismatchError,
    CacheError,
    ConfigError,
    DegenerateSampleError,
    DivergenceError,
    EmptySampleError,
    FormatError,
    InvalidValueError,
    MaxGainError,
    ShapeError,
)
from .evaluate import (
    GainReport,
    GainReportRow,
    SweepResult,
    SweepRow,
    TTestResult,
    accuracy,
    gain_report,
    gamma_sweep,
    log_loss,
    paired_t_test,
    per_layer_gains,
    regularized_incomplete_beta,
)
from .experiment import (
    FoldScores,
    RunResult,
    build_dataset,
    build_fold_protocol,
    build_maxgain,
    build_network,
    build_optimizer,
    build_schedule,
    check_config,
    parse_norm_order,
    run_config,
    run_folds,
)
from .gain import (
    GainStats,
    PowerIterationResult,
    batch_max_gain,
    gain,
    gain_stats,
    instance_gains,
    layer_operator_norm,
    lipschitz_upper_bound,
    materialize_linear,
    operator_norm_exact,
    spectral_norm_power_iteration,
)
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Gradients,
    MaxPool2d,
    Network,
    ReLU,
    ResidualBlock,
    StepCaches,
    apply_linear,
    backward,
    forward,
    softmax,
    softmax_cross_entropy,
)
from .optim import (
    Adam,
    EpochRecord,
    MaxGainConfig,
    Schedule,
    SgdNesterov,
    StepReport,
    TrainingLedger,
    eval_metrics,
    fit,
    predict_proba,
    project,
    projection_scale,
    train_step,
)
from .tensor import init_weights, make_rng, matmul, spawn_rngs, vector_p_norm

__version__ = "0.1.0"
