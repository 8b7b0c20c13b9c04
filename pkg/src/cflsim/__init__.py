"""Contrastive federated pretraining for vertically partitioned tabular silos.

Silos share samples but not feature columns; rows a silo does not hold
are zero-filled against an ordered global index. Each silo pretrains a
shared encoder/decoder on two stochastic corruptions of its rows with a
reconstruction + contrastive + view-distance objective, a server averages
parameters every epoch, and representation quality is read out by linear
probes against pooled-data and local-data references.
"""

from .augment import AugmentConfig, binomial_mask, gaussian_noise, make_views
from .data import (
    SplitTable,
    Table,
    load_csv,
    minmax_normalize,
    synth_correlated_table,
    synth_nonlinear_table,
    synth_table,
    train_test_split,
)
from .errors import (
    CflError,
    ConfigError,
    DataError,
    DegenerateEmbeddingError,
    DegenerateLabelsError,
    DegenerateVarianceError,
    InsufficientDataError,
    InsufficientNegativesError,
    ShapeError,
    StaleTraceError,
    TrainingDivergenceError,
    ZeroFillCorruptionError,
)
from .experiment import (
    DatasetSpec,
    ExperimentConfig,
    RunSummary,
    desk_profile,
    prepare_experiment,
    run_covdev,
    run_experiment,
    run_gradcheck,
    run_loss_bench,
    run_pearson_ablation,
)
from .federation import (
    ClientState,
    ParamMessage,
    RoundLog,
    TrainConfig,
    client_update,
    privacy_audit,
    run_cfl,
    server_aggregate,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    bench_similarity,
    contrastive_loss,
    distance_loss,
    recon_loss,
    total_loss,
)
from .mlp import (
    ForwardTrace,
    MlpParams,
    OptState,
    backward,
    decode,
    encode,
    flatten,
    init_params,
    load_checkpoint,
    opt_step,
    save_checkpoint,
    unflatten,
)
from .numerics import RngStream, covariance, frobenius_norm, matmul, pearson
from .probe import (
    MetricsReport,
    ProbeConfig,
    evaluate_baselines,
    evaluate_silo,
    train_probe,
    weighted_metrics,
)
from .silos import (
    ImbalanceSpec,
    SiloView,
    covariance_deviation_experiment,
    inject_class_size_imbalance,
    inject_data_size_imbalance,
    pearson_reorder,
    vertical_partition,
    zero_fill_check,
)

__version__ = "0.1.0"
