"""Federated-learning simulation with composition monitoring and
ratio-scaled imbalance mitigation."""

from .config import (
    DatasetConfig,
    ExperimentConfig,
    ModelConfig,
    PartitionConfig,
)
from .data import (
    ClientShard,
    Dataset,
    PartitionPlan,
    composition,
    cosine_similarity,
    global_imbalance,
    load_mnist_idx,
    local_imbalance,
    make_synthetic,
    partition,
)
from .federation import (
    ClientUpdate,
    FederationState,
    RoundConfig,
    RoundDelta,
    fedavg,
    local_train,
    run_round,
    select_clients,
)
from .harness import (
    RunReport,
    compare_losses,
    mismatch_study,
    monitor_eval,
    run_experiment,
)
from .losses import LossConfig, RatioVector
from .monitor import (
    AuxiliaryData,
    CompositionEstimate,
    DetectionState,
    Monitor,
    MonitorConfig,
    ProbeResult,
    estimate_counts,
    filter_weights,
    probe,
    ratio_matrix,
    ratio_vector_from,
    update_detection,
)
from .nn import (
    DenseLayer,
    ForwardTrace,
    GradientSet,
    MlpModel,
    ModelSpec,
    backward,
    forward,
    init_model,
    last_layer_gradient,
    sgd_step,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
