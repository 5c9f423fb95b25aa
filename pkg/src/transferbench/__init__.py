"""Benchmarking toolkit for l-inf attack transferability versus l2 distance.

Small self-trained classifiers are attacked with seven optimizer-driven
iterative attacks (plus one-step FGSM) under an l-inf budget; the harness
measures how the perturbation RMSE an attack produces governs its black-box
transfer, under fixed-loss, RMSE-augmented, and fixed-RMSE stopping.
"""

from .attack import (
    AttackConfig,
    AttackResult,
    IterationsOnly,
    LossTarget,
    OptimizerState,
    RmseTarget,
    augmented_gradient,
    check_stop,
    fgsm,
    optimizer_direction,
    project_linf_box,
    run_attack,
)
from .data import Dataset, Sample, SyntheticSpec, gen_synthetic, load_idx, select_eval_set, write_idx
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    TransferBenchError,
)
from .harness import (
    ExperimentReport,
    adversarial_train,
    build_model_zoo,
    emit_report,
    experiment_fixed_loss,
    experiment_fixed_rmse,
    experiment_gamma,
)
from .metrics import (
    EvaluationRecord,
    PerturbationStats,
    attack_success_rate,
    perturbation_stats,
    spearman_rho,
)
from .nnet import (
    ArchSpec,
    Network,
    TrainSettings,
    cross_entropy,
    forward,
    input_gradient,
    load_model,
    save_model,
    train_model,
)

__version__ = "0.1.0"
