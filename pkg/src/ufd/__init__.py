"""Unsupervised decomposition of document embeddings into domain-invariant
and domain-specific parts, plus the two-stage transfer pipeline around it."""

from .dataio import (
    DataFormatError,
    Dataset,
    Manifest,
    SynthConfig,
    load_manifest,
    pca_project_2d,
    read_embeddings,
    read_labels,
    save_datasets,
    synth_generate,
    write_embeddings,
    write_labels,
)
from .decomp import (
    AblationMode,
    InvariantExtractor,
    LossWeights,
    SpecificExtractor,
    TermPairings,
    UfdModel,
    fp_forward,
    fs_forward,
    load_ufd,
    save_ufd,
    ufd_loss,
    ufd_train_step,
)
from .mi import (
    Discriminator,
    disc_score,
    dv_mi,
    jsd_mi,
    mi_benchmark,
    sample_derangement,
)
from .nn import (
    AdamState,
    ContractError,
    LinearLayer,
    NonFiniteError,
    ShapeError,
    UfdError,
    adam_step,
    finite_diff_check,
    make_rng,
    spawn_rng,
)
from .pipeline import (
    ExperimentConfig,
    ExperimentReport,
    evaluate,
    run_experiment_grid,
    run_size_sweep,
    train_task_stage,
    train_ufd_stage,
)
from .task import ClassifierInput, TaskClassifier, classify, cross_entropy, predict

__version__ = "0.1.0"

__all__ = [
    "AblationMode",
    "AdamState",
    "ClassifierInput",
    "ContractError",
    "DataFormatError",
    "Dataset",
    "Discriminator",
    "ExperimentConfig",
    "ExperimentReport",
    "InvariantExtractor",
    "LinearLayer",
    "LossWeights",
    "Manifest",
    "NonFiniteError",
    "ShapeError",
    "SpecificExtractor",
    "SynthConfig",
    "TaskClassifier",
    "TermPairings",
    "UfdError",
    "UfdModel",
    "adam_step",
    "classify",
    "cross_entropy",
    "disc_score",
    "dv_mi",
    "evaluate",
    "finite_diff_check",
    "fp_forward",
    "fs_forward",
    "jsd_mi",
    "load_manifest",
    "load_ufd",
    "make_rng",
    "mi_benchmark",
    "pca_project_2d",
    "predict",
    "read_embeddings",
    "read_labels",
    "run_experiment_grid",
    "run_size_sweep",
    "sample_derangement",
    "save_datasets",
    "save_ufd",
    "spawn_rng",
    "synth_generate",
    "train_task_stage",
    "train_ufd_stage",
    "ufd_loss",
    "ufd_train_step",
    "write_embeddings",
    "write_labels",
]
