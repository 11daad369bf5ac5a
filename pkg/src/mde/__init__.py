"""Multi-modal graph recommender with modality difference and alignment losses."""

from .data import InteractionDataset, ModalityFeatures, TripletBatch
from .graph import GraphBundle, SparseAdjacency, spmm
from .losses import LossConfig
from .optim import AdamState, Objective, adam_step, grad_check, gradients
from .traineval import AblationSpec, MetricReport, TrainConfig, evaluate_embeddings, train

__all__ = [
    "AblationSpec",
    "AdamState",
    "GraphBundle",
    "InteractionDataset",
    "LossConfig",
    "MetricReport",
    "ModalityFeatures",
    "Objective",
    "SparseAdjacency",
    "TrainConfig",
    "TripletBatch",
    "adam_step",
    "evaluate_embeddings",
    "grad_check",
    "gradients",
    "spmm",
    "train",
]

__version__ = "0.1.0"
