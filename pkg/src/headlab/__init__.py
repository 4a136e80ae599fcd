"""headlab: a desk-scale laboratory for pruning multi-head attention.

Trains toy transformers on synthetic tasks, scores attention heads by
loss sensitivity to their gates, runs ablation and greedy pruning
experiments, structurally removes heads, and measures the accuracy and
throughput consequences with paired significance tests.
"""

__version__ = "0.1.0"

from .attention import AttentionKind, HeadId, HeadMask, HeadParams, MhaLayer
from .tensor import ComputationRecord, GradientStore, Tensor, backward

__all__ = [
    "__version__",
    "AttentionKind",
    "HeadId",
    "HeadMask",
    "HeadParams",
    "MhaLayer",
    "ComputationRecord",
    "GradientStore",
    "Tensor",
    "backward",
]
