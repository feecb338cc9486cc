"""Offline-teacher prompt distillation on cached embeddings.

Caption flagging, selective prototype aggregation, a prompt-tuned toy
student trained under image/text/logit alignment, evaluation metrics and
prompt-budget arithmetic.
"""
from .core import (
    ClassIndexSets,
    DegenerateInputError,
    DegeneratePrototypeError,
    DivergenceError,
    EmbeddingRecord,
    NumericalError,
    RobustStats,
    ValidationError,
    cosine,
    l2_normalize,
    robust_stats,
    softmax,
)
from .prototype import AggregationConfig, ClassPrototype, aggregate_class, build_all_prototypes
from .rsflag import CaptionCandidate, RsFlagRuleset, annotate_corpus, assign_flag
from .distill import DistillConfig, LossBreakdown, total_loss
from .student import ToyEncoderConfig, ToyStudent, init_student, encode, train

__version__ = "0.1.0"
