"""Selective prototype aggregation.

Per class: average the teacher image features into a visual prototype, score
each caption embedding against it, drop candidates whose robust z-score
exceeds ``zeta``, and combine the survivors with softmax weights over
``beta * score + gamma * flag``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ClassIndexSets,
    DegeneratePrototypeError,
    EmbeddingRecord,
    RobustStats,
    ValidationError,
    l2_normalize,
    robust_stats,
)
from .rsflag import CaptionCandidate

MODES = ("selective", "mean")


@dataclass(frozen=True)
class AggregationConfig:
    beta: float = 10.0
    gamma: float = 2.0
    zeta: float = 3.0
    epsilon: float = 1e-8
    # rescales every class's scores; off by default because the mean is used raw
    renormalize_visual_prototype: bool = False
    # "mean" skips pruning and weighting (plain average of all candidates)
    mode: str = "selective"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError("beta must be > 0")
        if not self.gamma >= 0:
            raise ValidationError("gamma must be >= 0")
        if not self.zeta > 0:
            raise ValidationError("zeta must be > 0")
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be > 0")
        if self.mode not in MODES:
            raise ValidationError(f"unknown aggregation mode {self.mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class ClassPrototype:
    class_index: int
    prototype: np.ndarray
    kept_indices: frozenset
    scores: np.ndarray
    weights: np.ndarray
    stats: RobustStats
    flags: Optional[np.ndarray] = None

    def baseline_weights(self, beta: float) -> np.ndarray:
        """Weights without the flag calibration term, for side-by-side reports."""
        return candidate_weights(self.scores, np.zeros(len(self.scores)), self.kept_indices, beta=beta, gamma=0.0)


def visual_prototype(features, class_index: Optional[int] = None) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        who = f" for class {class_index}" if class_index is not None else ""
        raise ValidationError(f"no image features{who}")
    return feats.mean(axis=0)


def score_candidates(v_hat, caption_embeddings) -> np.ndarray:
    v_hat = np.asarray(v_hat, dtype=np.float64)
    t = np.asarray(caption_embeddings, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != v_hat.shape[0]:
        raise ValidationError(f"dimension mismatch: prototype {v_hat.shape}, captions {t.shape}")
    return t @ v_hat


def prune(scores, cfg: AggregationConfig = AggregationConfig()) -> Tuple[frozenset, RobustStats]:
    stats = robust_stats(scores, cfg.epsilon)
    kept = frozenset(int(j) for j in np.flatnonzero(stats.zscores <= cfg.zeta))
    return kept, stats


def candidate_weights(scores, flags, kept, beta: float = 10.0, gamma: float = 2.0) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(flags, dtype=np.float64)
    if s.shape != f.shape:
        raise ValidationError(f"scores and flags differ in length: {s.shape} vs {f.shape}")
    idx = np.array(sorted(kept), dtype=int)
    if idx.size == 0:
        raise ValidationError("cannot weight an empty kept set")
    if idx[0] < 0 or idx[-1] >= s.size:
        raise ValidationError("kept index out of range")
    logits = beta * s[idx] + gamma * f[idx]
    e = np.exp(logits - logits.max())
    w = np.zeros_like(s)
    w[idx] = e / e.sum()
    return w


def _candidate_arrays(candidates: Sequence[CaptionCandidate]):
    if not candidates:
        raise ValidationError("no caption candidates")
    missing = [c.caption_index for c in candidates if c.embedding is None or c.rs_flag is None]
    if missing:
        raise ValidationError(f"candidates without embedding or flag: {missing}")
    emb = np.stack([np.asarray(c.embedding, dtype=np.float64) for c in candidates])
    flags = np.array([c.rs_flag for c in candidates], dtype=np.float64)
    return emb, flags


def aggregate_class(
    features,
    candidates: Sequence[CaptionCandidate],
    cfg: AggregationConfig = AggregationConfig(),
    class_index: Optional[int] = None,
) -> ClassPrototype:
    if class_index is None and candidates:
        class_index = candidates[0].class_index
    emb, flags = _candidate_arrays(candidates)
    v_hat = visual_prototype(features, class_index)
    if cfg.renormalize_visual_prototype:
        v_hat = l2_normalize(v_hat)
    scores = score_candidates(v_hat, emb)
    if cfg.mode == "mean":
        stats = robust_stats(scores, cfg.epsilon)
        kept = frozenset(range(len(scores)))
        weights = np.full(len(scores), 1.0 / len(scores))
    else:
        kept, stats = prune(scores, cfg)
        weights = candidate_weights(scores, flags, kept, cfg.beta, cfg.gamma)
    combined = weights @ emb
    norm = np.linalg.norm(combined)
    if not norm > 1e-12:
        raise DegeneratePrototypeError(f"class {class_index}: weighted caption sum is the zero vector")
    scores.setflags(write=False)
    weights.setflags(write=False)
    return ClassPrototype(
        class_index=int(class_index) if class_index is not None else -1,
        prototype=combined / norm,
        kept_indices=kept,
        scores=scores,
        weights=weights,
        stats=stats,
        flags=flags,
    )


def build_all_prototypes(
    dataset: Iterable[EmbeddingRecord],
    corpus: Iterable[CaptionCandidate],
    cfg: AggregationConfig = AggregationConfig(),
    restrict_to: Optional[ClassIndexSets] = None,
) -> Dict[int, ClassPrototype]:
    """One prototype per class; with `restrict_to`, base classes only."""
    feats: Dict[int, List[np.ndarray]] = {}
    for rec in dataset:
        if rec.label is not None:
            feats.setdefault(int(rec.label), []).append(rec.vec)
    caps: Dict[int, List[CaptionCandidate]] = {}
    for c in corpus:
        caps.setdefault(int(c.class_index), []).append(c)

    if restrict_to is not None:
        classes = sorted(restrict_to.base)
    else:
        classes = sorted(set(feats) | set(caps))
    missing = [k for k in classes if k not in feats or k not in caps]
    if missing:
        raise ValidationError(f"missing image features or captions for classes {missing}")

    out = {}
    for k in classes:
        cands = sorted(caps[k], key=lambda c: c.caption_index)
        out[k] = aggregate_class(np.stack(feats[k]), cands, cfg, class_index=k)
    return out


def template_prototypes(template_embeddings: Mapping[int, np.ndarray], classes: Iterable[int]) -> Dict[int, ClassPrototype]:
    """Prototypes from one hand-written template embedding per class."""
    out = {}
    for k in classes:
        if k not in template_embeddings:
            raise ValidationError(f"no template embedding for class {k}")
        vec = l2_normalize(template_embeddings[k])
        one = np.ones(1)
        out[k] = ClassPrototype(
            class_index=int(k),
            prototype=vec,
            kept_indices=frozenset({0}),
            scores=one,
            weights=one,
            stats=robust_stats(one),
            flags=None,
        )
    return out


def prototype_matrix(prototypes: Mapping[int, ClassPrototype], classes: Sequence[int]) -> np.ndarray:
    missing = [k for k in classes if k not in prototypes]
    if missing:
        raise ValidationError(f"no teacher prototype for classes {missing}")
    return np.stack([prototypes[k].prototype for k in classes])
