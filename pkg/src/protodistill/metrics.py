"""Evaluation protocols: top-1 accuracy, base/novel/HM, and cross-modal recall."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence

import numpy as np

from .core import ClassIndexSets, ValidationError


@dataclass(frozen=True)
class ClassificationReport:
    top1: float
    per_class: Dict[int, float]
    n_correct: int
    n_total: int

    def as_dict(self) -> dict:
        return {
            "top1": self.top1,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "n_correct": self.n_correct,
            "n_total": self.n_total,
        }


@dataclass(frozen=True)
class BaseNovelReport:
    base: float
    novel: float
    hm: float

    def as_dict(self) -> dict:
        return {"base": self.base, "novel": self.novel, "hm": self.hm}


@dataclass(frozen=True)
class RetrievalReport:
    i2t: tuple
    t2i: tuple
    mr: float

    def as_dict(self) -> dict:
        names = ("r1", "r5", "r10")
        return {
            "i2t": dict(zip(names, self.i2t)),
            "t2i": dict(zip(names, self.t2i)),
            "mr": self.mr,
        }


def predict(image_feats, class_embeddings) -> np.ndarray:
    """Argmax cosine class per image; ties go to the lowest class index."""
    v = np.atleast_2d(np.asarray(image_feats, dtype=np.float64))
    t = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    if v.shape[0] == 0 or t.shape[0] == 0:
        raise ValidationError("classification needs at least one image and one class")
    if v.shape[1] != t.shape[1]:
        raise ValidationError(f"dimension mismatch: images {v.shape[1]}, classes {t.shape[1]}")
    return np.argmax(v @ t.T, axis=1)  # argmax returns the first maximum


def classify(image_feats, class_embeddings, labels, class_ids: Sequence[int] | None = None) -> ClassificationReport:
    """Top-1 accuracy of nearest-class-embedding prediction.

    `class_ids` maps embedding rows to class labels (default: row index).
    """
    pred_rows = predict(image_feats, class_embeddings)
    ids = np.arange(len(class_embeddings)) if class_ids is None else np.asarray(class_ids)
    pred = ids[pred_rows]
    y = np.asarray(labels).ravel()
    if y.shape[0] != pred.shape[0]:
        raise ValidationError(f"{y.shape[0]} labels for {pred.shape[0]} images")
    correct = pred == y
    per_class = {int(k): 100.0 * float(correct[y == k].mean()) for k in np.unique(y)}
    n_correct = int(correct.sum())
    return ClassificationReport(100.0 * n_correct / len(y), per_class, n_correct, len(y))


def harmonic_mean(base: float, novel: float) -> float:
    if base < 0 or novel < 0:
        raise ValidationError("accuracies must be non-negative")
    if base + novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


def base_novel_eval(image_feats, class_embeddings: Mapping[int, np.ndarray], labels, sets: ClassIndexSets) -> BaseNovelReport:
    """Base accuracy among base classes only, novel accuracy among novel classes only."""
    v = np.atleast_2d(np.asarray(image_feats, dtype=np.float64))
    y = np.asarray(labels).ravel()
    accs = []
    for side, classes in (("base", sets.base), ("novel", sets.novel)):
        ids = sorted(classes)
        mask = np.isin(y, ids)
        if not ids or not mask.any():
            raise ValidationError(f"no {side} samples or classes to evaluate")
        emb = np.stack([np.asarray(class_embeddings[k], dtype=np.float64) for k in ids])
        accs.append(classify(v[mask], emb, y[mask], ids).top1)
    return BaseNovelReport(accs[0], accs[1], harmonic_mean(*accs))


def ranked_gallery(queries, gallery) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if g.shape[0] == 0:
        raise ValidationError("empty gallery")
    if q.shape[1] != g.shape[1]:
        raise ValidationError(f"dimension mismatch: queries {q.shape[1]}, gallery {g.shape[1]}")
    # stable sort on negated similarity keeps lower gallery index first on ties
    return np.argsort(-(q @ g.T), axis=1, kind="stable")


def retrieval_eval(queries, gallery, relevance: Mapping[int, set], ks=(1, 5, 10)) -> Dict[int, float]:
    """Percent of queries with a relevant item among their top-K gallery neighbours.

    `relevance` maps a query row to the set of relevant gallery rows.
    """
    order = ranked_gallery(queries, gallery)
    n = order.shape[0]
    rank_of_first = np.empty(n, dtype=int)
    for i in range(n):
        rel = relevance.get(i)
        if not rel:
            raise ValidationError(f"query {i} has no relevant gallery items")
        hit = np.isin(order[i], list(rel))
        rank_of_first[i] = int(np.argmax(hit))
    return {int(k): 100.0 * float(np.mean(rank_of_first < k)) for k in ks}


def mean_recall(i2t: Sequence[float], t2i: Sequence[float]) -> float:
    vals = list(i2t) + list(t2i)
    if len(vals) != 6:
        raise ValidationError("expected three recalls per direction")
    if any(not 0.0 <= x <= 100.0 for x in vals):
        raise ValidationError("recall values must lie in [0, 100]")
    return sum(vals) / 6.0


def retrieval_report(image_feats, text_feats, image_to_texts: Mapping[int, set]) -> RetrievalReport:
    """Both retrieval directions from one image-to-text relevance map."""
    text_to_images: Dict[int, set] = {}
    for i, rel in image_to_texts.items():
        for j in rel:
            text_to_images.setdefault(int(j), set()).add(int(i))
    ks = (1, 5, 10)
    i2t = retrieval_eval(image_feats, text_feats, image_to_texts, ks)
    t2i = retrieval_eval(text_feats, image_feats, text_to_images, ks)
    i2t_t = tuple(i2t[k] for k in ks)
    t2i_t = tuple(t2i[k] for k in ks)
    return RetrievalReport(i2t_t, t2i_t, mean_recall(i2t_t, t2i_t))


class FrozenGallery:
    """Read-only gallery embeddings with a content digest.

    The array is locked against writes; `verify()` re-hashes and raises if the
    bytes changed since construction.
    """

    def __init__(self, vectors, ids: Sequence[str] | None = None):
        arr = np.array(vectors, dtype=np.float64)
        arr.setflags(write=False)
        self.vectors = arr
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(arr))]
        self.digest = self._hash()

    def _hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()

    def verify(self) -> str:
        current = self._hash()
        if current != self.digest:
            raise ValidationError("gallery embeddings changed after loading")
        return current

    def __len__(self):
        return len(self.vectors)
