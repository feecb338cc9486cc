"""Distillation objective: task cross-entropy plus image, text and logit alignment.

Every loss has a companion ``*_grad`` returning the analytic gradient with
respect to the student-side inputs; these feed the manual backward pass in
:mod:`protodistill.student`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import AbstractSet, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import ValidationError, log_softmax, softmax
from .prototype import ClassPrototype

SCHEDULES = ("linear", "step")


@dataclass(frozen=True)
class DistillConfig:
    lambda_img: float = 0.5
    lambda_text: float = 0.5
    lambda_logit: float = 1.0
    tau: float = 2.0
    tau_s: float = 1.0  # initial student logit scale (learned as log tau_s)
    tau_t: float = 1.0
    warmup_fraction: float = 0.3
    # "linear": ramp 0 -> lambda_logit over the warm-up window
    # "step": lambda_logit switches on at the end of the window (two-stage)
    schedule: str = "linear"

    def __post_init__(self):
        for name in ("tau", "tau_s", "tau_t"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        for name in ("lambda_img", "lambda_text", "lambda_logit"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValidationError("warmup_fraction must lie in [0, 1]")
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")


@dataclass(frozen=True)
class LogitMatrix:
    values: np.ndarray
    scale_applied: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"logits must be a matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("logits contain non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    img: float
    text: float
    logit: float
    total: float
    effective_lambda_logit: float

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "img": self.img,
            "text": self.text,
            "logit": self.logit,
            "total": self.total,
            "effective_lambda_logit": self.effective_lambda_logit,
        }


LogitsLike = Union[LogitMatrix, np.ndarray]


def _values(x: LogitsLike) -> np.ndarray:
    return x.values if isinstance(x, LogitMatrix) else np.asarray(x, dtype=np.float64)


def compute_logits(image_feats, text_protos, scale: float = 1.0) -> LogitMatrix:
    v = np.atleast_2d(np.asarray(image_feats, dtype=np.float64))
    t = np.atleast_2d(np.asarray(text_protos, dtype=np.float64))
    if v.shape[1] != t.shape[1]:
        raise ValidationError(f"dimension mismatch: images {v.shape[1]}, texts {t.shape[1]}")
    return LogitMatrix(scale * (v @ t.T), float(scale))


# -- image alignment ---------------------------------------------------------

def _check_pairs(student, teacher):
    s = np.atleast_2d(np.asarray(student, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    if s.shape != t.shape:
        raise ValidationError(f"student/teacher feature shapes differ: {s.shape} vs {t.shape}")
    if s.shape[0] == 0:
        raise ValidationError("empty batch")
    return s, t


def loss_img(student_feats, teacher_feats) -> float:
    s, t = _check_pairs(student_feats, teacher_feats)
    return float(np.mean(1.0 - np.sum(s * t, axis=1)))


def loss_img_grad(student_feats, teacher_feats) -> np.ndarray:
    s, t = _check_pairs(student_feats, teacher_feats)
    return -t / s.shape[0]


# -- text alignment ----------------------------------------------------------

def _text_pairs(student_text, teacher_protos: Mapping[int, ClassPrototype], class_set):
    classes = sorted(int(k) for k in class_set)
    if not classes:
        raise ValidationError("class_set is empty")
    missing = [k for k in classes if k not in teacher_protos]
    if missing:
        raise ValidationError(f"no teacher prototype for classes {missing}")
    s = np.stack([np.asarray(student_text[k], dtype=np.float64) for k in classes])
    t = np.stack([teacher_protos[k].prototype for k in classes])
    return classes, s, t


def loss_text(student_text, teacher_protos: Mapping[int, ClassPrototype], class_set: Iterable[int]) -> float:
    """Mean cosine distance between student class embeddings and teacher prototypes.

    `student_text` is indexable by class id (a mapping or a C x D array).
    Averages over exactly the classes in `class_set`.
    """
    _, s, t = _text_pairs(student_text, teacher_protos, class_set)
    return float(np.mean(1.0 - np.sum(s * t, axis=1)))


def loss_text_grad(student_text, teacher_protos, class_set) -> dict:
    classes, _, t = _text_pairs(student_text, teacher_protos, class_set)
    return {k: -t[i] / len(classes) for i, k in enumerate(classes)}


# -- logit distillation ------------------------------------------------------

def _base_columns(base: AbstractSet[int], n_cols: int) -> np.ndarray:
    cols = np.array(sorted(int(k) for k in base), dtype=int)
    if cols.size == 0:
        raise ValidationError("base class set is empty")
    if cols[0] < 0 or cols[-1] >= n_cols:
        raise ValidationError(f"base class index out of range for {n_cols} columns")
    return cols


def masked_distribution(logits: LogitsLike, base: AbstractSet[int], tau: float) -> np.ndarray:
    """Temperature softmax over the `base` columns; exactly 0 elsewhere."""
    if not tau > 0:
        raise ValidationError("tau must be > 0")
    s = _values(logits)
    cols = _base_columns(base, s.shape[1])
    out = np.zeros_like(s)
    out[:, cols] = softmax(s[:, cols] / tau, axis=1)
    return out


def _kl_terms(teacher: LogitsLike, student: LogitsLike, base, tau):
    t = _values(teacher)
    s = _values(student)
    if t.shape != s.shape:
        raise ValidationError(f"teacher/student logit shapes differ: {t.shape} vs {s.shape}")
    if not tau > 0:
        raise ValidationError("tau must be > 0")
    cols = _base_columns(base, s.shape[1])
    log_q = log_softmax(t[:, cols] / tau, axis=1)
    log_p = log_softmax(s[:, cols] / tau, axis=1)
    return cols, np.exp(log_q), log_q, np.exp(log_p), log_p


def loss_logit(teacher: LogitsLike, student: LogitsLike, base: AbstractSet[int], tau: float = 2.0) -> float:
    """Batch mean of tau^2 * KL(teacher || student) over the base classes."""
    _, q, log_q, _, log_p = _kl_terms(teacher, student, base, tau)
    # q == 0 terms vanish by continuity
    kl = np.sum(np.where(q > 0, q * (log_q - log_p), 0.0), axis=1)
    return float(tau * tau * np.mean(np.maximum(kl, 0.0)))


def loss_logit_grad(teacher: LogitsLike, student: LogitsLike, base: AbstractSet[int], tau: float = 2.0) -> np.ndarray:
    """Gradient with respect to the student logit values."""
    cols, q, _, p, _ = _kl_terms(teacher, student, base, tau)
    s = _values(student)
    g = np.zeros_like(s)
    g[:, cols] = tau * (p - q) / s.shape[0]
    return g


# -- task loss ---------------------------------------------------------------

def _check_labels(s: np.ndarray, labels) -> np.ndarray:
    y = np.asarray(labels, dtype=int).ravel()
    if y.shape[0] != s.shape[0]:
        raise ValidationError(f"{y.shape[0]} labels for {s.shape[0]} logit rows")
    if y.size and (y.min() < 0 or y.max() >= s.shape[1]):
        raise ValidationError(f"label out of range for {s.shape[1]} classes")
    return y


def loss_task(student: LogitsLike, labels) -> float:
    s = _values(student)
    y = _check_labels(s, labels)
    lsm = log_softmax(s, axis=1)
    return float(-np.mean(lsm[np.arange(len(y)), y]))


def loss_task_grad(student: LogitsLike, labels) -> np.ndarray:
    s = _values(student)
    y = _check_labels(s, labels)
    g = softmax(s, axis=1)
    g[np.arange(len(y)), y] -= 1.0
    return g / s.shape[0]


# -- schedule ----------------------------------------------------------------

def warmup_end(total_steps: int, warmup_fraction: float) -> int:
    # exact rational product so that e.g. 0.3 * 10 ends at 3, not 4
    return math.ceil(Fraction(str(warmup_fraction)) * total_steps)


def effective_lambda_logit(step: int, total_steps: int, cfg: DistillConfig) -> float:
    if total_steps <= 0:
        raise ValidationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    end = warmup_end(total_steps, cfg.warmup_fraction)
    if step >= end:
        return cfg.lambda_logit
    if cfg.schedule == "step":
        return 0.0
    return cfg.lambda_logit * step / end


# -- combined objective ------------------------------------------------------

@dataclass
class DistillBatch:
    """Inputs for one evaluation of the objective.

    `labels` are global class ids; `classes` gives the global id of every
    logit column. Logit and text alignment run over the columns that have a
    teacher prototype.
    """

    labels: np.ndarray
    teacher_image_feats: np.ndarray
    classes: Sequence[int]

    def label_columns(self) -> np.ndarray:
        col = {int(k): i for i, k in enumerate(self.classes)}
        try:
            return np.array([col[int(y)] for y in self.labels], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"label {exc.args[0]} is not among the student's classes") from None


@dataclass
class StudentOutputs:
    image_feats: np.ndarray  # B x D
    text_feats: np.ndarray  # len(classes) x D
    log_tau_s: float = 0.0

    @property
    def tau_s(self) -> float:
        return math.exp(self.log_tau_s)


@dataclass
class LossGradients:
    image_feats: np.ndarray
    text_feats: np.ndarray
    logits: np.ndarray
    log_tau_s: float


def teacher_logits(batch: DistillBatch, prototypes: Mapping[int, ClassPrototype], tau_t: float):
    """Teacher logit matrix over `batch.classes` and the prototype-bearing column set."""
    v = np.asarray(batch.teacher_image_feats, dtype=np.float64)
    base_cols = {i for i, k in enumerate(batch.classes) if int(k) in prototypes}
    t = np.zeros((len(batch.classes), v.shape[1]))
    for i in base_cols:
        t[i] = prototypes[int(batch.classes[i])].prototype
    return compute_logits(v, t, tau_t), base_cols


def total_loss_and_grads(
    batch: DistillBatch,
    outputs: StudentOutputs,
    prototypes: Mapping[int, ClassPrototype],
    cfg: DistillConfig,
    step: int,
    total_steps: int,
    need_grads: bool = True,
):
    lam_logit = effective_lambda_logit(step, total_steps, cfg)
    y = batch.label_columns()
    v = np.asarray(outputs.image_feats, dtype=np.float64)
    t = np.asarray(outputs.text_feats, dtype=np.float64)
    tau_s = outputs.tau_s
    cos = v @ t.T
    student = LogitMatrix(tau_s * cos, tau_s)

    task = loss_task(student, y)
    img = loss_img(v, batch.teacher_image_feats)
    teacher, base_cols = teacher_logits(batch, prototypes, cfg.tau_t)
    text_map = {int(k): t[i] for i, k in enumerate(batch.classes)}
    proto_classes = [int(batch.classes[i]) for i in sorted(base_cols)]
    if base_cols:
        text = loss_text(text_map, prototypes, proto_classes)
        logit = loss_logit(teacher, student, base_cols, cfg.tau)
    else:
        text = logit = 0.0
    total = task + cfg.lambda_img * img + cfg.lambda_text * text + lam_logit * logit
    breakdown = LossBreakdown(task, img, text, logit, total, lam_logit)
    if not need_grads:
        return breakdown, None

    d_logits = loss_task_grad(student, y)
    if base_cols and lam_logit:
        d_logits = d_logits + lam_logit * loss_logit_grad(teacher, student, base_cols, cfg.tau)
    d_cos = tau_s * d_logits
    d_log_tau = float(np.sum(d_logits * cos) * tau_s)
    d_v = d_cos @ t + cfg.lambda_img * loss_img_grad(v, batch.teacher_image_feats)
    d_t = d_cos.T @ v
    if base_cols and cfg.lambda_text:
        col = {int(k): i for i, k in enumerate(batch.classes)}
        for k, g in loss_text_grad(text_map, prototypes, proto_classes).items():
            d_t[col[k]] += cfg.lambda_text * g
    return breakdown, LossGradients(d_v, d_t, d_logits, d_log_tau)


def total_loss(batch, outputs, prototypes, cfg, step, total_steps) -> LossBreakdown:
    return total_loss_and_grads(batch, outputs, prototypes, cfg, step, total_steps, need_grads=False)[0]
