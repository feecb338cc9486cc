"""Desk-scale prompt-tuned student.

A frozen toy attention encoder (single head, residual attention + tanh
feed-forward, no normalisation layers) whose token sequence is extended by
learnable prompt tokens at every prompted layer. Prompt outputs are dropped
after each layer, so each prompted layer receives fresh prompts. Two
encoders form the student: one for images, one for class-name token
sequences. Only the prompts and the log logit scale are trained.

Gradients are derived by hand; ``tests/test_student.py`` checks them against
central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .core import DivergenceError, NumericalError, ValidationError
from .distill import (
    DistillBatch,
    DistillConfig,
    LossBreakdown,
    StudentOutputs,
    total_loss,
    total_loss_and_grads,
)
from .prototype import ClassPrototype

PROMPT_INIT_SCALE = 0.02


@dataclass(frozen=True)
class ToyEncoderConfig:
    dim: int = 32
    seq_len: int = 4
    prompt_tokens: int = 2
    layers: int = 2
    seed: int = 0
    prompt_layers: Optional[int] = None  # None = every layer (deep prompts); 1 = shallow
    ffn_dim: Optional[int] = None  # None = dim

    def __post_init__(self):
        for name in ("dim", "seq_len", "layers"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.prompt_tokens < 0:
            raise ValidationError("prompt_tokens must be >= 0")
        if self.prompt_layers is not None and not 0 <= self.prompt_layers <= self.layers:
            raise ValidationError("prompt_layers must lie in [0, layers]")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ValidationError("ffn_dim must be positive")

    @property
    def n_prompted(self) -> int:
        if self.prompt_tokens == 0:
            return 0
        return self.layers if self.prompt_layers is None else self.prompt_layers

    @property
    def hidden(self) -> int:
        return self.ffn_dim or self.dim


class LayerWeights(NamedTuple):
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class ToyStudent:
    """One frozen encoder plus its per-layer prompt tokens (n_prompted x P x D)."""

    config: ToyEncoderConfig
    frozen: tuple
    prompts: np.ndarray

    def with_prompts(self, prompts: np.ndarray) -> "ToyStudent":
        prompts = np.array(prompts, dtype=np.float64)
        if prompts.shape != self.prompts.shape:
            raise ValidationError(f"prompt shape {prompts.shape} != {self.prompts.shape}")
        return replace(self, prompts=prompts)


def init_student(cfg: ToyEncoderConfig) -> ToyStudent:
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.dim, cfg.hidden
    layers = []
    for _ in range(cfg.layers):
        ws = [rng.standard_normal(shape) / math.sqrt(shape[0])
              for shape in ((d, d), (d, d), (d, d), (d, d), (d, f), (f, d))]
        for w in ws:
            w.setflags(write=False)
        layers.append(LayerWeights(*ws))
    prompts = PROMPT_INIT_SCALE * rng.standard_normal((cfg.n_prompted, cfg.prompt_tokens, d))
    return ToyStudent(cfg, tuple(layers), prompts)


class MultiplyAdds(NamedTuple):
    attention: int
    mlp: int


def _forward(student: ToyStudent, tokens, keep_cache: bool = False, counter: Optional[Dict[str, int]] = None):
    cfg = student.config
    x = np.asarray(tokens, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.dim):
        raise ValidationError(f"expected tokens of shape (..., {cfg.seq_len}, {cfg.dim}), got {np.shape(tokens)}")
    b, d = x.shape[0], cfg.dim
    scale = 1.0 / math.sqrt(d)
    caches = []
    h = x
    for li, w in enumerate(student.frozen):
        p = cfg.prompt_tokens if li < cfg.n_prompted else 0
        if p:
            H = np.concatenate([np.broadcast_to(student.prompts[li], (b, p, d)), h], axis=1)
        else:
            H = h
        q, k, v = H @ w.wq, H @ w.wk, H @ w.wv
        s = (q @ k.transpose(0, 2, 1)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        z = a @ v
        h1 = H + z @ w.wo
        g = np.tanh(h1 @ w.w1)
        h2 = h1 + g @ w.w2
        if counter is not None:
            # read off the operand shapes actually multiplied above
            counter["attention"] += q.shape[0] * q.shape[1] * k.shape[1] * q.shape[2]
            counter["attention"] += a.shape[0] * a.shape[1] * a.shape[2] * v.shape[2]
            counter["mlp"] += h1.shape[0] * h1.shape[1] * w.w1.shape[0] * w.w1.shape[1]
            counter["mlp"] += g.shape[0] * g.shape[1] * w.w2.shape[0] * w.w2.shape[1]
        if keep_cache:
            caches.append((p, H, q, k, v, a, g))
        h = h2[:, p:]
    pooled = h.mean(axis=1)
    norm = np.linalg.norm(pooled, axis=1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise NumericalError("encoder output is zero or non-finite")
    out = pooled / norm
    if single:
        out = out[0]
    if keep_cache:
        return out, (caches, out if not single else out[None], norm, single)
    return out


def encode(student: ToyStudent, tokens) -> np.ndarray:
    """Unit-norm embedding of a token sequence (N x D) or a batch (B x N x D)."""
    return _forward(student, tokens)


def encode_with_cache(student: ToyStudent, tokens):
    return _forward(student, tokens, keep_cache=True)


def encoder_backward(student: ToyStudent, cache, d_out) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the prompts, given d loss / d output."""
    cfg = student.config
    caches, y, norm, single = cache
    dy = np.asarray(d_out, dtype=np.float64)
    if single:
        dy = dy[None]
    d = cfg.dim
    scale = 1.0 / math.sqrt(d)
    # through the l2 normalisation and the mean pool
    d_pooled = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norm
    dh = np.broadcast_to(d_pooled[:, None, :] / cfg.seq_len, (dy.shape[0], cfg.seq_len, d))
    d_prompts = np.zeros_like(student.prompts)
    for li in range(len(student.frozen) - 1, -1, -1):
        w = student.frozen[li]
        p, H, q, k, v, a, g = caches[li]
        dh2 = np.zeros_like(H)
        dh2[:, p:] = dh
        du = (dh2 @ w.w2.T) * (1.0 - g * g)
        dh1 = dh2 + du @ w.w1.T
        dz = dh1 @ w.wo.T
        da = dz @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dz
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dH = dh1 + dq @ w.wq.T + dk @ w.wk.T + dv @ w.wv.T
        if p:
            d_prompts[li] = dH[:, :p].sum(axis=0)
        dh = dH[:, p:]
    return d_prompts


def count_multiply_adds(cfg: ToyEncoderConfig) -> MultiplyAdds:
    """Multiply-adds of one forward pass, counted while running it.

    attention = score matrix plus attention-weighted value sum, (N+P)^2 * D
    each per layer; mlp = the two feed-forward maps. The Q/K/V/O projections
    are not included.
    """
    counter = {"attention": 0, "mlp": 0}
    student = init_student(cfg)
    _forward(student, np.ones((cfg.seq_len, cfg.dim)), counter=counter)
    return MultiplyAdds(counter["attention"], counter["mlp"])


# -- two-branch student --------------------------------------------------------

@dataclass(frozen=True)
class StudentModel:
    vision: ToyStudent
    text: ToyStudent
    log_tau_s: float = 0.0

    @property
    def tau_s(self) -> float:
        return math.exp(self.log_tau_s)


def init_model(vision_cfg: ToyEncoderConfig, text_cfg: ToyEncoderConfig, tau_s: float = 1.0) -> StudentModel:
    if vision_cfg.dim != text_cfg.dim:
        raise ValidationError("vision and text branches must share the embedding dimension")
    return StudentModel(init_student(vision_cfg), init_student(text_cfg), math.log(tau_s))


def student_text_embeddings(text_student: ToyStudent, class_token_inputs) -> np.ndarray:
    return encode(text_student, np.asarray(class_token_inputs, dtype=np.float64))


@dataclass
class TrainBatch:
    image_tokens: np.ndarray  # B x N x D
    labels: np.ndarray  # global class ids
    teacher_feats: np.ndarray  # B x D
    class_tokens: np.ndarray  # C_visible x N x D
    classes: Sequence[int]


@dataclass
class Gradients:
    vision_prompts: np.ndarray
    text_prompts: np.ndarray
    log_tau_s: float

    def check_finite(self):
        for name in ("vision_prompts", "text_prompts"):
            arr = getattr(self, name)
            bad = np.argwhere(~np.isfinite(arr))
            if bad.size:
                raise NumericalError(f"non-finite gradient at {name}{tuple(int(i) for i in bad[0])}")
        if not math.isfinite(self.log_tau_s):
            raise NumericalError("non-finite gradient at log_tau_s")


def loss_and_gradients(
    model: StudentModel,
    batch: TrainBatch,
    prototypes: Mapping[int, ClassPrototype],
    cfg: DistillConfig,
    step: int,
    total_steps: int,
):
    v, v_cache = encode_with_cache(model.vision, batch.image_tokens)
    t, t_cache = encode_with_cache(model.text, batch.class_tokens)
    dbatch = DistillBatch(batch.labels, batch.teacher_feats, batch.classes)
    outputs = StudentOutputs(v, t, model.log_tau_s)
    breakdown, g = total_loss_and_grads(dbatch, outputs, prototypes, cfg, step, total_steps)
    grads = Gradients(
        encoder_backward(model.vision, v_cache, g.image_feats),
        encoder_backward(model.text, t_cache, g.text_feats),
        g.log_tau_s,
    )
    grads.check_finite()
    return breakdown, grads


def backward(model, batch, prototypes, cfg, step, total_steps) -> Gradients:
    return loss_and_gradients(model, batch, prototypes, cfg, step, total_steps)[1]


def objective(model, batch, prototypes, cfg, step, total_steps) -> float:
    v = encode(model.vision, batch.image_tokens)
    t = encode(model.text, batch.class_tokens)
    dbatch = DistillBatch(batch.labels, batch.teacher_feats, batch.classes)
    return total_loss(dbatch, StudentOutputs(v, t, model.log_tau_s), prototypes, cfg, step, total_steps).total


# -- training ------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    learning_rate: float
    model: StudentModel
    loss_history: List[LossBreakdown] = field(default_factory=list)

    @property
    def params_snapshot(self) -> dict:
        return {
            "vision_prompts": self.model.vision.prompts.copy(),
            "text_prompts": self.model.text.prompts.copy(),
            "log_tau_s": self.model.log_tau_s,
        }


@dataclass
class TrainingSet:
    image_tokens: np.ndarray
    labels: np.ndarray
    teacher_feats: np.ndarray
    class_tokens: np.ndarray  # rows follow `classes`
    classes: Sequence[int]

    def __post_init__(self):
        n = len(self.labels)
        if self.image_tokens.shape[0] != n or self.teacher_feats.shape[0] != n:
            raise ValidationError("image tokens, labels and teacher features differ in length")
        if self.class_tokens.shape[0] != len(self.classes):
            raise ValidationError("one class token sequence per class is required")

    def batch(self, idx) -> TrainBatch:
        return TrainBatch(self.image_tokens[idx], self.labels[idx], self.teacher_feats[idx], self.class_tokens, self.classes)


def train(
    model: StudentModel,
    data: TrainingSet,
    prototypes: Mapping[int, ClassPrototype],
    cfg: DistillConfig,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 32,
    weight_decay: float = 0.0,
    train_tau_s: bool = True,
) -> TrainState:
    """Plain gradient descent on prompts and log tau_s with a seeded batch order."""
    n = len(data.labels)
    if n == 0:
        raise ValidationError("empty training set")
    if epochs < 0 or batch_size < 1 or not lr >= 0 or not weight_decay >= 0:
        raise ValidationError("need epochs >= 0, batch_size >= 1, lr >= 0 and weight_decay >= 0")
    per_epoch = math.ceil(n / batch_size)
    total_steps = max(epochs * per_epoch, 1)
    rng = np.random.default_rng(seed)
    history: List[LossBreakdown] = []
    vp, tp, lt = model.vision.prompts.copy(), model.text.prompts.copy(), model.log_tau_s
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            cur = StudentModel(model.vision.with_prompts(vp), model.text.with_prompts(tp), lt)
            if not math.isfinite(lt) or lt > 50.0:
                raise DivergenceError(f"logit scale exploded at step {step} (log tau_s = {lt})", step)
            try:
                breakdown, g = loss_and_gradients(cur, data.batch(order[start:start + batch_size]),
                                                  prototypes, cfg, step, total_steps)
            except NumericalError as exc:
                raise DivergenceError(f"step {step}: {exc}", step) from exc
            if not math.isfinite(breakdown.total):
                raise DivergenceError(f"loss became non-finite at step {step}", step)
            history.append(breakdown)
            vp = vp - lr * (g.vision_prompts + weight_decay * vp)
            tp = tp - lr * (g.text_prompts + weight_decay * tp)
            if train_tau_s:
                lt = lt - lr * g.log_tau_s
            step += 1
    final = StudentModel(model.vision.with_prompts(vp), model.text.with_prompts(tp), lt)
    return TrainState(step=step, learning_rate=lr, model=final, loss_history=history)
