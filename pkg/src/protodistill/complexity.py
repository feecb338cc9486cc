"""Closed-form prompt budget: parameter count and relative FLOPs overheads."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from .core import ValidationError


@dataclass(frozen=True)
class PromptBudget:
    d_v: int
    d_t: int
    l_v: int
    l_t: int
    p_v: int
    p_t: int
    n_v: int
    n_t: int
    backbone_params: int = 0
    include_class_token: bool = False

    def __post_init__(self):
        for name in ("d_v", "d_t", "l_v", "l_t", "n_v", "n_t"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        for name in ("p_v", "p_t", "backbone_params"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    @classmethod
    def vit_b32(cls, backbone_params: int = 87_849_216, include_class_token: bool = False) -> "PromptBudget":
        """ViT-B/32 student: 768-wide vision (49 patches, 8 prompts), 512-wide text (77 tokens, 4 prompts), 12 layers each.

        The backbone size is a caller-supplied denominator, not a measured value.
        """
        return cls(d_v=768, d_t=512, l_v=12, l_t=12, p_v=8, p_t=4, n_v=49, n_t=77,
                   backbone_params=backbone_params, include_class_token=include_class_token)


def prompt_param_count(b: PromptBudget) -> int:
    return b.l_v * b.p_v * b.d_v + b.l_t * b.p_t * b.d_t


def attention_overhead(n: int, p: int, exact: bool = False):
    """((n+p)^2 - n^2) / n^2 = 2p/n + (p/n)^2."""
    if n <= 0 or p < 0:
        raise ValidationError("need n > 0 and p >= 0")
    x = Fraction(p, n)
    r = 2 * x + x * x
    return r if exact else float(r)


def mlp_overhead(n: int, p: int, exact: bool = False):
    if n <= 0 or p < 0:
        raise ValidationError("need n > 0 and p >= 0")
    r = Fraction(p, n)
    return r if exact else float(r)


def budget_report(b: PromptBudget) -> dict:
    if b.backbone_params <= 0:
        raise ValidationError("backbone_params must be supplied (> 0)")
    extra = 1 if b.include_class_token else 0
    n_v, n_t = b.n_v + extra, b.n_t + extra
    params = prompt_param_count(b)
    fraction = params / b.backbone_params
    return {
        "budget": asdict(b),
        "prompt_params": params,
        "param_fraction": fraction,
        "below_one_percent": fraction < 0.01,
        "vision": {"attention_overhead": attention_overhead(n_v, b.p_v), "mlp_overhead": mlp_overhead(n_v, b.p_v)},
        "text": {"attention_overhead": attention_overhead(n_t, b.p_t), "mlp_overhead": mlp_overhead(n_t, b.p_t)},
    }
