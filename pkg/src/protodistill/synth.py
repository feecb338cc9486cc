"""Seeded synthetic benchmark standing in for real remote-sensing data.

Classes are unit directions in R^D. The teacher sees each image's content
vector directly; the student sees it as a token sequence offset by a shared
domain direction, and sees classes only through noisy "name" tokens biased
towards a generic template direction. Caption embeddings scatter around the
class centre with cosines drawn from a bounded band, so the robust z-scores
of inliers stay inside the pruning threshold; flag-0 captions tilt their
off-centre component towards a shared ground-level direction and a few planted
outliers point away from the class.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import ValidationError, l2_normalize

_SUBJECTS = ("harbor", "runway", "orchard", "quarry", "stadium", "farmland", "rail yard", "marsh",
             "parking lot", "solar farm", "river delta", "suburb", "forest", "desert", "bridge")
_POSITIVE_TEMPLATES = (
    "An aerial view of {a_name} with clearly visible layout and surrounding land parcels.",
    "Satellite imagery showing {a_name} and its regular geometric structures from above.",
    "Overhead scene of {a_name} with distinct textures and boundaries between regions.",
    "Nadir image of {a_name} where shapes and spatial arrangement are easy to see.",
    "Multispectral capture of {a_name} revealing vegetation and built surfaces nearby.",
)
_NEGATIVE_TEMPLATES = (
    "A street level photo of people walking past {a_name} on a sunny day.",
    "A close-up of the entrance gate at {a_name} with a painted sign.",
    "A massive structure next to {a_name} surrounded by a green field.",
    "Visitors take a selfie in front of the {name} during the afternoon.",
)


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 10
    n_base: int = 6
    train_per_class: int = 16
    test_per_class: int = 20
    dim: int = 32
    seq_len: int = 4
    spread: float = 0.6  # norm of per-image content noise
    token_noise: float = 0.3
    domain_offset: float = 0.8  # student-side shared image offset
    name_noise: float = 0.8  # class-specific corruption of the class-name tokens
    template_bias: float = 0.8  # shared generic direction in the class-name tokens
    novel_shift: float = 0.0
    captions_per_class: int = 30
    caption_cosine: float = 0.85  # centre of the inlier cosine band
    caption_spread: float = 0.1  # half-width of the band
    ground_bias: float = 0.6
    flag0_fraction: float = 0.3
    planted_outliers: int = 3
    retrieval_queries: int = 30
    captions_per_query: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or not 0 <= self.n_base <= self.n_classes:
            raise ValidationError("need n_classes >= 1 and 0 <= n_base <= n_classes")
        if self.dim < 2 or self.seq_len < 1:
            raise ValidationError("dim must be >= 2 and seq_len >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValidationError("per-class counts must be positive")
        for name in ("spread", "token_noise", "domain_offset", "name_noise", "template_bias",
                     "caption_spread", "ground_bias", "novel_shift"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not -1 < self.caption_cosine - self.caption_spread <= self.caption_cosine + self.caption_spread < 1:
            raise ValidationError("caption cosine band must lie inside (-1, 1)")
        if not 0 <= self.flag0_fraction <= 1:
            raise ValidationError("flag0_fraction must lie in [0, 1]")
        if not 0 <= self.planted_outliers < self.captions_per_class / 2:
            raise ValidationError("planted_outliers must be below half of captions_per_class")


@dataclass
class SynthData:
    spec: SynthSpec
    class_names: List[str]
    centers: np.ndarray
    # image records: id, label, split, teacher feature, student tokens
    image_ids: List[str]
    image_labels: np.ndarray
    image_splits: List[str]
    teacher_feats: np.ndarray
    image_tokens: np.ndarray
    class_tokens: np.ndarray  # C x N x D
    captions: Dict[int, List[str]]
    caption_embeddings: Dict[int, np.ndarray]
    intended_flags: Dict[int, np.ndarray]
    outlier_indices: Dict[int, List[int]]
    template_embeddings: np.ndarray
    # retrieval fixture: test-image queries against a frozen caption gallery
    retrieval_query_ids: List[str]
    gallery_ids: List[str]
    gallery: np.ndarray
    relevance: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def base(self) -> List[int]:
        return list(range(self.spec.n_base))

    @property
    def novel(self) -> List[int]:
        return list(range(self.spec.n_base, self.spec.n_classes))


def _noise(rng, shape, norm: float, dim: int):
    return rng.standard_normal(shape) * (norm / np.sqrt(dim))


def _orthogonal_unit(rng, basis, lean=None, bias: float = 0.0):
    """Random unit vector orthogonal to the orthonormal rows of `basis`."""
    u = rng.standard_normal(basis.shape[1])
    if lean is not None:
        u = l2_normalize(u) + bias * lean
    u = u - basis.T @ (basis @ u)
    return l2_normalize(u)


def _at_cosine(center, u, a):
    return a * center + np.sqrt(1.0 - a * a) * u


def _with_article(name: str) -> str:
    return ("an " if name[0] in "aeiou" else "a ") + name


def _class_name(k: int) -> str:
    base = _SUBJECTS[k % len(_SUBJECTS)]
    return base if k < len(_SUBJECTS) else f"{base} {k // len(_SUBJECTS) + 1}"


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    C, D, N = spec.n_classes, spec.dim, spec.seq_len
    centers = l2_normalize(rng.standard_normal((C, D)))
    generic, domain, ground, shift = l2_normalize(rng.standard_normal((4, D)))

    ids, labels, splits, content = [], [], [], []
    for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        for k in range(C):
            for i in range(count):
                u = centers[k] + _noise(rng, D, spec.spread, D)
                if k >= spec.n_base:
                    u = u + spec.novel_shift * shift
                ids.append(f"{split}-{k:03d}-{i:03d}")
                labels.append(k)
                splits.append(split)
                content.append(u)
    content = np.array(content)
    teacher = l2_normalize(content)
    tokens = (content[:, None, :] + spec.domain_offset * domain
              + _noise(rng, (len(content), N, D), spec.token_noise, D))

    name_vecs = centers + spec.template_bias * generic + _noise(rng, (C, D), spec.name_noise, D)
    class_tokens = name_vecs[:, None, :] + _noise(rng, (C, N, D), spec.token_noise, D)
    template = l2_normalize(name_vecs)

    names = [_class_name(k) for k in range(C)]
    n_flag0 = int(round(spec.flag0_fraction * spec.captions_per_class))
    captions, cap_emb, flags, outliers = {}, {}, {}, {}
    for k in range(C):
        texts, embs, fl = [], [], []
        c = centers[k]
        fill = {"name": names[k], "a_name": _with_article(names[k])}
        # off-centre caption directions avoid the train-split image mean too,
        # so an inlier's score is its band cosine times a per-class constant
        v_hat = teacher[(np.array(labels) == k) & (np.array(splits) == "train")].mean(axis=0)
        basis = np.stack([c, l2_normalize(v_hat - (v_hat @ c) * c)])
        # stratified band positions: one draw per equal-width stratum
        strata = (rng.permutation(spec.captions_per_class) + rng.uniform(size=spec.captions_per_class))
        band = spec.caption_cosine + spec.caption_spread * (2.0 * strata / spec.captions_per_class - 1.0)
        for j in range(spec.captions_per_class):
            a = band[j]
            if j < spec.planted_outliers:
                e = _at_cosine(c, _orthogonal_unit(rng, basis), -a)
                texts.append(_NEGATIVE_TEMPLATES[j % len(_NEGATIVE_TEMPLATES)].format(**fill))
                fl.append(0)
            elif j < spec.planted_outliers + n_flag0:
                e = _at_cosine(c, _orthogonal_unit(rng, basis, ground, spec.ground_bias), a)
                texts.append(_NEGATIVE_TEMPLATES[j % len(_NEGATIVE_TEMPLATES)].format(**fill))
                fl.append(0)
            else:
                e = _at_cosine(c, _orthogonal_unit(rng, basis), a)
                texts.append(_POSITIVE_TEMPLATES[j % len(_POSITIVE_TEMPLATES)].format(**fill))
                fl.append(1)
            embs.append(e)
        order = rng.permutation(spec.captions_per_class)
        captions[k] = [texts[j] for j in order]
        cap_emb[k] = l2_normalize(np.array(embs)[order])
        flags[k] = np.array(fl)[order]
        outliers[k] = sorted(int(np.flatnonzero(order == j)[0]) for j in range(spec.planted_outliers))

    test_idx = [i for i, s in enumerate(splits) if s == "test"]
    q_rows = sorted(rng.choice(test_idx, size=min(spec.retrieval_queries, len(test_idx)), replace=False).tolist())
    gallery_ids, gallery, relevance = [], [], {}
    for r in q_rows:
        rel = []
        for c in range(spec.captions_per_query):
            gid = f"cap-{ids[r]}-{c}"
            gallery_ids.append(gid)
            gallery.append(content[r] + _noise(rng, D, 0.5, D))
            rel.append(gid)
        relevance[ids[r]] = rel

    return SynthData(
        spec=spec,
        class_names=names,
        centers=centers,
        image_ids=ids,
        image_labels=np.array(labels),
        image_splits=splits,
        teacher_feats=teacher,
        image_tokens=tokens,
        class_tokens=class_tokens,
        captions=captions,
        caption_embeddings=cap_emb,
        intended_flags=flags,
        outlier_indices=outliers,
        template_embeddings=template,
        retrieval_query_ids=[ids[r] for r in q_rows],
        gallery_ids=gallery_ids,
        gallery=l2_normalize(np.array(gallery)),
        relevance=relevance,
    )
