"""Configuration and end-to-end stages: gen-synth, flag, aggregate, train, eval.

Stages read and write the formats in :mod:`protodistill.files`; a dataset
directory produced by :func:`gen_synth` has fixed file names (see ``LAYOUT``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import files
from .core import ClassIndexSets, EmbeddingRecord, ValidationError
from .distill import DistillConfig
from .metrics import FrozenGallery, base_novel_eval, classify, retrieval_report
from .prototype import AggregationConfig, build_all_prototypes, template_prototypes
from .rsflag import RsFlagRuleset, annotate_corpus
from .student import StudentModel, ToyEncoderConfig, TrainingSet, encode, init_model, init_student, train
from .synth import SynthSpec, generate

LAYOUT = {
    "meta": "dataset.json",
    "teacher": "teacher_images.jsonl",
    "student": "student_images.jsonl",
    "class_tokens": "class_tokens.jsonl",
    "captions": "captions.json",
    "caption_embeddings": "caption_embeddings.jsonl",
    "templates": "templates.jsonl",
    "gallery": "gallery.jsonl",
    "relevance": "relevance.json",
}
PROTOTYPE_SOURCES = ("captions", "template")
EVAL_MODES = ("fewshot", "base2novel", "retrieval")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 16
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.weight_decay < 0:
            raise ValidationError("train settings: need epochs >= 0, batch_size >= 1, lr >= 0, weight_decay >= 0")


def _default_encoder() -> ToyEncoderConfig:
    return ToyEncoderConfig(dim=32, seq_len=4, prompt_tokens=2, layers=2, seed=7)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    aggregation: AggregationConfig = AggregationConfig()
    distill: DistillConfig = DistillConfig()
    vision_encoder: ToyEncoderConfig = field(default_factory=_default_encoder)
    text_encoder: ToyEncoderConfig = field(default_factory=_default_encoder)
    rules: RsFlagRuleset = RsFlagRuleset()
    train: TrainSettings = TrainSettings()
    k_shot: Optional[int] = None
    base_classes: Optional[tuple] = None
    prototype_source: str = "captions"

    def __post_init__(self):
        if self.k_shot is not None and self.k_shot < 1:
            raise ValidationError("k_shot must be positive")
        if self.base_classes is not None:
            object.__setattr__(self, "base_classes", tuple(sorted(int(k) for k in self.base_classes)))
            if not self.base_classes:
                raise ValidationError("base_classes must be non-empty when given")
        if self.prototype_source not in PROTOTYPE_SOURCES:
            raise ValidationError(f"prototype_source must be one of {PROTOTYPE_SOURCES}")


_SECTIONS = {
    "aggregation": AggregationConfig,
    "distill": DistillConfig,
    "vision_encoder": ToyEncoderConfig,
    "text_encoder": ToyEncoderConfig,
    "rules": RsFlagRuleset,
    "train": TrainSettings,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown config keys in {where!r}: {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError(f"config section {where!r}: {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return _build(PipelineConfig, kwargs, "<top level>")


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["rules"]["positive_tokens"] = list(cfg.rules.positive_tokens)
    out["rules"]["negative_tokens"] = list(cfg.rules.negative_tokens)
    if cfg.base_classes is not None:
        out["base_classes"] = list(cfg.base_classes)
    return out


def preset_names() -> List[str]:
    return sorted(p.name[:-5] for p in resources.files("protodistill.presets").iterdir() if p.name.endswith(".json"))


def load_config(source: Optional[str] = None, seed: Optional[int] = None) -> PipelineConfig:
    """Config from a JSON path or a bundled preset name (e.g. ``B7``)."""
    if source is None:
        data = {}
    elif source in preset_names():
        data = json.loads(resources.files("protodistill.presets").joinpath(source + ".json").read_text())
    else:
        data = files.read_json(source)
    cfg = config_from_dict(data)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    return cfg


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def require_files(paths: Sequence) -> None:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ValidationError(f"missing input files: {missing}")


# -- stage: gen-synth ---------------------------------------------------------

def gen_synth(spec: SynthSpec, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = generate(spec)
    paths = {key: out / name for key, name in LAYOUT.items()}
    files.write_json(paths["meta"], {
        "spec": dataclasses.asdict(spec),
        "class_names": d.class_names,
        "base": d.base,
        "novel": d.novel,
        "planted_outliers": {str(k): v for k, v in d.outlier_indices.items()},
    })
    files.write_embedding_cache(paths["teacher"], zip(d.image_ids, d.image_labels, d.image_splits, d.teacher_feats))
    files.write_token_cache(paths["student"], zip(d.image_ids, d.image_labels, d.image_splits, d.image_tokens))
    C = spec.n_classes
    files.write_token_cache(paths["class_tokens"],
                            ((f"class-{k}", k, "train", d.class_tokens[k]) for k in range(C)))
    files.write_caption_file(paths["captions"], [
        {"class": k, "class_name": d.class_names[k], "captions": [(t, None) for t in d.captions[k]]}
        for k in range(C)
    ])
    files.write_embedding_cache(paths["caption_embeddings"], (
        (files.caption_id(k, j), k, "train", d.caption_embeddings[k][j])
        for k in range(C) for j in range(len(d.captions[k]))
    ))
    files.write_embedding_cache(paths["templates"],
                                ((f"template-{k}", k, "train", d.template_embeddings[k]) for k in range(C)))
    files.write_embedding_cache(paths["gallery"], ((gid, None, "test", v) for gid, v in zip(d.gallery_ids, d.gallery)))
    files.write_json(paths["relevance"], d.relevance)
    return paths


# -- stage: flag --------------------------------------------------------------

def flag_captions(captions_path, rules: RsFlagRuleset):
    """Annotated caption entries plus a per-class flag-rate summary."""
    entries = files.read_caption_file(captions_path)
    annotated, summary = [], {}
    for e in entries:
        cands = annotate_corpus(files.caption_candidates([e]), rules)
        flags = [c.rs_flag for c in cands]
        annotated.append({**e, "captions": [(c.text, c.rs_flag) for c in cands]})
        summary[e["class"]] = {"flagged": sum(flags), "total": len(flags), "rate": sum(flags) / len(flags)}
    return annotated, summary


# -- shared data loading --------------------------------------------------------

def select_k_shot(labels, k: int, seed: int) -> np.ndarray:
    """First `k` indices per class after a per-class seeded shuffle."""
    labels = np.asarray(labels)
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ValidationError(f"class {int(c)} has {len(idx)} training samples, fewer than k_shot={k}")
        perm = np.random.default_rng([int(seed), int(c)]).permutation(len(idx))
        chosen.extend(idx[perm[:k]].tolist())
    return np.array(sorted(chosen), dtype=int)


def _meta(data_dir) -> dict:
    return files.read_json(Path(data_dir) / LAYOUT["meta"])


def _teacher_index(data_dir) -> Dict[str, EmbeddingRecord]:
    return {r.id: r for r in files.read_embedding_cache(Path(data_dir) / LAYOUT["teacher"])}


def _train_records(data_dir, cfg: PipelineConfig):
    """Training images (restricted to base classes and k-shot when configured)."""
    rows = [r for r in files.read_token_cache(Path(data_dir) / LAYOUT["student"]) if r["split"] == "train"]
    if cfg.base_classes is not None:
        rows = [r for r in rows if r["label"] in cfg.base_classes]
    if any(r["label"] is None for r in rows):
        raise ValidationError("training images must be labelled")
    if not rows:
        raise ValidationError("no training images for the configured classes")
    if cfg.k_shot is not None:
        keep = select_k_shot([r["label"] for r in rows], cfg.k_shot, cfg.seed)
        rows = [rows[i] for i in keep]
    return rows


def _class_tokens(data_dir) -> Dict[int, np.ndarray]:
    return {r["label"]: r["tokens"] for r in files.read_token_cache(Path(data_dir) / LAYOUT["class_tokens"])}


def _class_sets(cfg: PipelineConfig, all_classes) -> ClassIndexSets:
    all_classes = set(int(k) for k in all_classes)
    if cfg.base_classes is None:
        return ClassIndexSets(all_classes)
    missing = set(cfg.base_classes) - all_classes
    if missing:
        raise ValidationError(f"base classes {sorted(missing)} not in the dataset")
    return ClassIndexSets(cfg.base_classes, all_classes - set(cfg.base_classes))


# -- stage: aggregate -----------------------------------------------------------

def aggregate(data_dir, flagged_captions, cfg: PipelineConfig):
    data_dir = Path(data_dir)
    require_files([data_dir / LAYOUT["teacher"], data_dir / LAYOUT["student"], flagged_captions,
                   data_dir / LAYOUT["caption_embeddings"]])
    teacher = _teacher_index(data_dir)
    train_ids = [r["id"] for r in _train_records(data_dir, cfg)]
    missing = [i for i in train_ids if i not in teacher]
    if missing:
        raise ValidationError(f"teacher cache lacks features for {len(missing)} training images, e.g. {missing[:3]}")
    records = [teacher[i] for i in train_ids]

    entries = files.read_caption_file(flagged_captions)
    sets = _class_sets(cfg, {e["class"] for e in entries} | {r.label for r in records})
    if cfg.prototype_source == "template":
        require_files([data_dir / LAYOUT["templates"]])
        templates = {r.label: r.vec for r in files.read_embedding_cache(data_dir / LAYOUT["templates"])}
        return template_prototypes(templates, sorted(sets.base))

    unflagged = [(e["class"], j) for e in entries for j, (_, f) in enumerate(e["captions"]) if f is None]
    if unflagged:
        raise ValidationError(f"captions are not flagged (run `flag` first), e.g. class/caption {unflagged[0]}")
    emb = {files.parse_caption_id(r.id): r.vec
           for r in files.read_embedding_cache(data_dir / LAYOUT["caption_embeddings"])}
    corpus = files.caption_candidates(entries, emb)
    no_emb = [(c.class_index, c.caption_index) for c in corpus if c.embedding is None and c.class_index in sets.base]
    if no_emb:
        raise ValidationError(f"no caption embedding for class/caption pairs {no_emb[:5]}")
    corpus = [c for c in corpus if c.class_index in sets.base]
    return build_all_prototypes(records, corpus, cfg.aggregation, restrict_to=sets)


# -- stage: train ---------------------------------------------------------------

def build_model(cfg: PipelineConfig) -> StudentModel:
    return init_model(cfg.vision_encoder, cfg.text_encoder, cfg.distill.tau_s)


def model_from_checkpoint(ckpt: dict) -> StudentModel:
    cfg = config_from_dict(ckpt["header"]["config"])
    base = build_model(cfg)
    return StudentModel(
        base.vision.with_prompts(np.asarray(ckpt["vision_prompts"], dtype=np.float64).reshape(base.vision.prompts.shape)),
        base.text.with_prompts(np.asarray(ckpt["text_prompts"], dtype=np.float64).reshape(base.text.prompts.shape)),
        float(ckpt["log_tau_s"]),
    )


def training_set(data_dir, cfg: PipelineConfig) -> TrainingSet:
    rows = _train_records(data_dir, cfg)
    teacher = _teacher_index(data_dir)
    tokens = _class_tokens(data_dir)
    classes = sorted({r["label"] for r in rows})
    missing = [k for k in classes if k not in tokens]
    if missing:
        raise ValidationError(f"no class token sequence for classes {missing}")
    absent = [r["id"] for r in rows if r["id"] not in teacher]
    if absent:
        raise ValidationError(f"teacher cache lacks features for images {absent[:3]}")
    image_tokens = np.stack([r["tokens"] for r in rows])
    enc = cfg.vision_encoder
    if image_tokens.shape[1:] != (enc.seq_len, enc.dim):
        raise ValidationError(f"image tokens have shape {image_tokens.shape[1:]}, encoder expects {(enc.seq_len, enc.dim)}")
    return TrainingSet(
        image_tokens=image_tokens,
        labels=np.array([r["label"] for r in rows]),
        teacher_feats=np.stack([teacher[r["id"]].vec for r in rows]),
        class_tokens=np.stack([tokens[k] for k in classes]),
        classes=classes,
    )


def run_training(data_dir, cfg: PipelineConfig, prototypes=None):
    data = training_set(data_dir, cfg)
    prototypes = {} if prototypes is None else {k: p for k, p in prototypes.items() if k in data.classes}
    needs = cfg.distill.lambda_text > 0 or cfg.distill.lambda_logit > 0
    if needs and not prototypes:
        raise ValidationError("this configuration uses text/logit alignment but no prototypes were given")
    model = build_model(cfg)
    t = cfg.train
    return train(model, data, prototypes, cfg.distill, t.epochs, t.lr, seed=cfg.seed,
                 batch_size=t.batch_size, weight_decay=t.weight_decay)


# -- stage: eval ------------------------------------------------------------------

def evaluate(data_dir, ckpt: dict, mode: str) -> dict:
    if mode not in EVAL_MODES:
        raise ValidationError(f"mode must be one of {EVAL_MODES}")
    data_dir = Path(data_dir)
    cfg = config_from_dict(ckpt["header"]["config"])
    model = model_from_checkpoint(ckpt)
    test = [r for r in files.read_token_cache(data_dir / LAYOUT["student"]) if r["split"] == "test"]
    if not test:
        raise ValidationError("dataset has no test split")
    report = {"mode": mode, "checkpoint_step": ckpt["header"]["step"]}

    if mode == "retrieval":
        require_files([data_dir / LAYOUT["gallery"], data_dir / LAYOUT["relevance"]])
        gallery_path = data_dir / LAYOUT["gallery"]
        file_digest = sha256_file(gallery_path)
        recs = files.read_embedding_cache(gallery_path)
        gallery = FrozenGallery(np.stack([r.vec for r in recs]), [r.id for r in recs])
        relevance = files.read_json(data_dir / LAYOUT["relevance"])
        by_id = {r["id"]: r for r in test}
        qids = sorted(relevance)
        absent = [q for q in qids if q not in by_id]
        if absent:
            raise ValidationError(f"relevance queries not in the test split: {absent[:3]}")
        col = {gid: i for i, gid in enumerate(gallery.ids)}
        rel = {}
        for i, q in enumerate(qids):
            unknown = [g for g in relevance[q] if g not in col]
            if unknown:
                raise ValidationError(f"relevance for {q} names unknown gallery items {unknown[:3]}")
            rel[i] = {col[g] for g in relevance[q]}
        queries = encode(model.vision, np.stack([by_id[q]["tokens"] for q in qids]))
        rr = retrieval_report(queries, gallery.vectors, rel)
        gallery.verify()
        if sha256_file(gallery_path) != file_digest:
            raise ValidationError("gallery file changed during evaluation")
        report.update(rr.as_dict())
        report["gallery_sha256"] = file_digest
        return report

    tokens = _class_tokens(data_dir)
    classes = sorted(tokens)
    text = encode(model.text, np.stack([tokens[k] for k in classes]))
    class_emb = dict(zip(classes, text))
    labels = np.array([r["label"] for r in test])
    image = encode(model.vision, np.stack([r["tokens"] for r in test]))
    if mode == "fewshot":
        rep = classify(image, text, labels, classes)
        report.update(rep.as_dict())
    else:
        sets = _class_sets(cfg, classes)
        if not sets.novel:
            raise ValidationError("base2novel evaluation needs base_classes in the checkpoint config")
        report.update(base_novel_eval(image, class_emb, labels, sets).as_dict())
    return report


# -- presentation -------------------------------------------------------------------

def render_table(report: dict) -> str:
    mode = report.get("mode")
    if mode == "base2novel":
        head, row = ("Base", "Novel", "HM"), (report["base"], report["novel"], report["hm"])
    elif mode == "retrieval":
        head = ("I2T R@1", "R@5", "R@10", "T2I R@1", "R@5", "R@10", "mR")
        row = tuple(report["i2t"][k] for k in ("r1", "r5", "r10")) + tuple(report["t2i"][k] for k in ("r1", "r5", "r10")) + (report["mr"],)
    elif mode == "fewshot":
        head = ("Top-1",) + tuple(f"c{k}" for k in report["per_class"])
        row = (report["top1"],) + tuple(report["per_class"].values())
    else:
        raise ValidationError(f"no table layout for report mode {mode!r}")
    cells = [f"{x:.2f}" for x in row]
    widths = [max(len(h), len(c)) for h, c in zip(head, cells)]
    line1 = "  ".join(h.rjust(w) for h, w in zip(head, widths))
    line2 = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return f"{line1}\n{line2}"
