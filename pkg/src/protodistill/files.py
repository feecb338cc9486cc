"""Readers and writers for the on-disk formats.

* embedding cache: JSON lines ``{"id", "label", "split", "vec"}``; vectors are
  stored raw and normalised on load
* token cache: JSON lines ``{"id", "label", "split", "tokens"}`` (N x D)
* caption file: JSON array ``{"class", "class_name", "captions"}``; captions are
  strings, or ``{"text", "rs_flag"}`` objects once annotated
* prototype file: JSON array of prototypes with their aggregation audit trail
* checkpoint: JSON with a header (config, step, seed) and the prompt values
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import EmbeddingRecord, RobustStats, ValidationError, l2_normalize
from .prototype import ClassPrototype
from .rsflag import CaptionCandidate

SPLITS = ("train", "test")
CHECKPOINT_FORMAT = "protodistill-checkpoint/1"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def _jsonl_lines(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}:{lineno}: expected a JSON object")
        yield lineno, obj


def _record_head(path, lineno, obj, payload: str):
    missing = {"id", "label", "split", payload} - obj.keys()
    if missing:
        raise ValidationError(f"{path}:{lineno}: missing fields {sorted(missing)}")
    extra = obj.keys() - {"id", "label", "split", payload}
    if extra:
        raise ValidationError(f"{path}:{lineno}: unknown fields {sorted(extra)}")
    if not isinstance(obj["id"], str):
        raise ValidationError(f"{path}:{lineno}: id must be a string")
    label = obj["label"]
    if label is not None and (not isinstance(label, int) or isinstance(label, bool) or label < 0):
        raise ValidationError(f"{path}:{lineno}: label must be a non-negative integer or null")
    if obj["split"] not in SPLITS:
        raise ValidationError(f"{path}:{lineno}: split must be one of {SPLITS}")


def write_embedding_cache(path, records: Iterable[Tuple[str, Optional[int], str, Sequence[float]]]) -> None:
    with open(path, "w") as fh:
        for rid, label, split, vec in records:
            row = {"id": rid, "label": None if label is None else int(label), "split": split,
                   "vec": [float(x) for x in vec]}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_embedding_cache(path, normalize: bool = True) -> List[EmbeddingRecord]:
    out, dim = [], None
    for lineno, obj in _jsonl_lines(path):
        _record_head(path, lineno, obj, "vec")
        vec = obj["vec"]
        if not isinstance(vec, list) or not vec or not all(isinstance(x, (int, float)) for x in vec):
            raise ValidationError(f"{path}:{lineno}: vec must be a non-empty list of numbers")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise ValidationError(f"{path}:{lineno}: dimension {len(vec)} != {dim}")
        arr = np.asarray(vec, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{path}:{lineno}: non-finite vector entries")
        if normalize:
            if not np.any(arr):
                raise ValidationError(f"{path}:{lineno}: zero vector cannot be normalised")
            arr = l2_normalize(arr)
        out.append(EmbeddingRecord(obj["id"], obj["label"], arr, obj["split"]))
    return out


def write_token_cache(path, records) -> None:
    with open(path, "w") as fh:
        for rid, label, split, tokens in records:
            row = {"id": rid, "label": None if label is None else int(label), "split": split,
                   "tokens": [[float(x) for x in tok] for tok in tokens]}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_token_cache(path) -> List[dict]:
    out, shape = [], None
    for lineno, obj in _jsonl_lines(path):
        _record_head(path, lineno, obj, "tokens")
        try:
            arr = np.asarray(obj["tokens"], dtype=np.float64)
        except (TypeError, ValueError):
            raise ValidationError(f"{path}:{lineno}: tokens must be a rectangular list of numbers") from None
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValidationError(f"{path}:{lineno}: tokens must be a finite N x D matrix")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValidationError(f"{path}:{lineno}: token shape {arr.shape} != {shape}")
        out.append({"id": obj["id"], "label": obj["label"], "split": obj["split"], "tokens": arr})
    return out


# -- captions ---------------------------------------------------------------

def read_caption_file(path) -> List[dict]:
    """Validated caption entries: ``{"class", "class_name", "captions": [(text, flag|None)]}``."""
    data = read_json(path)
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON array of class entries")
    seen = set()
    out = []
    for i, entry in enumerate(data):
        where = f"{path}: entry {i}"
        if not isinstance(entry, dict):
            raise ValidationError(f"{where}: expected an object")
        extra = entry.keys() - {"class", "class_name", "captions"}
        if extra:
            raise ValidationError(f"{where}: unknown fields {sorted(extra)}")
        k = entry.get("class")
        if not isinstance(k, int) or isinstance(k, bool) or k < 0:
            raise ValidationError(f"{where}: 'class' must be a non-negative integer")
        if k in seen:
            raise ValidationError(f"{where}: duplicate class {k}")
        seen.add(k)
        caps = entry.get("captions")
        if not isinstance(caps, list) or not caps:
            raise ValidationError(f"{where} (class {k}): 'captions' must be a non-empty list")
        parsed = []
        for j, c in enumerate(caps):
            if isinstance(c, str):
                parsed.append((c, None))
            elif isinstance(c, dict) and isinstance(c.get("text"), str) and c.keys() <= {"text", "rs_flag"}:
                flag = c.get("rs_flag")
                if flag not in (None, 0, 1):
                    raise ValidationError(f"{where} (class {k}) caption {j}: rs_flag must be 0 or 1")
                parsed.append((c["text"], flag))
            else:
                raise ValidationError(f"{where} (class {k}) caption {j}: expected a string or {{text, rs_flag}}")
        out.append({"class": k, "class_name": str(entry.get("class_name", "")), "captions": parsed})
    return out


def write_caption_file(path, entries: Sequence[dict]) -> None:
    rows = []
    for e in entries:
        caps = [t if f is None else {"text": t, "rs_flag": int(f)} for t, f in e["captions"]]
        rows.append({"class": e["class"], "class_name": e["class_name"], "captions": caps})
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def caption_candidates(entries: Sequence[dict], embeddings: Optional[Mapping[Tuple[int, int], np.ndarray]] = None) -> List[CaptionCandidate]:
    out = []
    for e in entries:
        for j, (text, flag) in enumerate(e["captions"]):
            emb = None if embeddings is None else embeddings.get((e["class"], j))
            out.append(CaptionCandidate(e["class"], j, text, flag, emb))
    return out


def caption_id(k: int, j: int) -> str:
    return f"caption-{k}-{j}"


def parse_caption_id(rid: str) -> Tuple[int, int]:
    parts = rid.split("-")
    if len(parts) != 3 or parts[0] != "caption":
        raise ValidationError(f"caption embedding id {rid!r} is not of the form caption-<class>-<index>")
    try:
        return int(parts[1]), int(parts[2])
    except ValueError:
        raise ValidationError(f"caption embedding id {rid!r} is not of the form caption-<class>-<index>") from None


# -- prototypes ---------------------------------------------------------------

def _floats(a) -> list:
    return [float(x) for x in np.asarray(a).ravel()]


def prototype_to_dict(p: ClassPrototype, beta: Optional[float] = None) -> dict:
    row = {
        "class": p.class_index,
        "prototype": _floats(p.prototype),
        "kept_indices": sorted(p.kept_indices),
        "scores": _floats(p.scores),
        "median": p.stats.median,
        "mad": p.stats.mad,
        "zscores": _floats(p.stats.zscores),
        "weights": _floats(p.weights),
        "flags": None if p.flags is None else [int(f) for f in p.flags],
    }
    if beta is not None:
        row["baseline_weights"] = _floats(p.baseline_weights(beta))
    return row


def write_prototypes(path, prototypes: Mapping[int, ClassPrototype], beta: Optional[float] = None) -> None:
    write_json(path, [prototype_to_dict(prototypes[k], beta) for k in sorted(prototypes)])


def read_prototypes(path) -> Dict[int, ClassPrototype]:
    data = read_json(path)
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON array of prototypes")
    out = {}
    for i, row in enumerate(data):
        try:
            vec = np.asarray(row["prototype"], dtype=np.float64)
            if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
                raise ValidationError(f"{path}: prototype {i} is not unit norm")
            flags = row.get("flags")
            p = ClassPrototype(
                class_index=int(row["class"]),
                prototype=vec,
                kept_indices=frozenset(int(j) for j in row["kept_indices"]),
                scores=np.asarray(row["scores"], dtype=np.float64),
                weights=np.asarray(row["weights"], dtype=np.float64),
                stats=RobustStats(float(row["median"]), float(row["mad"]), np.asarray(row["zscores"], dtype=np.float64)),
                flags=None if flags is None else np.asarray(flags, dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: prototype {i}: malformed ({exc})") from None
        if p.class_index in out:
            raise ValidationError(f"{path}: duplicate prototype for class {p.class_index}")
        out[p.class_index] = p
    return out


# -- checkpoints and logs -----------------------------------------------------

def write_checkpoint(path, config: dict, step: int, seed: int, model) -> None:
    write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "header": {"config": config, "step": int(step), "seed": int(seed)},
        "vision_prompts": np.asarray(model.vision.prompts).tolist(),
        "text_prompts": np.asarray(model.text.prompts).tolist(),
        "log_tau_s": float(model.log_tau_s),
    })


def read_checkpoint(path) -> dict:
    data = read_json(path)
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    for key in ("header", "vision_prompts", "text_prompts", "log_tau_s"):
        if key not in data:
            raise ValidationError(f"{path}: missing {key!r}")
    if not math.isfinite(data["log_tau_s"]):
        raise ValidationError(f"{path}: log_tau_s is not finite")
    return data


def write_loss_log(path, history) -> None:
    with open(path, "w") as fh:
        for step, b in enumerate(history):
            fh.write(json.dumps({"step": step, **b.as_dict()}, sort_keys=True) + "\n")


def read_loss_log(path) -> List[dict]:
    return [obj for _, obj in _jsonl_lines(path)]
