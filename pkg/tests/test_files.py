import json

import numpy as np
import pytest

from protodistill import files
from protodistill.core import ValidationError
from protodistill.distill import LossBreakdown
from protodistill.prototype import AggregationConfig, aggregate_class
from protodistill.rsflag import CaptionCandidate
from protodistill.student import ToyEncoderConfig, init_model

from conftest import unit_rows


def test_embedding_cache_round_trip(tmp_path, rng):
    vecs = rng.normal(size=(4, 5))
    path = tmp_path / "e.jsonl"
    files.write_embedding_cache(path, [(f"r{i}", i % 2 if i < 3 else None, "train", v) for i, v in enumerate(vecs)])
    raw = files.read_embedding_cache(path, normalize=False)
    assert [r.id for r in raw] == ["r0", "r1", "r2", "r3"]
    assert raw[3].label is None
    np.testing.assert_array_equal(np.stack([r.vec for r in raw]), vecs)
    normed = files.read_embedding_cache(path)
    assert all(r.is_normalized() for r in normed)
    np.testing.assert_allclose(normed[0].vec, vecs[0] / np.linalg.norm(vecs[0]), atol=1e-15)


@pytest.mark.parametrize("line, message", [
    ('{"id": "a", "label": 0, "split": "train", "vec": [1, 0]}\n{"id": "b", "label": 0, "split": "train"', ":2: malformed"),
    ('{"id": "a", "label": 0, "split": "train", "vec": [1, 0]}\n{"id": "b", "label": 0, "split": "train", "vec": [1]}', ":2: dimension"),
    ('{"id": "a", "label": 0, "split": "dev", "vec": [1, 0]}', ":1: split"),
    ('{"id": "a", "label": -1, "split": "train", "vec": [1, 0]}', ":1: label"),
    ('{"id": "a", "label": 0, "split": "train", "vec": [0, 0]}', ":1: zero vector"),
    ('{"id": "a", "label": 0, "split": "train", "vec": [1, 0], "x": 1}', ":1: unknown fields"),
    ('{"id": "a", "label": 0, "split": "train"}', ":1: missing fields"),
    ('[1, 2]', ":1: expected a JSON object"),
])
def test_embedding_cache_errors_carry_line_numbers(tmp_path, line, message):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(ValidationError, match=message):
        files.read_embedding_cache(path)


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        files.read_embedding_cache(tmp_path / "nope.jsonl")


def test_token_cache_round_trip(tmp_path, rng):
    toks = rng.normal(size=(3, 4, 2))
    path = tmp_path / "t.jsonl"
    files.write_token_cache(path, [(f"x{i}", i, "test", t) for i, t in enumerate(toks)])
    back = files.read_token_cache(path)
    np.testing.assert_array_equal(np.stack([r["tokens"] for r in back]), toks)
    path.write_text('{"id": "a", "label": 0, "split": "train", "tokens": [[1, 2], [3]]}\n')
    with pytest.raises(ValidationError, match=":1:"):
        files.read_token_cache(path)


def test_caption_file_round_trip_and_errors(tmp_path):
    entries = [{"class": 0, "class_name": "airport", "captions": [("a b", None), ("c d", 1)]}]
    path = tmp_path / "c.json"
    files.write_caption_file(path, entries)
    assert files.read_caption_file(path) == entries
    cands = files.caption_candidates(entries, {(0, 1): np.array([1.0, 0.0])})
    assert [(c.caption_index, c.rs_flag, c.embedding is None) for c in cands] == [(0, None, True), (1, 1, False)]

    bad = [
        ([{"class": 0, "captions": []}], "non-empty"),
        ([{"class": 0, "captions": ["x"]}, {"class": 0, "captions": ["y"]}], "duplicate class 0"),
        ([{"class": "0", "captions": ["x"]}], "'class'"),
        ([{"class": 0, "captions": [{"text": "x", "rs_flag": 3}]}], "rs_flag"),
        ([{"class": 0, "captions": ["x"], "extra": 1}], "unknown fields"),
        ({"class": 0}, "array"),
    ]
    for payload, msg in bad:
        path.write_text(json.dumps(payload))
        with pytest.raises(ValidationError, match=msg):
            files.read_caption_file(path)
    path.write_text("[{")
    with pytest.raises(ValidationError, match="line 1"):
        files.read_caption_file(path)


def test_caption_ids():
    assert files.parse_caption_id(files.caption_id(3, 17)) == (3, 17)
    for bad in ("cap-1-2", "caption-x-2", "caption-1"):
        with pytest.raises(ValidationError):
            files.parse_caption_id(bad)


def test_prototype_round_trip(tmp_path, rng):
    emb = unit_rows(rng, 12, 4)
    cands = [CaptionCandidate(2, j, "t", j % 2, emb[j]) for j in range(12)]
    p = aggregate_class(unit_rows(rng, 3, 4), cands, AggregationConfig(), class_index=2)
    path = tmp_path / "p.json"
    files.write_prototypes(path, {2: p}, beta=10.0)
    raw = json.loads(path.read_text())
    assert {"scores", "zscores", "kept_indices", "weights", "baseline_weights", "median", "mad"} <= raw[0].keys()
    back = files.read_prototypes(path)[2]
    np.testing.assert_array_equal(back.prototype, p.prototype)
    np.testing.assert_array_equal(back.weights, p.weights)
    np.testing.assert_array_equal(back.stats.zscores, p.stats.zscores)
    assert back.kept_indices == p.kept_indices
    raw[0]["prototype"] = [2.0, 0, 0, 0]
    path.write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="unit norm"):
        files.read_prototypes(path)


def test_checkpoint_round_trip(tmp_path):
    m = init_model(ToyEncoderConfig(4, 2, 2, 1), ToyEncoderConfig(4, 2, 1, 1), tau_s=1.7)
    path = tmp_path / "ck.json"
    files.write_checkpoint(path, {"seed": 3}, 12, 3, m)
    ck = files.read_checkpoint(path)
    assert ck["header"] == {"config": {"seed": 3}, "step": 12, "seed": 3}
    np.testing.assert_array_equal(np.array(ck["vision_prompts"]), m.vision.prompts)
    assert ck["log_tau_s"] == m.log_tau_s
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValidationError):
        files.read_checkpoint(path)


def test_loss_log_round_trip(tmp_path):
    hist = [LossBreakdown(1.0, 0.5, 0.25, 0.1, 1.5, 0.0), LossBreakdown(0.9, 0.4, 0.2, 0.1, 1.3, 0.5)]
    path = tmp_path / "log.jsonl"
    files.write_loss_log(path, hist)
    rows = files.read_loss_log(path)
    assert [r["step"] for r in rows] == [0, 1]
    assert rows[1] == {"step": 1, **hist[1].as_dict()}
