import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from protodistill.core import ClassIndexSets, DegeneratePrototypeError, EmbeddingRecord, ValidationError
from protodistill.prototype import (
    AggregationConfig,
    aggregate_class,
    build_all_prototypes,
    candidate_weights,
    prune,
    score_candidates,
    template_prototypes,
    visual_prototype,
)
from protodistill.rsflag import CaptionCandidate
from protodistill.synth import SynthSpec, generate

from conftest import brute_robust, unit_rows

CFG = AggregationConfig()


def oracle_weights(scores, flags, kept, beta, gamma):
    logits = {j: beta * scores[j] + gamma * flags[j] for j in kept}
    top = max(logits.values())
    e = {j: math.exp(x - top) for j, x in logits.items()}
    z = sum(e.values())
    return [e[j] / z if j in e else 0.0 for j in range(len(scores))]


def random_instance(rng, n=None, d=None):
    n = n or int(rng.integers(1, 31))
    d = d or int(rng.integers(2, 9))
    feats = unit_rows(rng, int(rng.integers(1, 6)), d)
    emb = unit_rows(rng, n, d)
    flags = rng.integers(0, 2, n)
    cands = [CaptionCandidate(0, j, f"c{j}", int(flags[j]), emb[j]) for j in range(n)]
    return feats, cands, emb, flags


def test_config_defaults_and_validation():
    assert (CFG.beta, CFG.gamma, CFG.zeta, CFG.epsilon) == (10.0, 2.0, 3.0, 1e-8)
    for bad in ({"beta": 0}, {"gamma": -1}, {"zeta": 0}, {"epsilon": 0}, {"mode": "max"}):
        with pytest.raises(ValidationError):
            AggregationConfig(**bad)


def test_visual_prototype_examples():
    v = np.array([[0.6, 0.8]])
    np.testing.assert_array_equal(visual_prototype(v), v[0])
    np.testing.assert_array_equal(visual_prototype([[1.0, 0.0], [-1.0, 0.0]]), [0.0, 0.0])
    np.testing.assert_array_equal(visual_prototype([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
    with pytest.raises(ValidationError, match="class 4"):
        visual_prototype(np.zeros((0, 2)), class_index=4)


def test_score_candidates_examples():
    t = unit_rows(np.random.default_rng(0), 3, 4)
    assert score_candidates(t[0], t)[0] == pytest.approx(1.0)
    assert score_candidates([0.5, 0.5], [[1.0, 0.0]])[0] == 0.5
    np.testing.assert_array_equal(score_candidates(np.zeros(4), t), np.zeros(3))
    with pytest.raises(ValidationError):
        score_candidates([1.0, 0.0], [[1.0, 0.0, 0.0]])


def test_score_linearity(rng):
    for _ in range(50):
        feats = unit_rows(rng, 7, 5)
        t = unit_rows(rng, 9, 5)
        per_image = np.array([[float(np.dot(v, tj)) for v in feats] for tj in t]).mean(axis=1)
        np.testing.assert_allclose(score_candidates(visual_prototype(feats), t), per_image, atol=1e-9, rtol=0)


def test_prune_examples():
    kept, stats = prune([0.20, 0.21, 0.19, 0.50])
    assert kept == {0, 1, 2}
    assert stats.zscores[3] == pytest.approx(29.5, rel=1e-6)
    assert prune([0.3] * 5)[0] == set(range(5))
    kept, stats = prune([0.1, 0.7])
    assert kept == {0, 1}
    np.testing.assert_allclose(stats.zscores, [1.0, 1.0], rtol=1e-6)


def test_prune_is_two_sided():
    scores = [0.5] * 5 + [0.49, 0.51, 0.48, 0.52] + [-0.9, 1.9]
    kept, _ = prune(scores)
    assert 9 not in kept and 10 not in kept
    assert len(kept) == 9


def test_prune_keeps_boundary_ties():
    # median 0, mad 1 (eps ignored at zeta scale): z of 3.0 sits on the band edge
    scores = np.array([-1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 3.0])
    cfg = AggregationConfig(zeta=3.0, epsilon=1e-300)
    kept, stats = prune(scores, cfg)
    assert stats.zscores[-1] == 3.0
    assert 7 in kept


def test_prune_matches_sort_oracle(rng):
    for _ in range(500):
        n = int(rng.integers(1, 65))
        scores = rng.standard_normal(n) * rng.uniform(0.01, 1)
        if rng.random() < 0.2:
            scores = np.round(scores, 1)  # ties
        _, _, z = brute_robust(list(scores))
        expected = {j for j in range(n) if z[j] <= 3.0}
        kept, _ = prune(scores)
        assert kept == expected
        assert kept


def test_candidate_weights_examples():
    w = candidate_weights([0.8, 0.6], [0, 1], {0, 1}, beta=10, gamma=2)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(w, oracle_weights([0.8, 0.6], [0, 1], {0, 1}, 10, 2))
    np.testing.assert_allclose(candidate_weights([0.3] * 4, [1] * 4, {0, 1, 2, 3}), [0.25] * 4)
    with pytest.raises(ValidationError):
        candidate_weights([0.1], [0], set())
    with pytest.raises(ValidationError):
        candidate_weights([0.1], [0], {1})
    with pytest.raises(ValidationError):
        candidate_weights([0.1, 0.2], [0], {0})


def test_candidate_weights_match_scalar_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 20))
        s = rng.uniform(-1, 1, n)
        f = rng.integers(0, 2, n)
        kept = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        np.testing.assert_allclose(candidate_weights(s, f, kept), oracle_weights(s, f, kept, 10, 2), atol=1e-12)


def test_weight_properties(rng):
    for _ in range(200):
        n = int(rng.integers(2, 31))
        # distinct scores on a 1e-3 grid keep the top logit gap at beta=1e4 above ln(1000)
        s = rng.choice(np.arange(-1000, 1001), size=n, replace=False) / 1000.0
        f = rng.integers(0, 2, n).astype(float)
        kept, _ = prune(s)
        w = candidate_weights(s, f, kept)
        # normalisation and support
        assert abs(w.sum() - 1.0) <= 1e-9
        assert all(w[j] > 0 for j in kept)
        assert all(w[j] == 0 for j in range(n) if j not in kept)
        # gamma = 0 is a plain softmax over beta * s on the kept set
        idx = sorted(kept)
        plain = np.exp(10 * s[idx] - np.max(10 * s[idx]))
        np.testing.assert_allclose(candidate_weights(s, f, kept, gamma=0.0)[idx], plain / plain.sum(), atol=1e-12)
        # shift robustness
        c = rng.uniform(-5, 5)
        np.testing.assert_allclose(candidate_weights(s + c, f, kept), w, atol=1e-12)
        # beta -> large concentrates on the argmax
        big = candidate_weights(s, f, kept, beta=1e4)
        top = max(idx, key=lambda j: 1e4 * s[j] + 2 * f[j])
        assert big[top] >= 0.999


def test_flag_monotonicity(rng):
    for _ in range(200):
        n = int(rng.integers(2, 12))
        s = rng.uniform(-1, 1, n)
        s[1] = s[0]
        f = rng.integers(0, 2, n)
        f[0], f[1] = 1, 0
        gamma = float(rng.uniform(0.01, 5))
        w = candidate_weights(s, f, set(range(n)), gamma=gamma)
        assert w[0] > w[1]


def test_aggregate_class_examples():
    one = aggregate_class([[1.0, 0.0]], [CaptionCandidate(0, 0, "x", 1, np.array([0.6, 0.8]))])
    np.testing.assert_allclose(one.prototype, [0.6, 0.8])
    assert one.weights.tolist() == [1.0]

    # equal scores and flags: weights (0.5, 0.5)
    two = aggregate_class([[1 / math.sqrt(2), 1 / math.sqrt(2)]], [
        CaptionCandidate(0, 0, "a", 1, np.array([1.0, 0.0])),
        CaptionCandidate(0, 1, "b", 1, np.array([0.0, 1.0])),
    ])
    np.testing.assert_allclose(two.weights, [0.5, 0.5])
    np.testing.assert_allclose(two.prototype, [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-15)


def test_aggregate_class_degenerate():
    cands = [CaptionCandidate(3, 0, "a", 1, np.array([1.0, 0.0])),
             CaptionCandidate(3, 1, "b", 1, np.array([-1.0, 0.0]))]
    with pytest.raises(DegeneratePrototypeError, match="class 3"):
        aggregate_class([[0.0, 1.0]], cands)


def test_aggregate_requires_flags_and_embeddings():
    with pytest.raises(ValidationError):
        aggregate_class([[1.0, 0.0]], [CaptionCandidate(0, 0, "a", None, np.array([1.0, 0.0]))])
    with pytest.raises(ValidationError):
        aggregate_class([[1.0, 0.0]], [])


def test_aggregate_matches_oracle_and_invariants(rng):
    for _ in range(200):
        feats, cands, emb, flags = random_instance(rng)
        p = aggregate_class(feats, cands)
        s = emb @ feats.mean(axis=0)
        _, _, z = brute_robust(list(s))
        kept = {j for j in range(len(s)) if z[j] <= 3.0}
        w = np.array(oracle_weights(s, flags, kept, 10, 2))
        expected = w @ emb
        expected /= np.linalg.norm(expected)
        assert p.kept_indices == kept
        np.testing.assert_allclose(p.weights, w, atol=1e-12)
        np.testing.assert_allclose(p.prototype, expected, atol=1e-10)
        assert abs(np.linalg.norm(p.prototype) - 1) <= 1e-6
        assert abs(p.weights.sum() - 1) <= 1e-9


def test_permutation_equivariance(rng):
    for _ in range(200):
        feats, cands, _, _ = random_instance(rng)
        base = aggregate_class(feats, cands)
        perm = rng.permutation(len(cands))
        shuffled = aggregate_class(feats, [cands[j] for j in perm])
        np.testing.assert_allclose(shuffled.scores, base.scores[perm], atol=1e-15)
        np.testing.assert_allclose(shuffled.weights, base.weights[perm], atol=1e-12)
        np.testing.assert_allclose(shuffled.prototype, base.prototype, atol=1e-12)


def test_renormalize_switch_changes_weights(rng):
    feats = unit_rows(rng, 6, 4)
    _, cands, _, _ = random_instance(rng, n=12, d=4)
    raw = aggregate_class(feats, cands)
    renorm = aggregate_class(feats, cands, AggregationConfig(renormalize_visual_prototype=True))
    np.testing.assert_allclose(renorm.scores * np.linalg.norm(feats.mean(axis=0)), raw.scores, atol=1e-12)
    assert not np.allclose(renorm.weights, raw.weights)


def test_mean_mode_is_plain_average(rng):
    feats, cands, emb, _ = random_instance(rng, n=10)
    p = aggregate_class(feats, cands, AggregationConfig(mode="mean"))
    expected = emb.mean(axis=0)
    np.testing.assert_allclose(p.prototype, expected / np.linalg.norm(expected), atol=1e-12)
    assert p.kept_indices == set(range(10))


def test_baseline_weights_drop_the_flag_term(rng):
    feats, cands, _, _ = random_instance(rng, n=15)
    p = aggregate_class(feats, cands)
    base = p.baseline_weights(10.0)
    np.testing.assert_allclose(base, candidate_weights(p.scores, np.zeros(15), p.kept_indices, gamma=0.0))


@pytest.mark.parametrize("seed", range(5))
def test_planted_outliers_are_exactly_pruned(seed):
    data = generate(SynthSpec(seed=seed, ground_bias=0.0, n_classes=4, n_base=4))
    for k in range(4):
        feats = data.teacher_feats[(data.image_labels == k) & (np.array(data.image_splits) == "train")]
        emb = data.caption_embeddings[k]
        cands = [CaptionCandidate(k, j, t, int(data.intended_flags[k][j]), emb[j])
                 for j, t in enumerate(data.captions[k])]
        p = aggregate_class(feats, cands)
        s = emb @ feats.mean(axis=0)
        med, mad, z = brute_robust(list(s))
        pruned_oracle = {j for j in range(len(s)) if z[j] > 3.0}
        assert pruned_oracle == set(data.outlier_indices[k])
        assert set(range(len(s))) - p.kept_indices == pruned_oracle
        # construction: the outliers sit far below the band
        assert all(s[j] < med - 10 * mad for j in data.outlier_indices[k])


def _records(data):
    return [EmbeddingRecord(i, int(y), v, sp) for i, y, v, sp in
            zip(data.image_ids, data.image_labels, data.teacher_feats, data.image_splits) if sp == "train"]


def _corpus(data):
    return [CaptionCandidate(k, j, t, int(data.intended_flags[k][j]), data.caption_embeddings[k][j])
            for k in data.captions for j, t in enumerate(data.captions[k])]


def test_build_all_prototypes_matches_per_class_runs():
    data = generate(SynthSpec(n_classes=5, n_base=3, seed=2))
    recs, corpus = _records(data), _corpus(data)
    protos = build_all_prototypes(recs, corpus)
    assert sorted(protos) == list(range(5))
    for k, p in protos.items():
        feats = np.stack([r.vec for r in recs if r.label == k])
        solo = aggregate_class(feats, [c for c in corpus if c.class_index == k])
        np.testing.assert_array_equal(p.prototype, solo.prototype)
        assert p.class_index == k


def test_build_all_prototypes_masking_and_errors(rng):
    data = generate(SynthSpec(n_classes=2, n_base=1, seed=1))
    protos = build_all_prototypes(_records(data), _corpus(data),
                                  restrict_to=ClassIndexSets(frozenset({0}), frozenset({1})))
    assert list(protos) == [0]
    single = [c for c in _corpus(data) if c.class_index == 0]
    recs0 = [r for r in _records(data) if r.label == 0]
    assert list(build_all_prototypes(recs0, single)) == [0]
    with pytest.raises(ValidationError, match=r"\[1\]"):
        build_all_prototypes(_records(data), single)


def test_template_prototypes():
    protos = template_prototypes({0: np.array([3.0, 4.0]), 1: np.array([0.0, 2.0])}, [0, 1])
    np.testing.assert_allclose(protos[0].prototype, [0.6, 0.8])
    with pytest.raises(ValidationError):
        template_prototypes({0: np.array([1.0, 0.0])}, [0, 1])


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=40))
def test_kept_set_never_empty(scores):
    kept, stats = prune(scores)
    assert kept
    assert stats.mad >= 0 and np.all(stats.zscores >= 0)
