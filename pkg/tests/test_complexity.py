from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from protodistill.complexity import PromptBudget, attention_overhead, budget_report, mlp_overhead, prompt_param_count
from protodistill.core import ValidationError


def test_prompt_param_count_examples():
    assert prompt_param_count(PromptBudget.vit_b32()) == 98_304
    zero = PromptBudget(768, 512, 12, 12, 0, 0, 49, 77)
    assert prompt_param_count(zero) == 0
    unit = PromptBudget(d_v=1, d_t=1, l_v=1, l_t=1, p_v=1, p_t=0, n_v=1, n_t=1)
    assert prompt_param_count(unit) == 1


def test_overhead_values():
    assert attention_overhead(49, 8, exact=True) == Fraction(848, 2401)
    assert f"{100 * attention_overhead(49, 8):.1f}" == "35.3"
    assert f"{100 * attention_overhead(77, 4):.1f}" == "10.7"
    assert f"{100 * mlp_overhead(49, 8):.1f}" == "16.3"
    assert f"{100 * mlp_overhead(77, 4):.1f}" == "5.2"
    assert attention_overhead(77, 4) == pytest.approx(0.1065, abs=3e-4)
    assert mlp_overhead(49, 8) == pytest.approx(0.1633, abs=3e-4)
    assert mlp_overhead(77, 4) == pytest.approx(0.0519, abs=3e-4)
    assert attention_overhead(10, 0) == 0 and mlp_overhead(10, 0) == 0
    assert attention_overhead(7, 7) == 3.0
    for bad in ((0, 1), (5, -1)):
        with pytest.raises(ValidationError):
            attention_overhead(*bad)
        with pytest.raises(ValidationError):
            mlp_overhead(*bad)


@given(st.integers(1, 500), st.integers(0, 500))
def test_overhead_identities(n, p):
    exact = attention_overhead(n, p, exact=True)
    assert exact == Fraction((n + p) ** 2 - n * n, n * n)
    assert exact >= 2 * mlp_overhead(n, p, exact=True)


sizes = st.integers(1, 64)


@given(sizes, sizes, sizes, sizes, st.integers(0, 64), st.integers(0, 64), st.integers(1, 5))
def test_param_count_linear(dv, dt, lv, lt, pv, pt, m):
    b = PromptBudget(dv, dt, lv, lt, pv, pt, 10, 10)
    base = prompt_param_count(b)
    assert base == lv * pv * dv + lt * pt * dt
    for field in ("d_v", "l_v", "p_v"):
        scaled = PromptBudget(**{**b.__dict__, field: getattr(b, field) * m})
        assert prompt_param_count(scaled) - lt * pt * dt == m * (lv * pv * dv)
    for field in ("d_t", "l_t", "p_t"):
        scaled = PromptBudget(**{**b.__dict__, field: getattr(b, field) * m})
        assert prompt_param_count(scaled) - lv * pv * dv == m * (lt * pt * dt)


def test_budget_report():
    rep = budget_report(PromptBudget.vit_b32())
    assert rep["prompt_params"] == 98_304
    assert rep["param_fraction"] == pytest.approx(98_304 / 87_849_216)
    assert f"{100 * rep['param_fraction']:.2f}" == "0.11"
    assert rep["below_one_percent"] is True
    assert rep["vision"]["attention_overhead"] == attention_overhead(49, 8)
    assert rep["text"]["mlp_overhead"] == mlp_overhead(77, 4)
    zero = budget_report(PromptBudget(768, 512, 12, 12, 0, 0, 49, 77, backbone_params=1000))
    assert zero["param_fraction"] == 0
    assert zero["vision"] == {"attention_overhead": 0.0, "mlp_overhead": 0.0}
    doubled = budget_report(PromptBudget(8, 8, 1, 1, 4, 4, 4, 4, backbone_params=1))
    assert doubled["vision"]["attention_overhead"] == 3.0


def test_class_token_option():
    rep = budget_report(PromptBudget.vit_b32(include_class_token=True))
    assert rep["vision"]["attention_overhead"] == attention_overhead(50, 8)
    assert rep["text"]["mlp_overhead"] == mlp_overhead(78, 4)


def test_budget_validation():
    with pytest.raises(ValidationError):
        PromptBudget(0, 1, 1, 1, 1, 1, 1, 1)
    with pytest.raises(ValidationError):
        PromptBudget(1, 1, 1, 1, -1, 1, 1, 1)
    with pytest.raises(ValidationError):
        budget_report(PromptBudget(1, 1, 1, 1, 1, 1, 1, 1))
