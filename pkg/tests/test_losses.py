import math

import numpy as np
import pytest
from oracles import binary_entropy_mean

from mmrb import tensor as T
from mmrb.losses import (CostMatrix, LossConfig, composite_loss, cost_term, cross_entropy, fuzziness, l2_penalty)
from mmrb.model import Model, build_lenet
from mmrb.tensor import Tensor, default_dtype


def test_cost_matrix_entries():
    C = CostMatrix(4, 2, 10.0).entries
    assert np.all(np.diag(C) == 0)
    assert C[2, 0] == C[0, 2] == C[2, 3] == 10.0
    assert C[0, 1] == C[3, 1] == 1.0


@pytest.mark.parametrize("kw", [dict(m=1, p=0), dict(m=4, p=4), dict(m=4, p=0, c=0.5)])
def test_cost_matrix_validation(kw):
    with pytest.raises(ValueError):
        CostMatrix(**kw)


def test_cross_entropy_perfect_and_uniform():
    probs = Tensor(np.eye(4)[[0, 2, 1]])
    assert cross_entropy(probs, [0, 2, 1]).item() == pytest.approx(0.0, abs=1e-6)
    assert cross_entropy(Tensor(np.full((5, 10), 0.1)), np.arange(5)).item() == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_matches_formula(rng):
    p = rng.dirichlet(np.ones(6), size=5)
    y = rng.integers(0, 6, size=5)
    with default_dtype(np.float64):
        got = cross_entropy(Tensor(p), y).item()
    assert got == pytest.approx(-np.mean(np.log(p[np.arange(5), y])), abs=1e-6)


def test_cross_entropy_floor_keeps_zero_probability_finite():
    assert np.isfinite(cross_entropy(Tensor([[0.0, 1.0]]), [0]).item())


def test_cost_term_cases():
    cm = CostMatrix(3, 0, 10.0)
    assert cost_term(Tensor([[0.0, 1.0, 0.0]]), [1], cm).item() == 0.0
    assert cost_term(Tensor([[0.2, 0.5, 0.3]], dtype=np.float64), [1], cm).item() == pytest.approx(2.3, abs=1e-12)


def test_cost_term_degenerate_c1(rng):
    p = rng.dirichlet(np.ones(5), size=6)
    y = rng.integers(0, 5, size=6)
    with default_dtype(np.float64):
        got = cost_term(Tensor(p), y, CostMatrix(5, 2, 1.0)).item()
    assert got == pytest.approx(np.mean(1 - p[np.arange(6), y]), abs=1e-12)


def test_cost_term_rejects_bad_labels():
    with pytest.raises(ValueError):
        cost_term(Tensor([[0.5, 0.5]]), [3], CostMatrix(2, 0))


def test_fuzziness_limits():
    assert fuzziness(Tensor(np.zeros(7), dtype=np.float64)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert fuzziness(Tensor([50.0, -50.0], dtype=np.float64)).item() == pytest.approx(0.0, abs=1e-18)


def test_fuzziness_scalar_value():
    # 1/(1+e) and its binary entropy, spelled out in float64
    rho = 1 / (1 + math.e)
    expected = -rho * math.log(rho) - (1 - rho) * math.log(1 - rho)
    assert rho == pytest.approx(0.26894, abs=1e-5)
    assert fuzziness(Tensor([1.0], dtype=np.float64)).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.58220, abs=1e-5)


def test_fuzziness_matches_entropy_oracle(rng):
    ws = [rng.normal(0, 2, size=(3, 2, 3, 3)), rng.normal(0, 0.1, size=(5,))]
    with default_dtype(np.float64):
        got = fuzziness([Tensor(w) for w in ws]).item()
    assert got == pytest.approx(binary_entropy_mean(np.concatenate([w.ravel() for w in ws])), abs=1e-12)


def test_fuzziness_extreme_weights_are_finite():
    t = Tensor([1e4, -1e4, 0.0], requires_grad=True)
    f = fuzziness(t)
    T.backward(f)
    assert np.isfinite(f.item()) and np.all(np.isfinite(t.grad.data))


def test_l2_penalty_values(rng):
    assert l2_penalty([Tensor(np.zeros(3))]).item() == 0.0
    assert l2_penalty([Tensor([3.0, 4.0])]).item() == 25.0
    ws = [rng.normal(size=(4, 3)), rng.normal(size=7)]
    with default_dtype(np.float64):
        got = l2_penalty([Tensor(w) for w in ws]).item()
    assert got == pytest.approx(sum(float((w ** 2).sum()) for w in ws), abs=1e-6)


def _model64(zero_conv=False):
    m = build_lenet(1, 12, (3, 4), 2, (16, 12), 10, seed=3, kernel=3, dtype=np.float64)
    if zero_conv:
        params = {n: (np.zeros_like(t.data) if n in m.conv_params else t.data) for n, t in m.params.items()}
        m = Model(m.layers, m.input_shape, params)
    return m


def test_composite_reductions(rng):
    m = _model64()
    x = rng.uniform(size=(6, 1, 12, 12))
    y = rng.integers(0, 10, size=6)
    cm = CostMatrix(10, 0, 10.0)
    std = composite_loss(m, x, y, LossConfig("std")).item()
    assert std == cross_entropy(m.forward(x), y).item()
    csa = composite_loss(m, x, y, LossConfig("csa", cost=cm)).item()
    cse0 = composite_loss(m, x, y, LossConfig("cse", gamma=0.0, cost=cm)).item()
    assert cse0 == csa


def test_composite_cse_on_zero_conv_kernels(rng):
    m = _model64(zero_conv=True)
    x = rng.uniform(size=(5, 1, 12, 12))
    y = rng.integers(0, 10, size=5)
    cm = CostMatrix(10, 3, 10.0)
    gamma = 2.5
    probs = m.forward(x).data
    ce = -np.mean(np.log(probs[np.arange(5), y]))
    cost = np.mean((probs * cm.entries.T[y]).sum(axis=1))
    total, parts = composite_loss(m, x, y, LossConfig("cse", gamma=gamma, cost=cm), return_parts=True)
    assert total.item() == pytest.approx(ce + cost + gamma * math.log(2), abs=1e-10)
    assert parts.fuzziness == pytest.approx(math.log(2), abs=1e-12)


def test_composite_l2_scopes(rng):
    m = _model64()
    x = rng.uniform(size=(2, 1, 12, 12))
    y = np.array([1, 2])
    cm = CostMatrix(10, 0)
    base = composite_loss(m, x, y, LossConfig("csa", cost=cm)).item()
    for scope, params in (("all", m.params.values()), ("conv", m.conv_params.values())):
        got = composite_loss(m, x, y, LossConfig("csa_l2", lam=0.01, cost=cm, l2_scope=scope)).item()
        sq = sum(float((p.data ** 2).sum()) for p in params)
        assert got == pytest.approx(base + 0.01 * sq, abs=1e-10)


@pytest.mark.parametrize("kw", [dict(mode="weird"), dict(mode="csa"), dict(mode="std", gamma=-1.0),
                                dict(mode="std", l2_scope="dense")])
def test_loss_config_validation(kw):
    with pytest.raises(ValueError):
        LossConfig(**kw)
