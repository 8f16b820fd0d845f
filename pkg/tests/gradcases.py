"""Differentiable operations and composite losses paired with input generators.

Each case is ``(name, fn, gens)``: ``fn`` maps Tensors to a scalar Tensor and
``gens`` draws float64 inputs from a Generator. ``directional_check`` compares
the autodiff directional derivative with a central difference.
"""

import numpy as np

from mmrb import ops
from mmrb import tensor as T
from mmrb.losses import (CostMatrix, LossConfig, composite_loss, cost_term, cross_entropy,
                         cross_entropy_logits, fuzziness, l2_penalty)
from mmrb.model import build_lenet
from mmrb.tensor import Tensor, default_dtype


def _normal(*shape, scale=1.0):
    return lambda r: r.normal(0, scale, size=shape)


def _positive(*shape):
    return lambda r: r.uniform(0.5, 2.0, size=shape)


def _weights(*shape):
    # a fixed random projection turns any tensor into a scalar with a generic gradient
    w = np.random.default_rng(99).normal(size=shape)
    return Tensor(w)


def _proj(t):
    return T.sum(t * _weights(*t.shape))


LABELS = np.array([0, 3, 1, 2])
COST = CostMatrix(4, 1, 10.0)


def _probs(r):
    z = r.normal(size=(4, 4))
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


_MODEL = None


def _model():
    global _MODEL
    if _MODEL is None:
        _MODEL = build_lenet(1, 8, (2, 3), 1, (6, 5), 4, seed=5, kernel=3, dtype=np.float64)
    return _MODEL


def _composite(mode):
    cfg = LossConfig(mode, gamma=0.7, lam=0.3, cost=None if mode == "std" else COST)

    def fn(x, k1, wd):
        m = _model()
        m.params["conv1.weight"] = k1
        m.params["dense3.weight"] = wd
        return composite_loss(m, x, LABELS, cfg)

    shapes = _model().param_shapes()
    return fn, [lambda r: r.uniform(0, 1, size=(4, 1, 8, 8)), _normal(*shapes["conv1.weight"], scale=0.5),
                _normal(*shapes["dense3.weight"], scale=0.5)]


CASES = [
    ("add", lambda a, b: _proj(a + b), [_normal(3, 4), _normal(3, 4)]),
    ("add_scalar", lambda a, b: _proj(a + b), [_normal(3, 4), _normal()]),
    ("add_row_bias", lambda a, b: _proj(a + b), [_normal(3, 4), _normal(4)]),
    ("sub", lambda a, b: _proj(a - b), [_normal(3, 4), _normal(3, 4)]),
    ("mul", lambda a, b: _proj(a * b), [_normal(3, 4), _normal(3, 4)]),
    ("div", lambda a, b: _proj(a / b), [_normal(3, 4), _positive(3, 4)]),
    ("neg", lambda a: _proj(-a), [_normal(5)]),
    ("abs", lambda a: _proj(T.abs(a)), [_normal(6)]),
    ("exp", lambda a: _proj(T.exp(a)), [_normal(6)]),
    ("log", lambda a: _proj(T.log(a)), [_positive(6)]),
    ("tanh", lambda a: _proj(T.tanh(a)), [_normal(6)]),
    ("maximum", lambda a, b: _proj(T.maximum(a, b)), [_normal(6), _normal(6)]),
    ("minimum", lambda a, b: _proj(T.minimum(a, b)), [_normal(6), _normal(6)]),
    ("clip", lambda a: _proj(T.clip(a, -0.5, 0.5)), [_normal(8)]),
    ("sum", lambda a: T.sum(a * a), [_normal(3, 4)]),
    ("sum_axis", lambda a: _proj(T.sum(a, axis=1)), [_normal(3, 4)]),
    ("mean", lambda a: T.mean(a * a), [_normal(3, 4)]),
    ("reshape", lambda a: _proj(T.reshape(a, (4, 3))), [_normal(3, 4)]),
    ("pick", lambda a: _proj(T.pick(a, np.array([2, 0, 1]))), [_normal(3, 4)]),
    ("matmul", lambda a, b: _proj(a @ b), [_normal(3, 4), _normal(4, 5)]),
    ("relu", lambda a: _proj(ops.relu(a)), [_normal(3, 4)]),
    ("softmax", lambda a: _proj(ops.softmax(a)), [_normal(3, 4)]),
    ("log_softmax", lambda a: _proj(ops.log_softmax(a)), [_normal(3, 4)]),
    ("flatten", lambda a: _proj(ops.flatten(a)), [_normal(2, 2, 3, 3)]),
    ("conv2d", lambda x, w, b: _proj(ops.conv2d(x, w, b, padding=1)), [_normal(2, 2, 5, 5), _normal(3, 2, 3, 3),
                                                                     _normal(3)]),
    ("conv2d_stride2", lambda x, w: _proj(ops.conv2d(x, w, None, padding=0, stride=2)),
     [_normal(1, 2, 7, 7), _normal(2, 2, 3, 3)]),
    ("maxpool2d", lambda x: _proj(ops.maxpool2d(x, 2, 2)), [_normal(2, 2, 6, 6)]),
    ("relu_conv", lambda x, w: _proj(ops.relu(ops.conv2d(x, w, None, padding=2))), [_normal(1, 1, 5, 5),
                                                                                    _normal(2, 1, 3, 3)]),
    ("cross_entropy", lambda p: cross_entropy(p, LABELS), [_probs]),
    ("cross_entropy_logits", lambda z: cross_entropy_logits(z, LABELS), [_normal(4, 4)]),
    ("cost_term", lambda p: cost_term(p, LABELS, COST), [_probs]),
    ("fuzziness", lambda a, b: fuzziness([a, b]), [_normal(2, 1, 3, 3), _normal(4, 2, 3, 3)]),
    ("l2_penalty", lambda a, b: l2_penalty([a, b]), [_normal(3, 3), _normal(4)]),
    ("loss_std", *_composite("std")),
    ("loss_csa", *_composite("csa")),
    ("loss_csa_l2", *_composite("csa_l2")),
    ("loss_cse", *_composite("cse")),
]


def directional_check(fn, gens, rng, h: float = 1e-6) -> float:
    """Relative error between autodiff and central-difference directional derivatives."""
    with default_dtype(np.float64):
        xs = [np.asarray(g(rng), dtype=np.float64) for g in gens]
        ds = [rng.normal(size=x.shape) for x in xs]
        leaves = [Tensor(x, requires_grad=True) for x in xs]
        grads = T.grad(fn(*leaves), leaves)
        analytic = float(sum(np.sum(g * d) for g, d in zip(grads, ds)))
        plus = fn(*[Tensor(x + h * d) for x, d in zip(xs, ds)]).item()
        minus = fn(*[Tensor(x - h * d) for x, d in zip(xs, ds)]).item()
    numeric = (plus - minus) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
