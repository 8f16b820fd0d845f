"""Training objectives: cross-entropy, expected misclassification cost,
convolution-weight fuzziness, L2 penalty, and their combinations.

All batch terms are means over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12
MODES = ("std", "csa", "csa_l2", "cse")


@dataclass(frozen=True)
class CostMatrix:
    """Cost of predicting class i when the truth is j.

    Zero on the diagonal, ``c`` whenever the prediction or the truth is the
    protected class ``p``, and 1 elsewhere.
    """

    m: int
    p: int
    c: float = 10.0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.p < self.m:
            raise ValueError(f"protected class {self.p} outside [0, {self.m})")
        if self.c < 1:
            raise ValueError(f"cost constant must be >= 1, got {self.c}")

    @property
    def entries(self) -> np.ndarray:
        C = np.ones((self.m, self.m))
        C[self.p, :] = self.c
        C[:, self.p] = self.c
        np.fill_diagonal(C, 0.0)
        return C


@dataclass(frozen=True)
class LossConfig:
    mode: str = "std"
    gamma: float = 1.0
    lam: float = 5e-4
    cost: Optional[CostMatrix] = None
    # which parameters the L2 term covers: "all" or "conv"
    l2_scope: str = "all"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}; expected one of {MODES}")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if self.mode != "std" and self.cost is None:
            raise ValueError(f"loss mode {self.mode!r} requires a cost matrix")
        if self.l2_scope not in ("all", "conv"):
            raise ValueError(f"l2_scope must be 'all' or 'conv', got {self.l2_scope!r}")


def _labels(labels, m: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= m):
        raise ValueError(f"labels must lie in [0, {m})")
    return y


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p[b, y_b], with probabilities floored at 1e-12."""
    y = _labels(labels, probs.shape[1])
    picked = T.pick(probs, y)
    return -T.mean(T.log(T.maximum(picked, PROB_FLOOR)))


def cross_entropy_logits(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy from pre-softmax scores via a stable log-softmax."""
    from .ops import log_softmax

    y = _labels(labels, logits.shape[1])
    nll = -T.pick(log_softmax(logits), y)
    return T.sum(nll) if reduction == "sum" else T.mean(nll)


def cost_term(probs: Tensor, labels, cost: CostMatrix) -> Tensor:
    """Mean over the batch of sum_i probs[b, i] * C(i, y_b)."""
    if probs.shape[1] != cost.m:
        raise ValueError(f"probabilities have {probs.shape[1]} classes, cost matrix {cost.m}")
    y = _labels(labels, cost.m)
    weights = cost.entries.T[y].astype(probs.dtype)  # row b holds C(:, y_b)
    return T.mean(T.sum(probs * Tensor(weights), axis=1))


def fuzziness(weights) -> Tensor:
    """Mean binary entropy of rho_i = 1 / (1 + exp(|w_i|)) over all entries.

    Accepts one tensor or an iterable of tensors (flattened together).
    With a = |w| the entropy equals rho*a + log(1 + exp(-a)), which never
    overflows; its value lies in [0, ln 2].
    """
    if isinstance(weights, Tensor):
        weights = [weights]
    flat = [T.reshape(w, (-1,)) for w in weights]
    total = None
    n = 0
    for w in flat:
        a = T.abs(w)
        e = T.exp(-a)
        rho = e / (1.0 + e)
        h = T.sum(rho * a + T.log(1.0 + e))
        total = h if total is None else total + h
        n += w.size
    if n == 0:
        raise ValueError("fuzziness needs at least one weight")
    return total / n


def l2_penalty(params: Iterable[Tensor]) -> Tensor:
    """Sum of squared entries over ``params``."""
    total = None
    for w in params:
        s = T.sum(w * w)
        total = s if total is None else total + s
    return total if total is not None else Tensor(0.0)


@dataclass
class LossParts:
    total: Tensor
    ce: float
    cost: float = float("nan")
    fuzziness: float = float("nan")
    l2: float = float("nan")


def composite_loss(model, batch, labels, config: LossConfig, return_parts: bool = False):
    """Objective selected by ``config.mode``.

    std:    CE
    csa:    CE + cost term
    csa_l2: CE + cost term + lam * L2
    cse:    CE + cost term + gamma * fuzziness(conv kernels)
    """
    probs = model.forward(batch)
    ce = cross_entropy(probs, labels)
    total = ce
    parts = LossParts(total=ce, ce=ce.item())
    if config.mode != "std":
        if config.cost is None:
            raise ValueError(f"loss mode {config.mode!r} requires a cost matrix")
        ct = cost_term(probs, labels, config.cost)
        total = total + ct
        parts.cost = ct.item()
    if config.mode == "csa_l2":
        scope = model.params.values() if config.l2_scope == "all" else model.conv_params.values()
        l2 = l2_penalty(scope)
        total = total + config.lam * l2
        parts.l2 = l2.item()
    if config.mode == "cse":
        fz = fuzziness(list(model.conv_params.values()))
        total = total + config.gamma * fz
        parts.fuzziness = fz.item()
    parts.total = total
    return (total, parts) if return_parts else total
