"""White-box attacks in raw pixel space.

All attacks take images in [0, 1] and return images in [0, 1]. Budgets are
raw-pixel radii; the model applies dataset normalization internally, so the
input gradient already includes the normalization map.

Gradient-sign attacks ascend the cross-entropy of the true label, computed
from the logits with a stable log-softmax (same function as -log f_y(x)).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .losses import cross_entropy_logits
from .tensor import Tensor

FAMILIES = ("fgsm", "pgd", "bim_linf", "bim_l2", "mim", "cw")
LINF_FAMILIES = ("fgsm", "pgd", "bim_linf", "mim", "cw")


class ConstraintViolation(AssertionError):
    pass


@dataclass(frozen=True)
class CWParams:
    confidence: float = 0.0
    constant: float = 1.0
    iterations: int = 100
    lr: float = 0.01


@dataclass(frozen=True)
class AttackSpec:
    """Attack family plus budget.

    ``epsilon`` is an L-infinity radius except for ``bim_l2`` where it is an
    L2 radius. For ``cw`` a finite epsilon bounds the perturbation in
    L-infinity; ``None`` leaves it unbounded.
    """

    family: str
    epsilon: Optional[float] = 0.3
    steps: int = 1
    step_size: Optional[float] = None
    decay: float = 1.0
    random_start: bool = False
    cw: CWParams = field(default_factory=CWParams)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if self.epsilon is None and self.family != "cw":
            raise ValueError(f"{self.family} needs a finite epsilon")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.family in ("pgd", "bim_linf", "bim_l2", "mim") and not (self.step_size and self.step_size > 0):
            raise ValueError(f"{self.family} needs a positive step size")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        if self.cw.iterations < 1:
            raise ValueError("cw iterations must be >= 1")

    @classmethod
    def default(cls, family: str, epsilon: Optional[float] = 0.3, **overrides) -> "AttackSpec":
        """Evaluation defaults per family (PGD 40 x 0.01 with random start,
        BIM and MIM 10 steps of epsilon/10, CW 100 Adam steps at constant 1)."""
        eps = epsilon if epsilon is not None else 0.0
        base = {
            "fgsm": dict(steps=1),
            "pgd": dict(steps=40, step_size=0.01, random_start=True),
            "bim_linf": dict(steps=10, step_size=eps / 10 or 0.01),
            "bim_l2": dict(steps=10, step_size=eps / 10 or 0.01),
            "mim": dict(steps=10, step_size=eps / 10 or 0.01, decay=1.0),
            "cw": dict(steps=1),
        }[family]
        base.update(overrides)
        return cls(family, epsilon, **base)

    @property
    def norm(self) -> Optional[str]:
        if self.family == "bim_l2":
            return "l2"
        if self.family == "cw" and self.epsilon is None:
            return None
        return "linf"


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    norm: Optional[str] = "linf"
    epsilon: Optional[float] = None

    def check(self, tol: Optional[float] = None) -> None:
        """Raise ConstraintViolation unless every example is in the box and ball."""
        check_constraints(self.originals, self.adversarials, self.norm, self.epsilon, tol)


def check_constraints(x0: np.ndarray, x: np.ndarray, norm: Optional[str], eps: Optional[float],
                      tol: Optional[float] = None) -> None:
    if x.min(initial=0.0) < 0 or x.max(initial=1.0) > 1:
        raise ConstraintViolation("adversarial pixels leave [0, 1]")
    if norm is None or eps is None:
        return
    d = (x.astype(np.float64) - x0.astype(np.float64)).reshape(len(x), -1)
    if norm == "linf":
        worst = np.abs(d).max(axis=1, initial=0.0)
        tol = 1e-6 if tol is None else tol
    else:
        worst = np.sqrt((d * d).sum(axis=1))
        tol = 1e-5 if tol is None else tol
    if np.any(worst > eps + tol):
        raise ConstraintViolation(f"{norm} distance {worst.max():.6g} exceeds epsilon {eps}")


def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d/dx of the summed cross-entropy; parameter gradients are not computed."""
    xt = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    loss = cross_entropy_logits(model.logits(xt), labels, reduction="sum")
    (g,) = T.grad(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def project_linf(x0: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def project_l2(x0: np.ndarray, x: np.ndarray, eps: float, box: bool = True) -> np.ndarray:
    d = x - x0
    n = np.sqrt((d.reshape(len(d), -1).astype(np.float64) ** 2).sum(axis=1))
    scale = np.where(n > eps, eps / np.maximum(n, 1e-30), 1.0).astype(x.dtype)
    out = x0 + d * scale.reshape((-1,) + (1,) * (d.ndim - 1))
    return np.clip(out, 0.0, 1.0) if box else out


def _finish(model, x0, adv, labels, norm, eps) -> AdversarialBatch:
    pred = model.predict(adv)
    batch = AdversarialBatch(x0, adv, np.asarray(labels), pred != np.asarray(labels), norm, eps)
    batch.check()
    return batch


def fgsm(model, x, labels, epsilon: float) -> AdversarialBatch:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x0 = np.asarray(x, dtype=model.dtype)
    g = input_gradient(model, x0, labels)
    adv = np.clip(x0 + epsilon * np.sign(g), 0.0, 1.0).astype(x0.dtype)
    return _finish(model, x0, adv, labels, "linf", epsilon)


def _linf_iterate(model, x0, labels, eps, steps, step_size, start, decay=None):
    x = start
    acc = np.zeros_like(x0) if decay is not None else None
    for _ in range(steps):
        g = input_gradient(model, x, labels)
        if decay is not None:
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
            acc = decay * acc + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            g = acc
        x = project_linf(x0, x + step_size * np.sign(g), eps).astype(x0.dtype)
        check_constraints(x0, x, "linf", eps)
    return x


def pgd(model, x, labels, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> AdversarialBatch:
    """L-infinity projected gradient ascent with optional uniform random start."""
    x0 = np.asarray(x, dtype=model.dtype)
    eps = spec.epsilon
    if spec.random_start:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        start = np.clip(x0 + rng.uniform(-eps, eps, size=x0.shape).astype(x0.dtype), 0.0, 1.0)
    else:
        start = x0
    adv = _linf_iterate(model, x0, labels, eps, spec.steps, spec.step_size, start)
    return _finish(model, x0, adv, labels, "linf", eps)


def bim_linf(model, x, labels, spec: AttackSpec) -> AdversarialBatch:
    return pgd(model, x, labels, replace(spec, random_start=False))


def bim_l2(model, x, labels, spec: AttackSpec) -> AdversarialBatch:
    x0 = np.asarray(x, dtype=model.dtype)
    eps = spec.epsilon
    adv = x0
    for _ in range(spec.steps):
        g = input_gradient(model, adv, labels)
        n = np.sqrt((g.reshape(len(g), -1).astype(np.float64) ** 2).sum(axis=1))
        n = n.reshape((-1,) + (1,) * (g.ndim - 1))
        # zero gradient: no step for that example
        step = np.divide(g, n, out=np.zeros_like(g), where=n > 0).astype(x0.dtype)
        adv = project_l2(x0, adv + spec.step_size * step, eps).astype(x0.dtype)
        check_constraints(x0, adv, "l2", eps)
    return _finish(model, x0, adv, labels, "l2", eps)


def mim(model, x, labels, spec: AttackSpec) -> AdversarialBatch:
    """Momentum iterative method: accumulate L1-normalized gradients, step by sign."""
    x0 = np.asarray(x, dtype=model.dtype)
    adv = _linf_iterate(model, x0, labels, spec.epsilon, spec.steps, spec.step_size, x0, decay=spec.decay)
    return _finish(model, x0, adv, labels, "linf", spec.epsilon)


def _runner_up(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    masked = z.copy()
    masked[np.arange(len(z)), labels] = -np.inf
    return masked.argmax(axis=1)


def cw(model, x, labels, spec: AttackSpec) -> AdversarialBatch:
    """Carlini-Wagner L2 with a fixed trade-off constant (no binary search).

    Minimizes ||delta||^2 + constant * max(0, z_y - max_{i != y} z_i + kappa)
    over a tanh-parameterized image with Adam. Returns, per example, the
    smallest-L2 misclassified iterate, or the original image if none.
    """
    p = spec.cw
    x0 = np.asarray(x, dtype=model.dtype)
    y = np.asarray(labels, dtype=np.int64)
    eps = spec.epsilon
    B = len(x0)
    w_data = np.arctanh(np.clip(2 * x0.astype(np.float64) - 1, -1 + 1e-6, 1 - 1e-6)).astype(x0.dtype)
    m_t = np.zeros_like(w_data)
    v_t = np.zeros_like(w_data)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    best = x0.copy()
    best_l2 = np.full(B, np.inf)
    x0_t = Tensor(x0)
    for it in range(p.iterations + 1):
        w = Tensor(w_data, requires_grad=True)
        img = (T.tanh(w) + 1.0) * 0.5
        delta = img - x0_t
        if eps is not None:
            delta = T.clip(delta, -eps, eps)
        adv = x0_t + delta
        z = model.logits(adv)
        other = _runner_up(z.data, y)
        margin = T.maximum(T.pick(z, y) - T.pick(z, other) + p.confidence, 0.0)
        l2 = T.sum(T.reshape(delta * delta, (B, -1)), axis=1)
        adv_np = np.clip(adv.data, 0.0, 1.0)
        fooled = z.data.argmax(axis=1) != y
        better = fooled & (l2.data < best_l2)
        best[better] = adv_np[better]
        best_l2[better] = l2.data[better]
        if it == p.iterations:
            break
        (g,) = T.grad(T.sum(l2 + p.constant * margin), [w])
        t = it + 1
        m_t = b1 * m_t + (1 - b1) * g
        v_t = b2 * v_t + (1 - b2) * g * g
        mhat = m_t / (1 - b1 ** t)
        vhat = v_t / (1 - b2 ** t)
        w_data = (w_data - p.lr * mhat / (np.sqrt(vhat) + adam_eps)).astype(x0.dtype)
    norm = "linf" if eps is not None else None
    return _finish(model, x0, best, y, norm, eps)


def attack(model, x, labels, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> AdversarialBatch:
    """Dispatch on ``spec.family``."""
    f = spec.family
    if f == "fgsm":
        return fgsm(model, x, labels, spec.epsilon)
    if f == "pgd":
        return pgd(model, x, labels, spec, rng)
    if f == "bim_linf":
        return bim_linf(model, x, labels, spec)
    if f == "bim_l2":
        return bim_l2(model, x, labels, spec)
    if f == "mim":
        return mim(model, x, labels, spec)
    return cw(model, x, labels, spec)
