"""Robustness reports, convolution-weight diagnostics, and the sparse-vs-dense
input-sensitivity probe."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import attacks as A
from .data import Dataset
from .losses import fuzziness
from .model import Model
from .tensor import Tensor
from .training import tally


@dataclass
class RobustnessReport:
    model_id: str
    attack: A.AttackSpec
    epsilon: Optional[float]
    overall: float
    per_class: np.ndarray
    counts: np.ndarray
    correct: np.ndarray
    protected_class: Optional[int] = None

    @property
    def sample_count(self) -> int:
        return int(self.counts.sum())


def _attack_chunk(args):
    model, x, y, spec, seed = args
    rng = np.random.default_rng(seed)
    return A.attack(model, x, y, spec, rng=rng).adversarials


def adversarial_predictions(model: Model, dataset: Dataset, spec: A.AttackSpec, batch_size: int = 500,
                            workers: int = 1) -> np.ndarray:
    """Predicted class of every attacked test input.

    Batch ``i`` draws its random start from ``default_rng([spec.seed, i])``,
    so results do not depend on the worker count.
    """
    jobs = []
    for i, start in enumerate(range(0, len(dataset), batch_size)):
        sl = slice(start, start + batch_size)
        jobs.append((model, dataset.images[sl], dataset.labels[sl], spec, [spec.seed, i]))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            advs = list(pool.map(_attack_chunk, jobs))
    else:
        advs = [_attack_chunk(j) for j in jobs]
    if not advs:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([model.predict(a) for a in advs])


def robust_accuracy(model: Model, dataset: Dataset, spec: A.AttackSpec, batch_size: int = 500,
                    workers: int = 1, model_id: str = "", protected_class: Optional[int] = None) -> RobustnessReport:
    """Per-class accuracy on adversarial versions of ``dataset``.

    An example counts as correct only if its adversarial input is classified
    as the true label.
    """
    pred = adversarial_predictions(model, dataset, spec, batch_size, workers)
    acc = tally(pred, dataset.labels, model.num_classes)
    return RobustnessReport(model_id, spec, spec.epsilon, acc.overall, acc.per_class, acc.counts, acc.correct,
                            protected_class)


@dataclass
class WeightDiagnostics:
    layer: str
    profile: np.ndarray  # |w| sorted, largest first
    near_zero_fraction: float
    top: np.ndarray
    fuzziness: float
    tau: float


def layer_diagnostics(name: str, weights: np.ndarray, tau: float = 0.01, top_k: int = 5) -> WeightDiagnostics:
    if tau <= 0:
        raise ValueError("tau must be positive")
    mags = np.abs(np.asarray(weights, dtype=np.float64).reshape(-1))
    profile = np.sort(mags)[::-1]
    return WeightDiagnostics(
        layer=name,
        profile=profile,
        near_zero_fraction=float((mags < tau).mean()),
        top=profile[:top_k].copy(),
        fuzziness=fuzziness(Tensor(np.asarray(weights, dtype=np.float64).reshape(-1))).item()
        if mags.size else float("nan"),
        tau=tau,
    )


def weight_diagnostics(model: Model, tau: float = 0.01, top_k: int = 5) -> list[WeightDiagnostics]:
    """One diagnostics record per convolution kernel tensor, in layer order."""
    return [layer_diagnostics(name, t.data, tau, top_k) for name, t in model.conv_params.items()]


def profile_dump(diag: WeightDiagnostics) -> str:
    """Plain-text sorted-magnitude profile: one ``rank value`` pair per line."""
    lines = [f"# layer={diag.layer} tau={diag.tau} near_zero={diag.near_zero_fraction:.6g} "
             f"fuzziness={diag.fuzziness:.6g}"]
    lines += [f"{i} {v:.6g}" for i, v in enumerate(diag.profile)]
    return "\n".join(lines) + "\n"


def softmax_regression_input_grad(W: np.ndarray, x: np.ndarray, y: int) -> np.ndarray:
    """d/dx of -log softmax(W x)_y, i.e. W^T (softmax(W x) - onehot(y))."""
    z = W @ x
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    p[y] -= 1.0
    return W.T @ p


def minmax_sensitivity_probe(dims=(20, 10), p1: float = 0.05, trials: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean |dL/dx_i| for dense uniform versus sparse binary weights.

    ``dims`` is (inputs, classes). Each trial draws x ~ N(0, I), a random
    one-hot label, W_a with U(0, 1) entries and W_b with Bernoulli(p1)
    entries, and averages |dL/dx| over coordinates. Returns
    (uniform mean, sparse-binary mean).
    """
    if not 0 < p1 <= 1:
        raise ValueError("p1 must lie in (0, 1]")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n, m = dims
    rng = np.random.default_rng(seed)
    dense = sparse = 0.0
    for _ in range(trials):
        x = rng.standard_normal(n)
        y = int(rng.integers(m))
        Wa = rng.uniform(0.0, 1.0, size=(m, n))
        Wb = (rng.uniform(0.0, 1.0, size=(m, n)) < p1).astype(np.float64)
        dense += np.abs(softmax_regression_input_grad(Wa, x, y)).mean()
        sparse += np.abs(softmax_regression_input_grad(Wb, x, y)).mean()
    return dense / trials, sparse / trials


@dataclass
class ProtectionRow:
    attack: str
    epsilon: Optional[float]
    protected_class: int
    method: float
    baseline: float

    @property
    def delta(self) -> float:
        return self.method - self.baseline


@dataclass
class ProtectionSummary:
    rows: list

    @property
    def deltas(self) -> np.ndarray:
        return np.array([r.delta for r in self.rows])

    @property
    def wins(self) -> int:
        return int((self.deltas > 0).sum())

    @property
    def ties(self) -> int:
        return int((self.deltas == 0).sum())

    @property
    def losses(self) -> int:
        return int((self.deltas < 0).sum())


class UnpairedReportsError(ValueError):
    pass


def protection_comparison(pairs: Sequence[tuple[RobustnessReport, RobustnessReport]]) -> ProtectionSummary:
    """Compare protected-class accuracy of method A against baseline B.

    Each pair must share attack family and epsilon. The protected class comes
    from A; B's protected class must be the same or unset.
    """
    rows = []
    for a, b in pairs:
        if a.attack.family != b.attack.family or a.epsilon != b.epsilon:
            raise UnpairedReportsError(
                f"reports differ in attack: {a.attack.family}@{a.epsilon} vs {b.attack.family}@{b.epsilon}"
            )
        p = a.protected_class if a.protected_class is not None else b.protected_class
        if p is None:
            raise UnpairedReportsError("no protected class on either report")
        if b.protected_class is not None and a.protected_class is not None and b.protected_class != p:
            raise UnpairedReportsError(f"protected classes differ: {p} vs {b.protected_class}")
        rows.append(ProtectionRow(a.attack.family, a.epsilon, p, float(a.per_class[p]), float(b.per_class[p])))
    return ProtectionSummary(rows)
