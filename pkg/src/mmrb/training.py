"""Optimizers and the four training regimes.

std      cross-entropy on clean batches
csa      cross-entropy + expected cost, on clean and adversarial batches
cse      cross-entropy + expected cost + gamma * conv fuzziness, clean batches only
cse_adv  the cse objective with the csa batch schedule
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import attacks as A
from .data import Dataset, batches
from .losses import LossConfig, composite_loss, fuzziness
from .model import Model, save_checkpoint
from .tensor import NonFiniteError, backward

log = logging.getLogger(__name__)

REGIMES = ("std", "csa", "cse", "cse_adv")
SCHEDULES = ("clean_then_adv", "alternate_per_step")
_REGIME_MODES = {"std": ("std",), "csa": ("csa", "csa_l2"), "cse": ("cse",), "cse_adv": ("cse",)}


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def _grads(model: Model) -> dict:
    out = {}
    for name, p in model.params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        out[name] = p.grad.data
    return out


def sgd_step(opt: OptimizerState, model: Model) -> None:
    """v <- momentum * v + g;  w <- w - lr * v. Clears gradients."""
    grads = _grads(model)
    for name, p in model.params.items():
        g = grads[name]
        v = opt.slots.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.slots[name] = v
        p.data = (p.data - opt.lr * v).astype(p.dtype, copy=False)
        p.grad = None
    opt.step_count += 1


def adam_step(opt: OptimizerState, model: Model) -> None:
    grads = _grads(model)
    opt.step_count += 1
    t = opt.step_count
    for name, p in model.params.items():
        g = grads[name]
        m, v = opt.slots.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        opt.slots[name] = (m, v)
        mhat = m / (1 - opt.beta1 ** t)
        vhat = v / (1 - opt.beta2 ** t)
        p.data = (p.data - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)).astype(p.dtype, copy=False)
        p.grad = None


def optimizer_step(opt: OptimizerState, model: Model) -> None:
    (sgd_step if opt.kind == "sgd_momentum" else adam_step)(opt, model)


@dataclass
class TrainPlan:
    regime: str = "std"
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    attack: Optional[A.AttackSpec] = None
    schedule: str = "clean_then_adv"
    split_epoch: Optional[int] = None
    optimizer: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.95
    lr_halve_every: int = 0
    probe_attack: Optional[A.AttackSpec] = None
    probe_size: int = 1000
    eval_batch_size: int = 1000

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.loss.mode not in _REGIME_MODES[self.regime]:
            raise ValueError(f"regime {self.regime} cannot use loss mode {self.loss.mode!r}")
        if self.regime in ("csa", "cse_adv") and self.attack is None:
            raise ValueError(f"regime {self.regime} needs a training-time attack")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.split_epoch is None:
            self.split_epoch = self.epochs // 2
        if not 0 <= self.split_epoch <= self.epochs:
            raise ValueError(f"split epoch {self.split_epoch} outside [0, {self.epochs}]")

    @property
    def adversarial(self) -> bool:
        return self.regime in ("csa", "cse_adv")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: float
    cost: float
    fuzziness_term: float
    conv_fuzziness: float
    conv1_fuzziness: float
    test_overall: float = float("nan")
    test_per_class: Optional[np.ndarray] = None
    robust_overall: float = float("nan")
    robust_per_class: Optional[np.ndarray] = None
    seconds: float = 0.0


@dataclass
class TrainTrace:
    initial_conv_fuzziness: float
    initial_conv1_fuzziness: float
    records: list = field(default_factory=list)


@dataclass
class ClassAccuracy:
    overall: float
    per_class: np.ndarray
    counts: np.ndarray
    correct: np.ndarray


def tally(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> ClassAccuracy:
    labels = np.asarray(labels)
    hit = pred == labels
    counts = np.bincount(labels, minlength=num_classes)
    correct = np.bincount(labels[hit], minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)
    overall = float(hit.mean()) if len(labels) else float("nan")
    return ClassAccuracy(overall, per, counts, correct)


def evaluate_clean(model: Model, dataset: Dataset, batch_size: int = 1000) -> ClassAccuracy:
    preds = [model.predict(dataset.images[i : i + batch_size]) for i in range(0, len(dataset), batch_size)]
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return tally(pred, dataset.labels, model.num_classes)


def conv_fuzziness(model: Model, first_only: bool = False) -> float:
    kernels = list(model.conv_params.values())
    if first_only:
        kernels = kernels[:1]
    return fuzziness([k.detach() for k in kernels]).item()


def _update(model, opt, xb, yb, config, sums):
    try:
        loss, parts = composite_loss(model, xb, yb, config, return_parts=True)
    except NonFiniteError as exc:
        raise NonFiniteLossError(f"non-finite value while computing the loss: {exc}") from exc
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss {value} (ce={parts.ce}, cost={parts.cost}, fuzziness={parts.fuzziness})"
        )
    model.zero_grad()
    backward(loss)
    optimizer_step(opt, model)
    sums["loss"] += value
    sums["ce"] += parts.ce
    sums["cost"] += 0.0 if np.isnan(parts.cost) else parts.cost
    sums["fz"] += 0.0 if np.isnan(parts.fuzziness) else parts.fuzziness
    sums["n"] += 1


def train(plan: TrainPlan, model: Model, train_set: Dataset, test_set: Optional[Dataset] = None,
          checkpoint_path=None, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> tuple[Model, TrainTrace]:
    """Run ``plan`` on ``model`` in place; returns the model and its per-epoch trace."""
    if tuple(train_set.images.shape[1:]) != model.input_shape:
        raise ValueError(f"dataset images {train_set.images.shape[1:]} do not match model input {model.input_shape}")
    opt = OptimizerState(plan.optimizer, plan.lr, plan.momentum)
    it = batches(train_set, plan.batch_size, plan.seed, shuffle=True)
    trace = TrainTrace(conv_fuzziness(model), conv_fuzziness(model, first_only=True))
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        if plan.lr_halve_every:
            opt.lr = plan.lr * 0.5 ** (epoch // plan.lr_halve_every)
        sums = dict(loss=0.0, ce=0.0, cost=0.0, fz=0.0, n=0)
        adv_phase = plan.adversarial and (plan.schedule == "alternate_per_step" or epoch >= plan.split_epoch)
        clean_phase = not plan.adversarial or plan.schedule == "alternate_per_step" or epoch < plan.split_epoch
        for step, (xb, yb, _) in enumerate(it):
            xb = xb.astype(model.dtype, copy=False)
            adv = None
            if adv_phase:
                rng = np.random.default_rng([plan.seed, 1, epoch, step])
                adv = A.attack(model, xb, yb, plan.attack, rng=rng).adversarials
            if clean_phase:
                _update(model, opt, xb, yb, plan.loss, sums)
            if adv is not None:
                _update(model, opt, adv, yb, plan.loss, sums)
        n = max(sums["n"], 1)
        rec = EpochRecord(
            epoch=epoch + 1,
            loss=sums["loss"] / n,
            ce=sums["ce"] / n,
            cost=sums["cost"] / n if plan.loss.mode != "std" else float("nan"),
            fuzziness_term=sums["fz"] / n if plan.loss.mode == "cse" else float("nan"),
            conv_fuzziness=conv_fuzziness(model),
            conv1_fuzziness=conv_fuzziness(model, first_only=True),
        )
        if test_set is not None:
            acc = evaluate_clean(model, test_set, plan.eval_batch_size)
            rec.test_overall, rec.test_per_class = acc.overall, acc.per_class
            if plan.probe_attack is not None:
                from .evaluation import robust_accuracy

                probe = test_set.subset(min(plan.probe_size, len(test_set)))
                rep = robust_accuracy(model, probe, plan.probe_attack, batch_size=plan.eval_batch_size)
                rec.robust_overall, rec.robust_per_class = rep.overall, rep.per_class
        rec.seconds = time.perf_counter() - t0
        trace.records.append(rec)
        log.info("epoch %d loss=%.4f ce=%.4f conv_fuzz=%.4f test=%.4f (%.1fs)", rec.epoch, rec.loss, rec.ce,
                 rec.conv_fuzziness, rec.test_overall, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, trace
