"""Training objective and the two-branch schedule.

The objective for one step is::

    CE(task batch) + lambda1 * CE(trigger batch) + lambda2 * sum_l sum_i sum_{g,b} hinge

where the hinge pushes every ``wp`` entry of every protected layer onto the
owner's target sign with margin ``alpha0``. Cross-entropies are batch means.
The hinge only applies on passport-aware steps.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tensor, cross_entropy, make_rng, sgd_step, zero_grad
from .data import Dataset, TriggerSet
from .errors import TrainingDiverged, UninitializedStatisticsError, UsageError
from .models import Model
from .normalization import AWARE, FREE, BranchMode
from .passport import ALPHA0, PassportBundle, signature_hinge_loss, transform_passport

logger = logging.getLogger(__name__)

ALTERNATING = "alternating"
SIMULTANEOUS = "simultaneous"


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 2.0
    alpha0: float = ALPHA0
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    passport_ratio: float = 0.5
    schedule: str = ALTERNATING
    trigger_batch: int = 32
    seed: int = 0
    recalibrate: bool = True

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise UsageError("lambda1 and lambda2 must be non-negative")
        if self.alpha0 <= 0:
            raise UsageError("alpha0 must be positive")
        if not 0.0 < self.passport_ratio <= 1.0:
            raise UsageError("passport_ratio must lie in (0, 1]")
        if self.schedule not in (ALTERNATING, SIMULTANEOUS):
            raise UsageError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise UsageError("epochs >= 0, batch_size >= 1 and lr >= 0 are required")


@dataclass
class History:
    records: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "History":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def last(self) -> dict:
        return self.records[-1] if self.records else {}


def wp_vectors(model: Model, passports: PassportBundle) -> dict[int, tuple[Tensor, Tensor]]:
    """``(wp_gamma, wp_beta)`` per protected layer, differentiable in ``W_c``."""
    by_layer = passports.by_layer()
    out = {}
    for i in model.protected_layers:
        p = by_layer[i]
        out[i] = (transform_passport(model.W_c(i), p.p_gamma, p.mode), transform_passport(model.W_c(i), p.p_beta, p.mode))
    return out


def signature_loss(model: Model, passports: PassportBundle, alpha0: float = ALPHA0, wps=None) -> Tensor:
    """Sum of the hinge terms over protected layers, channels and {gamma, beta}."""
    wps = wp_vectors(model, passports) if wps is None else wps
    signs = passports.signs_by_layer()
    total = Tensor(np.zeros((), np.float32))
    for i, (wg, wb) in wps.items():
        sg, sb = signs[i]
        total = total + signature_hinge_loss(wg, sg, alpha0) + signature_hinge_loss(wb, sb, alpha0)
    return total


def loss_terms(
    model: Model,
    batch_s: tuple[np.ndarray, np.ndarray],
    batch_t: tuple[np.ndarray, np.ndarray] | None,
    passports: PassportBundle | None,
    config: TrainConfig,
    branch: BranchMode,
    training: bool = True,
) -> dict[str, Tensor]:
    """The three objective terms and their weighted total for one batch."""
    branch = BranchMode(branch)
    if branch is AWARE and passports is None:
        raise UsageError("the passport-aware branch needs passports")
    xs, ys = batch_s
    use_trigger = config.lambda1 > 0
    if use_trigger and batch_t is None:
        raise UsageError("lambda1 > 0 needs a trigger batch")
    if use_trigger:
        xt, yt = batch_t
        x = np.concatenate([np.asarray(xs, np.float32), np.asarray(xt, np.float32)])
    else:
        x = xs
    logits, wps = model.run(x, branch, passports, training)
    n = len(ys)
    terms = {"task": cross_entropy(logits[:n] if use_trigger else logits, ys)}
    total = terms["task"]
    if use_trigger:
        terms["trigger"] = cross_entropy(logits[n:], yt)
        total = total + config.lambda1 * terms["trigger"]
    if branch is AWARE and model.protected_layers:
        terms["hinge"] = signature_loss(model, passports, config.alpha0, wps)
        if config.lambda2 > 0:
            total = total + config.lambda2 * terms["hinge"]
    terms["total"] = total
    return terms


def total_loss(model, batch_s, batch_t, passports, config: TrainConfig, branch: BranchMode) -> Tensor:
    return loss_terms(model, batch_s, batch_t, passports, config, branch)["total"]


def evaluate(model: Model, data: Dataset, branch: BranchMode = FREE, passports: PassportBundle | None = None, batch: int = 512) -> float:
    """Inference-mode accuracy in [0, 1]."""
    correct = 0
    for start in range(0, len(data), batch):
        logits, _ = model.run(data.X[start : start + batch], branch, passports, training=False)
        correct += int((logits.data.argmax(axis=1) == data.y[start : start + batch]).sum())
    return correct / len(data)


def predictor(model: Model, branch: BranchMode = FREE, passports: PassportBundle | None = None) -> Callable:
    """Opaque ``samples -> labels`` function over a frozen model."""

    def predict(x):
        logits, _ = model.run(np.asarray(x, np.float32), branch, passports, training=False)
        return logits.data.argmax(axis=1)

    return predict


def branch_schedule(steps: int, ratio: float, seed: int) -> np.ndarray:
    """Boolean per step: True means the step trains the passport-aware branch."""
    rng = make_rng(np.random.SeedSequence([int(seed), 0x5C4ED]).generate_state(1)[0])
    return rng.random(steps) < ratio


def _step_params(model: Model, branch: BranchMode) -> list[Tensor]:
    return model.aware_params() if branch is AWARE else model.free_params()


def train(
    model: Model,
    train_set: Dataset,
    trigger_set: TriggerSet | None,
    passports: PassportBundle | None,
    config: TrainConfig,
    eval_every: int = 1,
) -> tuple[Model, History]:
    """Train ``model`` in place; returns it with per-epoch history.

    Alternating schedule: each step trains exactly one branch, chosen by
    :func:`branch_schedule`. Simultaneous: both branch losses are summed.
    Without passports (or protected layers) every step is passport-free.
    """
    config.validate()
    if config.lambda1 > 0 and trigger_set is None:
        raise UsageError("lambda1 > 0 needs a trigger set")
    protected = bool(model.protected_layers) and passports is not None and not model.deployed
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = branch_schedule(steps_per_epoch * config.epochs, config.passport_ratio, config.seed)
    rng = make_rng(config.seed)
    history = History()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch_s = (train_set.X[idx], train_set.y[idx])
            batch_t = None
            if trigger_set is not None and config.lambda1 > 0:
                tidx = rng.integers(0, len(trigger_set), size=min(config.trigger_batch, len(trigger_set)))
                batch_t = (trigger_set.X[tidx], trigger_set.y[tidx])
            try:
                if protected and config.schedule == SIMULTANEOUS:
                    lf = loss_terms(model, batch_s, batch_t, None, config, FREE)["total"]
                    la = loss_terms(model, batch_s, batch_t, passports, config, AWARE)["total"]
                    loss = lf + la
                    params = model.free_params() + model.branch_params()
                else:
                    branch = AWARE if protected and schedule[step] else FREE
                    loss = loss_terms(model, batch_s, batch_t, passports if branch is AWARE else None, config, branch)["total"]
                    params = _step_params(model, branch)
                zero_grad(params)
                loss.backward()
                sgd_step(params, config.lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            losses.append(loss.item())
            step += 1
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == config.epochs):
            rec = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "acc_free": _safe_eval(model, train_set, FREE, None)}
            if protected:
                rec["acc_aware"] = _safe_eval(model, train_set, AWARE, passports)
                rec["hinge"] = float(signature_loss(model, passports, config.alpha0).item())
            history.records.append(rec)
            logger.debug("epoch %d: %s", epoch + 1, rec)
    if config.recalibrate and config.epochs > 0:
        recalibrate_statistics(model, train_set, trigger_set, passports if protected else None, config)
        if history.records and eval_every:
            rec = history.records[-1]
            rec["acc_free"] = _safe_eval(model, train_set, FREE, None)
            if protected:
                rec["acc_aware"] = _safe_eval(model, train_set, AWARE, passports)
    return model, history


def recalibrate_statistics(
    model: Model,
    train_set: Dataset,
    trigger_set: TriggerSet | None,
    passports: PassportBundle | None,
    config: TrainConfig,
) -> None:
    """Replace BatchNorm running buffers by the plain average of batch statistics.

    One shuffled pass per branch, with batches composed exactly as in training
    (task samples plus a trigger batch when ``lambda1 > 0``). The moving average
    otherwise remembers mostly the last few SGD steps, which at a fixed learning
    rate can leave the inference statistics far from the final weights. Each
    branch writes only its own buffers; weights are untouched.
    """
    states = [st for st in model.norms.values() if st.kind.name == "bn"]
    if not states:
        return
    branches = [(FREE, None)]
    if passports is not None and any(st.stat_slot(AWARE) != st.stat_slot(FREE) for st in states):
        branches.append((AWARE, passports))
    rng = make_rng(np.random.SeedSequence([int(config.seed), 0xB1A5]).generate_state(1)[0])
    n = len(train_set)
    saved = [st.momentum for st in states]
    try:
        for branch, pp in branches:
            order = rng.permutation(n)
            for k, start in enumerate(range(0, n, config.batch_size)):
                x = train_set.X[order[start : start + config.batch_size]]
                if trigger_set is not None and config.lambda1 > 0:
                    tidx = rng.integers(0, len(trigger_set), size=min(config.trigger_batch, len(trigger_set)))
                    x = np.concatenate([np.asarray(x, np.float32), np.asarray(trigger_set.X[tidx], np.float32)])
                for st in states:
                    st.momentum = 1.0 / (k + 1)
                model.run(x, branch, pp, training=True)
    finally:
        for st, m in zip(states, saved):
            st.momentum = m


def _safe_eval(model: Model, data: Dataset, branch: BranchMode, passports) -> float | None:
    try:
        return evaluate(model, data, branch, passports)
    except UninitializedStatisticsError:  # tiny ratio: aware buffers not yet touched
        return None


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
