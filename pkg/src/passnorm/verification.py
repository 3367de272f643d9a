"""Ownership evidence: fidelity gap, sign signatures, black-box triggers.

Nothing here decides ownership. Reports carry the raw quantities and leave
the judgement to whoever reads them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, TriggerSet
from .errors import KeystoreError, UsageError
from .models import Model
from .normalization import AWARE, FREE
from .passport import PassportBundle, extract_signature, generate_passports, transform_passport
from .training import evaluate


@dataclass
class VerificationReport:
    acc_deploy: float | None = None
    acc_correct_passport: float | None = None
    acc_forged_mean: float | None = None
    acc_forged: list[float] = field(default_factory=list)
    layer_flags: list[bool] = field(default_factory=list)
    layer_ids: list[int] = field(default_factory=list)
    bit_rate: float | None = None
    trigger_accuracy: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def layer_rate(self) -> float | None:
        return float(np.mean(self.layer_flags)) if self.layer_flags else None

    def merge(self, other: "VerificationReport") -> "VerificationReport":
        out = VerificationReport(**asdict(self))
        for k, v in asdict(other).items():
            if v not in (None, [], {}):
                setattr(out, k, v)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_rate"] = self.layer_rate
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        d = {k: v for k, v in d.items() if k != "layer_rate"}
        return cls(**d)

    def to_text(self) -> str:
        def pct(v):
            return "n/a" if v is None else f"{100 * v:6.2f}%"

        lines = ["verification report", "-------------------"]
        if self.acc_deploy is not None:
            lines.append(f"deployment accuracy (passport-free) : {pct(self.acc_deploy)}")
        if self.acc_correct_passport is not None:
            lines.append(f"correct-passport accuracy           : {pct(self.acc_correct_passport)}")
        if self.acc_forged:
            lines.append(f"forged-passport accuracy, mean of {len(self.acc_forged):<2}: {pct(self.acc_forged_mean)}")
        if self.layer_flags:
            flags = " ".join(f"L{i}:{'ok' if f else 'MISMATCH'}" for i, f in zip(self.layer_ids, self.layer_flags))
            lines.append(f"signature layers                    : {flags}")
            lines.append(f"signature bit rate                  : {pct(self.bit_rate)}")
        if self.trigger_accuracy is not None:
            lines.append(f"trigger-set accuracy                : {pct(self.trigger_accuracy)}")
        return "\n".join(lines) + "\n"


def fidelity_verify(model: Model, passports: PassportBundle, dataset: Dataset, k_forgeries: int = 10, seed: int = 0) -> VerificationReport:
    """Accuracy without passport, with the owner's passport, and with forgeries.

    Forgeries are drawn exactly like genuine passports, from seeds derived
    from ``seed``.
    """
    if model.deployed:
        raise KeystoreError("model has no passport branch attached")
    if k_forgeries < 0:
        raise UsageError("k_forgeries must be >= 0")
    rep = VerificationReport(
        acc_deploy=evaluate(model, dataset, FREE),
        acc_correct_passport=evaluate(model, dataset, AWARE, passports),
    )
    seeds = np.random.SeedSequence([int(seed), 0xF0C6]).generate_state(max(k_forgeries, 1))
    for j in range(k_forgeries):
        if model.protected_layers:
            forged = generate_passports(model, f"forger-{j}", int(seeds[j]))
        else:  # nothing to forge: the aware path is the free path
            forged = PassportBundle([], [], f"forger-{j}", int(seeds[j]))
        rep.acc_forged.append(evaluate(model, dataset, AWARE, forged))
    if rep.acc_forged:
        rep.acc_forged_mean = float(np.mean(rep.acc_forged))
    rep.meta = {"k_forgeries": k_forgeries, "seed": int(seed), "n_samples": len(dataset)}
    return rep


def signature_bits(model: Model, passports: PassportBundle) -> list[tuple[np.ndarray, np.ndarray]]:
    """Current sign bits of ``wp`` per passport layer, in bundle order."""
    wps = wp_vectors_for(model, passports)
    return [(extract_signature(wps[p.layer_id][0]), extract_signature(wps[p.layer_id][1])) for p in passports.passports]


def wp_vectors_for(model: Model, passports: PassportBundle):
    """Like :func:`~passnorm.training.wp_vectors` but driven by the bundle's layers.

    Works on deployed models too: only the precedent kernels are needed.
    """
    out = {}
    for p in passports.passports:
        if model.spec.precedent(p.layer_id) is None or p.layer_id not in model.norms:
            raise KeystoreError(f"passport layer {p.layer_id} is not a norm layer of this model")
        W = model.W_c(p.layer_id)
        out[p.layer_id] = (transform_passport(W, p.p_gamma, p.mode), transform_passport(W, p.p_beta, p.mode))
    return out


def detect_signature(model: Model, passports: PassportBundle, expected=None) -> tuple[list[bool], float]:
    """Per-layer exact-match flags and the overall matched-bit fraction.

    ``expected`` defaults to the bundle's target signs mapped to bits; a layer
    counts as detected only if both its gamma and beta bit strings match.
    """
    expected = passports.expected_bits() if expected is None else expected
    if len(expected) != len(passports.passports):
        raise UsageError(f"{len(expected)} expected signatures for {len(passports.passports)} layers")
    got = signature_bits(model, passports)
    flags, matched, total = [], 0, 0
    for (bg, bb), (eg, eb) in zip(got, expected):
        eg, eb = np.asarray(eg), np.asarray(eb)
        if eg.shape != bg.shape or eb.shape != bb.shape:
            raise UsageError("expected signature length does not match layer channel count")
        m = int((bg == eg).sum() + (bb == eb).sum())
        matched += m
        total += bg.size + bb.size
        flags.append(m == bg.size + bb.size)
    return flags, matched / total


def signature_report(model: Model, passports: PassportBundle, expected=None) -> VerificationReport:
    flags, rate = detect_signature(model, passports, expected)
    return VerificationReport(layer_flags=flags, layer_ids=passports.layer_ids, bit_rate=rate)


def blackbox_verify(predict: Callable[[np.ndarray], np.ndarray], trigger_set: TriggerSet) -> float:
    """Fraction of trigger samples the opaque ``predict`` maps to their labels."""
    if len(trigger_set) == 0:
        raise UsageError("empty trigger set")
    pred = np.asarray(predict(trigger_set.X)).reshape(-1)
    return float((pred == trigger_set.y).mean())


def chance_band(num_classes: int, n: int, sigmas: float = 3.0) -> tuple[float, float]:
    """Binomial ``sigmas``-sigma interval around chance accuracy for ``n`` trials."""
    p = 1.0 / num_classes
    half = sigmas * np.sqrt(p * (1 - p) / n)
    return p - half, p + half
