"""Fine-tuning, class-blind pruning and the two ambiguity (forgery) attacks.

Every attack works on a private clone and records its hyperparameters and
seeds in the returned :class:`AttackReport`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor, cross_entropy, make_rng, sgd_step, zero_grad
from .data import Dataset
from .errors import UsageError
from .models import Model, _he_uniform
from .normalization import AWARE, FREE
from .passport import ALPHA0, LayerPassport, PassportBundle, generate_passports, signature_hinge_loss
from .training import evaluate
from .verification import detect_signature, signature_bits

SWEEP_COLUMNS = ("rate", "accuracy", "bit_detection", "layer_detection")


@dataclass
class AttackReport:
    kind: str
    pre_accuracy: float | None = None
    post_accuracy: float | None = None
    bit_detection: float | None = None
    layer_detection: float | None = None
    params: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        return cls(**json.loads(text))

    def to_csv(self, columns=None) -> str:
        columns = list(columns or (self.rows[0].keys() if self.rows else SWEEP_COLUMNS))
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row.get(k)) for k in columns})
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)


def _detection(model: Model, passports: PassportBundle | None) -> tuple[float | None, float | None]:
    if passports is None:
        return None, None
    flags, rate = detect_signature(model, passports)
    return rate, float(np.mean(flags))


# -- fine-tuning ----------------------------------------------------------------


def finetune_attack(
    deployed: Model,
    new_dataset: Dataset,
    epochs: int,
    lr: float = 0.01,
    passports: PassportBundle | None = None,
    eval_set: Dataset | None = None,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[Model, AttackReport]:
    """Fine-tune every passport-free parameter of ``deployed`` on ``new_dataset``.

    The classifier head is re-initialized when the class count differs.
    ``passports`` are the owner's originals; signature detection only needs
    them and the fine-tuned kernels.
    """
    if not deployed.deployed:
        raise UsageError("fine-tuning attack expects a deployment model (export it first)")
    if epochs < 0 or lr < 0:
        raise UsageError("epochs and lr must be non-negative")
    model = deployed.clone()
    rng = make_rng(seed)
    head = max(model.weights)
    if new_dataset.num_classes != model.spec.num_classes:
        model.spec.layers[head] = dict(model.spec.layers[head], out=new_dataset.num_classes)
        model.spec.num_classes = new_dataset.num_classes
        n_in = model.weights[head].shape[0]
        model.weights[head] = _he_uniform(rng, (n_in, new_dataset.num_classes), n_in)
        if head in model.biases:
            model.biases[head] = Tensor(np.zeros(new_dataset.num_classes, np.float32), requires_grad=True)
    eval_set = eval_set or new_dataset
    pre = evaluate(model, eval_set) if _has_stats(model) else None
    params = model.free_params()
    n = len(new_dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(0, n, batch_size):
            idx = order[b : b + batch_size]
            logits, _ = model.run(new_dataset.X[idx], FREE, training=True)
            loss = cross_entropy(logits, new_dataset.y[idx])
            zero_grad(params)
            loss.backward()
            sgd_step(params, lr)
    bit, layer = _detection(model, passports)
    report = AttackReport(
        "finetune",
        pre_accuracy=pre,
        post_accuracy=evaluate(model, eval_set),
        bit_detection=bit,
        layer_detection=layer,
        params={"epochs": epochs, "lr": lr, "batch_size": batch_size, "num_classes": new_dataset.num_classes},
        seeds={"seed": int(seed)},
    )
    return model, report


def _has_stats(model: Model) -> bool:
    return all(st.tracked0 > 0 or st.running_mu0 is None for st in model.norms.values())


# -- pruning --------------------------------------------------------------------


def n_pruned(rate: float, n: int) -> int:
    """``ceil(rate * n)`` without float noise (0.3 * 10 must give 3, not 4)."""
    return math.ceil(round(rate * n, 9))


def prune_weights(model: Model, rate: float) -> Model:
    """Zero the globally smallest-magnitude ``ceil(rate * N)`` conv/fc weights.

    Ties are broken by position (layer order, then C order) via a stable sort.
    """
    if not 0.0 <= rate <= 1.0:
        raise UsageError(f"prune rate must lie in [0, 1], got {rate}")
    out = model.clone()
    tensors = list(out.prunable().values())
    flat = np.concatenate([np.abs(t.data).ravel() for t in tensors])
    k = n_pruned(rate, flat.size)
    mask = np.ones(flat.size, bool)
    mask[np.argsort(flat, kind="stable")[:k]] = False
    start = 0
    for t in tensors:
        m = mask[start : start + t.data.size].reshape(t.data.shape)
        t.data[~m] = 0.0
        start += t.data.size
    return out


def prune_attack(
    model: Model, rate: float, passports: PassportBundle | None = None, dataset: Dataset | None = None
) -> tuple[Model, AttackReport]:
    """Prune a copy of ``model`` and report accuracy and signature detection.

    ``accuracy`` is the verification (correct-passport) accuracy when the
    branch is present, otherwise the passport-free accuracy.
    """
    pruned = prune_weights(model, rate)
    aware = passports is not None and not model.deployed and bool(model.protected_layers)

    def acc(m):
        if dataset is None:
            return None
        return evaluate(m, dataset, AWARE, passports) if aware else evaluate(m, dataset, FREE)

    bit, layer = _detection(pruned, passports)
    row = {"rate": float(rate), "accuracy": acc(pruned), "bit_detection": bit, "layer_detection": layer}
    n = sum(t.data.size for t in model.prunable().values())
    report = AttackReport(
        "prune",
        pre_accuracy=acc(model),
        post_accuracy=row["accuracy"],
        bit_detection=bit,
        layer_detection=layer,
        params={"rate": float(rate), "n_prunable": n, "n_zeroed": n_pruned(rate, n)},
        rows=[row],
        extra={"accuracy_branch": "aware" if aware else "free"},
    )
    return pruned, report


def prune_sweep(model: Model, rates, passports: PassportBundle | None = None, dataset: Dataset | None = None) -> AttackReport:
    """One :func:`prune_attack` per rate, rows collected into a single report."""
    rows, pre = [], None
    for r in rates:
        _, rep = prune_attack(model, float(r), passports, dataset)
        pre = rep.pre_accuracy
        rows.extend(rep.rows)
    return AttackReport("prune_sweep", pre_accuracy=pre, params={"rates": [float(r) for r in rates]}, rows=rows)


# -- ambiguity attacks --------------------------------------------------------


def _trainable_copy(bundle: PassportBundle) -> PassportBundle:
    ps = [
        LayerPassport(
            Tensor(p.p_gamma.data.copy(), requires_grad=True),
            Tensor(p.p_beta.data.copy(), requires_grad=True),
            p.layer_id,
            p.mode,
        )
        for p in bundle.passports
    ]
    return PassportBundle(ps, [(g.copy(), b.copy()) for g, b in bundle.target_signs], bundle.owner_id, bundle.creation_seed)


def _passport_tensors(bundle: PassportBundle) -> list[Tensor]:
    return [t for p in bundle.passports for t in (p.p_gamma, p.p_beta)]


def _optimize_passports(model, bundle, dataset, steps, lr, batch_size, rng, hinge_signs=None, hinge_weight=1.0, alpha0=ALPHA0):
    """Gradient descent on passport tensors only; the model stays frozen.

    Inference-mode normalization keeps every model buffer untouched.
    """
    params = _passport_tensors(bundle)
    n = len(dataset)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        logits, wps = model.run(dataset.X[idx], AWARE, bundle, training=False)
        loss = cross_entropy(logits, dataset.y[idx])
        if hinge_signs is not None:
            for i, (wg, wb) in wps.items():
                sg, sb = hinge_signs[i]
                loss = loss + hinge_weight * (signature_hinge_loss(wg, sg, alpha0) + signature_hinge_loss(wb, sb, alpha0))
        zero_grad(params)
        loss.backward()
        sgd_step(params, lr)
    return bundle


def _check_verification_model(model: Model) -> None:
    if model.deployed or not model.protected_layers:
        raise UsageError("ambiguity attacks need a verification model with its passport branch attached")


def ambiguity_attack_1(
    verification_model: Model,
    dataset: Dataset,
    num_trials: int = 10,
    steps: int = 500,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
) -> AttackReport:
    """Forge passports from random values by descending the task loss.

    Reports mean accuracy with the random initial passports and after
    optimization, plus the per-trial pairs in ``rows``.
    """
    _check_verification_model(verification_model)
    model = verification_model.clone()
    trial_seeds = [int(s) for s in np.random.SeedSequence([int(seed), 0xA1]).generate_state(num_trials)]
    rows = []
    for t, s in enumerate(trial_seeds):
        forged = _trainable_copy(generate_passports(model, f"attacker-{t}", s))
        initial = evaluate(model, dataset, AWARE, forged)
        _optimize_passports(model, forged, dataset, steps, lr, batch_size, make_rng(s))
        rows.append({"trial": t, "initial_accuracy": initial, "optimized_accuracy": evaluate(model, dataset, AWARE, forged)})
    return AttackReport(
        "ambiguity1",
        pre_accuracy=float(np.mean([r["initial_accuracy"] for r in rows])) if rows else None,
        post_accuracy=float(np.mean([r["optimized_accuracy"] for r in rows])) if rows else None,
        params={"num_trials": num_trials, "steps": steps, "lr": lr, "batch_size": batch_size},
        seeds={"seed": int(seed), "trial_seeds": trial_seeds},
        rows=rows,
    )


def flip_positions(passports: PassportBundle, flip_fraction: float, seed: int) -> np.ndarray:
    """Indices into the flattened (gamma, beta per layer) sign vector to flip."""
    if not 0.0 <= flip_fraction <= 1.0:
        raise UsageError(f"flip_fraction must lie in [0, 1], got {flip_fraction}")
    total = sum(g.size + b.size for g, b in passports.target_signs)
    k = math.ceil(round(flip_fraction * total, 9))
    return np.sort(make_rng(seed).choice(total, size=k, replace=False))


def _split_flat(flat: np.ndarray, passports: PassportBundle) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    out, start = {}, 0
    for p, (g, b) in zip(passports.passports, passports.target_signs):
        out[p.layer_id] = (flat[start : start + g.size], flat[start + g.size : start + g.size + b.size])
        start += g.size + b.size
    return out


def ambiguity_attack_2(
    verification_model: Model,
    passports: PassportBundle,
    flip_fraction: float,
    dataset: Dataset,
    steps: int = 500,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
    hinge_weight: float = 1.0,
) -> AttackReport:
    """Start from the leaked passports and push a fraction of signs the other way.

    ``post_accuracy`` is the accuracy the attacker ends with; ``extra``
    records how many of the targeted flips were actually realized.
    """
    _check_verification_model(verification_model)
    model = verification_model.clone()
    pos = flip_positions(passports, flip_fraction, seed)
    flat = np.concatenate([np.concatenate([g, b]) for g, b in passports.target_signs]).astype(np.int8)
    flat[pos] = -flat[pos]
    targets = _split_flat(flat, passports)
    bundle = _trainable_copy(passports)
    pre = evaluate(model, dataset, AWARE, passports)
    _optimize_passports(model, bundle, dataset, steps, lr, batch_size, make_rng(seed), targets, hinge_weight)
    got = np.concatenate([np.concatenate([g, b]) for g, b in signature_bits(model, bundle)])
    want = (flat > 0).astype(np.uint8)
    realized = float((got[pos] == want[pos]).mean()) if pos.size else 1.0
    acc = evaluate(model, dataset, AWARE, bundle)
    return AttackReport(
        "ambiguity2",
        pre_accuracy=pre,
        post_accuracy=acc,
        params={"flip_fraction": float(flip_fraction), "steps": steps, "lr": lr, "batch_size": batch_size, "hinge_weight": hinge_weight},
        seeds={"seed": int(seed)},
        rows=[{"flip_fraction": float(flip_fraction), "accuracy": acc, "flipped_bits_realized": realized, "n_flipped": int(pos.size)}],
        extra={"n_flipped": int(pos.size), "flipped_bits_realized": realized, "bit_agreement": float((got == want).mean())},
    )


def ambiguity2_sweep(verification_model, passports, fractions, dataset, **kw) -> AttackReport:
    rows, pre = [], None
    for f in fractions:
        rep = ambiguity_attack_2(verification_model, passports, f, dataset, **kw)
        pre = rep.pre_accuracy
        rows.extend(rep.rows)
    return AttackReport("ambiguity2_sweep", pre_accuracy=pre, params={"fractions": [float(f) for f in fractions], **kw}, rows=rows)


__all__ = [
    "AttackReport",
    "finetune_attack",
    "prune_weights",
    "prune_attack",
    "prune_sweep",
    "ambiguity_attack_1",
    "ambiguity_attack_2",
    "ambiguity2_sweep",
    "flip_positions",
]
