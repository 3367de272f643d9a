"""Command-line entry point: ``passnorm <subcommand> --seed N ...``.

Exit codes: 0 success, 1 a verification quantity could not be computed,
2 usage or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, checks
from .data import blobs, make_trigger_set, patterns
from .errors import (
    FormatError,
    KeystoreError,
    SpecError,
    TrainingDiverged,
    UninitializedStatisticsError,
    UsageError,
)
from .models import ModelSpec, attach_branch, build_model, export_deployment, extract_branch, toy_cnn, toy_mlp
from .normalization import AWARE, FREE
from .passport import generate_passports
from .persistence import (
    checkpoint_meta,
    load_checkpoint,
    load_config,
    load_dataset,
    load_keystore,
    save_checkpoint,
    save_dataset,
    save_keystore,
)
from .training import ALTERNATING, History, TrainConfig, config_dict, predictor, train
from .verification import VerificationReport, blackbox_verify, fidelity_verify, signature_report

log = logging.getLogger("passnorm")

# key -> (type, default); documented in README
TRAIN_SCHEMA: dict[str, tuple[type, object]] = {
    "arch": (str, "toy_mlp"),
    "spec_file": (str, ""),
    "norm": (str, "bn"),
    "config": (str, "C"),
    "passport_mask": (str, "all"),
    "owner_id": (str, "owner"),
    "dataset": (str, "auto"),
    "train_n": (int, 400),
    "spread": (float, 0.5),
    "trigger_n": (int, 100),
    "lambda1": (float, 1.0),
    "lambda2": (float, 2.0),
    "alpha0": (float, 0.1),
    "lr": (float, 0.05),
    "epochs": (int, 80),
    "batch_size": (int, 32),
    "passport_ratio": (float, 0.5),
    "schedule": (str, ALTERNATING),
    "trigger_batch": (int, 32),
    "recalibrate": (bool, True),
}

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sub_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([int(seed), 0xC11]).generate_state(n)]


def _write_text(path, text: str) -> None:
    if path:
        Path(path).write_text(text)


def _emit(args, text: str, out_attr: str = "out") -> None:
    path = getattr(args, out_attr, None)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------------


def cmd_dataset_gen(args) -> int:
    shape = tuple(int(s) for s in args.input_shape.split(","))
    if args.kind == "trigger":
        ds = make_trigger_set(args.n, shape, args.classes, args.seed)
    elif args.kind == "blobs":
        ds = blobs(args.n, shape[0], args.classes, args.seed, args.split, args.spread)
    else:
        ds = patterns(args.n, args.family, args.seed, args.split)
    save_dataset(ds, args.out, {"generator": args.kind, "seed": args.seed})
    print(f"wrote {len(ds)} samples of shape {ds.input_shape} to {args.out}")
    return EXIT_OK


def _parse_mask(text: str):
    """None for "all"; "none" is resolved against the layer count later."""
    if text in ("all", "none"):
        return None if text == "all" else text
    bits = [m.strip() for m in text.split(",")]
    if not bits or any(b not in ("0", "1") for b in bits):
        raise UsageError(f"passport_mask must be all, none, or a comma list of 0/1, got {text!r}")
    return [b == "1" for b in bits]


def _spec_from_config(cfg: dict, base: Path | None = None) -> ModelSpec:
    mask = _parse_mask(cfg["passport_mask"])
    if mask == "none":
        spec = _spec_from_config(dict(cfg, passport_mask="all"), base)
        return spec.with_mask([False] * len(spec.norm_layer_ids()))
    if cfg["spec_file"]:
        path = Path(cfg["spec_file"])
        if base is not None and not path.is_absolute():
            path = base / path
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: not valid JSON ({exc})") from exc
        d.setdefault("norm", cfg["norm"])
        if mask is not None or "passport_mask" not in d:
            d["passport_mask"] = mask
        return ModelSpec.from_dict(d)
    if cfg["arch"] == "toy_mlp":
        return toy_mlp(norm=cfg["norm"], mask=mask)
    if cfg["arch"] == "toy_cnn":
        return toy_cnn(norm=cfg["norm"], mask=mask)
    raise UsageError(f"unknown arch {cfg['arch']!r} (toy_mlp or toy_cnn)")


def cmd_train(args) -> int:
    cfg = load_config(Path(args.config), TRAIN_SCHEMA) if args.config else {k: d for k, (_, d) in TRAIN_SCHEMA.items()}
    spec = _spec_from_config(cfg, Path(args.config).parent if args.config else None)
    model_seed, passport_seed, trigger_seed, train_seed = sub_seeds(args.seed, 4)
    data_seed = args.seed  # `dataset-gen --seed <same> --split val` then draws from the same task
    if args.data:
        train_set = load_dataset(args.data)
    else:
        kind = cfg["dataset"] if cfg["dataset"] != "auto" else ("patterns" if len(spec.input_shape) == 3 else "blobs")
        train_set = patterns(cfg["train_n"], "A", data_seed) if kind == "patterns" else blobs(cfg["train_n"], spec.input_shape[0], spec.num_classes, data_seed, spread=cfg["spread"])
    triggers = load_dataset(args.triggers) if args.triggers else make_trigger_set(cfg["trigger_n"], spec.input_shape, spec.num_classes, trigger_seed)
    if train_set.input_shape != spec.input_shape:
        raise UsageError(f"data shape {train_set.input_shape} does not fit {cfg['arch']} input {spec.input_shape}")
    tc = TrainConfig(**{k: cfg[k] for k in ("lambda1", "lambda2", "alpha0", "lr", "epochs", "batch_size", "passport_ratio", "schedule", "trigger_batch", "recalibrate")}, seed=train_seed)
    model = build_model(spec, cfg["config"], model_seed)
    bundle = generate_passports(spec, cfg["owner_id"], passport_seed) if model.protected_layers else None
    model, history = train(model, train_set, triggers, bundle, tc)
    meta = {"train_config": config_dict(tc), "cli_seed": args.seed, "arch": cfg["spec_file"] or cfg["arch"]}
    save_checkpoint(model, args.out, meta)
    if bundle is not None:
        if not args.keystore:
            raise UsageError("a protected model needs --keystore to hold its passports")
        save_keystore(bundle, extract_branch(model), args.keystore, spec)
    _write_text(args.history, history.to_jsonl())
    if args.trigger_out:
        save_dataset(triggers, args.trigger_out)
    last = history.last()
    print("trained:", json.dumps(last, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    model = load_checkpoint(args.model)
    save_checkpoint(export_deployment(model), args.out, checkpoint_meta(args.model)["extra"])
    print(f"wrote passport-free deployment model to {args.out}")
    return EXIT_OK


def _verification_model(args):
    """Model with its branch, plus the bundle, from --model and --keystore."""
    model = load_checkpoint(args.model)
    bundle, branch = load_keystore(args.keystore, model.spec)
    if model.deployed:
        model = attach_branch(model, branch, bundle)
    model.passports = bundle
    return model, bundle


def cmd_attach(args) -> int:
    model, _ = _verification_model(args)
    save_checkpoint(model, args.out, checkpoint_meta(args.model)["extra"])
    print(f"wrote verification model to {args.out}")
    return EXIT_OK


def _report_out(args, report) -> None:
    _emit(args, report.to_text())
    _write_text(args.json, report.to_json())


def cmd_verify_fidelity(args) -> int:
    model, bundle = _verification_model(args)
    report = fidelity_verify(model, bundle, load_dataset(args.data), args.k, args.seed)
    _report_out(args, report)
    return EXIT_OK


def cmd_verify_signature(args) -> int:
    model = load_checkpoint(args.model)
    bundle, _ = load_keystore(args.keystore, model.spec)
    report = signature_report(model, bundle)
    _report_out(args, report)
    return EXIT_OK


def cmd_verify_trigger(args) -> int:
    model = load_checkpoint(args.model)
    branch = FREE
    bundle = None
    if args.keystore:
        model, bundle = _verification_model(args)
        branch = AWARE
    acc = blackbox_verify(predictor(model, branch, bundle), load_dataset(args.triggers))
    _report_out(args, VerificationReport(trigger_accuracy=acc, meta={"branch": branch.value}))
    return EXIT_OK


def cmd_attack(args) -> int:
    kind = args.attack
    if kind == "finetune":
        model = load_checkpoint(args.model)
        bundle, _ = load_keystore(args.keystore, model.spec)
        deployed = model if model.deployed else export_deployment(model)
        eval_set = load_dataset(args.eval) if args.eval else None
        tuned, rep = attacks.finetune_attack(deployed, load_dataset(args.data), args.epochs, args.lr, bundle, eval_set, seed=args.seed)
        if args.model_out:
            save_checkpoint(tuned, args.model_out)
    elif kind == "prune":
        model, bundle = _verification_model(args)
        data = load_dataset(args.data) if args.data else None
        rates = [i / 10 for i in range(10)] if args.sweep else [args.rate]
        rep = attacks.prune_sweep(model, rates, bundle, data)
        rep.seeds = {"seed": args.seed}
        _emit(args, rep.to_csv(attacks.SWEEP_COLUMNS))
        _write_text(args.json, rep.to_json())
        return EXIT_OK
    elif kind == "ambiguity1":
        model, _ = _verification_model(args)
        rep = attacks.ambiguity_attack_1(model, load_dataset(args.data), args.trials, args.steps, args.lr, args.seed)
    else:
        model, bundle = _verification_model(args)
        fracs = [i / 10 for i in range(11)] if args.sweep else [args.flip]
        rep = attacks.ambiguity2_sweep(model, bundle, fracs, load_dataset(args.data), steps=args.steps, lr=args.lr, seed=args.seed)
    if rep.rows:
        _write_text(args.csv, rep.to_csv())
    _emit(args, rep.to_json())
    _write_text(args.json, rep.to_json())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    names = list(checks.CASES) if args.op == "all" else args.op.split(",")
    unknown = [n for n in names if n not in checks.CASES]
    if unknown:
        raise UsageError(f"unknown ops {unknown}; choose from {sorted(checks.CASES)}")
    worst = checks.run_all(args.trials, args.seed, names)
    ok = True
    lines = []
    for name, err in worst.items():
        passed = err < args.tol
        ok &= passed
        lines.append(f"{name:28s} {err:.3e} {'PASS' if passed else 'FAIL'}")
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_report(args) -> int:
    lines = []
    if args.history:
        hist = History.from_jsonl(Path(args.history).read_text())
        lines.append(f"{'epoch':>5} {'loss':>9} {'acc_free':>9} {'acc_aware':>9} {'hinge':>9}")
        for r in hist.records:
            f = lambda k: "n/a" if r.get(k) is None else f"{r[k]:.4f}"
            lines.append(f"{r['epoch']:>5} {f('loss'):>9} {f('acc_free'):>9} {f('acc_aware'):>9} {f('hinge'):>9}")
    for path in args.reports or []:
        d = json.loads(Path(path).read_text())
        lines.append(f"== {Path(path).name}")
        lines.extend(f"{k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(d.items()) if k not in ("rows",))
    if not lines:
        raise UsageError("report needs --history and/or --reports")
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="passnorm", description="Passport-aware normalization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, required=True, help="controls every random choice")
        sp.set_defaults(fn=fn)
        return sp

    sp = cmd("dataset-gen", cmd_dataset_gen, "synthesize a dataset or trigger set")
    sp.add_argument("--kind", choices=("blobs", "patterns", "trigger"), required=True)
    sp.add_argument("--n", type=int, default=400)
    sp.add_argument("--split", choices=("train", "val", "test"), default="train")
    sp.add_argument("--family", choices=("A", "B"), default="A")
    sp.add_argument("--spread", type=float, default=0.5)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--input-shape", default="16", help="comma list, e.g. 16 or 1,8,8")
    sp.add_argument("--out", required=True)

    sp = cmd("train", cmd_train, "train a protected model")
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--data")
    sp.add_argument("--triggers")
    sp.add_argument("--out", required=True)
    sp.add_argument("--keystore")
    sp.add_argument("--history")
    sp.add_argument("--trigger-out")

    sp = cmd("export", cmd_export, "strip the passport branch for deployment")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)

    sp = cmd("attach", cmd_attach, "re-attach the owner's branch to a deployed model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--keystore", required=True)
    sp.add_argument("--out", required=True)

    for name, fn in (("verify-fidelity", cmd_verify_fidelity), ("verify-signature", cmd_verify_signature), ("verify-trigger", cmd_verify_trigger)):
        sp = cmd(name, fn, name.replace("-", " "))
        sp.add_argument("--model", required=True)
        sp.add_argument("--keystore", required=name != "verify-trigger")
        sp.add_argument("--out", help="text report (default stdout)")
        sp.add_argument("--json", help="machine-readable report")
        if name == "verify-fidelity":
            sp.add_argument("--data", required=True)
            sp.add_argument("--k", type=int, default=10)
        if name == "verify-trigger":
            sp.add_argument("--triggers", required=True)

    sp = cmd("attack", cmd_attack, "run an attack")
    sp.add_argument("attack", choices=("finetune", "prune", "ambiguity1", "ambiguity2"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--keystore", required=True)
    sp.add_argument("--data")
    sp.add_argument("--eval")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--rate", type=float, default=0.5)
    sp.add_argument("--flip", type=float, default=0.1)
    sp.add_argument("--sweep", action="store_true")
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--model-out")
    sp.add_argument("--out", help="primary output (default stdout)")
    sp.add_argument("--json")
    sp.add_argument("--csv")

    sp = cmd("grad-check", cmd_grad_check, "finite-difference gradient checks")
    sp.add_argument("--op", default="all", help="comma list of case names, or all")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--tol", type=float, default=checks.TOLERANCE)
    sp.add_argument("--out")

    sp = cmd("report", cmd_report, "summarize training history and report files")
    sp.add_argument("--history")
    sp.add_argument("--reports", nargs="*")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.command == "attack" and args.attack != "prune" and not args.data:
            raise UsageError(f"attack {args.attack} needs --data")
        return args.fn(args)
    except (UsageError, FormatError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeystoreError, UninitializedStatisticsError, TrainingDiverged, FloatingPointError) as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
