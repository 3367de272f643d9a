"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The slow fixtures are the session-scoped ToyMLP and ToyCNN models from
``conftest``. Thresholds are the stated ones; nothing here is loosened to
make a run green.
"""
import numpy as np
import pytest

from passnorm import checks
from passnorm.attacks import SWEEP_COLUMNS, ambiguity_attack_1, ambiguity_attack_2, finetune_attack, prune_attack, prune_sweep
from passnorm.autograd import Tensor, make_rng, sgd_step, zero_grad
from passnorm.cli import main
from passnorm.data import blobs, make_trigger_set, patterns
from passnorm.models import build_model, export_deployment, extract_branch, toy_cnn, toy_mlp
from passnorm.normalization import AWARE, FREE, NormKind, PassportNormState, forward_baseline_eq4, forward_passport_aware
from passnorm.passport import CONV, FC, LayerPassport, generate_passports
from passnorm.persistence import checkpoint_bytes, checkpoint_from_bytes, keystore_bytes, keystore_from_bytes
from passnorm.training import TrainConfig, branch_schedule, evaluate, loss_terms, predictor, train
from passnorm.verification import blackbox_verify, chance_band, detect_signature, fidelity_verify

from conftest import cnn_data, mlp_data, train_fixture


@pytest.fixture
def verdict(capsys):
    def emit(label: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}")
        assert ok, f"criterion {label}: {detail}"

    return emit


@pytest.fixture(params=["mlp", "cnn"])
def fixture(request):
    return request.param, request.getfixturevalue(f"{request.param}_fixture")


def _fmt(values):
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


# 1 ---------------------------------------------------------------------------------------


def test_c01_gradient_correctness(verdict):
    errs = checks.run_all(trials=20)
    worst = max(errs, key=errs.get)
    verdict("1", all(e < 1e-3 for e in errs.values()), f"{len(errs)} cases x 20 instances, worst {worst} rel err {errs[worst]:.2e} (< 1e-3)")


# 2 ---------------------------------------------------------------------------------------


def test_c02_signature_embedding(verdict, fixture):
    name, f = fixture
    flags, rate = detect_signature(f.model, f.passports)
    hinge = f.history.last()["hinge"]
    verdict(f"2 ({name})", hinge == 0.0 and rate == 1.0 and all(flags), f"final hinge {hinge}, bit rate {rate}, layer flags {flags}")


# 3 ---------------------------------------------------------------------------------------


def test_c03_fidelity_gap_config_c(verdict, fixture):
    name, f = fixture
    rep = fidelity_verify(f.model, f.passports, f.val_set, k_forgeries=10)
    gap = abs(rep.acc_deploy - rep.acc_correct_passport)
    verdict(f"3 C ({name})", gap <= 0.02, f"deploy {rep.acc_deploy:.4f}, correct passport {rep.acc_correct_passport:.4f}, gap {gap:.4f} (<= 0.02)")


@pytest.mark.parametrize("name", ["mlp", "cnn"])
def test_c03_config_a_collapse(verdict, name):
    spec, data = (toy_mlp(), mlp_data()) if name == "mlp" else (toy_cnn(), cnn_data())
    f = train_fixture(spec, data, config="A")
    rep = fidelity_verify(f.model, f.passports, f.val_set, k_forgeries=0)
    verdict(
        f"3 A ({name})",
        rep.acc_correct_passport <= rep.acc_deploy - 0.20,
        f"deploy {rep.acc_deploy:.4f}, correct passport {rep.acc_correct_passport:.4f} (needs <= deploy - 0.20)",
    )


# 4 ---------------------------------------------------------------------------------------


def test_c04_ambiguity_attack_1(verdict, fixture):
    name, f = fixture
    acc_correct = evaluate(f.model, f.val_set, AWARE, f.passports)
    rep = ambiguity_attack_1(f.model, f.val_set, num_trials=10, seed=3)
    lo, hi = chance_band(f.spec.num_classes, len(f.val_set))
    initial = [r["initial_accuracy"] for r in rep.rows]
    in_band = all(lo <= a <= hi for a in initial)
    ok = in_band and rep.post_accuracy <= 0.5 * acc_correct
    verdict(
        f"4 ({name})",
        ok,
        f"random {_fmt(initial)} band [{lo:.3f}, {hi:.3f}]; optimized mean {rep.post_accuracy:.4f} vs 0.5 x {acc_correct:.4f}",
    )


# 5 ---------------------------------------------------------------------------------------


def test_c05_ambiguity_attack_2(verdict, fixture):
    name, f = fixture
    acc_correct = evaluate(f.model, f.val_set, AWARE, f.passports)
    zero = ambiguity_attack_2(f.model, f.passports, 0.0, f.val_set, seed=3)
    tenth = ambiguity_attack_2(f.model, f.passports, 0.1, f.val_set, seed=3)
    ok = abs(zero.post_accuracy - acc_correct) <= 0.01 and tenth.post_accuracy <= 0.5 * acc_correct
    verdict(
        f"5 ({name})",
        ok,
        f"flip 0.0 -> {zero.post_accuracy:.4f} (vs {acc_correct:.4f} +-0.01); flip 0.1 -> {tenth.post_accuracy:.4f} "
        f"(needs <= {0.5 * acc_correct:.4f}, realized flips {tenth.extra['flipped_bits_realized']:.2f})",
    )


# 6 ---------------------------------------------------------------------------------------


def test_c06_pruning(verdict, fixture, tmp_path):
    name, f = fixture
    _, rep = prune_attack(f.model, 0.5, f.passports, f.val_set)
    sweep = prune_sweep(f.model, [round(0.1 * i, 1) for i in range(10)], f.passports, f.val_set)
    csv = tmp_path / f"prune_{name}.csv"
    csv.write_text(sweep.to_csv(SWEEP_COLUMNS))
    lines = csv.read_text().splitlines()
    bits = [r["bit_detection"] for r in sweep.rows]
    ok = rep.layer_detection >= 0.9 and len(lines) == 11 and lines[-1].startswith("0.900000,")
    verdict(f"6 ({name})", ok, f"layer detection at 0.5: {rep.layer_detection:.3f} (>= 0.9); bit detection 0.0..0.9 {_fmt(bits)}")


# 7 ---------------------------------------------------------------------------------------


def test_c07_finetuning(verdict, fixture):
    name, f = fixture
    new = blobs(400, seed=77, spread=0.5) if name == "mlp" else patterns(400, "B", seed=77)
    _, rep = finetune_attack(export_deployment(f.model), new, epochs=30, passports=f.passports, seed=3)
    verdict(
        f"7 ({name})",
        rep.layer_detection >= 0.9,
        f"layer detection {rep.layer_detection:.3f} (>= 0.9), bit detection {rep.bit_detection:.3f}, new-domain acc {rep.post_accuracy:.3f}",
    )


# 8 ---------------------------------------------------------------------------------------


def _buffers(model, slot):
    return {i: tuple(b.copy() for b in st.buffers(slot)) for i, st in model.norms.items() if st.running_mu0 is not None}


def test_c08_branch_isolation(verdict):
    spec = toy_cnn()
    model = build_model(spec, "C", 4)
    pp = generate_passports(spec, "alice", 4)
    data = patterns(64, seed=4)
    trig = make_trigger_set(16, spec.input_shape, spec.num_classes, 4)
    cfg = TrainConfig()
    schedule = branch_schedule(10, 0.5, 2)
    assert schedule.any() and not schedule.all()
    violations = 0
    for step, aware in enumerate(schedule):
        branch = AWARE if aware else FREE
        other = 0 if aware else 1
        before = _buffers(model, other)
        sl = slice(8 * (step % 8), 8 * (step % 8) + 8)
        loss = loss_terms(model, (data.X[sl], data.y[sl]), (trig.X[:4], trig.y[:4]), pp if aware else None, cfg, branch)["total"]
        params = model.aware_params() if aware else model.free_params()
        zero_grad(params)
        loss.backward()
        sgd_step(params, cfg.lr)
        after = _buffers(model, other)
        for i in before:
            for a, b in zip(before[i], after[i]):
                violations += int(a.tobytes() != b.tobytes())
    trained = {0: sum(st.tracked0 for st in model.norms.values()), 1: sum(st.tracked1 for st in model.norms.values())}
    verdict("8", violations == 0 and trained[0] > 0 and trained[1] > 0, f"10 steps {''.join('A' if s else 'F' for s in schedule)}, {violations} cross-branch buffer changes")


# 9 ---------------------------------------------------------------------------------------


def test_c09_structure_preservation(verdict, fixture):
    name, f = fixture
    dep = export_deployment(f.model)
    x = make_rng(9).normal(size=(100, *f.spec.input_shape)).astype(np.float32)
    a, _ = f.model.run(x, FREE, training=False)
    b, _ = dep.run(x, FREE, training=False)
    same_out = a.data.tobytes() == b.data.tobytes()
    plain = build_model(f.spec, None, 0).state_dict()
    got = dep.state_dict()
    same_params = {k: v.shape for k, v in got.items()} == {k: v.shape for k, v in plain.items()}
    verdict(f"9 ({name})", same_out and same_params, f"100 inputs bit-identical: {same_out}; parameter set equals plain build: {same_params} ({len(got)} tensors)")


# 10 --------------------------------------------------------------------------------------


def test_c10_config_a_equals_baseline(verdict):
    rng = make_rng(10)
    worst, cases = 0.0, 0
    for kind in ("bn", "gn:2", "in", "ln"):
        for _ in range(5):
            c = int(rng.choice([2, 4, 6]))
            if kind in ("in",) or rng.random() < 0.5:
                c_in = int(rng.integers(1, 4))
                W = Tensor(rng.normal(size=(c, c_in, 3, 3)), dtype=np.float64)
                p = LayerPassport(Tensor(rng.normal(size=(c_in, 5, 5))), Tensor(rng.normal(size=(c_in, 5, 5))), 1, CONV)
                x = Tensor(rng.normal(size=(4, c, 3, 3)), dtype=np.float64)
            else:
                W = Tensor(rng.normal(size=(c, c)), dtype=np.float64)
                p = LayerPassport(Tensor(rng.normal(size=c)), Tensor(rng.normal(size=c)), 1, FC)
                x = Tensor(rng.normal(size=(5, c)), dtype=np.float64)
            nk = NormKind.parse(kind)
            sa, sb = PassportNormState(c, nk, "A"), PassportNormState(c, nk, "A")
            modes = [True, False] if nk.name == "bn" else [True]
            for training in modes:
                got = forward_passport_aware(x, sa, p, W, training=training).data
                want = forward_baseline_eq4(x, p, W, sb, training=training).data
                worst = max(worst, float(np.abs(got - want).max()))
                cases += 1
    verdict("10", worst <= 1e-6, f"{cases} random layers (bn, gn, in, ln), max abs diff {worst:.2e} (<= 1e-6)")


# 11 --------------------------------------------------------------------------------------


def test_c11_trigger_verification(verdict, fixture):
    name, f = fixture
    dep = export_deployment(f.model)
    watermarked = blackbox_verify(predictor(dep), f.triggers)
    clean = build_model(f.spec, None, 21)
    clean, _ = train(clean, f.train_set, None, None, TrainConfig(lambda1=0.0, epochs=f.config.epochs, seed=21), eval_every=0)
    control = blackbox_verify(predictor(clean), f.triggers)
    lo, hi = chance_band(f.spec.num_classes, len(f.triggers))
    ok = watermarked >= 0.95 and lo <= control <= hi
    verdict(f"11 ({name})", ok, f"watermarked {watermarked:.2f} (>= 0.95); clean control {control:.2f} in [{lo:.3f}, {hi:.3f}]")


# 12 --------------------------------------------------------------------------------------


def test_c12_ratio_robustness(verdict):
    accs, n = {}, 0
    for ratio in (0.1, 0.5):
        f = train_fixture(toy_mlp(), mlp_data(), epochs=200, passport_ratio=ratio)
        accs[ratio] = evaluate(f.model, f.val_set, AWARE, f.passports)
        n = len(f.val_set)
    diff = abs(accs[0.1] - accs[0.5])
    # compare in whole samples so 2 points of n is not lost to float rounding
    verdict("12", abs(round(accs[0.1] * n) - round(accs[0.5] * n)) <= round(0.02 * n), f"aware acc ratio 0.1 {accs[0.1]:.4f}, ratio 0.5 {accs[0.5]:.4f}, diff {diff:.4f} (<= 0.02)")


# 13 --------------------------------------------------------------------------------------


def _pipeline(d):
    cfg = d / "mlp.cfg"
    cfg.write_text("arch = toy_mlp\nepochs = 10\ntrain_n = 200\n")
    steps = [
        ["dataset-gen", "--kind", "blobs", "--split", "val", "--n", 100, "--seed", 8, "--out", d / "val.ds"],
        ["train", "--config", cfg, "--seed", 8, "--out", d / "m.ckpt", "--keystore", d / "k.keys", "--history", d / "h.jsonl", "--trigger-out", d / "t.ds"],
        ["export", "--model", d / "m.ckpt", "--out", d / "dep.ckpt", "--seed", 8],
        ["attach", "--model", d / "dep.ckpt", "--keystore", d / "k.keys", "--out", d / "back.ckpt", "--seed", 8],
        ["verify-signature", "--model", d / "dep.ckpt", "--keystore", d / "k.keys", "--seed", 8, "--json", d / "sig.json", "--out", d / "sig.txt"],
        ["verify-fidelity", "--model", d / "m.ckpt", "--keystore", d / "k.keys", "--data", d / "val.ds", "--k", 2, "--seed", 8, "--json", d / "fid.json", "--out", d / "fid.txt"],
        ["verify-trigger", "--model", d / "dep.ckpt", "--triggers", d / "t.ds", "--seed", 8, "--json", d / "trig.json", "--out", d / "trig.txt"],
        ["attack", "prune", "--sweep", "--model", d / "m.ckpt", "--keystore", d / "k.keys", "--data", d / "val.ds", "--seed", 8, "--out", d / "prune.csv"],
        ["report", "--history", d / "h.jsonl", "--reports", d / "sig.json", d / "fid.json", "--out", d / "report.txt", "--seed", 8],
    ]
    codes = [main([str(a) for a in argv]) for argv in steps]
    return codes, {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_c13_determinism_and_persistence(verdict, tmp_path, mlp_fixture):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _pipeline(tmp_path / "a")
    codes_b, files_b = _pipeline(tmp_path / "b")
    identical = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)
    attach_ok = files_a["back.ckpt"] == files_a["m.ckpt"]

    f = mlp_fixture
    blob = checkpoint_bytes(f.model)
    ckpt_ok = checkpoint_bytes(checkpoint_from_bytes(blob)) == blob
    kblob = keystore_bytes(f.passports, extract_branch(f.model), f.spec)
    pp, branch = keystore_from_bytes(kblob, f.spec)
    keys_ok = keystore_bytes(pp, branch, f.spec) == kblob
    ok = codes_a == codes_b == [0] * len(codes_a) and identical and attach_ok and ckpt_ok and keys_ok
    verdict(
        "13",
        ok,
        f"exit codes {codes_a}; {len(files_a)} pipeline files byte-identical: {identical}; "
        f"export+attach restores checkpoint: {attach_ok}; checkpoint round trip: {ckpt_ok}; keystore round trip: {keys_ok}",
    )
