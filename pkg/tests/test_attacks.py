import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from passnorm.attacks import (
    SWEEP_COLUMNS,
    AttackReport,
    ambiguity2_sweep,
    ambiguity_attack_1,
    ambiguity_attack_2,
    finetune_attack,
    flip_positions,
    n_pruned,
    prune_attack,
    prune_sweep,
    prune_weights,
)
from passnorm.data import blobs
from passnorm.errors import UsageError
from passnorm.models import ModelSpec, build_model, export_deployment
from passnorm.normalization import AWARE
from passnorm.training import evaluate


def tiny_fc(weights):
    spec = ModelSpec([{"type": "fc", "out": 1}], (len(weights),), 1)
    model = build_model(spec, None, 0)
    model.weights[0].data[:, 0] = weights
    return model


# -- pruning ------------------------------------------------------------------------


def test_prune_two_smallest():
    out = prune_weights(tiny_fc([0.1, -0.5, 0.02, 0.3]), 0.5)
    np.testing.assert_array_equal(out.weights[0].data[:, 0], np.float32([0.0, -0.5, 0.0, 0.3]))


def test_prune_rate_zero_and_one(mlp_fixture):
    model = mlp_fixture.model
    same = prune_weights(model, 0.0)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, same.state_dict()[k])
    gone = prune_weights(model, 1.0)
    assert all(not t.data.any() for t in gone.prunable().values())


@pytest.mark.parametrize("rate", [-0.1, 1.5])
def test_prune_rate_range(rate):
    with pytest.raises(UsageError):
        prune_weights(tiny_fc([1.0, 2.0]), rate)


@pytest.mark.parametrize("rate,n,k", [(0.3, 10, 3), (0.5, 4, 2), (0.25, 5, 2), (0.7, 10, 7), (0.9, 1000, 900), (0.0, 7, 0)])
def test_n_pruned_is_ceiling(rate, n, k):
    assert n_pruned(rate, n) == k


@given(st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_prune_exact_count(rate):
    rng = np.random.default_rng(0)
    model = tiny_fc(rng.normal(size=37))
    out = prune_weights(model, rate)
    assert int((out.weights[0].data == 0).sum()) == n_pruned(rate, 37)


def test_prune_is_global_and_leaves_norms(mlp_fixture):
    model = mlp_fixture.model
    out = prune_weights(model, 0.5)
    kept = np.concatenate([np.abs(t.data[t.data != 0]) for t in out.prunable().values()])
    dropped = np.concatenate([np.abs(a.data[b.data == 0]) for a, b in zip(model.prunable().values(), out.prunable().values())])
    assert kept.min() >= dropped.max()
    for k, v in model.state_dict().items():
        if ".weight" not in k:
            np.testing.assert_array_equal(v, out.state_dict()[k])


def test_prune_attack_report(mlp_fixture):
    f = mlp_fixture
    _, rep = prune_attack(f.model, 0.2, f.passports, f.val_set)
    assert rep.kind == "prune"
    assert rep.extra["accuracy_branch"] == "aware"
    assert rep.pre_accuracy == evaluate(f.model, f.val_set, AWARE, f.passports)
    assert rep.rows[0]["rate"] == 0.2 and 0.0 <= rep.bit_detection <= 1.0


def test_prune_sweep_csv(mlp_fixture):
    f = mlp_fixture
    rep = prune_sweep(f.model, [0.0, 0.5, 0.9], f.passports, f.val_set)
    lines = rep.to_csv(SWEEP_COLUMNS).strip().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    assert len(lines) == 4
    assert lines[1].startswith("0.000000,") and lines[1].endswith("1.000000,1.000000")


# -- reports ---------------------------------------------------------------------------


def test_report_json_round_trip():
    rep = AttackReport("prune", 0.9, 0.5, 1.0, 0.5, {"rate": 0.5}, {"seed": 3}, [{"rate": 0.5, "accuracy": 0.5}], {"x": 1})
    assert AttackReport.from_json(rep.to_json()) == rep


def test_report_csv_empty_fields():
    rep = AttackReport("prune", rows=[{"rate": 0.1, "accuracy": None, "bit_detection": 1.0, "layer_detection": 1.0}])
    assert rep.to_csv().splitlines()[1] == "0.100000,,1.000000,1.000000"


# -- fine-tuning -----------------------------------------------------------------------


def test_finetune_zero_epochs_untouched(mlp_fixture):
    f = mlp_fixture
    dep = export_deployment(f.model)
    out, rep = finetune_attack(dep, f.val_set, epochs=0, passports=f.passports)
    assert rep.bit_detection == 1.0 and rep.layer_detection == 1.0
    for k, v in dep.state_dict().items():
        np.testing.assert_array_equal(v, out.state_dict()[k])
    assert rep.pre_accuracy == rep.post_accuracy


def test_finetune_replaces_head_for_new_classes(mlp_fixture):
    f = mlp_fixture
    new = blobs(60, num_classes=6, seed=9, spread=0.5)
    out, rep = finetune_attack(export_deployment(f.model), new, epochs=1, passports=f.passports)
    assert out.spec.num_classes == 6
    assert out.weights[max(out.weights)].shape == (32, 6)
    assert rep.params["num_classes"] == 6 and rep.pre_accuracy is not None


def test_finetune_changes_weights_and_is_seeded(mlp_fixture):
    f = mlp_fixture
    dep = export_deployment(f.model)
    new = blobs(60, seed=2, spread=0.5)
    a, ra = finetune_attack(dep, new, epochs=2, seed=1)
    b, rb = finetune_attack(dep, new, epochs=2, seed=1)
    assert ra.to_json() == rb.to_json()
    np.testing.assert_array_equal(a.weights[0].data, b.weights[0].data)
    assert not np.array_equal(a.weights[0].data, dep.weights[0].data)


def test_finetune_needs_deployment(mlp_fixture):
    with pytest.raises(UsageError):
        finetune_attack(mlp_fixture.model, mlp_fixture.val_set, 1)


# -- ambiguity attacks ------------------------------------------------------------------


def test_flip_positions():
    class Bundle:
        target_signs = [(np.ones(6), np.ones(6)), (np.ones(4), np.ones(4))]

    pos = flip_positions(Bundle, 0.1, 3)
    assert len(pos) == 2 and len(set(pos)) == 2 and pos.max() < 20
    np.testing.assert_array_equal(pos, flip_positions(Bundle, 0.1, 3))
    assert len(flip_positions(Bundle, 0.0, 3)) == 0
    assert len(flip_positions(Bundle, 1.0, 3)) == 20
    with pytest.raises(UsageError):
        flip_positions(Bundle, 1.2, 0)


def test_ambiguity1_freezes_model(mlp_fixture):
    f = mlp_fixture
    before = {k: v.copy() for k, v in f.model.state_dict().items()}
    rep = ambiguity_attack_1(f.model, f.val_set, num_trials=2, steps=10, seed=2)
    for k, v in f.model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert len(rep.rows) == 2 and len(rep.seeds["trial_seeds"]) == 2
    assert 0.0 <= rep.pre_accuracy <= 1.0 and 0.0 <= rep.post_accuracy <= 1.0


def test_ambiguity1_reproducible(mlp_fixture):
    f = mlp_fixture
    a = ambiguity_attack_1(f.model, f.val_set, num_trials=1, steps=5, seed=7)
    b = ambiguity_attack_1(f.model, f.val_set, num_trials=1, steps=5, seed=7)
    assert a.to_json() == b.to_json()


def test_ambiguity_needs_branch(mlp_fixture):
    f = mlp_fixture
    with pytest.raises(UsageError):
        ambiguity_attack_1(export_deployment(f.model), f.val_set, 1, 1)
    with pytest.raises(UsageError):
        ambiguity_attack_2(export_deployment(f.model), f.passports, 0.1, f.val_set, 1)


def test_ambiguity2_zero_flip_keeps_accuracy(mlp_fixture):
    f = mlp_fixture
    originals = [p.p_gamma.data.copy() for p in f.passports.passports]
    rep = ambiguity_attack_2(f.model, f.passports, 0.0, f.val_set, steps=20)
    assert rep.extra["n_flipped"] == 0
    assert abs(rep.post_accuracy - rep.pre_accuracy) <= 0.01
    for p, o in zip(f.passports.passports, originals):
        np.testing.assert_array_equal(p.p_gamma.data, o)


def test_ambiguity2_sweep_rows(mlp_fixture):
    f = mlp_fixture
    rep = ambiguity2_sweep(f.model, f.passports, [0.0, 0.5], f.val_set, steps=5)
    assert [r["flip_fraction"] for r in rep.rows] == [0.0, 0.5]
    assert rep.rows[1]["n_flipped"] == 96
