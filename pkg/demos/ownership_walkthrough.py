"""Library-level tour: embed a signature, ship, verify, and try to forge.

Run with ``python demos/ownership_walkthrough.py``; takes about a minute.
"""
from passnorm.attacks import ambiguity_attack_1, prune_attack
from passnorm.data import blobs, make_trigger_set
from passnorm.models import build_model, export_deployment, toy_mlp
from passnorm.passport import generate_passports
from passnorm.training import TrainConfig, predictor, train
from passnorm.verification import blackbox_verify, detect_signature, fidelity_verify

spec = toy_mlp()
train_set, val_set = blobs(400, seed=1, spread=0.5), blobs(400, seed=1, split="val", spread=0.5)
triggers = make_trigger_set(100, spec.input_shape, spec.num_classes, seed=5)

# The owner's secret: passports plus target signs derived from the owner id.
passports = generate_passports(spec, "alice", seed=101)
model, history = train(build_model(spec, "C", seed=1), train_set, triggers, passports, TrainConfig(seed=1, epochs=80), eval_every=20)
for rec in history.records:
    print(f"epoch {rec['epoch']:3d}  free {rec['acc_free']:.3f}  aware {rec['acc_aware']:.3f}  hinge {rec['hinge']:.4f}")

shipped = export_deployment(model)
print("\nshipped model has", len(shipped.state_dict()), "tensors and no passport branch")
print("trigger accuracy of the shipped copy:", blackbox_verify(predictor(shipped), triggers))
flags, rate = detect_signature(shipped, passports)
print(f"signature bits recovered from the copy: {rate:.3f}, per layer {flags}")

report = fidelity_verify(model, passports, val_set, k_forgeries=5)
print("\n" + report.to_text())

_, pruned = prune_attack(model, 0.3, passports, val_set)
print(f"\nafter pruning 30% of weights: accuracy {pruned.post_accuracy:.3f}, bit detection {pruned.bit_detection:.3f}")

forged = ambiguity_attack_1(model, val_set, num_trials=3, steps=200)
print(f"forging passports from scratch: {forged.pre_accuracy:.3f} -> {forged.post_accuracy:.3f} accuracy")
