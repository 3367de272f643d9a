"""Small reference networks whose normalization layers carry passport branches.

A :class:`ModelSpec` is a flat list of layer dicts, e.g.::

    {"type": "conv", "out": 8, "k": 3, "pad": 1}
    {"type": "norm"}
    {"type": "relu"}
    {"type": "avgpool", "size": 2}
    {"type": "gap"}
    {"type": "fc", "out": 4, "bias": True}

Each ``norm`` entry normalizes the output of the nearest preceding ``conv``
or ``fc`` layer, whose kernel is the ``W_c`` its passport is pushed through.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, avg_pool2d, conv2d, global_avg_pool, make_rng, matmul, relu
from .errors import KeystoreError, SpecError, UsageError
from .normalization import (
    AWARE,
    CONFIGS,
    FREE,
    BranchMode,
    NormKind,
    PassportNormState,
    forward_passport_aware,
    forward_passport_free,
)
from .passport import CONV, FC, PassportBundle, PassportSlot

WEIGHTED = ("conv", "fc")
BRANCH_MARK = ".passport."


@dataclass
class ModelSpec:
    layers: list[dict]
    input_shape: tuple
    num_classes: int
    norm: NormKind = field(default_factory=NormKind)
    passport_mask: list[bool] | None = None  # None: every norm layer protected

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.passport_mask is None:
            self.passport_mask = [True] * len(self.norm_layer_ids())
        self.passport_mask = [bool(m) for m in self.passport_mask]
        self.validate()

    def norm_layer_ids(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer["type"] == "norm"]

    def precedent(self, norm_id: int) -> int | None:
        for j in range(norm_id - 1, -1, -1):
            if self.layers[j]["type"] in WEIGHTED:
                return j
        return None

    def input_shapes(self) -> list[tuple]:
        """Per-sample input shape of every layer, plus the output shape last."""
        shapes = [self.input_shape]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            t = layer["type"]
            if t == "conv":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: conv needs (C,H,W) input, got {shape}")
                k, pad, stride = layer.get("k", 3), layer.get("pad", 0), layer.get("stride", 1)
                h = (shape[1] + 2 * pad - k) // stride + 1
                w = (shape[2] + 2 * pad - k) // stride + 1
                if h < 1 or w < 1:
                    raise SpecError(f"layer {i}: kernel {k} too large for input {shape}")
                shape = (layer["out"], h, w)
            elif t == "fc":
                if len(shape) != 1:
                    raise SpecError(f"layer {i}: fc needs flat input, got {shape}")
                shape = (layer["out"],)
            elif t == "avgpool":
                s = layer.get("size", 2)
                if len(shape) != 3 or shape[1] % s or shape[2] % s:
                    raise SpecError(f"layer {i}: cannot pool {shape} by {s}")
                shape = (shape[0], shape[1] // s, shape[2] // s)
            elif t == "gap":
                shape = (shape[0],)
            elif t == "flatten":
                shape = (int(np.prod(shape)),)
            elif t not in ("norm", "relu"):
                raise SpecError(f"layer {i}: unknown layer type {t!r}")
            shapes.append(shape)
        return shapes

    def validate(self) -> None:
        norms = self.norm_layer_ids()
        if len(self.passport_mask) != len(norms):
            raise SpecError(f"passport mask has {len(self.passport_mask)} entries for {len(norms)} norm layers")
        for nid, enabled in zip(norms, self.passport_mask):
            if self.precedent(nid) is None:
                raise SpecError(f"norm layer {nid} has no preceding conv/fc layer")
        shapes = self.input_shapes()
        if shapes[-1] != (self.num_classes,):
            raise SpecError(f"network output {shapes[-1]} does not match {self.num_classes} classes")

    def passport_slots(self) -> list[PassportSlot]:
        shapes = self.input_shapes()
        slots = []
        for nid, enabled in zip(self.norm_layer_ids(), self.passport_mask):
            if not enabled:
                continue
            j = self.precedent(nid)
            mode = CONV if self.layers[j]["type"] == "conv" else FC
            slots.append(PassportSlot(nid, mode, shapes[j], shapes[nid][0]))
        return slots

    def with_mask(self, mask: list[bool]) -> "ModelSpec":
        return ModelSpec(copy.deepcopy(self.layers), self.input_shape, self.num_classes, self.norm, list(mask))

    def to_dict(self) -> dict:
        return {
            "layers": copy.deepcopy(self.layers),
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "norm": str(self.norm),
            "passport_mask": list(self.passport_mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(d["layers"], tuple(d["input_shape"]), int(d["num_classes"]), NormKind.parse(d.get("norm", "bn")), d.get("passport_mask"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed model spec: {exc}") from exc


def toy_mlp(input_dim: int = 16, num_classes: int = 4, norm: str = "bn", mask=None) -> ModelSpec:
    """input -> 64 -> 32 -> classes, a normalization after each hidden FC."""
    layers = [
        {"type": "fc", "out": 64},
        {"type": "norm"},
        {"type": "relu"},
        {"type": "fc", "out": 32},
        {"type": "norm"},
        {"type": "relu"},
        {"type": "fc", "out": num_classes, "bias": True},
    ]
    return ModelSpec(layers, (input_dim,), num_classes, NormKind.parse(norm), mask)


def toy_cnn(input_shape=(1, 8, 8), num_classes: int = 4, norm: str = "bn", mask=None) -> ModelSpec:
    """Three 3x3 convs (8, 16, 32 channels) with norms, a pool, GAP and an FC head."""
    layers = [
        {"type": "conv", "out": 8, "k": 3, "pad": 1},
        {"type": "norm"},
        {"type": "relu"},
        {"type": "avgpool", "size": 2},
        {"type": "conv", "out": 16, "k": 3, "pad": 1},
        {"type": "norm"},
        {"type": "relu"},
        {"type": "conv", "out": 32, "k": 3, "pad": 1},
        {"type": "norm"},
        {"type": "relu"},
        {"type": "gap"},
        {"type": "fc", "out": num_classes, "bias": True},
    ]
    return ModelSpec(layers, tuple(input_shape), num_classes, NormKind.parse(norm), mask)


@dataclass
class BranchParams:
    """The owner-held half of a protected model: config plus branch tensors."""

    config: str
    layer_ids: list[int]
    tensors: dict[str, np.ndarray]


class Model:
    """A built network. Use :func:`build_model` rather than constructing directly."""

    def __init__(self, spec: ModelSpec, config: str | None, seed: int):
        self.spec = spec
        self.config = config
        self.seed = int(seed)
        self.deployed = False
        self.weights: dict[int, Tensor] = {}
        self.biases: dict[int, Tensor] = {}
        self.norms: dict[int, PassportNormState] = {}
        self.passports: PassportBundle | None = None

    # -- parameter views ------------------------------------------------------

    @property
    def protected_layers(self) -> list[int]:
        return [i for i, st in self.norms.items() if st.passport_enabled]

    def W_c(self, norm_id: int) -> Tensor:
        return self.weights[self.spec.precedent(norm_id)]

    def passport_slots(self) -> list[PassportSlot]:
        return self.spec.passport_slots()

    def free_params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for i in range(len(self.spec.layers)):
            if i in self.weights:
                out.append(self.weights[i])
            if i in self.biases:
                out.append(self.biases[i])
            if i in self.norms:
                out.extend(self.norms[i].free_params())
        return out

    def shared_params(self) -> list[Tensor]:
        """Parameters both branches train: conv/fc kernels and biases."""
        return [t for i in sorted(self.weights) for t in ([self.weights[i]] + ([self.biases[i]] if i in self.biases else []))]

    def branch_params(self) -> list[Tensor]:
        return [t for i in sorted(self.norms) for t in self.norms[i].branch_params()]

    def aware_params(self) -> list[Tensor]:
        """Parameters a passport-aware step updates."""
        return self.shared_params() + self.branch_params()

    def prunable(self) -> dict[str, Tensor]:
        return {f"layer{i}.weight": self.weights[i] for i in sorted(self.weights)}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every tensor and buffer by name, in layer order (live views)."""
        d: dict[str, np.ndarray] = {}
        for i in range(len(self.spec.layers)):
            if i in self.weights:
                d[f"layer{i}.weight"] = self.weights[i].data
            if i in self.biases:
                d[f"layer{i}.bias"] = self.biases[i].data
            if i in self.norms:
                st = self.norms[i]
                d[f"layer{i}.gamma0"] = st.gamma0.data
                d[f"layer{i}.beta0"] = st.beta0.data
                if st.running_mu0 is not None:
                    d[f"layer{i}.running_mu0"] = st.running_mu0
                    d[f"layer{i}.running_var0"] = st.running_var0
                    d[f"layer{i}.tracked0"] = np.array([st.tracked0], np.float32)
                d.update(_branch_tensors(i, st))
        return d

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(d) != set(expected):
            missing = sorted(set(expected) - set(d))
            extra = sorted(set(d) - set(expected))
            raise KeystoreError(f"tensor set mismatch; missing={missing} unexpected={extra}")
        for name, arr in d.items():
            if np.shape(arr) != expected[name].shape:
                raise KeystoreError(f"{name}: shape {np.shape(arr)} != {expected[name].shape}")
        for i in range(len(self.spec.layers)):
            if i in self.weights:
                self.weights[i].data[...] = d[f"layer{i}.weight"]
            if i in self.biases:
                self.biases[i].data[...] = d[f"layer{i}.bias"]
            if i in self.norms:
                _load_norm(i, self.norms[i], d)

    def parameter_count(self) -> int:
        return sum(a.size for k, a in self.state_dict().items() if "tracked" not in k)

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def run(self, x, branch: BranchMode = FREE, passports: PassportBundle | None = None, training: bool = False):
        """Forward pass returning ``(logits, wps)``.

        ``wps`` maps each protected layer id to ``(wp_gamma, wp_beta)`` on the
        passport-aware branch and is empty on the passport-free branch.
        """
        branch = BranchMode(branch)
        if branch is AWARE:
            if self.deployed:
                raise UsageError("deployment model has no passport branch; attach it first")
            passports = passports if passports is not None else self.passports
            if passports is None:
                raise UsageError("passport-aware forward needs a passport bundle")
            by_layer = passports.by_layer()
            missing = [i for i in self.protected_layers if i not in by_layer]
            if missing:
                raise KeystoreError(f"no passport for protected layers {missing}")
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))
        if h.shape[1:] != self.spec.input_shape:
            h = h.reshape((-1,) + self.spec.input_shape)
        wps: dict[int, tuple[Tensor, Tensor]] = {}
        for i, layer in enumerate(self.spec.layers):
            t = layer["type"]
            if t == "conv":
                h = conv2d(h, self.weights[i], layer.get("stride", 1), layer.get("pad", 0))
            elif t == "fc":
                h = matmul(h, self.weights[i])
                if i in self.biases:
                    h = h + self.biases[i]
            elif t == "norm":
                st = self.norms[i]
                if branch is AWARE and st.passport_enabled:
                    h, wg, wb = forward_passport_aware(h, st, by_layer[i], self.W_c(i), training, return_wp=True)
                    wps[i] = (wg, wb)
                else:
                    h = forward_passport_free(h, st, training)
            elif t == "relu":
                h = relu(h)
            elif t == "avgpool":
                h = avg_pool2d(h, layer.get("size", 2))
            elif t == "gap":
                h = global_avg_pool(h)
            elif t == "flatten":
                h = h.reshape(h.shape[0], -1)
        return h, wps


def _branch_tensors(i: int, st: PassportNormState) -> dict[str, np.ndarray]:
    d = {}
    p = f"layer{i}{BRANCH_MARK}"
    if st.w1_gamma is not None:
        d[p + "w1_gamma"] = st.w1_gamma.data
        d[p + "w2_gamma"] = st.w2_gamma.data
        d[p + "w1_beta"] = st.w1_beta.data
        d[p + "w2_beta"] = st.w2_beta.data
    if st.running_mu1 is not None:
        d[p + "running_mu1"] = st.running_mu1
        d[p + "running_var1"] = st.running_var1
        d[p + "tracked1"] = np.array([st.tracked1], np.float32)
    return d


def _load_norm(i: int, st: PassportNormState, d: dict) -> None:
    st.gamma0.data[...] = d[f"layer{i}.gamma0"]
    st.beta0.data[...] = d[f"layer{i}.beta0"]
    if st.running_mu0 is not None:
        st.running_mu0[...] = d[f"layer{i}.running_mu0"]
        st.running_var0[...] = d[f"layer{i}.running_var0"]
        st.tracked0 = int(d[f"layer{i}.tracked0"][0])
    p = f"layer{i}{BRANCH_MARK}"
    if st.w1_gamma is not None:
        for name in ("w1_gamma", "w2_gamma", "w1_beta", "w2_beta"):
            getattr(st, name).data[...] = d[p + name]
    if st.running_mu1 is not None:
        st.running_mu1[...] = d[p + "running_mu1"]
        st.running_var1[...] = d[p + "running_var1"]
        st.tracked1 = int(d[p + "tracked1"][0])


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def build_model(spec: ModelSpec, config: str | None = "C", seed: int = 0) -> Model:
    """Initialize a model; ``config`` picks the passport-branch variant (A/B/C).

    Norm layers masked off in ``spec.passport_mask`` get no branch at all.
    """
    if config is not None and config not in CONFIGS:
        raise UsageError(f"unknown configuration {config!r}")
    spec.validate()
    model = Model(spec, config, seed)
    rng = make_rng(seed)
    shapes = spec.input_shapes()
    mask = dict(zip(spec.norm_layer_ids(), spec.passport_mask))
    for i, layer in enumerate(spec.layers):
        t = layer["type"]
        if t == "conv":
            k, c_in = layer.get("k", 3), shapes[i][0]
            model.weights[i] = _he_uniform(rng, (layer["out"], c_in, k, k), c_in * k * k)
        elif t == "fc":
            n_in = shapes[i][0]
            model.weights[i] = _he_uniform(rng, (n_in, layer["out"]), n_in)
            if layer.get("bias", False):
                model.biases[i] = Tensor(np.zeros(layer["out"], np.float32), requires_grad=True)
        elif t == "norm":
            cfg = config if mask[i] else None
            sub_seed = int(rng.integers(0, 2**63 - 1))
            model.norms[i] = PassportNormState(shapes[i][0], spec.norm, cfg, seed=sub_seed)
    return model


def forward(model: Model, x, branch: BranchMode = FREE, passports: PassportBundle | None = None, training: bool = False) -> Tensor:
    """Logits of ``model`` on ``x`` through the chosen branch."""
    return model.run(x, branch, passports, training)[0]


def extract_branch(model: Model) -> BranchParams:
    """Copy out the passport-branch half of a protected model."""
    if model.deployed:
        raise UsageError("deployment model carries no passport branch")
    tensors = {}
    for i in sorted(model.norms):
        tensors.update({k: v.copy() for k, v in _branch_tensors(i, model.norms[i]).items()})
    return BranchParams(model.config or "C", model.protected_layers, tensors)


def export_deployment(model: Model) -> Model:
    """Strip every passport-branch tensor, leaving a plain normalized network."""
    out = copy.deepcopy(model)
    out.spec = model.spec.with_mask([False] * len(model.spec.norm_layer_ids()))
    out.config = None
    out.deployed = True
    out.passports = None
    for st in out.norms.values():
        st.config = None
        st.w1_gamma = st.w2_gamma = st.w1_beta = st.w2_beta = None
        st.running_mu1 = st.running_var1 = None
        st.tracked1 = 0
    return out


def attach_branch(deployed: Model, branch: BranchParams, passports: PassportBundle | None = None) -> Model:
    """Rebuild the verification model from a deployed one plus the owner's branch."""
    norm_ids = deployed.spec.norm_layer_ids()
    if any(i not in norm_ids for i in branch.layer_ids):
        raise KeystoreError(f"branch layer ids {branch.layer_ids} do not match norm layers {norm_ids}")
    if passports is not None and sorted(passports.layer_ids) != sorted(branch.layer_ids):
        raise KeystoreError(f"passport layers {passports.layer_ids} != branch layers {branch.layer_ids}")
    out = copy.deepcopy(deployed)
    out.spec = deployed.spec.with_mask([i in branch.layer_ids for i in norm_ids])
    out.config = branch.config
    out.deployed = False
    template = build_model(out.spec, branch.config, seed=0)
    for i in branch.layer_ids:
        fresh = template.norms[i]
        st = out.norms[i]
        if fresh.channels != st.channels:
            raise KeystoreError(f"layer {i}: channel count differs from the keystore")
        st.config = branch.config
        st.hidden = fresh.hidden
        st.w1_gamma, st.w2_gamma, st.w1_beta, st.w2_beta = (
            fresh.w1_gamma, fresh.w2_gamma, fresh.w1_beta, fresh.w2_beta,
        )
        st.running_mu1, st.running_var1 = fresh.running_mu1, fresh.running_var1
    expected = {}
    for i in branch.layer_ids:
        expected.update(_branch_tensors(i, out.norms[i]))
    if set(expected) != set(branch.tensors):
        raise KeystoreError(
            f"branch tensors do not fit the model; expected {sorted(expected)}, got {sorted(branch.tensors)}"
        )
    for name, arr in branch.tensors.items():
        if np.shape(arr) != expected[name].shape:
            raise KeystoreError(f"{name}: shape {np.shape(arr)} != {expected[name].shape}")
    for i in branch.layer_ids:
        st = out.norms[i]
        p = f"layer{i}{BRANCH_MARK}"
        if st.w1_gamma is not None:
            for name in ("w1_gamma", "w2_gamma", "w1_beta", "w2_beta"):
                getattr(st, name).data[...] = branch.tensors[p + name]
        if st.running_mu1 is not None:
            st.running_mu1[...] = branch.tensors[p + "running_mu1"]
            st.running_var1[...] = branch.tensors[p + "running_var1"]
            st.tracked1 = int(branch.tensors[p + "tracked1"][0])
    out.passports = passports
    return out
