"""Passports, the passport-to-affine pipeline, and sign signatures.

A passport is a secret pair of tensors ``(p_gamma, p_beta)`` per protected
normalization layer. Each is pushed through the weights of the layer that
feeds the normalization (``W_c``) to get a per-channel vector ``wp``; the
signs of ``wp`` are the signature, and a two-layer bias-free MLP turns
``wp`` into the scale/shift of the passport branch.

Signs are carried internally as int8 in {-1, +1}; :func:`extract_signature`
reports bits in {0, 1}.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autograd import Tensor, conv2d, global_avg_pool, leaky_relu, make_rng, matmul
from .errors import DimensionError, UsageError

ALPHA0 = 0.1
SLOPE = 0.01

CONV = "conv"
FC = "fc"


class PassportSlot(NamedTuple):
    """Where a passport plugs in: the norm layer and its precedent layer's input."""

    layer_id: int
    mode: str  # CONV or FC
    input_shape: tuple  # (C_in, H, W) for CONV, (in,) for FC
    channels: int


@dataclass
class LayerPassport:
    p_gamma: Tensor
    p_beta: Tensor
    layer_id: int
    mode: str

    def __post_init__(self):
        if self.p_gamma.shape != self.p_beta.shape:
            raise DimensionError(
                f"p_gamma {self.p_gamma.shape} and p_beta {self.p_beta.shape} differ"
            )
        if self.mode not in (CONV, FC):
            raise UsageError(f"unknown passport mode {self.mode!r}")


@dataclass
class PassportBundle:
    passports: list[LayerPassport]
    target_signs: list[tuple[np.ndarray, np.ndarray]]  # (gamma, beta) per layer, in {-1, +1}
    owner_id: str
    creation_seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.passports) != len(self.target_signs):
            raise DimensionError("one target-sign pair is needed per passport")

    @property
    def layer_ids(self) -> list[int]:
        return [p.layer_id for p in self.passports]

    def by_layer(self) -> dict[int, LayerPassport]:
        return {p.layer_id: p for p in self.passports}

    def signs_by_layer(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        return {p.layer_id: s for p, s in zip(self.passports, self.target_signs)}

    def expected_bits(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(signs_to_bits(g), signs_to_bits(b)) for g, b in self.target_signs]


@dataclass
class Signature:
    bits: list[tuple[np.ndarray, np.ndarray]]  # (b_gamma, b_beta) per layer, in {0, 1}

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([g, b]) for g, b in self.bits])


def signs_to_bits(signs: np.ndarray) -> np.ndarray:
    return (np.asarray(signs) > 0).astype(np.uint8)


def hash_sign(owner_id: str, layer_id: int, which: str, channel: int) -> int:
    """+1 or -1 from the low bit of SHA-256 over the identifying tuple."""
    msg = f"{owner_id}\x1f{layer_id}\x1f{which}\x1f{channel}".encode()
    return 1 if hashlib.sha256(msg).digest()[0] & 1 else -1


def target_signs_for(owner_id: str, layer_id: int, channels: int) -> tuple[np.ndarray, np.ndarray]:
    g = np.array([hash_sign(owner_id, layer_id, "gamma", i) for i in range(channels)], np.int8)
    b = np.array([hash_sign(owner_id, layer_id, "beta", i) for i in range(channels)], np.int8)
    return g, b


def generate_passports(model_spec, owner_id: str, seed: int) -> PassportBundle:
    """Draw standard-normal passports for every protected layer of ``model_spec``.

    ``model_spec`` is anything with a ``passport_slots()`` method (a
    :class:`~passnorm.models.ModelSpec` or a built model). Passports depend on
    ``seed``; target signs depend only on ``owner_id`` and the slot.
    """
    slots: Sequence[PassportSlot] = model_spec.passport_slots()
    if not slots:
        raise UsageError("model has no passport-enabled normalization layers")
    rng = make_rng(seed)
    passports, signs = [], []
    for slot in slots:
        pg = rng.standard_normal(slot.input_shape).astype(np.float32)
        pb = rng.standard_normal(slot.input_shape).astype(np.float32)
        passports.append(LayerPassport(Tensor(pg), Tensor(pb), slot.layer_id, slot.mode))
        signs.append(target_signs_for(owner_id, slot.layer_id, slot.channels))
    return PassportBundle(passports, signs, owner_id, int(seed))


def transform_passport(W_c: Tensor, p: Tensor, mode: str) -> Tensor:
    """Map a passport to a per-channel vector through the precedent weights.

    conv: ``GAP(conv2d(p, W_c))`` with stride 1, no padding; ``W_c`` is
    (C_out, C_in, k, k) and ``p`` is (C_in, H, W).
    fc: ``W_c^T p`` with ``W_c`` stored (in, out) and ``p`` of length ``in``.
    """
    if mode == CONV:
        if p.ndim != 3 or W_c.ndim != 4 or p.shape[0] != W_c.shape[1]:
            raise DimensionError(f"conv passport {p.shape} does not fit kernel {W_c.shape}")
        return global_avg_pool(conv2d(p, W_c, stride=1, padding=0))
    if mode == FC:
        if p.ndim != 1 or W_c.ndim != 2 or p.shape[0] != W_c.shape[0]:
            raise DimensionError(f"fc passport {p.shape} does not fit weight {W_c.shape}")
        return matmul(p.reshape(1, -1), W_c).reshape(-1)
    raise UsageError(f"unknown passport mode {mode!r}")


def affine_from_passport(wp: Tensor, w1: Tensor, w2: Tensor, slope: float = SLOPE) -> Tensor:
    """``w2^T g(w1^T wp)`` with ``g`` a leaky ReLU; no bias terms."""
    if wp.ndim != 1 or w1.ndim != 2 or w2.ndim != 2:
        raise DimensionError("affine_from_passport expects wp (C,), w1 (C,Ch), w2 (Ch,C)")
    if w1.shape[0] != wp.shape[0] or w2.shape[0] != w1.shape[1]:
        raise DimensionError(f"wp {wp.shape}, w1 {w1.shape}, w2 {w2.shape} do not chain")
    h = leaky_relu(matmul(wp.reshape(1, -1), w1), slope)
    return matmul(h, w2).reshape(-1)


def extract_signature(wp) -> np.ndarray:
    """Bit ``i`` is 1 iff ``wp[i] > 0``; zero maps to 0."""
    data = wp.data if isinstance(wp, Tensor) else np.asarray(wp)
    return (data > 0).astype(np.uint8)


def signature_hinge_loss(wp: Tensor, target_signs, alpha0: float = ALPHA0) -> Tensor:
    """``sum_i max(alpha0 - t_i * wp_i, 0)``."""
    if alpha0 <= 0:
        raise UsageError("alpha0 must be positive")
    t = np.asarray(target_signs, dtype=np.float32)
    if t.shape != wp.shape:
        raise DimensionError(f"target signs {t.shape} vs wp {wp.shape}")
    return (alpha0 - wp * Tensor(t)).relu().sum()
