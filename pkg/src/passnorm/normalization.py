"""Normalization layers with an optional secret passport branch.

Every layer has an ordinary passport-free path (``gamma0``, ``beta0`` and,
for BatchNorm, running buffers ``running_mu0/var0``). A passport-enabled
layer adds a second path whose scale and shift are computed from a passport
and whose BatchNorm statistics live in their own buffers
(``running_mu1/var1``), so training one path never disturbs the other.

Three passport-branch configurations are supported:

``"A"``  shared statistics, ``gamma1 = wp_gamma`` and ``beta1 = wp_beta`` directly
``"B"``  independent statistics, ``wp`` used directly
``"C"``  independent statistics, ``gamma1``/``beta1`` from a learned bias-free MLP
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autograd import Tensor, make_rng
from .errors import DimensionError, UninitializedStatisticsError, UsageError
from .passport import SLOPE, LayerPassport, affine_from_passport, transform_passport

EPS = 1e-5
MOMENTUM = 0.1
CONFIGS = ("A", "B", "C")
MIN_HIDDEN = 8


class BranchMode(str, Enum):
    PASSPORT_FREE = "free"
    PASSPORT_AWARE = "aware"


FREE = BranchMode.PASSPORT_FREE
AWARE = BranchMode.PASSPORT_AWARE


@dataclass(frozen=True)
class NormKind:
    """Which statistics a layer normalizes with.

    ``name`` is one of ``"bn"``, ``"gn"``, ``"in"``, ``"ln"``; ``groups`` is
    only meaningful for GroupNorm.
    """

    name: str = "bn"
    groups: int | None = None
    eps: float = EPS

    def __post_init__(self):
        if self.name not in ("bn", "gn", "in", "ln"):
            raise UsageError(f"unknown norm kind {self.name!r}")
        if self.eps <= 0:
            raise UsageError("eps must be positive")
        if self.name == "gn" and self.groups is not None and self.groups < 1:
            raise UsageError("groups must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "NormKind":
        """``"bn"``, ``"in"``, ``"ln"``, ``"gn"`` or ``"gn:<groups>"``."""
        name, _, g = text.strip().lower().partition(":")
        return cls(name, int(g) if g else None)

    def resolved_groups(self, channels: int) -> int:
        g = self.groups if self.groups is not None else min(4, channels)
        if channels % g:
            raise UsageError(f"{g} groups do not divide {channels} channels")
        return g

    def __str__(self) -> str:
        return f"gn:{self.groups}" if self.name == "gn" and self.groups else self.name


def _fan_in_uniform(rng: np.random.Generator, shape: tuple) -> Tensor:
    bound = math.sqrt(3.0 / shape[0])
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class PassportNormState:
    """Parameters and buffers of one passport-aware normalization layer.

    ``config`` is None for an ordinary layer; otherwise one of ``CONFIGS``.
    Buffer attributes are plain float32 arrays; learnable ones are Tensors.
    """

    def __init__(
        self,
        channels: int,
        kind: NormKind,
        config: str | None = None,
        seed: int = 0,
        momentum: float = MOMENTUM,
    ):
        if not 0.0 < momentum <= 1.0:
            raise UsageError("momentum must lie in (0, 1]")
        if config is not None and config not in CONFIGS:
            raise UsageError(f"unknown passport configuration {config!r}")
        if kind.name == "gn":
            kind.resolved_groups(channels)
        self.channels = channels
        self.kind = kind
        self.config = config
        self.momentum = momentum
        self.hidden = max(MIN_HIDDEN, channels // 4)

        self.gamma0 = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta0 = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mu0 = self.running_var0 = None
        self.running_mu1 = self.running_var1 = None
        self.tracked0 = self.tracked1 = 0
        if kind.name == "bn":
            self.running_mu0 = np.zeros(channels, np.float32)
            self.running_var0 = np.ones(channels, np.float32)
            if config in ("B", "C"):
                self.running_mu1 = np.zeros(channels, np.float32)
                self.running_var1 = np.ones(channels, np.float32)

        self.w1_gamma = self.w2_gamma = self.w1_beta = self.w2_beta = None
        if config == "C":
            rng = make_rng(seed)
            c, h = channels, self.hidden
            self.w1_gamma = _fan_in_uniform(rng, (c, h))
            self.w2_gamma = _fan_in_uniform(rng, (h, c))
            self.w1_beta = _fan_in_uniform(rng, (c, h))
            self.w2_beta = _fan_in_uniform(rng, (h, c))

    @property
    def passport_enabled(self) -> bool:
        return self.config is not None

    @property
    def has_branch_tensors(self) -> bool:
        return self.w1_gamma is not None or self.running_mu1 is not None

    def free_params(self) -> list[Tensor]:
        return [self.gamma0, self.beta0]

    def branch_params(self) -> list[Tensor]:
        """Learnable tensors that exist only on the passport branch."""
        if self.w1_gamma is None:
            return []
        return [self.w1_gamma, self.w2_gamma, self.w1_beta, self.w2_beta]

    def stat_slot(self, branch: BranchMode) -> int:
        """0 or 1: which running buffers a branch reads and writes."""
        if BranchMode(branch) is AWARE and self.config in ("B", "C"):
            return 1
        return 0

    def buffers(self, slot: int) -> tuple[np.ndarray | None, np.ndarray | None]:
        if slot == 1:
            return self.running_mu1, self.running_var1
        return self.running_mu0, self.running_var0


def _channel_view(x: Tensor) -> tuple:
    if x.ndim == 2:
        return (1, x.shape[1])
    if x.ndim == 4:
        return (1, x.shape[1], 1, 1)
    raise DimensionError(f"normalization expects (N,C) or (N,C,H,W), got {x.shape}")


def _group_layout(x: Tensor, kind: NormKind, channels: int) -> tuple:
    """Shape to reshape ``x`` into so that stats reduce over axis 2."""
    n = x.shape[0]
    if kind.name == "gn":
        return (n, kind.resolved_groups(channels), -1)
    if kind.name == "in":
        if x.ndim != 4:
            raise DimensionError("InstanceNorm needs spatial input (N,C,H,W)")
        return (n, channels, -1)
    return (n, 1, -1)  # ln


def _moments(x: Tensor, kind: NormKind, channels: int):
    """Biased batch moments, keepdims, plus the layout they broadcast against."""
    if x.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got input {x.shape}")
    if kind.name == "bn":
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        mu = x.mean(axis=axes, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
        return x, mu, var
    xr = x.reshape(_group_layout(x, kind, channels))
    mu = xr.mean(axis=2, keepdims=True)
    var = ((xr - mu) ** 2).mean(axis=2, keepdims=True)
    return xr, mu, var


def update_running_stats(state: PassportNormState, branch: BranchMode, batch_mu, batch_var) -> None:
    """EMA update of the selected branch's BatchNorm buffers only."""
    if state.kind.name != "bn":
        raise UsageError(f"running statistics exist only for BatchNorm, not {state.kind.name}")
    slot = state.stat_slot(branch)
    run_mu, run_var = state.buffers(slot)
    if run_mu is None:
        raise UsageError("layer has no passport-branch buffers")
    m = state.momentum
    bm = np.asarray(batch_mu.data if isinstance(batch_mu, Tensor) else batch_mu, np.float64)
    bv = np.asarray(batch_var.data if isinstance(batch_var, Tensor) else batch_var, np.float64)
    run_mu[...] = ((1.0 - m) * run_mu + m * bm.reshape(-1)).astype(np.float32)
    run_var[...] = ((1.0 - m) * run_var + m * bv.reshape(-1)).astype(np.float32)
    if slot == 1:
        state.tracked1 += 1
    else:
        state.tracked0 += 1


def _normalized(x: Tensor, state: PassportNormState, training: bool, branch: BranchMode):
    """Return ``(x_hat, mu, sigma)``; updates BN buffers in training mode."""
    kind = state.kind
    eps = kind.eps
    if kind.name == "bn" and not training:
        slot = state.stat_slot(branch)
        run_mu, run_var = state.buffers(slot)
        tracked = state.tracked1 if slot == 1 else state.tracked0
        if run_mu is None or tracked == 0:
            raise UninitializedStatisticsError(
                f"BatchNorm inference on branch {BranchMode(branch).value!r} before any training update"
            )
        view = _channel_view(x)
        mu = Tensor(run_mu.reshape(view))
        sigma = Tensor(np.sqrt(run_var.astype(np.float64) + eps).astype(np.float32).reshape(view))
        return (x - mu) / sigma, mu, sigma

    xr, mu, var = _moments(x, kind, state.channels)
    sigma = (var + eps).sqrt()
    xhat = (xr - mu) / sigma
    if kind.name == "bn":
        update_running_stats(state, branch, mu.data, var.data)
    else:
        xhat = xhat.reshape(x.shape)
    return xhat, mu, sigma


def normalize_stats(x: Tensor, kind: NormKind, training: bool, state: PassportNormState, branch: BranchMode):
    """Mean and std a layer would normalize ``x`` with.

    Shapes: BN ``(C,)``; GN ``(N, G)``; IN ``(N, C)``; LN ``(N,)``. In
    BN training mode the selected branch's running buffers are updated.
    """
    if kind != state.kind:
        raise UsageError(f"state was built for {state.kind}, not {kind}")
    _, mu, sigma = _normalized(x, state, training, branch)
    if kind.name == "bn":
        return mu.reshape(-1), sigma.reshape(-1)
    if kind.name == "ln":
        return mu.reshape(x.shape[0]), sigma.reshape(x.shape[0])
    return mu.reshape(mu.shape[:2]), sigma.reshape(sigma.shape[:2])


def forward_passport_free(x: Tensor, state: PassportNormState, training: bool = True) -> Tensor:
    """``gamma0 * (x - mu0) / sigma0 + beta0``."""
    xhat, _, _ = _normalized(x, state, training, FREE)
    view = _channel_view(x)
    return state.gamma0.reshape(view) * xhat + state.beta0.reshape(view)


def passport_affine(state: PassportNormState, passport: LayerPassport, W_c: Tensor, slope: float = SLOPE):
    """``(gamma1, beta1, wp_gamma, wp_beta)`` for the passport branch."""
    if not state.passport_enabled:
        raise UsageError("layer is not passport-enabled")
    wp_g = transform_passport(W_c, passport.p_gamma, passport.mode)
    wp_b = transform_passport(W_c, passport.p_beta, passport.mode)
    if wp_g.shape != (state.channels,):
        raise DimensionError(f"passport transform yields {wp_g.shape}, layer has {state.channels} channels")
    if state.config == "C":
        if state.w1_gamma is None:
            raise UsageError("passport-branch parameters are not attached")
        gamma1 = affine_from_passport(wp_g, state.w1_gamma, state.w2_gamma, slope)
        beta1 = affine_from_passport(wp_b, state.w1_beta, state.w2_beta, slope)
    else:
        gamma1, beta1 = wp_g, wp_b
    return gamma1, beta1, wp_g, wp_b


def forward_passport_aware(
    x: Tensor,
    state: PassportNormState,
    passport: LayerPassport,
    W_c: Tensor,
    training: bool = True,
    slope: float = SLOPE,
    return_wp: bool = False,
):
    """``gamma1(p_gamma) * (x - mu1) / sigma1 + beta1(p_beta)``.

    With ``return_wp`` the pre-pipeline vectors ``(wp_gamma, wp_beta)`` are
    returned as well, for the signature loss.
    """
    gamma1, beta1, wp_g, wp_b = passport_affine(state, passport, W_c, slope)
    if state.kind.name == "bn" and state.config in ("B", "C") and state.running_mu1 is None:
        raise UsageError("passport-branch statistics are not attached")
    xhat, _, _ = _normalized(x, state, training, AWARE)
    view = _channel_view(x)
    out = gamma1.reshape(view) * xhat + beta1.reshape(view)
    return (out, wp_g, wp_b) if return_wp else out


def forward_baseline_eq4(
    x: Tensor,
    passport: LayerPassport,
    W_c: Tensor,
    state: PassportNormState,
    training: bool = True,
) -> Tensor:
    """Single-statistics passport layer: ``wp_gamma * norm(x) + wp_beta``.

    Normalization uses the layer's shared (slot 0) statistics with no
    learnable affine; the passport-derived vectors are applied directly.
    """
    wp_g = transform_passport(W_c, passport.p_gamma, passport.mode)
    wp_b = transform_passport(W_c, passport.p_beta, passport.mode)
    kind = state.kind
    view = _channel_view(x)
    if kind.name == "bn" and not training:
        if state.tracked0 == 0:
            raise UninitializedStatisticsError("BatchNorm inference before any training update")
        mu = state.running_mu0.astype(np.float64).reshape(view)
        sd = np.sqrt(state.running_var0.astype(np.float64) + kind.eps).reshape(view)
        x_p = (x - Tensor(mu.astype(np.float32))) / Tensor(sd.astype(np.float32))
    else:
        xr, mu, var = _moments(x, kind, state.channels)
        x_p = ((xr - mu) / (var + kind.eps).sqrt()).reshape(x.shape)
        if kind.name == "bn":
            update_running_stats(state, FREE, mu.data, var.data)
    return wp_g.reshape(view) * x_p + wp_b.reshape(view)
