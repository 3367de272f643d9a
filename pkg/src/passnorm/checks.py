"""Gradient-check cases for every differentiable operation.

Each case builder takes a generator and returns ``(f, x)`` for
:func:`~passnorm.autograd.grad_check`. Inputs to piecewise-linear ops are
kept away from their kinks so central differences stay valid.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import (
    Tensor,
    avg_pool2d,
    conv2d,
    cross_entropy,
    global_avg_pool,
    grad_check,
    leaky_relu,
    make_rng,
    matmul,
)
from .normalization import AWARE, FREE, NormKind, PassportNormState, forward_passport_aware, forward_passport_free
from .passport import CONV, FC, LayerPassport, affine_from_passport, signature_hinge_loss, transform_passport

TOLERANCE = 1e-3
Case = Callable[[np.random.Generator], tuple]


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _w(rng, shape):
    return Tensor(rng.normal(size=shape))


def _binary(op):
    def case(rng):
        b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)))
        c = rng.normal(size=(3, 4))
        return (lambda x: (op(x, b) * Tensor(c)).sum()), rng.normal(size=(3, 4))

    return case


def _unary(op, sampler=None):
    def case(rng):
        x = sampler(rng) if sampler else rng.normal(size=(3, 4))
        c = rng.normal(size=np.shape(op(Tensor(x)).data))
        return (lambda t: (op(t) * Tensor(c)).sum()), x

    return case


def _case_matmul(rng):
    b = _w(rng, (4, 5))
    c = rng.normal(size=(3, 5))
    return (lambda a: (matmul(a, b) * Tensor(c)).sum()), rng.normal(size=(3, 4))


def _case_matmul_right(rng):
    a = _w(rng, (3, 4))
    c = rng.normal(size=(3, 5))
    return (lambda b: (matmul(a, b) * Tensor(c)).sum()), rng.normal(size=(4, 5))


def _case_conv_input(stride, pad):
    def case(rng):
        w = _w(rng, (3, 2, 3, 3))
        out = conv2d(Tensor(np.zeros((2, 2, 6, 6))), w, stride, pad)
        c = rng.normal(size=out.shape)
        return (lambda x: (conv2d(x, w, stride, pad) * Tensor(c)).sum()), rng.normal(size=(2, 2, 6, 6))

    return case


def _case_conv_kernel(stride, pad):
    def case(rng):
        x = _w(rng, (2, 2, 6, 6))
        out = conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), stride, pad)
        c = rng.normal(size=out.shape)
        return (lambda w: (conv2d(x, w, stride, pad) * Tensor(c)).sum()), rng.normal(size=(3, 2, 3, 3))

    return case


def _case_cross_entropy(rng):
    labels = rng.integers(0, 5, size=6)
    return (lambda z: cross_entropy(z, labels)), rng.normal(size=(6, 5))


def _norm_case(kind: str, branch, training=True):
    def case(rng):
        nk = NormKind.parse(kind)
        st = PassportNormState(4, nk, "C", seed=int(rng.integers(1 << 31)))
        st.gamma0.data[...] = rng.normal(size=4)
        st.beta0.data[...] = rng.normal(size=4)
        p = LayerPassport(_w(rng, (2, 5, 5)), _w(rng, (2, 5, 5)), 1, CONV)
        W = _w(rng, (4, 2, 3, 3))
        c = rng.normal(size=(3, 4, 4, 4))
        if branch is FREE:
            fwd = lambda x: forward_passport_free(x, st, training)
        else:
            fwd = lambda x: forward_passport_aware(x, st, p, W, training)
        return (lambda x: (fwd(x) * Tensor(c)).sum()), rng.normal(size=(3, 4, 4, 4))

    return case


def _case_transform(mode):
    def case(rng):
        if mode == CONV:
            p = _w(rng, (2, 5, 5))
            shape = (4, 2, 3, 3)
        else:
            p = _w(rng, (6,))
            shape = (6, 4)
        c = rng.normal(size=4)
        return (lambda W: (transform_passport(W, p, mode) * Tensor(c)).sum()), rng.normal(size=shape)

    return case


def _case_transform_passport(rng):
    W = _w(rng, (4, 2, 3, 3))
    c = rng.normal(size=4)
    return (lambda p: (transform_passport(W, p, CONV) * Tensor(c)).sum()), rng.normal(size=(2, 5, 5))


def _case_affine(rng):
    w1, w2 = _w(rng, (4, 8)), _w(rng, (8, 4))
    c = rng.normal(size=4)
    # keep every hidden pre-activation clear of the leaky-ReLU kink
    for _ in range(100):
        wp = rng.normal(size=4)
        if np.min(np.abs(wp @ w1.data)) > 0.05:
            break
    return (lambda x: (affine_from_passport(x, w1, w2) * Tensor(c)).sum()), wp


def _case_hinge(rng):
    t = rng.choice([-1, 1], size=6)
    wp = rng.uniform(-0.5, 0.5, size=6)
    wp = np.where(np.abs(0.1 - t * wp) < 0.02, wp + 0.05 * t, wp)
    return (lambda x: signature_hinge_loss(x, t)), wp


def _case_composed(rng):
    """Passport-aware conv layer, task loss and signature hinge, w.r.t. ``W_c``."""
    st = PassportNormState(4, NormKind.parse("bn"), "C", seed=int(rng.integers(1 << 31)))
    p = LayerPassport(_w(rng, (2, 6, 6)), _w(rng, (2, 6, 6)), 1, CONV)
    xin = _w(rng, (3, 2, 6, 6))
    head = _w(rng, (4, 3))
    labels = rng.integers(0, 3, size=3)
    tg, tb = rng.choice([-1, 1], size=4), rng.choice([-1, 1], size=4)

    def f(W):
        h, wg, wb = forward_passport_aware(conv2d(xin, W, 1, 1), st, p, W, True, return_wp=True)
        logits = matmul(global_avg_pool(h), head)
        return cross_entropy(logits, labels) + 0.5 * (signature_hinge_loss(wg, tg) + signature_hinge_loss(wb, tb))

    return f, rng.normal(size=(4, 2, 3, 3))


def _case_composed_fc(rng):
    """FC-mode passport layer with the full objective, w.r.t. the passport."""
    st = PassportNormState(5, NormKind.parse("bn"), "C", seed=int(rng.integers(1 << 31)))
    W = _w(rng, (6, 5))
    xin = _w(rng, (4, 6))
    head = _w(rng, (5, 3))
    labels = rng.integers(0, 3, size=4)
    pb = _w(rng, (6,))
    tg, tb = rng.choice([-1, 1], size=5), rng.choice([-1, 1], size=5)

    def f(pg):
        lp = LayerPassport(pg, pb, 1, FC)
        h, wg, wb = forward_passport_aware(matmul(xin, W), st, lp, W, True, return_wp=True)
        return cross_entropy(matmul(h, head), labels) + signature_hinge_loss(wg, tg) + signature_hinge_loss(wb, tb)

    return f, rng.normal(size=6)


CASES: dict[str, Case] = {
    "add": _binary(lambda x, b: x + b),
    "sub": _binary(lambda x, b: x - b),
    "mul": _binary(lambda x, b: x * b),
    "div": _binary(lambda x, b: x / b),
    "rdiv": _binary(lambda x, b: b / (x * x + 1.0)),
    "neg": _unary(lambda t: -t),
    "pow": _unary(lambda t: t**3),
    "sqrt": _unary(lambda t: t.sqrt(), lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "sum_axis": _unary(lambda t: t.sum(axis=1)),
    "mean_axis": _unary(lambda t: t.mean(axis=0, keepdims=True)),
    "reshape": _unary(lambda t: t.reshape(4, 3)),
    "transpose": _unary(lambda t: t.transpose(1, 0)),
    "getitem": _unary(lambda t: t[1:, ::2]),
    "relu": _unary(lambda t: t.relu(), lambda r: _away_from_zero(r, (3, 4))),
    "leaky_relu": _unary(lambda t: leaky_relu(t, 0.01), lambda r: _away_from_zero(r, (3, 4))),
    "matmul_left": _case_matmul,
    "matmul_right": _case_matmul_right,
    "conv2d_input": _case_conv_input(1, 1),
    "conv2d_input_stride2": _case_conv_input(2, 0),
    "conv2d_kernel": _case_conv_kernel(1, 1),
    "conv2d_kernel_stride2": _case_conv_kernel(2, 1),
    "global_avg_pool": _unary(global_avg_pool, lambda r: r.normal(size=(2, 3, 4, 4))),
    "avg_pool2d": _unary(lambda t: avg_pool2d(t, 2), lambda r: r.normal(size=(2, 3, 4, 4))),
    "cross_entropy": _case_cross_entropy,
    "bn_free": _norm_case("bn", FREE),
    "gn_free": _norm_case("gn:2", FREE),
    "in_free": _norm_case("in", FREE),
    "ln_free": _norm_case("ln", FREE),
    "bn_aware": _norm_case("bn", AWARE),
    "gn_aware": _norm_case("gn:2", AWARE),
    "transform_conv": _case_transform(CONV),
    "transform_fc": _case_transform(FC),
    "transform_wrt_passport": _case_transform_passport,
    "affine_from_passport": _case_affine,
    "signature_hinge": _case_hinge,
    "composed_conv_layer_loss": _case_composed,
    "composed_fc_layer_loss": _case_composed_fc,
}


def run_case(name: str, trials: int = 20, seed: int = 0) -> list[float]:
    """Max relative error of ``trials`` random instances of one case."""
    errs = []
    for t in range(trials):
        rng = make_rng(np.random.SeedSequence([int(seed), t, *name.encode()]).generate_state(1)[0])
        f, x = CASES[name](rng)
        errs.append(grad_check(f, x))
    return errs


def run_all(trials: int = 20, seed: int = 0, names=None) -> dict[str, float]:
    return {n: max(run_case(n, trials, seed)) for n in (names or CASES)}
