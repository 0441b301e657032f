"""Shared test oracles and helpers.

The gradient-check harness builds every random instance twice from the same
float32 draws: once upcast to float64 (exact) for the finite-difference
oracle, once at float32. Both analytic gradients are compared against the
same float64 oracle, which keeps the oracle itself free of float32
cancellation and ReLU-kink straddling noise.
"""

import numpy as np
import pytest

from resdense.tensor import (
    Tape,
    Tensor,
    backward,
    finite_diff_grad,
    mul,
    sum_all,
)


def conv2d_reference(x, kernel, bias=None, stride=1, padding=0):
    """Naive nested-loop cross-correlation; the independent conv oracle."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[ni, ci, yi * stride + ky, xi * stride + kx]
                                        * kernel[oi, ci, ky, kx])
                    out[ni, oi, yi, xi] = acc
            if bias is not None:
                out[ni, oi] += bias[oi]
    return out


def max_rel_err(analytic, oracle):
    analytic = np.asarray(analytic, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    return float((np.abs(analytic - oracle) / np.maximum(1.0, np.abs(oracle))).max())


def run_gradcheck(build, seed, tol32=1e-3, tol64=1e-5, check32=True):
    """Check analytic gradients of one random instance at both precisions.

    ``build(seed, dtype)`` returns ``(forward_fn, tensors)`` where forward_fn
    re-runs the op on the (mutable) tensors and every tensor has
    requires_grad set. Instances must draw values at float32 before casting,
    so the float64 twin sees bit-identical values.
    """
    fwd64, tensors64 = build(seed, np.float64)
    out_shape = fwd64().shape
    w_arr = np.random.default_rng(seed + 991).normal(size=out_shape).astype(np.float32)

    def loss64():
        return float((fwd64().data * w_arr).sum())

    with Tape() as tape:
        loss_t = sum_all(mul(fwd64(), Tensor(w_arr.astype(np.float64))))
        backward(tape, loss_t)
    oracle = [finite_diff_grad(lambda _t: loss64(), t).data for t in tensors64]

    for t, fd in zip(tensors64, oracle):
        err = max_rel_err(t.grad, fd)
        assert err < tol64, f"float64 gradient off by {err:.3e} (tol {tol64})"

    if check32:
        fwd32, tensors32 = build(seed, np.float32)
        with Tape() as tape:
            loss_t = sum_all(mul(fwd32(), Tensor(w_arr)))
            backward(tape, loss_t)
        for t, fd in zip(tensors32, oracle):
            err = max_rel_err(t.grad, fd)
            assert err < tol32, f"float32 gradient off by {err:.3e} (tol {tol32})"


def quantize_to_f32_grid(module) -> None:
    """Round a module's parameters to float32-representable values (in its own
    dtype), so float32 and float64 twins of one seed see identical numbers."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float32).astype(p.data.dtype)


def model_gradcheck(make_model_and_input, seed, tol32=1e-3, tol64=1e-5, check32=True):
    """run_gradcheck over every named parameter plus the input of a model."""

    def build(s, dtype):
        model, x = make_model_and_input(s, dtype)
        quantize_to_f32_grid(model)
        tensors = [p for _, p in model.named_parameters()] + [x]
        return (lambda: model.forward(x, mode="train")), tensors

    run_gradcheck(build, seed, tol32=tol32, tol64=tol64, check32=check32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
