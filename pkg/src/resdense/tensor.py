"""Dense N-d tensors plus the differentiable kernels the fusion network needs.

Everything is numpy under the hood. Reverse mode is tape-based: while a
``Tape`` is active, every op that touches a grad-requiring tensor records a
backward rule; ``backward(tape, loss)`` replays the tape in reverse and
populates ``.grad`` on the leaves. Tensors default to float32; pass float64
arrays when running gradient checks that need the extra headroom.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
GEM_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


class Tensor:
    """A dense N-d array with an optional gradient buffer.

    ``data`` is kept C-contiguous (row-major). ``requires_grad`` marks leaves
    whose gradient should be populated by :func:`backward`; intermediate op
    outputs inherit the flag so recording propagates through the graph.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed ops, consumed by one reverse traversal.

    Ops append entries in execution order, so inputs of any entry are either
    leaves or outputs of an earlier entry. A tape belongs to one logical
    thread; independent tapes may run concurrently.
    """

    def __init__(self):
        self._entries: list[TapeEntry] = []

    @property
    def entries(self) -> list[TapeEntry]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None


_ACTIVE_TAPE: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


class _TapePaused:
    def __enter__(self):
        global _ACTIVE_TAPE
        self._saved = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._saved


def paused_tape() -> _TapePaused:
    """Context that suppresses recording, e.g. around finite-difference evals."""
    return _TapePaused()


def record_op(op: str, inputs: Sequence[Tensor], data: np.ndarray,
              backward_fn: Callable) -> Tensor:
    """Wrap an op result and record its backward rule on the active tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in input order.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _ACTIVE_TAPE
    if tape is not None and requires:
        tape._entries.append(TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaves that sit on the tape but are unreachable from the loss get a zero
    gradient. Accumulates into pre-existing ``.grad`` buffers. The tape is
    reset afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    entries = tape._entries
    produced = {id(e.output) for e in entries}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(entries):
        g_out = grads.get(id(entry.output))
        if g_out is None:
            continue
        in_grads = entry.backward_fn(g_out)
        for t, g in zip(entry.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g

    seen: set[int] = set()
    for entry in entries:
        for t in entry.inputs:
            if id(t) in produced or id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g.copy() if t.grad is None else t.grad + g
    tape._entries = []


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; gradient passes through unchanged to both inputs."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (same-shape only)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return record_op("mul", (a, b), a.data * b.data,
                     lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    """Sum over all elements, producing a scalar tensor."""
    return record_op("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                     lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", (x,), np.where(mask, x.data, 0),
                     lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped to the open interval (0, 1) at dtype resolution."""
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    one = x.dtype.type(1)
    zero = x.dtype.type(0)
    s = np.clip(s, np.nextafter(zero, one), np.nextafter(one, zero))
    return record_op("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation; ``kind`` is "relu" or "sigmoid"."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def softmax(x: Tensor) -> Tensor:
    """Row softmax for (N, K) logits; rows sum to 1."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects (N, K), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return record_op("softmax", (x,), s, bwd)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x (N, F), weight (F, K), bias (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"affine expects 2-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"affine inner dims mismatch: input has {x.shape[1]} features, weight expects {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data

    def bwd(g):
        return (g @ weight.data.T, x.data.T @ g, g.sum(axis=0))

    return record_op("affine", (x, weight, bias), out, bwd)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, in argument order."""
    if len(tensors) == 0:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != 4 or ref.data.ndim != 4:
            raise ShapeError("concat_channels expects NCHW tensors")
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ShapeError(
                f"concat_channels batch/spatial mismatch: {ref.shape} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return record_op("concat", tuple(tensors),
                     np.concatenate([t.data for t in tensors], axis=1), bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Extract sliding windows of an already-padded NCHW array.

    Returns (N, C*kh*kw, Ho*Wo), C-contiguous.
    """
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(patches).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add column gradients back to the padded input layout."""
    n, c, h, w = x_shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros(x_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of an NCHW input with an OIKhKw kernel.

    Zero padding; output size floor((H + 2*padding - Kh) / stride) + 1, the
    framework convention.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be OIKhKw, got shape {kernel.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({o},)")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output size {ho}x{wo} is not positive for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}")

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride)                     # (N, C*kh*kw, Ho*Wo)
    w_mat = kernel.data.reshape(o, -1)                     # (O, C*kh*kw)
    out = np.matmul(w_mat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    padded_shape = xp.shape
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        go = g.reshape(n, o, ho * wo)
        g_w = np.einsum("nop,ncp->oc", go, cols).reshape(kernel.shape)
        g_cols = np.matmul(w_mat.T, go)                    # (N, C*kh*kw, Ho*Wo)
        g_xp = _col2im(g_cols, padded_shape, kh, kw, stride)
        if padding > 0:
            g_x = g_xp[:, :, padding:padding + h, padding:padding + w]
        else:
            g_x = g_xp
        if bias is None:
            return (g_x, g_w)
        return (g_x, g_w, g.sum(axis=(0, 2, 3)))

    return record_op("conv2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance buffers for inference-mode batch norm."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_stats: Optional[RunningStats] = None,
                 mode: str = "train", momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    Train mode normalizes with batch statistics and folds them into
    ``running_stats`` (new = momentum * old + (1 - momentum) * batch); infer
    mode normalizes with the running statistics and is per-sample pure.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm2d input must be NCHW, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm2d gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm2d mode must be 'train' or 'infer', got {mode!r}")

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_stats is not None:
            running_stats.mean[:] = momentum * running_stats.mean + (1 - momentum) * mu
            running_stats.var[:] = momentum * running_stats.var + (1 - momentum) * var
    else:
        if running_stats is None:
            raise ValueError("batch_norm2d infer mode needs running_stats")
        mu = running_stats.mean.astype(x.dtype)
        var = running_stats.var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)                     # (C,)
    x_hat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]

        def bwd(g):
            g_gamma = (g * x_hat).sum(axis=(0, 2, 3))
            g_beta = g.sum(axis=(0, 2, 3))
            # batch statistics depend on x, hence the centering terms
            scale = (gamma.data * inv_std)[None, :, None, None]
            g_sum = g.sum(axis=(0, 2, 3), keepdims=True)
            gx_hat_sum = (g * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            g_x = scale * (g - g_sum / m - x_hat * gx_hat_sum / m)
            return (g_x, g_gamma, g_beta)
    else:
        def bwd(g):
            g_gamma = (g * x_hat).sum(axis=(0, 2, 3))
            g_beta = g.sum(axis=(0, 2, 3))
            g_x = g * (gamma.data * inv_std)[None, :, None, None]
            return (g_x, g_gamma, g_beta)

    return record_op("batch_norm2d", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: NCHW -> NC."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=True),)

    return record_op("global_avg_pool", (x,), out, bwd)


def gem_pool(x: Tensor, p=3.0) -> Tensor:
    """Generalized mean pooling: per channel, ((1/|HW|) * sum v^p)^(1/p).

    ``p`` may be a positive scalar, a per-channel array, or a Tensor (in which
    case the exponent itself receives a gradient). p = 1 reduces exactly to
    global average pooling. Fractional exponents require non-negative inputs;
    values are shifted by a small epsilon before the power so a zero feature
    never hits log(0).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"gem_pool input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape

    p_tensor = p if isinstance(p, Tensor) else None
    p_arr = np.asarray(p_tensor.data if p_tensor is not None else p, dtype=np.float64)
    if p_arr.ndim not in (0, 1) or (p_arr.ndim == 1 and p_arr.shape[0] != c):
        raise ShapeError(f"gem_pool exponent must be scalar or ({c},), got shape {p_arr.shape}")
    if np.any(p_arr <= 0):
        raise ValueError(f"gem_pool exponent must be > 0, got {p_arr}")

    fractional = not np.all(p_arr == np.round(p_arr))
    if fractional and np.any(x.data < 0):
        raise ValueError("gem_pool with a fractional exponent requires non-negative inputs")

    if p_tensor is None and p_arr.ndim == 0 and float(p_arr) == 1.0:
        return global_avg_pool(x)

    pk = p_arr.astype(x.dtype).reshape(1, -1) if p_arr.ndim == 1 else x.dtype.type(p_arr)
    pk4 = pk.reshape(1, -1, 1, 1) if p_arr.ndim == 1 else pk
    y = x.data + x.dtype.type(GEM_EPS)
    yp = np.power(y, pk4)
    s = yp.mean(axis=(2, 3))                               # (N, C)
    out = np.power(s, 1.0 / pk)

    def bwd(g):
        g_x = g[:, :, None, None] * np.power(s, 1.0 / pk - 1)[:, :, None, None] \
            * np.power(y, pk4 - 1) / (h * w)
        if p_tensor is None:
            return (g_x,)
        # out = exp(log(s)/p): differentiate through both s and the 1/p power
        ds_dp = (yp * np.log(y)).mean(axis=(2, 3))
        dout_dp = out * (-np.log(s) / pk ** 2 + ds_dp / (pk * s))
        g_p = (g * dout_dp).sum(axis=0) if p_arr.ndim == 1 else np.asarray((g * dout_dp).sum(), dtype=x.dtype)
        return (g_x, g_p.astype(p_tensor.dtype))

    inputs = (x,) if p_tensor is None else (x, p_tensor)
    return record_op("gem_pool", inputs, out, bwd)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide by the kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d input must be NCHW, got shape {x.shape}")
    if stride != kernel:
        raise ShapeError("avg_pool2d supports stride == kernel only")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {kernel}")
    ho, wo = h // kernel, w // kernel
    out = x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def bwd(g):
        g_x = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        return (g_x.astype(x.dtype, copy=False),)

    return record_op("avg_pool2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     h: Optional[float] = None) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function at ``x``.

    With ``h=None`` the step is cbrt(machine eps) scaled per element; an
    explicit ``h`` is used verbatim. Serves as the independent oracle for
    every analytic backward rule.
    """
    data = x.data
    auto_h = h is None
    base = float(np.cbrt(np.finfo(data.dtype).eps)) if auto_h else float(h)
    grad = np.zeros_like(data)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    with paused_tape():
        for i in range(flat.size):
            orig = float(flat[i])
            step = base * max(1.0, abs(orig)) if auto_h else base
            flat[i] = orig + step
            fp = _as_scalar(f(x))
            flat[i] = orig - step
            fm = _as_scalar(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad)


def _as_scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


# ---------------------------------------------------------------------------
# .ctf tensor files: "CTF1" | u32 rank | u32 dims... | f32 row-major payload

CTF_MAGIC = b"CTF1"


def write_ctf(path, array) -> None:
    """Write an array as a .ctf tensor file (little-endian float32)."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(CTF_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_ctf(path) -> np.ndarray:
    """Read a .ctf tensor file back into a float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_ctf(blob, name=str(path))[0]


def decode_ctf(blob: bytes, offset: int = 0, name: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one .ctf record from ``blob`` starting at ``offset``.

    Returns (array, next_offset) so callers can parse concatenated records.
    """
    if blob[offset:offset + 4] != CTF_MAGIC:
        raise ValueError(f"{name}: bad magic, not a .ctf tensor")
    offset += 4
    (rank,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if rank > 32:
        raise ValueError(f"{name}: implausible rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    if any(d == 0 for d in dims):
        raise ValueError(f"{name}: zero-sized dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    payload = blob[offset:offset + nbytes]
    if len(payload) != nbytes:
        raise ValueError(f"{name}: truncated payload ({len(payload)} of {nbytes} bytes)")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return arr, offset + nbytes
