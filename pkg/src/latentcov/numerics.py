"""Dense-array layer numerics with hand-written backward passes.

Arrays handed to the public ops are laid out ``(batch, channel, time)``.
The convolution kernels themselves work channels-last ``(batch, time,
channel)`` because that lets every tap become one contiguous GEMM; the
autoencoder calls those kernels directly to skip the transposes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_MAGIC = b"RCVW"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class CheckpointError(ValueError):
    pass


@dataclass
class TensorB:
    """A ``(batch, channel, time)`` array with an optional gradient slot."""

    data: np.ndarray
    grad: np.ndarray | None = None
    _backward: Callable[[], None] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"TensorB needs 3 axes, got shape {self.data.shape}", axis="rank")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Push ``grad`` (or the stored grad) one op back to this tensor's inputs."""
        if grad is not None:
            self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        if self.grad is None:
            raise ValueError("no gradient to propagate")
        if self._backward is not None:
            self._backward()


@dataclass
class Param:
    """Trainable array plus its gradient and Adam moments."""

    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> "Param":
        return Param(self.value.astype(dtype), self.grad.astype(dtype),
                     self.m.astype(dtype), self.v.astype(dtype), self.step_count)

    def copy(self) -> "Param":
        return self.astype(self.value.dtype)


# ---------------------------------------------------------------------------
# channels-last convolution kernels
# ---------------------------------------------------------------------------

def half_padding(n_in: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(n_out, pad_left, pad_right)`` for "half" (SAME) padding."""
    n_out = -(-n_in // stride)
    total = max((n_out - 1) * stride + kernel - n_in, 0)
    return n_out, total // 2, total - total // 2


class _ConvGeometry:
    """Index bookkeeping shared by the forward and adjoint kernels.

    A stride-``s`` convolution over a padded signal of length ``Np`` (a
    multiple of ``s``) is rewritten as a stride-1 convolution with
    ``ceil(K/s)`` taps over the signal reshaped to ``(Np/s, s*C)``.  Flattening
    the batch into rows turns each tap into a single GEMM on a contiguous view;
    rows that straddle two batch items are computed and thrown away.
    """

    def __init__(self, batch: int, n_in: int, kernel: int, stride: int):
        self.batch, self.n_in, self.kernel, self.stride = batch, n_in, kernel, stride
        self.n_out, self.pad_left, pad_right = half_padding(n_in, kernel, stride)
        self.taps = -(-kernel // stride)
        n_pad = max(n_in + self.pad_left + pad_right, (self.n_out + self.taps - 1) * stride)
        self.n_pad = -(-n_pad // stride) * stride
        self.rows_per_item = self.n_pad // stride
        self.rows = batch * self.rows_per_item
        self.valid_rows = self.rows - self.taps + 1

    def pack_weight(self, w_kco: np.ndarray) -> np.ndarray:
        k, c, o = w_kco.shape
        wp = np.zeros((self.taps * self.stride, c, o), dtype=w_kco.dtype)
        wp[:k] = w_kco
        return wp.reshape(self.taps, self.stride * c, o)

    def unpack_weight(self, wp: np.ndarray, channels: int) -> np.ndarray:
        o = wp.shape[-1]
        return wp.reshape(self.taps * self.stride, channels, o)[: self.kernel]

    def pad_input(self, x: np.ndarray) -> np.ndarray:
        b, n, c = x.shape
        xp = np.zeros((b, self.n_pad, c), dtype=x.dtype)
        xp[:, self.pad_left:self.pad_left + n] = x
        return xp.reshape(self.rows, self.stride * c)

    def pad_output(self, dy: np.ndarray) -> np.ndarray:
        b, n_out, o = dy.shape
        full = np.zeros((b, self.rows_per_item, o), dtype=dy.dtype)
        full[:, :n_out] = dy
        return full.reshape(self.rows, o)


def conv_forward_cl(x: np.ndarray, w_kco: np.ndarray, stride: int) -> np.ndarray:
    """Half-padded cross-correlation. ``x`` is (B, N, C), ``w_kco`` is (K, C, O)."""
    b, n, c = x.shape
    g = _ConvGeometry(b, n, w_kco.shape[0], stride)
    xs = g.pad_input(x)
    wp = g.pack_weight(w_kco)
    m = g.valid_rows
    y = np.empty((g.rows, w_kco.shape[2]), dtype=x.dtype)
    np.matmul(xs[0:m], wp[0], out=y[:m])
    for j in range(1, g.taps):
        y[:m] += xs[j:j + m] @ wp[j]
    return y.reshape(b, g.rows_per_item, -1)[:, : g.n_out]


def conv_adjoint_cl(dy: np.ndarray, w_kco: np.ndarray, stride: int, n_in: int) -> np.ndarray:
    """Adjoint of :func:`conv_forward_cl` with respect to its input."""
    b = dy.shape[0]
    k, c, _ = w_kco.shape
    g = _ConvGeometry(b, n_in, k, stride)
    if dy.shape[1] != g.n_out:
        raise ShapeError(f"length {dy.shape[1]} cannot come from {n_in} samples at stride {stride}",
                         axis="time")
    dys = g.pad_output(dy)
    wp = g.pack_weight(w_kco)
    m = g.valid_rows
    dxs = np.zeros((g.rows, stride * c), dtype=dy.dtype)
    for j in range(g.taps):
        dxs[j:j + m] += dys[:m] @ wp[j].T
    return dxs.reshape(b, g.n_pad, c)[:, g.pad_left:g.pad_left + n_in]


def conv_weight_grad_cl(x: np.ndarray, dy: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Gradient of ``sum(dy * conv_forward_cl(x, w))`` with respect to ``w`` (K, C, O)."""
    b, n, c = x.shape
    g = _ConvGeometry(b, n, kernel, stride)
    xs = g.pad_input(x)
    dys = g.pad_output(dy)
    m = g.valid_rows
    wp = np.empty((g.taps, stride * c, dy.shape[2]), dtype=x.dtype)
    for j in range(g.taps):
        wp[j] = xs[j:j + m].T @ dys[:m]
    return g.unpack_weight(wp, c)


def transposed_length_range(n_in: int, stride: int) -> range:
    return range(stride * n_in - stride + 1, stride * n_in + 1)


# ---------------------------------------------------------------------------
# TensorB-level ops
# ---------------------------------------------------------------------------

def _check_conv_shapes(x: TensorB, weight: Param, bias: Param, in_axis: int, out_axis: int):
    if weight.value.ndim != 3:
        raise ShapeError(f"weights must be (C_out, C_in, K), got {weight.shape}", axis="weight")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {weight.shape[in_axis]}",
                         axis="channel")
    if bias.shape != (weight.shape[out_axis],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[out_axis]} outputs",
                         axis="bias")


def conv1d(x: TensorB, weight: Param, bias: Param, stride: int = 1,
           padding: str = "half") -> TensorB:
    """1-D cross-correlation, weights (C_out, C_in, K), output length ceil(N/stride)."""
    if padding != "half":
        raise ValueError(f"unsupported padding mode {padding!r}")
    _check_conv_shapes(x, weight, bias, in_axis=1, out_axis=0)
    x_cl = x.data.transpose(0, 2, 1)
    w_kco = weight.value.transpose(2, 1, 0)
    y = conv_forward_cl(x_cl, w_kco, stride) + bias.value
    out = TensorB(np.ascontiguousarray(y.transpose(0, 2, 1)))

    def backward():
        dy = out.grad.transpose(0, 2, 1)
        x.accumulate(conv_adjoint_cl(dy, w_kco, stride, x.shape[2]).transpose(0, 2, 1))
        weight.grad += conv_weight_grad_cl(x_cl, dy, weight.shape[2], stride).transpose(2, 1, 0)
        bias.grad += dy.sum(axis=(0, 1))

    out._backward = backward
    return out


def conv1d_transposed(x: TensorB, weight: Param, bias: Param, stride: int,
                      target_length: int) -> TensorB:
    """Adjoint of :func:`conv1d` for the same (C_out, C_in, K) weights.

    Maps ``C_out`` channels back to ``C_in`` channels and produces exactly
    ``target_length`` samples, which must satisfy ``ceil(target_length/stride)
    == N_in``.
    """
    _check_conv_shapes(x, weight, bias, in_axis=0, out_axis=1)
    if target_length not in transposed_length_range(x.shape[2], stride):
        raise ShapeError(f"target_length {target_length} unreachable from {x.shape[2]} "
                         f"samples at stride {stride}", axis="time")
    x_cl = x.data.transpose(0, 2, 1)
    w_kco = weight.value.transpose(2, 1, 0)
    y = conv_adjoint_cl(x_cl, w_kco, stride, target_length) + bias.value
    out = TensorB(np.ascontiguousarray(y.transpose(0, 2, 1)))

    def backward():
        dy = out.grad.transpose(0, 2, 1)
        x.accumulate(conv_forward_cl(dy, w_kco, stride).transpose(0, 2, 1))
        weight.grad += conv_weight_grad_cl(dy, x_cl, weight.shape[2], stride).transpose(2, 1, 0)
        bias.grad += dy.sum(axis=(0, 1))

    out._backward = backward
    return out


def relu(x: TensorB) -> TensorB:
    out = TensorB(np.maximum(x.data, 0))

    def backward():
        x.accumulate(out.grad * (x.data > 0))

    out._backward = backward
    return out


def add(a: TensorB, b: TensorB) -> TensorB:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}", axis="shape")
    out = TensorB(a.data + b.data)

    def backward():
        a.accumulate(out.grad)
        b.accumulate(out.grad)

    out._backward = backward
    return out


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm_stats(x: np.ndarray, axes: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    if x.size == 0 or x.shape[0] == 0:
        raise ShapeError("batch norm needs a non-empty batch", axis="batch")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    return mean, var


def batch_norm(x: TensorB, gamma: Param, beta: Param, mode: str = "train",
               running: RunningStats | None = None, eps: float = 1e-5) -> TensorB:
    """Per-channel normalization over the (batch, time) axes.

    ``train`` uses the batch statistics and, when ``running`` is given, folds
    them into it with ``running = momentum*running + (1-momentum)*batch``.
    ``infer`` uses ``running``.
    """
    if x.shape[0] == 0 or x.shape[2] == 0:
        raise ShapeError("batch norm needs a non-empty batch", axis="batch")
    if mode == "train":
        mean, var = batch_norm_stats(x.data, (0, 2))
        if running is not None:
            mom = running.momentum
            running.mean[...] = mom * running.mean + (1 - mom) * mean
            running.var[...] = mom * running.var + (1 - mom) * var
    elif mode == "infer":
        if running is None:
            raise ValueError("infer mode needs running statistics")
        mean, var = running.mean, running.var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = TensorB((gamma.value[None, :, None] * xhat + beta.value[None, :, None]).astype(x.data.dtype))

    def backward():
        g = out.grad
        gamma.grad += (g * xhat).sum(axis=(0, 2))
        beta.grad += g.sum(axis=(0, 2))
        dxhat = g * gamma.value[None, :, None]
        if mode == "infer":
            x.accumulate(dxhat * inv_std[None, :, None])
            return
        n = x.shape[0] * x.shape[2]
        dx = (inv_std[None, :, None] / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 2), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        )
        x.accumulate(dx)

    out._backward = backward
    return out


def adam_step(params: Iterable[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * (g * g)
        m_hat = p.m / (1 - beta1 ** t)
        v_hat = p.v / (1 - beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.grad[...] = 0


def finite_difference_gradient(f: Callable[[np.ndarray], float], params: np.ndarray,
                               epsilon: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params`` (not modified)."""
    p = np.array(params, dtype=np.result_type(np.asarray(params).dtype, np.float32), copy=True)
    grad = np.zeros_like(p, dtype=np.float64)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(f(p))
        flat[i] = orig - epsilon
        f_minus = float(f(p))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * epsilon)
    return grad


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float32 records after an RCVW header."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an RCVW checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * count, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return out
