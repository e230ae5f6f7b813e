"""Residual 1-D convolutional autoencoder: build, train, checkpoint, encode.

Layers run channels-last internally; the public ``encode``/``decode`` take and
return ``(batch, channel, time)`` tensors.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import (
    CheckpointError,
    Param,
    ShapeError,
    TensorB,
    adam_step,
    conv_adjoint_cl,
    conv_forward_cl,
    conv_weight_grad_cl,
    read_checkpoint,
    transposed_length_range,
    write_checkpoint,
)
from .waveforms import Waveform, stack_samples

log = logging.getLogger(__name__)

MIN_LATENT_LENGTH = 8


@dataclass
class ArchitectureConfig:
    n_down: int = 4
    base_channels: int = 8
    kernel_down: int = 7
    residual_per_stage: int = 1
    kernel_res: int = 3
    in_channels: int = 3
    input_length: int = 3000

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.n_down)]

    def stage_lengths(self) -> list[int]:
        """Lengths entering each downsampling stage, then the latent length."""
        lengths = [self.input_length]
        for _ in range(self.n_down):
            lengths.append(-(-lengths[-1] // 2))
        return lengths

    @property
    def latent_length(self) -> int:
        return self.stage_lengths()[-1]

    @property
    def latent_channels(self) -> int:
        return self.stage_channels()[-1]

    def latent_rate(self, sample_rate_hz: float = 100.0) -> float:
        return sample_rate_hz / 2 ** self.n_down


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 20
    lr: float = 1e-4
    denoise_sigma: float = 0.0
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.denoise_sigma < 0:
            raise ValueError("denoise_sigma must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


# ---------------------------------------------------------------------------
# layers (channels-last arrays, cached inputs for backward)
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, weight: Param, bias: Param, stride: int, transposed: bool = False):
        self.weight, self.bias, self.stride, self.transposed = weight, bias, stride, transposed
        self._x = None
        self._n_in = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, keep: bool, target_length: int | None = None):
        w = self.weight.value.transpose(2, 1, 0)
        if self.transposed:
            y = conv_adjoint_cl(x, w, self.stride, target_length)
        else:
            y = conv_forward_cl(x, w, self.stride)
        y += self.bias.value
        if keep:
            self._x = x
            self._n_in = x.shape[1]
        return y

    def backward(self, dy):
        x, w = self._x, self.weight.value.transpose(2, 1, 0)
        k = w.shape[0]
        if self.transposed:
            dx = conv_forward_cl(dy, w, self.stride)
            dw = conv_weight_grad_cl(dy, x, k, self.stride)
        else:
            dx = conv_adjoint_cl(dy, w, self.stride, self._n_in)
            dw = conv_weight_grad_cl(x, dy, k, self.stride)
        self.weight.grad += dw.transpose(2, 1, 0)
        self.bias.grad += dy.sum(axis=(0, 1))
        self._x = None
        return dx


class _Residual:
    """conv -> ReLU -> conv, plus skip, then ReLU; channel preserving."""

    def __init__(self, conv1: _Conv, conv2: _Conv):
        self.conv1, self.conv2 = conv1, conv2

    def params(self):
        return self.conv1.params() + self.conv2.params()

    def forward(self, x, keep: bool):
        a = self.conv1.forward(x, keep)
        np.maximum(a, 0, out=a)
        if keep:
            self._mask1 = a > 0
        out = self.conv2.forward(a, keep)
        out += x
        np.maximum(out, 0, out=out)
        if keep:
            self._mask2 = out > 0
        return out

    def backward(self, dy):
        dy = dy * self._mask2
        da = self.conv2.backward(dy)
        da *= self._mask1
        dx = self.conv1.backward(da)
        dx += dy
        return dx


class Autoencoder:
    """Encoder (strided convs + residual blocks) and decoder (transposed convs)."""

    def __init__(self, arch: ArchitectureConfig, params: dict[str, Param]):
        self.arch = arch
        self.params = params
        self.latent_mean: np.ndarray | None = None
        self.latent_var: np.ndarray | None = None
        self._lengths = arch.stage_lengths()
        self._wire()

    def _wire(self):
        p = self.params
        self.down, self.res, self.up = [], [], []
        for i in range(self.arch.n_down):
            self.down.append(_Conv(p[f"enc{i}.down.w"], p[f"enc{i}.down.b"], 2))
            self.res.append([
                _Residual(_Conv(p[f"enc{i}.res{j}.conv1.w"], p[f"enc{i}.res{j}.conv1.b"], 1),
                          _Conv(p[f"enc{i}.res{j}.conv2.w"], p[f"enc{i}.res{j}.conv2.b"], 1))
                for j in range(self.arch.residual_per_stage)])
        for i in reversed(range(self.arch.n_down)):
            self.up.append(_Conv(p[f"dec{i}.up.w"], p[f"dec{i}.up.b"], 2, transposed=True))

    # -- parameter handling -------------------------------------------------
    def parameter_list(self) -> list[Param]:
        return list(self.params.values())

    @property
    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.params.items()}
        if self.latent_mean is not None:
            out["latent.running_mean"] = self.latent_mean
            out["latent.running_var"] = self.latent_var
        return out

    def copy(self) -> "Autoencoder":
        return self.astype(None)

    def astype(self, dtype) -> "Autoencoder":
        """Deep copy, optionally cast (``np.float64`` gives the shadow path)."""
        params = {k: (p.copy() if dtype is None else p.astype(dtype)) for k, p in self.params.items()}
        other = Autoencoder(self.arch, params)
        if self.latent_mean is not None:
            other.latent_mean = self.latent_mean.copy()
            other.latent_var = self.latent_var.copy()
        return other

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    # -- forward / backward on channels-last arrays ---------------------------
    def _check_input(self, x_cl: np.ndarray):
        if x_cl.ndim != 3:
            raise ShapeError(f"expected a 3-axis batch, got {x_cl.shape}", axis="rank")
        if x_cl.shape[2] != self.arch.in_channels:
            raise ShapeError(f"input has {x_cl.shape[2]} channels, model expects "
                             f"{self.arch.in_channels}", axis="channel")
        if x_cl.shape[1] != self.arch.input_length:
            raise ShapeError(f"input has {x_cl.shape[1]} samples, model expects "
                             f"{self.arch.input_length}", axis="time")

    def encode_cl(self, x_cl: np.ndarray, keep: bool = False) -> np.ndarray:
        self._check_input(x_cl)
        h = x_cl.astype(self.dtype, copy=False)
        self._down_masks = []
        for down, blocks in zip(self.down, self.res):
            h = down.forward(h, keep)
            np.maximum(h, 0, out=h)
            if keep:
                self._down_masks.append(h > 0)
            for block in blocks:
                h = block.forward(h, keep)
        return h

    def decode_cl(self, z_cl: np.ndarray, keep: bool = False) -> np.ndarray:
        if z_cl.shape[1:] != (self.arch.latent_length, self.arch.latent_channels):
            raise ShapeError(f"latent shape {z_cl.shape[1:]} does not match "
                             f"({self.arch.latent_length}, {self.arch.latent_channels})",
                             axis="latent")
        h = z_cl.astype(self.dtype, copy=False)
        self._up_masks = []
        targets = self._lengths[-2::-1]
        for i, (up, target) in enumerate(zip(self.up, targets)):
            h = up.forward(h, keep, target_length=target)
            if i < len(self.up) - 1:
                np.maximum(h, 0, out=h)
                if keep:
                    self._up_masks.append(h > 0)
        return h

    def backward_cl(self, dy: np.ndarray) -> np.ndarray:
        """Backpropagate from the reconstruction; accumulates parameter grads."""
        g = dy
        n = len(self.up)
        for i in reversed(range(n)):
            if i < n - 1:
                g = g * self._up_masks[i]
            g = self.up[i].backward(g)
        for i in reversed(range(len(self.down))):
            for block in reversed(self.res[i]):
                g = block.backward(g)
            g = g * self._down_masks[i]
            g = self.down[i].backward(g)
        return g

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _init_conv(rng, c_out, c_in, k, dtype, transposed=False):
    fan_in = (c_out if transposed else c_in) * k
    bound = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k)).astype(dtype)
    b = np.zeros(c_in if transposed else c_out, dtype=dtype)
    return Param(w), Param(b)


def build_model(arch: ArchitectureConfig = ArchitectureConfig(), seed: int = 0,
                dtype=np.float32) -> Autoencoder:
    """Fresh model; fan-in uniform weights and zero biases, reproducible from ``seed``."""
    if arch.n_down < 1:
        raise ValueError("need at least one downsampling stage")
    if arch.latent_length < MIN_LATENT_LENGTH:
        raise ValueError(f"latent length {arch.latent_length} < {MIN_LATENT_LENGTH}: "
                         f"too short for lag analysis (n_down={arch.n_down})")
    rng = np.random.default_rng(seed)
    params: dict[str, Param] = {}
    chans = arch.stage_channels()
    c_prev = arch.in_channels
    for i, c in enumerate(chans):
        params[f"enc{i}.down.w"], params[f"enc{i}.down.b"] = _init_conv(
            rng, c, c_prev, arch.kernel_down, dtype)
        for j in range(arch.residual_per_stage):
            for name in ("conv1", "conv2"):
                params[f"enc{i}.res{j}.{name}.w"], params[f"enc{i}.res{j}.{name}.b"] = _init_conv(
                    rng, c, c, arch.kernel_res, dtype)
        c_prev = c
    ins = [arch.in_channels] + chans[:-1]
    for i in reversed(range(arch.n_down)):
        # transposed weights are stored (C_in, C_out, K) of the conv they undo
        params[f"dec{i}.up.w"], params[f"dec{i}.up.b"] = _init_conv(
            rng, chans[i], ins[i], arch.kernel_down, dtype, transposed=True)
    return Autoencoder(arch, params)


def _to_cl(x) -> np.ndarray:
    data = x.data if isinstance(x, TensorB) else np.asarray(x)
    return np.ascontiguousarray(data.transpose(0, 2, 1))


def encode(model: Autoencoder, batch, chunk: int = 256) -> TensorB:
    """Latent (B, C_lat, N_lat) tensor; inference only."""
    x = _to_cl(batch)
    if x.shape[0] == 0:
        raise ShapeError("empty batch", axis="batch")
    parts = [model.encode_cl(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)]
    return TensorB(np.ascontiguousarray(np.concatenate(parts).transpose(0, 2, 1)))


def decode(model: Autoencoder, latent, chunk: int = 256) -> TensorB:
    z = _to_cl(latent)
    parts = [model.decode_cl(z[i:i + chunk]) for i in range(0, z.shape[0], chunk)]
    return TensorB(np.ascontiguousarray(np.concatenate(parts).transpose(0, 2, 1)))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _loss_and_grad(x: np.ndarray, y: np.ndarray, time_axis: int):
    """Per-sample centred RMS, batch-averaged; returns (loss, dL/dy)."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}", axis="shape")
    d = (x - x.mean(axis=time_axis, keepdims=True)) - (y - y.mean(axis=time_axis, keepdims=True))
    per_elem = d[0].size
    rms = np.sqrt((d.reshape(d.shape[0], -1).astype(np.float64) ** 2).mean(axis=1))
    b = d.shape[0]
    scale = np.where(rms > 0, 1.0 / (b * per_elem * np.where(rms > 0, rms, 1.0)), 0.0)
    grad = -(d * scale.reshape((b,) + (1,) * (d.ndim - 1)).astype(d.dtype))
    return float(rms.mean()), grad


def reconstruction_loss(x, y) -> float:
    """Centred RMS reconstruction error between (B, C, N) inputs ``x`` and outputs ``y``."""
    xd = x.data if isinstance(x, TensorB) else np.asarray(x)
    yd = y.data if isinstance(y, TensorB) else np.asarray(y)
    return _loss_and_grad(xd, yd, time_axis=2)[0]


def reconstruction_loss_grad(x, y) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``y`` (the gradient for ``x`` is the negative)."""
    xd = x.data if isinstance(x, TensorB) else np.asarray(x)
    yd = y.data if isinstance(y, TensorB) else np.asarray(y)
    return _loss_and_grad(xd, yd, time_axis=2)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Autoencoder
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.history[self.best_epoch - 1]["val_loss"]


def _as_array(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.float32, copy=False)
    if len(dataset) and isinstance(dataset[0], Waveform):
        return stack_samples(dataset)
    return np.asarray(dataset, dtype=np.float32)


def evaluate_loss(model: Autoencoder, x_cl: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    for i in range(0, x_cl.shape[0], chunk):
        xb = x_cl[i:i + chunk]
        y = model.decode_cl(model.encode_cl(xb))
        total += _loss_and_grad(xb, y, time_axis=1)[0] * xb.shape[0]
    return total / x_cl.shape[0]


def split_validation(n: int, fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    if n == 1:
        return order, order
    n_val = min(max(int(round(fraction * n)), 1), n - 1)
    return order[n_val:], order[:n_val]


def train(model: Autoencoder, dataset, cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam training on centred-RMS reconstruction; returns the best-validation checkpoint.

    ``dataset`` is a (B, 3, N) array or a sequence of waveforms, of which only
    the samples are read.  With ``denoise_sigma > 0`` the inputs are corrupted
    by Gaussian noise and the loss is taken against the clean inputs.
    """
    x_all = _as_array(dataset)
    if x_all.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    x_cl = np.ascontiguousarray(x_all.transpose(0, 2, 1))
    model._check_input(x_cl[:1])
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_validation(x_cl.shape[0], cfg.validation_fraction, rng)
    x_val = x_cl[np.sort(val_idx)]
    params = model.parameter_list()
    model.zero_grad()

    history: list[dict] = []
    best_state, best_loss, best_epoch = None, np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        total, seen = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            xb = x_cl[np.sort(order[start:start + cfg.batch_size])]
            inp = xb
            if cfg.denoise_sigma > 0:
                inp = xb + cfg.denoise_sigma * rng.standard_normal(xb.shape, dtype=np.float32)
            out = model.decode_cl(model.encode_cl(inp, keep=True), keep=True)
            loss, dout = _loss_and_grad(xb, out, time_axis=1)
            model.backward_cl(dout)
            adam_step(params, cfg.lr)
            total += loss * xb.shape[0]
            seen += xb.shape[0]
        val_loss = evaluate_loss(model, x_val)
        row = {"epoch": epoch, "train_loss": total / seen, "val_loss": val_loss,
               "seconds": time.perf_counter() - t0}
        history.append(row)
        log.debug("epoch %d train %.5f val %.5f (%.1fs)", epoch, row["train_loss"], val_loss,
                  row["seconds"])
        if on_epoch is not None:
            on_epoch(row)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = {k: p.value.copy() for k, p in model.params.items()}

    best = model.copy()
    for k, v in best_state.items():
        best.params[k] = Param(v)
    best._wire()
    fit_latent_stats(best, x_cl[np.sort(train_idx)])
    return TrainResult(best, history, best_epoch)


def fit_latent_stats(model: Autoencoder, x_cl: np.ndarray, chunk: int = 256) -> None:
    """Population per-channel mean and variance of the latents over ``x_cl``."""
    s1 = np.zeros(model.arch.latent_channels)
    s2 = np.zeros(model.arch.latent_channels)
    count = 0
    for i in range(0, x_cl.shape[0], chunk):
        z = model.encode_cl(x_cl[i:i + chunk]).astype(np.float64)
        s1 += z.sum(axis=(0, 1))
        s2 += (z ** 2).sum(axis=(0, 1))
        count += z.shape[0] * z.shape[1]
    mean = s1 / count
    model.latent_mean = mean.astype(np.float32)
    model.latent_var = np.maximum(s2 / count - mean ** 2, 0).astype(np.float32)


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(model: Autoencoder, path) -> None:
    write_checkpoint(path, model.state())


def load_model(path, arch: ArchitectureConfig = ArchitectureConfig()) -> Autoencoder:
    """Read an RCVW checkpoint into a model of architecture ``arch``."""
    tensors = read_checkpoint(path)
    model = build_model(arch, seed=0)
    for name, p in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, "
                                  f"architecture expects {p.shape}")
        model.params[name] = Param(tensors[name].copy())
    extra = set(tensors) - set(model.params) - {"latent.running_mean", "latent.running_var"}
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {sorted(extra)[0]}")
    if "latent.running_mean" in tensors:
        model.latent_mean = tensors["latent.running_mean"].copy()
        model.latent_var = tensors["latent.running_var"].copy()
    model._wire()
    return model
