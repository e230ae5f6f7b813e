"""Finite-difference harness shared by the unit and acceptance tests.

Relative error is measured over a case's whole gradient vector:
``max|analytic - numeric| / max|numeric|``.  The 32-bit check compares the
float32 analytic gradient with float64 central differences; the 64-bit check
runs everything in float64.
"""
from __future__ import annotations

import numpy as np

from latentcov.autoencoder import ArchitectureConfig, _loss_and_grad, build_model
from latentcov.numerics import (
    Param,
    RunningStats,
    TensorB,
    add,
    batch_norm,
    conv1d,
    conv1d_transposed,
    finite_difference_gradient,
    relu,
)

LAYERS = ("conv1d", "conv1d_strided", "conv1d_transposed", "relu", "batch_norm_train",
          "batch_norm_infer", "add")
FD_EPS64 = 1e-6


def _make_case(kind: str, rng: np.random.Generator):
    """Return (arrays, forward) where forward(arrays, dtype) -> (out, leaves)."""
    b, c, n = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(2, 17))
    x = rng.standard_normal((b, c, n))
    if kind in ("conv1d", "conv1d_strided"):
        stride = 1 if kind == "conv1d" else 2
        co, k = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        arrays = {"x": x, "w": rng.standard_normal((co, c, k)), "b": rng.standard_normal(co)}

        def forward(a, dtype):
            leaves = {"x": TensorB(a["x"].astype(dtype)), "w": Param(a["w"].astype(dtype)),
                      "b": Param(a["b"].astype(dtype))}
            return conv1d(leaves["x"], leaves["w"], leaves["b"], stride=stride), leaves
    elif kind == "conv1d_transposed":
        stride, k = int(rng.integers(1, 3)), int(rng.integers(1, 6))
        co = int(rng.integers(1, 5))
        target = int(stride * n - rng.integers(0, stride))
        arrays = {"x": x, "w": rng.standard_normal((c, co, k)), "b": rng.standard_normal(co)}

        def forward(a, dtype):
            leaves = {"x": TensorB(a["x"].astype(dtype)), "w": Param(a["w"].astype(dtype)),
                      "b": Param(a["b"].astype(dtype))}
            return conv1d_transposed(leaves["x"], leaves["w"], leaves["b"], stride, target), leaves
    elif kind == "relu":
        # keep clear of the kink so central differences stay exact
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)
        arrays = {"x": x}

        def forward(a, dtype):
            leaves = {"x": TensorB(a["x"].astype(dtype))}
            return relu(leaves["x"]), leaves
    elif kind.startswith("batch_norm"):
        mode = kind.rsplit("_", 1)[1]
        if mode == "train" and b * n < 2:
            x = rng.standard_normal((b, c, 2))
        arrays = {"x": x, "gamma": rng.uniform(0.5, 1.5, c), "beta": rng.standard_normal(c)}
        mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

        def forward(a, dtype):
            leaves = {"x": TensorB(a["x"].astype(dtype)), "gamma": Param(a["gamma"].astype(dtype)),
                      "beta": Param(a["beta"].astype(dtype))}
            running = RunningStats(mean.astype(dtype), var.astype(dtype))
            return batch_norm(leaves["x"], leaves["gamma"], leaves["beta"], mode, running), leaves
    elif kind == "add":
        arrays = {"x": x, "y": rng.standard_normal(x.shape)}

        def forward(a, dtype):
            leaves = {"x": TensorB(a["x"].astype(dtype)), "y": TensorB(a["y"].astype(dtype))}
            return add(leaves["x"], leaves["y"]), leaves
    else:
        raise ValueError(kind)
    return arrays, forward


def _leaf_grad(leaf):
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.max(np.abs(numeric))
    diff = np.max(np.abs(analytic - numeric))
    if scale == 0:
        return float(diff)
    return float(diff / scale)


def layer_gradient_error(kind: str, seed: int, dtype) -> float:
    """Relative error of one layer's analytic gradient for a random small instance."""
    rng = np.random.default_rng(seed)
    arrays, forward = _make_case(kind, rng)
    out, leaves = forward(arrays, np.float64)
    weight = rng.standard_normal(out.shape)

    out, leaves = forward(arrays, dtype)
    out.backward(weight.astype(dtype))
    analytic = np.concatenate([np.asarray(_leaf_grad(leaves[k]), dtype=np.float64).ravel()
                               for k in arrays])

    numeric = []
    for name in arrays:
        def f(v, name=name):
            a = dict(arrays, **{name: v})
            return float(np.sum(forward(a, np.float64)[0].data * weight))
        numeric.append(finite_difference_gradient(f, arrays[name], FD_EPS64).ravel())
    return relative_error(analytic, np.concatenate(numeric))


SMALL_ARCH = ArchitectureConfig(n_down=1, base_channels=3, kernel_down=5, kernel_res=3,
                                in_channels=3, input_length=16)


def end_to_end_gradient_error(seed: int, dtype, n_probe: int = 16) -> float:
    """Reconstruction loss through encoder and decoder; probes ``n_probe`` random weights."""
    rng = np.random.default_rng(seed)
    model = build_model(SMALL_ARCH, seed=seed, dtype=np.float64)
    for p in model.params.values():
        p.value[...] = rng.uniform(-0.8, 0.8, p.shape)
    x = rng.standard_normal((2, SMALL_ARCH.input_length, 3))

    m = model.astype(dtype)
    m.zero_grad()
    xin = x.astype(dtype)
    out = m.decode_cl(m.encode_cl(xin, keep=True), keep=True)
    _, dout = _loss_and_grad(xin, out, time_axis=1)
    m.backward_cl(dout)

    names = list(model.params)
    sizes = np.array([model.params[k].value.size for k in names])
    flat_idx = rng.choice(sizes.sum(), size=n_probe, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    shadow = model.astype(np.float64)
    for idx in flat_idx:
        t = int(np.searchsorted(offsets, idx, side="right") - 1)
        name, local = names[t], int(idx - offsets[t])
        param = shadow.params[name].value.reshape(-1)
        analytic.append(float(m.params[name].grad.reshape(-1)[local]))

        def f(v, param=param, local=local):
            old = param[local]
            param[local] = v[0]
            y = shadow.decode_cl(shadow.encode_cl(x))
            param[local] = old
            return _loss_and_grad(x, y, time_axis=1)[0]
        numeric.append(finite_difference_gradient(f, np.array([param[local]]), FD_EPS64)[0])
    return relative_error(np.array(analytic), np.array(numeric))
