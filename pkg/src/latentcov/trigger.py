"""Latent cross-covariance profiles and the Gaussian-weighted trigger score.

Three ways of getting representations to correlate:

* ``single``: autocovariance of one encoder's latent.
* ``augmented``: pairwise cross-covariances between the latents of ``k``
  time-warped copies passed through the same encoder.
* ``ensemble``: pairwise cross-covariances between ``k`` independently trained
  encoders, after per-member channel-mixing projections.

Scores are computed for whole scoring batches because the latent batch
normalization couples the records of a batch.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy.interpolate import PchipInterpolator

from .autoencoder import Autoencoder
from .numerics import Param, ShapeError, adam_step
from .waveforms import Waveform, stack_samples

METHODS = ("single", "augmented", "ensemble")


@dataclass
class TriggerConfig:
    sigma0_seconds: float = 2.5
    max_lag_seconds: float = 12.0

    def __post_init__(self):
        if self.sigma0_seconds <= 0:
            raise ValueError("sigma0_seconds must be positive")

    def max_lag(self, latent_rate_hz: float, latent_length: int) -> int:
        lag = int(round(self.max_lag_seconds * latent_rate_hz))
        return max(0, min(lag, latent_length - 1))


@dataclass
class MethodConfig:
    method: str = "single"
    k: int = 5
    include_self: bool = False
    warp_strength: float = 0.2
    warp_knots: int = 4
    denoise_sigma: float | None = None  # None: whatever the training config says
    stats_source: str = "batch"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.stats_source not in ("batch", "running"):
            raise ValueError(f"unknown stats source {self.stats_source!r}")

    @property
    def name(self) -> str:
        base = self.method
        if self.denoise_sigma:
            base += f"+denoise{self.denoise_sigma:g}"
        return base


@dataclass
class CovarianceProfile:
    values: np.ndarray
    max_lag: int
    latent_rate_hz: float = 1.0

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.max_lag, self.max_lag + 1)

    @property
    def lags_seconds(self) -> np.ndarray:
        return self.lags / self.latent_rate_hz

    def __getitem__(self, lag: int) -> float:
        return float(self.values[lag + self.max_lag])


@dataclass
class ProjectionSet:
    matrices: list[np.ndarray]
    history: list[float] = field(default_factory=list)
    latent_means: list[np.ndarray] | None = None
    latent_vars: list[np.ndarray] | None = None

    def __post_init__(self):
        for m in self.matrices:
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ShapeError(f"projection must be square, got {m.shape}", axis="projection")
            if not np.all(np.isfinite(m)):
                raise ValueError("projection has non-finite entries")

    @classmethod
    def identity(cls, models: Sequence[Autoencoder]) -> "ProjectionSet":
        c = models[0].arch.latent_channels
        means = vars_ = None
        if all(m.latent_mean is not None for m in models):
            means = [m.latent_mean.astype(np.float64) for m in models]
            vars_ = [m.latent_var.astype(np.float64) for m in models]
        return cls([np.eye(c) for _ in models], [], means, vars_)

    def apply(self, i: int, z: np.ndarray) -> np.ndarray:
        return np.einsum("cd,bdt->bct", self.matrices[i], z, optimize=True)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def latent_normalize(latents, stats_source: str = "batch", running_mean=None, running_var=None,
                     eps: float = 1e-12) -> np.ndarray:
    """Per-channel normalization of (B, C, N) latents; unit gamma, zero beta.

    ``batch`` takes the mean and variance over batch and time; ``running``
    uses the supplied statistics.  Channels without variance map to zero.
    """
    z = np.asarray(getattr(latents, "data", latents), dtype=np.float64)
    if z.ndim != 3 or z.shape[0] == 0:
        raise ShapeError(f"need a non-empty (B, C, N) batch, got {z.shape}", axis="batch")
    if stats_source == "batch":
        mean = z.mean(axis=(0, 2))
        var = z.var(axis=(0, 2))
    elif stats_source == "running":
        if running_mean is None or running_var is None:
            raise ValueError("running statistics were not supplied")
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    else:
        raise ValueError(f"unknown stats source {stats_source!r}")
    scale = np.where(var > 0, 1.0 / np.sqrt(var + eps), 0.0)
    return (z - mean[None, :, None]) * scale[None, :, None]


def _rfft_len(n: int, max_lag: int) -> int:
    return sp_fft.next_fast_len(n + max_lag, real=True)


def _spectra(z: np.ndarray, nfft: int) -> np.ndarray:
    zc = z - z.mean(axis=-1, keepdims=True)
    return sp_fft.rfft(zc, n=nfft, axis=-1)


def _lags_from_cross_spectrum(cross: np.ndarray, nfft: int, n: int, max_lag: int) -> np.ndarray:
    """Channel-summed cross spectrum (..., F) -> lags -L..L of (1/N) sum_t a(t) b(t+tau)."""
    full = sp_fft.irfft(cross, n=nfft, axis=-1)
    neg = full[..., nfft - max_lag:] if max_lag else full[..., :0]
    return np.concatenate([neg, full[..., :max_lag + 1]], axis=-1) / n


def cross_covariance(a: np.ndarray, b: np.ndarray, max_lag: int,
                     latent_rate_hz: float = 1.0) -> CovarianceProfile:
    """Channel-averaged cross-covariance of centred (C, N) sequences for lags -L..L.

    ``cov_c(tau) = (1/N) sum_t a_c(t) b_c(t + tau)``, terms outside the window
    count as zero; no amplitude normalization.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"need equal (C, N) arrays, got {a.shape} and {b.shape}", axis="shape")
    values = batch_cross_covariance(a[None], b[None], max_lag)[0]
    return CovarianceProfile(values, max_lag, latent_rate_hz)


def batch_cross_covariance(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """(B, C, N) x (B, C, N) -> (B, 2L+1) channel-averaged profiles."""
    c, n = a.shape[-2:]
    if max_lag >= n or max_lag < 0:
        raise ValueError(f"max_lag {max_lag} must be in [0, {n})")
    nfft = _rfft_len(n, max_lag)
    cross = (np.conj(_spectra(a, nfft)) * _spectra(b, nfft)).sum(axis=-2) / c
    return _lags_from_cross_spectrum(cross, nfft, n, max_lag)


def _pairs(k: int, include_self: bool) -> list[tuple[int, int]]:
    if include_self:
        return [(i, j) for i in range(k) for j in range(k)]
    return list(combinations(range(k), 2))


def batch_pairwise_profiles(latents: Sequence[np.ndarray], include_self: bool,
                            max_lag: int) -> np.ndarray:
    """Mean cross-covariance over member pairs; each member is (B, C, N)."""
    k = len(latents)
    pairs = _pairs(k, include_self)
    if not pairs:
        raise ValueError(f"no pairs to average with k={k} and include_self={include_self}")
    c, n = latents[0].shape[-2:]
    if max_lag >= n:
        raise ValueError(f"max_lag {max_lag} must be < {n}")
    nfft = _rfft_len(n, max_lag)
    spectra = [_spectra(np.asarray(z, dtype=np.float64), nfft) for z in latents]
    cross = sum(np.conj(spectra[i]) * spectra[j] for i, j in pairs).sum(axis=-2)
    cross /= c * len(pairs)
    return _lags_from_cross_spectrum(cross, nfft, n, max_lag)


def pairwise_mean_profile(latents: Sequence[np.ndarray], include_self: bool = False,
                          max_lag: int = 75, latent_rate_hz: float = 1.0) -> CovarianceProfile:
    """Average of ``cross_covariance`` over pairs ``i < j`` (or all ``(i, j)``)."""
    if len(latents) == 0:
        raise ValueError("need at least one latent")
    shapes = {np.shape(z) for z in latents}
    if len(shapes) != 1:
        raise ShapeError(f"latents differ in shape: {sorted(shapes)}", axis="shape")
    values = batch_pairwise_profiles([np.asarray(z)[None] for z in latents], include_self,
                                     max_lag)[0]
    return CovarianceProfile(values, max_lag, latent_rate_hz)


def gaussian_weights(max_lag: int, latent_rate_hz: float, sigma0_seconds: float) -> np.ndarray:
    tau = np.arange(-max_lag, max_lag + 1) / latent_rate_hz
    return np.exp(-(tau ** 2) / (2 * sigma0_seconds ** 2))


def gaussian_score(profile: CovarianceProfile, cfg: TriggerConfig = TriggerConfig()) -> float:
    """Gaussian-weighted mean of the profile around lag 0; larger means more event-like."""
    w = gaussian_weights(profile.max_lag, profile.latent_rate_hz, cfg.sigma0_seconds)
    return float(np.dot(w, profile.values) / w.sum())


# ---------------------------------------------------------------------------
# time warping
# ---------------------------------------------------------------------------

def warp_map(n: int, strength: float, knots: int, rng: np.random.Generator) -> np.ndarray:
    """Monotone map from output sample index to (fractional) input index.

    Speeds ``1 + strength*u`` (``u`` uniform in [-1, 1]) sit at ``knots + 2``
    evenly spaced points, are joined by a shape-preserving cubic, integrated,
    and rescaled so both endpoints stay fixed.
    """
    if strength < 0:
        raise ValueError("warp strength must be non-negative")
    t = np.arange(n, dtype=np.float64)
    if strength == 0 or n < 2:
        return t
    if strength >= 1:
        raise ValueError("warp strength must be < 1 to keep the map monotone")
    xk = np.linspace(0, n - 1, knots + 2)
    speeds = 1.0 + strength * rng.uniform(-1.0, 1.0, size=knots + 2)
    speed = PchipInterpolator(xk, speeds)(t)
    phi = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]))])
    return phi * ((n - 1) / phi[-1])


def time_warp(w: Waveform, strength: float = 0.2, knots: int = 4, seed: int = 0) -> Waveform:
    """Resample ``w`` along a random smooth monotone time map; onset follows the map."""
    if strength == 0:
        return replace(w, samples=w.samples.copy())
    rng = np.random.default_rng(seed)
    n = w.n_samples
    phi = warp_map(n, strength, knots, rng)
    src = np.arange(n, dtype=np.float64)
    out = np.stack([np.interp(phi, src, ch) for ch in w.samples.astype(np.float64)])
    onset = w.onset_index
    if onset is not None:
        onset = int(min(np.searchsorted(phi, onset), n - 1))
    return Waveform(out.astype(np.float32), w.sample_rate_hz, w.id, w.label, onset)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _latents(model: Autoencoder, x_bcn: np.ndarray, chunk: int = 256) -> np.ndarray:
    x_cl = np.ascontiguousarray(x_bcn.transpose(0, 2, 1))
    parts = [model.encode_cl(x_cl[i:i + chunk]).astype(np.float64)
             for i in range(0, x_cl.shape[0], chunk)]
    return np.concatenate(parts).transpose(0, 2, 1)


def _sorted(waveforms: Sequence[Waveform]):
    if len(waveforms) == 0:
        raise ValueError("nothing to score")
    order = sorted(range(len(waveforms)), key=lambda i: waveforms[i].id)
    inverse = np.empty(len(order), dtype=int)
    inverse[order] = np.arange(len(order))
    return [waveforms[i] for i in order], inverse


def _finish(profiles: np.ndarray, inverse: np.ndarray, rate: float, trig: TriggerConfig,
            max_lag: int):
    w = gaussian_weights(max_lag, rate, trig.sigma0_seconds)
    scores = profiles @ w / w.sum()
    return scores[inverse], profiles[inverse]


def _geometry(model: Autoencoder, waveforms: Sequence[Waveform], trig: TriggerConfig):
    rate = model.arch.latent_rate(waveforms[0].sample_rate_hz)
    return rate, trig.max_lag(rate, model.arch.latent_length)


def profile_single(model: Autoencoder, waveforms: Sequence[Waveform],
                   trig: TriggerConfig = TriggerConfig(), stats_source: str = "batch"):
    """Scores and autocovariance profiles, aligned with ``waveforms``."""
    recs, inverse = _sorted(waveforms)
    rate, lag = _geometry(model, recs, trig)
    z = latent_normalize(_latents(model, stack_samples(recs)), stats_source,
                         model.latent_mean, model.latent_var)
    profiles = batch_pairwise_profiles([z], include_self=True, max_lag=lag)
    return _finish(profiles, inverse, rate, trig, lag)


def score_single(model: Autoencoder, waveforms: Sequence[Waveform],
                 trig: TriggerConfig = TriggerConfig(), stats_source: str = "batch") -> np.ndarray:
    """Encode, normalize, autocovariance, Gaussian score: one score per waveform."""
    return profile_single(model, waveforms, trig, stats_source)[0]


def _warp_seed(seed: int, record_id: str, copy: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(record_id.encode()), copy])


def profile_augmented(model: Autoencoder, waveforms: Sequence[Waveform], k: int = 5,
                      trig: TriggerConfig = TriggerConfig(), seed: int = 0,
                      strength: float = 0.2, knots: int = 4, include_self: bool = False,
                      stats_source: str = "batch"):
    recs, inverse = _sorted(waveforms)
    rate, lag = _geometry(model, recs, trig)
    # copy 0 is the record itself, the other k - 1 are warped
    copies = [_latents(model, stack_samples(recs))]
    for c in range(1, k):
        warped = [time_warp(w, strength, knots, _warp_seed(seed, w.id, c)) for w in recs]
        copies.append(_latents(model, stack_samples(warped)))
    if stats_source == "batch":
        # one normalization over every augmented copy in the scoring batch
        joint = latent_normalize(np.concatenate(copies), "batch")
        copies = np.split(joint, k)
    else:
        copies = [latent_normalize(z, "running", model.latent_mean, model.latent_var)
                  for z in copies]
    profiles = batch_pairwise_profiles(copies, include_self, lag)
    return _finish(profiles, inverse, rate, trig, lag)


def score_augmented(model: Autoencoder, waveforms: Sequence[Waveform], k: int = 5,
                    trig: TriggerConfig = TriggerConfig(), seed: int = 0, strength: float = 0.2,
                    knots: int = 4, include_self: bool = False,
                    stats_source: str = "batch") -> np.ndarray:
    """Pairwise cross-covariance score over the waveform and ``k - 1`` time-warped copies."""
    return profile_augmented(model, waveforms, k, trig, seed, strength, knots, include_self,
                             stats_source)[0]


def profile_ensemble(models: Sequence[Autoencoder], projections: ProjectionSet,
                     waveforms: Sequence[Waveform], trig: TriggerConfig = TriggerConfig(),
                     include_self: bool = False, stats_source: str = "batch"):
    if len(models) != len(projections.matrices):
        raise ValueError(f"{len(models)} models but {len(projections.matrices)} projections")
    recs, inverse = _sorted(waveforms)
    rate, lag = _geometry(models[0], recs, trig)
    x = stack_samples(recs)
    zs = []
    for i, model in enumerate(models):
        z = projections.apply(i, _latents(model, x))
        if stats_source == "running":
            if projections.latent_means is None:
                raise ValueError("projection set carries no running statistics")
            z = latent_normalize(z, "running", projections.latent_means[i],
                                 projections.latent_vars[i])
        else:
            z = latent_normalize(z, "batch")
        zs.append(z)
    profiles = batch_pairwise_profiles(zs, include_self, lag)
    return _finish(profiles, inverse, rate, trig, lag)


def score_ensemble(models: Sequence[Autoencoder], projections: ProjectionSet,
                   waveforms: Sequence[Waveform], trig: TriggerConfig = TriggerConfig(),
                   include_self: bool = False, stats_source: str = "batch") -> np.ndarray:
    """Pairwise cross-covariance score between projected latents of ``k`` encoders."""
    return profile_ensemble(models, projections, waveforms, trig, include_self, stats_source)[0]


def score_method(method: MethodConfig, models: Sequence[Autoencoder],
                 waveforms: Sequence[Waveform], trig: TriggerConfig = TriggerConfig(),
                 projections: ProjectionSet | None = None, seed: int = 0):
    """Dispatch on ``method.method``; returns ``(scores, profiles)``."""
    if method.method == "single":
        return profile_single(models[0], waveforms, trig, method.stats_source)
    if method.method == "augmented":
        return profile_augmented(models[0], waveforms, method.k, trig, seed,
                                 method.warp_strength, method.warp_knots, method.include_self,
                                 method.stats_source)
    if projections is None:
        raise ValueError("ensemble scoring needs trained projections")
    return profile_ensemble(models, projections, waveforms, trig, method.include_self,
                            method.stats_source)


# ---------------------------------------------------------------------------
# projections for the ensemble method
# ---------------------------------------------------------------------------

def _rms_terms(d: np.ndarray):
    """Per-sample RMS of (B, C, T) differences and d(mean RMS)/d(d)."""
    b = d.shape[0]
    n = d[0].size
    rms = np.sqrt((d.reshape(b, -1) ** 2).mean(axis=1))
    safe = np.where(rms > 0, rms, 1.0)
    g = d * (np.where(rms > 0, 1.0 / (b * n * safe), 0.0))[:, None, None]
    return rms.mean(), g


def projection_loss(matrices: Sequence[np.ndarray], latents: Sequence[np.ndarray],
                    anchor_weight: float = 0.01, with_grad: bool = False):
    """Sum over pairs of mean RMS(P_i z_i - P_j z_j) plus the anchor term.

    The anchor ``anchor_weight * sum_i RMS(P_i z_i - z_i)`` rules out the
    all-zero projections, which would otherwise be a perfect solution.
    """
    proj = [np.einsum("cd,bdt->bct", m, z, optimize=True) for m, z in zip(matrices, latents)]
    grads = [np.zeros_like(m) for m in matrices] if with_grad else None
    total = 0.0
    for i, j in combinations(range(len(proj)), 2):
        loss, g = _rms_terms(proj[i] - proj[j])
        total += loss
        if with_grad:
            grads[i] += np.einsum("bct,bdt->cd", g, latents[i], optimize=True)
            grads[j] -= np.einsum("bct,bdt->cd", g, latents[j], optimize=True)
    if anchor_weight:
        for i in range(len(proj)):
            loss, g = _rms_terms(proj[i] - latents[i])
            total += anchor_weight * loss
            if with_grad:
                grads[i] += anchor_weight * np.einsum("bct,bdt->cd", g, latents[i], optimize=True)
    return (total, grads) if with_grad else total


def fit_projections(latents: Sequence[np.ndarray], epochs: int = 30, lr: float = 1e-3,
                    batch_size: int = 64, anchor_weight: float = 0.01,
                    seed: int = 0) -> ProjectionSet:
    """Adam on the projection loss from identity init; ``latents`` are per-member (B, C, T)."""
    k = len(latents)
    if k < 2:
        raise ValueError("projection training needs at least two members")
    shapes = {z.shape for z in latents}
    if len(shapes) != 1:
        raise ShapeError(f"member latents differ in shape: {sorted(shapes)}", axis="latent")
    c = latents[0].shape[1]
    params = [Param(np.eye(c)) for _ in range(k)]
    rng = np.random.default_rng(seed)
    n = latents[0].shape[0]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            batch = [z[idx] for z in latents]
            loss, grads = projection_loss([p.value for p in params], batch, anchor_weight,
                                          with_grad=True)
            for p, g in zip(params, grads):
                p.grad += g
            adam_step(params, lr)
            total += loss * idx.size
            seen += idx.size
        history.append(total / seen)
    matrices = [p.value.copy() for p in params]
    means, vars_ = [], []
    for m, z in zip(matrices, latents):
        pz = np.einsum("cd,bdt->bct", m, z, optimize=True)
        means.append(pz.mean(axis=(0, 2)))
        vars_.append(pz.var(axis=(0, 2)))
    return ProjectionSet(matrices, history, means, vars_)


def train_projections(models: Sequence[Autoencoder], dataset, epochs: int = 30,
                      lr: float = 1e-3, batch_size: int = 64, anchor_weight: float = 0.01,
                      max_records: int = 512, seed: int = 0) -> ProjectionSet:
    """Fit per-member projections on frozen encoders over (a subset of) ``dataset``."""
    if len(models) < 2:
        raise ValueError("projection training needs at least two models")
    shapes = {(m.arch.latent_channels, m.arch.latent_length) for m in models}
    if len(shapes) != 1:
        raise ShapeError(f"models disagree on latent shape: {sorted(shapes)}", axis="latent")
    x = dataset if isinstance(dataset, np.ndarray) else stack_samples(dataset)
    if x.shape[0] > max_records:
        keep = np.sort(np.random.default_rng(seed).choice(x.shape[0], max_records, replace=False))
        x = x[keep]
    latents = [_latents(m, x) for m in models]
    return fit_projections(latents, epochs, lr, batch_size, anchor_weight, seed)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_scores(path, waveforms: Sequence[Waveform], scores, method_name: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "method", "score"])
        for rec, s in zip(waveforms, scores):
            w.writerow([rec.id, rec.label or "", method_name, repr(float(s))])


def write_profiles(path, waveforms: Sequence[Waveform], profiles: np.ndarray,
                   latent_rate_hz: float) -> None:
    max_lag = (profiles.shape[1] - 1) // 2
    lags = np.arange(-max_lag, max_lag + 1) / latent_rate_hz
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lag_seconds", "value"])
        for rec, prof in zip(waveforms, profiles):
            for lag, v in zip(lags, prof):
                w.writerow([rec.id, f"{lag:.6g}", repr(float(v))])
