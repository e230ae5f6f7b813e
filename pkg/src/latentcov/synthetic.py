"""Desk-scale labeled datasets: transient arrivals in colored noise.

Events are two Ricker packets (a "P" and a later "S" arrival) with decaying
codas, added to the same kind of noise used for the noise records.  Every
record is a pure function of ``(config, k)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .waveforms import DatasetManifest, Waveform, bandpass, write_container, write_manifest

_NOISE_STREAM, _EVENT_STREAM = 0, 1
SNR_WINDOW_SECONDS = 5.0


@dataclass
class SynthConfig:
    n_event: int = 1000
    n_noise: int = 1000
    snr_range: tuple[float, float] = (2.0, 10.0)
    onset_range_seconds: tuple[float, float] = (5.0, 20.0)
    noise_spectrum: str = "brownish"
    glitch_fraction: float = 0.0
    seed: int = 0
    sample_rate_hz: float = 100.0
    n_samples: int = 3000
    name: str = "synth"
    band: tuple[float, float] = (1.0, 20.0)

    def __post_init__(self):
        self.snr_range = tuple(float(v) for v in self.snr_range)
        self.onset_range_seconds = tuple(float(v) for v in self.onset_range_seconds)
        lo, hi = self.snr_range
        if not 0 < lo <= hi:
            raise ValueError(f"snr_range must satisfy 0 < lo <= hi, got {self.snr_range}")
        o_lo, o_hi = self.onset_range_seconds
        duration = self.n_samples / self.sample_rate_hz
        if not 0 <= o_lo <= o_hi < duration:
            raise ValueError(f"onset range {self.onset_range_seconds} outside the window")
        if self.noise_spectrum not in ("white", "brownish"):
            raise ValueError(f"unknown noise spectrum {self.noise_spectrum!r}")
        if not 0 <= self.glitch_fraction <= 1:
            raise ValueError("glitch_fraction must be in [0, 1]")
        if self.n_event < 0 or self.n_noise < 0:
            raise ValueError("counts must be non-negative")


def _rng(cfg: SynthConfig, stream: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, stream, k]))


def colored_noise(rng: np.random.Generator, n: int, fs: float, spectrum: str) -> np.ndarray:
    """Three unit-std channels; ``brownish`` has power falling as 1/f."""
    white = rng.standard_normal((3, n))
    if spectrum == "brownish":
        spec = np.fft.rfft(white, axis=1)
        f = np.fft.rfftfreq(n, 1.0 / fs)
        shaping = 1.0 / np.sqrt(np.maximum(f, 0.5))
        shaping[0] = 0.0
        white = np.fft.irfft(spec * shaping, n=n, axis=1)
    white -= white.mean(axis=1, keepdims=True)
    return white / white.std(axis=1, keepdims=True)


def _add_glitch(x: np.ndarray, rng: np.random.Generator) -> None:
    ch = rng.integers(0, 3)
    t = rng.integers(0, x.shape[1])
    x[ch, t] += rng.choice([-1.0, 1.0]) * 10.0 * x[ch].std()


def ricker(t: np.ndarray, f: float) -> np.ndarray:
    a = (np.pi * f * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def _arrival(rng, n: int, fs: float, t0: float, direction: np.ndarray) -> np.ndarray:
    t = np.arange(n) / fs
    f = rng.uniform(2.0, 10.0)
    centre = t0 + 1.0 / f
    packet = ricker(t - centre, f)
    decay = rng.uniform(0.5, 3.0)
    lo, hi = max(0.5, 0.6 * f), min(0.45 * fs, 1.6 * f)
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    coda = signal.sosfilt(sos, rng.standard_normal((3, n)), axis=1)
    coda /= coda.std(axis=1, keepdims=True) + 1e-12
    envelope = np.where(t >= t0, np.exp(-np.clip(t - t0, 0, None) / decay), 0.0)
    coda_level = rng.uniform(0.2, 0.6)
    spread = 0.3 + 0.7 * np.abs(direction)
    return direction[:, None] * packet[None, :] + coda_level * spread[:, None] * coda * envelope


def _direction(rng, dominant: np.ndarray) -> np.ndarray:
    v = dominant + 0.5 * rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _snr(sig: np.ndarray, noise: np.ndarray, onset: int, cfg: SynthConfig) -> float:
    fs = cfg.sample_rate_hz
    lo, hi = cfg.band
    s = bandpass(sig, fs, lo, hi)
    nz = bandpass(noise, fs, lo, hi)
    win = s[:, onset:onset + int(SNR_WINDOW_SECONDS * fs)]
    return float(np.sqrt(np.mean(win ** 2)) / np.sqrt(np.mean(nz ** 2)))


def measure_snr(signal_part: np.ndarray, noise_part: np.ndarray, onset: int,
                cfg: SynthConfig) -> float:
    """Post-band-pass RMS of the signal in the 5 s after onset over the noise RMS."""
    return _snr(signal_part, noise_part, onset, cfg)


def generate_noise(cfg: SynthConfig, k: int) -> Waveform:
    rng = _rng(cfg, _NOISE_STREAM, k)
    x = colored_noise(rng, cfg.n_samples, cfg.sample_rate_hz, cfg.noise_spectrum)
    if rng.random() < cfg.glitch_fraction:
        _add_glitch(x, rng)
    return Waveform(x.astype(np.float32), cfg.sample_rate_hz, f"{cfg.name}-noise-{k:06d}", "noise")


def generate_event(cfg: SynthConfig, k: int, with_components: bool = False):
    """Event record ``k``; with ``with_components`` also returns (signal, noise) arrays."""
    rng = _rng(cfg, _EVENT_STREAM, k)
    fs, n = cfg.sample_rate_hz, cfg.n_samples
    noise = colored_noise(rng, n, fs, cfg.noise_spectrum)
    t_p = rng.uniform(*cfg.onset_range_seconds)
    t_s = t_p + rng.uniform(1.0, 5.0)
    onset = int(np.ceil(t_p * fs))
    p = _arrival(rng, n, fs, onset / fs, _direction(rng, np.array([1.0, 0.3, 0.3])))
    s = _arrival(rng, n, fs, t_s, _direction(rng, np.array([0.3, 1.0, 1.0])))
    sig = p + rng.uniform(1.0, 3.0) * s
    target = rng.uniform(*cfg.snr_range)
    sig *= target / _snr(sig, noise, onset, cfg)
    w = Waveform((noise + sig).astype(np.float32), fs, f"{cfg.name}-event-{k:06d}", "event", onset)
    if with_components:
        return w, sig, noise, target
    return w


def generate_records(cfg: SynthConfig) -> list[Waveform]:
    return ([generate_event(cfg, k) for k in range(cfg.n_event)]
            + [generate_noise(cfg, k) for k in range(cfg.n_noise)])


def build_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write ``<name>.rcvr``, ``manifest.txt`` and ``report.txt`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, targets = [], []
    for k in range(cfg.n_event):
        w, _, _, target = generate_event(cfg, k, with_components=True)
        records.append(w)
        targets.append(target)
    records += [generate_noise(cfg, k) for k in range(cfg.n_noise)]
    container = out / f"{cfg.name}.rcvr"
    write_container(container, records)
    write_manifest(out / "manifest.txt", [container.name], comment=f"synthetic dataset {cfg.name}")
    (out / "report.txt").write_text(generation_report(cfg, targets))
    return DatasetManifest([(str(container), w.id, w.label, w.onset_index) for w in records])


def generation_report(cfg: SynthConfig, snr_targets) -> str:
    lines = [f"dataset {cfg.name} seed={cfg.seed}",
             f"events {cfg.n_event}", f"noise {cfg.n_noise}",
             f"noise_spectrum {cfg.noise_spectrum}", f"glitch_fraction {cfg.glitch_fraction}",
             "snr histogram (bin_lo bin_hi count):"]
    if len(snr_targets):
        lo, hi = cfg.snr_range
        counts, edges = np.histogram(snr_targets, bins=10, range=(lo, hi if hi > lo else lo + 1))
        lines += [f"  {a:.2f} {b:.2f} {c}" for a, b, c in zip(edges[:-1], edges[1:], counts)]
    return "\n".join(lines) + "\n"


def sta_lta(w: Waveform, sta_seconds: float = 0.5, lta_seconds: float = 10.0,
            band: tuple[float, float] = (1.0, 20.0)) -> float:
    """Maximum classic STA/LTA ratio of the summed-channel energy; a reference detector."""
    fs = w.sample_rate_hz
    cf = (bandpass(w.samples, fs, *band) ** 2).sum(axis=0)
    ns, nl = int(sta_seconds * fs), int(lta_seconds * fs)
    c = np.concatenate([[0.0], np.cumsum(cf)])
    t = np.arange(nl, len(cf) - ns + 1)
    sta = (c[t + ns] - c[t]) / ns
    lta = (c[t] - c[t - nl]) / nl
    return float(np.max(sta / np.maximum(lta, 1e-12 * (cf.mean() + 1e-30))))
