"""Preprocessing filters, resampling, local Wiener denoising, and noise mixing.

Every operation here is pure and length-preserving (resampling excepted, which
maps n samples to round(n·fs_out/fs_in)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

NOISE_KINDS = ("bw", "ma", "em", "gaussian_inband", "lung", "custom_record")
_RECORDED_KINDS = ("bw", "ma", "em", "lung", "custom_record")


@dataclass
class NoiseSpec:
    """One contamination source: a recorded noise record or seeded in-band Gaussian."""

    kind: str
    snr_db: float = 0.0
    seed: int = 0
    source: object | None = None          # SignalRecord for recorded kinds
    band: tuple[float, float] | None = None  # required for gaussian_inband

    def validate(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind in _RECORDED_KINDS and self.source is None:
            raise ValueError(f"noise kind {self.kind!r} requires a source record")
        if self.kind == "gaussian_inband" and self.band is None:
            raise ValueError("gaussian_inband requires a (lo_hz, hi_hz) band")


def _band_sos(fs_hz: float, lo_hz: float, hi_hz: float, order: int):
    if not (0 < lo_hz < hi_hz < fs_hz / 2):
        raise ValueError(
            f"invalid band: need 0 < lo < hi < fs/2, got lo={lo_hz}, hi={hi_hz}, fs={fs_hz}"
        )
    return sps.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=fs_hz, output="sos")


def bandpass(x, fs_hz: float, lo_hz: float, hi_hz: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass (applied forward and backward).

    The effective magnitude response is the squared filter response, so the
    passband gain stays ≈ 1 while stopband rejection doubles in dB.
    """
    x = np.asarray(x, dtype=np.float64)
    sos = _band_sos(fs_hz, lo_hz, hi_hz, order)
    return sps.sosfiltfilt(sos, x)


def zero_center(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot zero-center an empty sequence")
    return x - x.mean()


def standardize(x) -> np.ndarray:
    """Map to zero mean and unit population std; constant input maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot standardize an empty sequence")
    m = x.mean()
    s = x.std()
    if s <= 1e-12 * max(1.0, abs(m)):
        return np.zeros_like(x)
    return (x - m) / s


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Band-limited (Fourier) resampling to length round(n·fs_out/fs_in).

    Downsampling truncates the spectrum at the new Nyquist rate, which is an
    ideal anti-alias filter. Content that does not decay toward the record ends
    rings near the boundaries; keep a margin there for precision work.
    """
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    if fs_in == fs_out:
        return x.copy()
    if x.size == 0:
        return x.copy()
    n_out = int(round(x.shape[0] * fs_out / fs_in))
    return sps.resample(x, n_out)


def wiener_local(x, window_samples: int) -> np.ndarray:
    """Local-statistics Wiener shrinkage toward the moving mean.

    With m_t / v_t the moving mean / variance over an odd window and
    ν² = mean_t(v_t) the noise-power estimate:

        y_t = m_t + max(v_t − ν², 0) / v_t · (x_t − m_t)

    Quiet stretches collapse to their local mean; bursts whose variance
    dominates ν² pass through nearly unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    w = int(window_samples)
    if w < 3 or w % 2 == 0:
        raise ValueError("window_samples must be an odd integer ≥ 3")
    if w > x.shape[0]:
        raise ValueError("window larger than the signal")
    pad = w // 2
    xp = np.pad(x, pad, mode="reflect")
    kernel = np.full(w, 1.0 / w)
    m = np.convolve(xp, kernel, mode="valid")
    sq = np.convolve(xp * xp, kernel, mode="valid")
    v = np.maximum(sq - m * m, 0.0)
    nu2 = v.mean()
    gain = np.zeros_like(v)
    nz = v > 0
    gain[nz] = np.maximum(v[nz] - nu2, 0.0) / v[nz]
    return m + gain * (x - m)


def make_inband_gaussian(fs_hz: float, band_lo_hz: float, band_hi_hz: float,
                         n: int, seed: int) -> np.ndarray:
    """White Gaussian noise confined to a band via the same band-pass design."""
    sos = _band_sos(fs_hz, band_lo_hz, band_hi_hz, 4)  # validates the band
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n)
    return sps.sosfiltfilt(sos, white)


def mix_at_snr(signal, noise, snr_db: float) -> np.ndarray:
    """Add noise scaled so the signal-to-noise power ratio hits ``snr_db``.

    Noise shorter/longer than the signal is tiled/truncated. The scale is
    c = sqrt(P_signal / (P_noise · 10^(snr_db/10))) with P the mean square.
    """
    x = np.asarray(signal, dtype=np.float64)
    v = np.asarray(noise, dtype=np.float64)
    if v.size == 0 or x.size == 0:
        raise ValueError("signal and noise must be nonempty")
    if v.shape[0] < x.shape[0]:
        v = np.tile(v, int(np.ceil(x.shape[0] / v.shape[0])))
    v = v[: x.shape[0]]
    p_s = float(np.mean(x * x))
    p_n = float(np.mean(v * v))
    if p_n == 0.0:
        raise ValueError("zero-power noise")
    if p_s == 0.0:
        raise ValueError("zero-power signal")
    c = np.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))
    return x + c * v


def measure_snr_db(signal, mixed) -> float:
    """10·log10(P_signal / P_residual) for mixed = signal + noise component."""
    x = np.asarray(signal, dtype=np.float64)
    r = np.asarray(mixed, dtype=np.float64) - x
    return 10.0 * np.log10(np.mean(x * x) / np.mean(r * r))
