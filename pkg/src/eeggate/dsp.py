"""Deterministic signal preprocessing.

Butterworth bandpass design (analog prototype -> bandpass transform ->
bilinear with prewarping, done by scipy and validated here against a
hand-rolled transfer-function evaluation), causal filtering, exponential
moving standardization, and rest/MI segmentation.

"4th order" means prototype order 4, i.e. a digital bandpass of order 8.
Filtering is causal by default; a zero-phase switch exists for offline use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import DomainError, LengthError

REST_SECONDS = 2.0
MI_SECONDS = 4.0


@dataclass
class BiquadCascade:
    """Second-order sections [b0 b1 b2 1 a1 a2] with a0 normalized to 1."""

    sections: np.ndarray
    fs: float
    band: tuple[float, float]
    prototype_order: int

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, s[4], s[5]]) for s in self.sections])

    def validate(self) -> None:
        if np.max(np.abs(self.poles())) >= 1.0 - 1e-9:
            raise DomainError("unstable cascade: pole on or outside the unit circle")
        dc = abs(frequency_response(self, np.array([0.0]))[0])
        if dc > 1e-9:
            raise DomainError(f"bandpass cascade with nonzero DC gain {dc}")


def design_butterworth_bandpass(
    prototype_order: int = 4,
    f_lo: float = 0.5,
    f_hi: float = 38.0,
    fs: float = 250.0,
) -> BiquadCascade:
    if not (0.0 < f_lo < f_hi < fs / 2.0):
        raise DomainError(f"invalid band ({f_lo}, {f_hi}) at fs={fs}")
    if prototype_order < 1:
        raise DomainError("prototype order must be >= 1")
    sos = sps.butter(prototype_order, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")
    sos = np.asarray(sos, dtype=np.float64)
    sos[:, :3] /= sos[:, 3:4]
    sos[:, 3:] /= sos[:, 3:4]
    casc = BiquadCascade(sos, float(fs), (float(f_lo), float(f_hi)), int(prototype_order))
    casc.validate()
    return casc


def frequency_response(casc: BiquadCascade, freqs_hz: np.ndarray) -> np.ndarray:
    """H(e^{j w}) evaluated directly from the section polynomials.

    Kept independent of scipy's design/freqz path so it can serve as the
    oracle for the designed cascade.
    """
    w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / casc.fs
    zinv = np.exp(-1j * w)
    h = np.ones_like(zinv)
    for b0, b1, b2, _, a1, a2 in casc.sections:
        h = h * (b0 + b1 * zinv + b2 * zinv**2) / (1.0 + a1 * zinv + a2 * zinv**2)
    return h


def apply_filter(casc: BiquadCascade, x: np.ndarray, axis: int = -1, zero_phase: bool = False) -> np.ndarray:
    """Causal DF2T cascade per channel, zero initial conditions."""
    x = np.asarray(x, dtype=np.float64)
    if zero_phase:
        return sps.sosfiltfilt(casc.sections, x, axis=axis)
    return sps.sosfilt(casc.sections, x, axis=axis)


def exp_moving_standardize(
    x: np.ndarray, alpha: float = 1e-3, eps: float = 1e-4, axis: int = -1
) -> np.ndarray:
    """Exponential moving standardization along ``axis``.

    mu_0 = x_0, v_0 = 0; mu_t = (1-a) mu_{t-1} + a x_t;
    v_t = (1-a) v_{t-1} + a (x_t - mu_t)^2; out = (x - mu) / max(sqrt(v), eps).
    """
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha={alpha} outside (0,1)")
    x = np.asarray(x, dtype=np.float64)
    x = np.moveaxis(x, axis, -1)
    b, a = [alpha], [1.0, -(1.0 - alpha)]
    x0 = x[..., :1]
    # lfilter zi such that mu starts from the mu_{-1} = x_0 initialization
    mu = sps.lfilter(b, a, x, axis=-1, zi=(1.0 - alpha) * x0)[0]
    d = x - mu
    v = sps.lfilter(b, a, d * d, axis=-1, zi=np.zeros_like(x0))[0]
    out = d / np.maximum(np.sqrt(v), eps)
    return np.moveaxis(out, -1, axis)


def segment_trial(trial: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Split trailing-axis samples into rest [0, 2s) and MI [2s, 6s)."""
    trial = np.asarray(trial)
    n_rest = int(round(REST_SECONDS * fs))
    n_mi = int(round(MI_SECONDS * fs))
    if trial.shape[-1] < n_rest + n_mi:
        raise LengthError(
            f"trial has {trial.shape[-1]} samples, needs {n_rest + n_mi} at fs={fs}"
        )
    return trial[..., :n_rest], trial[..., n_rest:n_rest + n_mi]


@dataclass
class PreprocConfig:
    filter_order: int = 4
    band_lo: float = 0.5
    band_hi: float = 38.0
    ems_alpha: float = 1e-3
    ems_eps: float = 1e-4
    zero_phase: bool = False


def preprocess_trials(
    trials: np.ndarray, fs: float, cfg: PreprocConfig = PreprocConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Filter, standardize, then segment a (n, C, T) stack into (rest, mi)."""
    casc = design_butterworth_bandpass(cfg.filter_order, cfg.band_lo, cfg.band_hi, fs)
    y = apply_filter(casc, trials, axis=-1, zero_phase=cfg.zero_phase)
    y = exp_moving_standardize(y, alpha=cfg.ems_alpha, eps=cfg.ems_eps, axis=-1)
    return segment_trial(y, fs)
