"""Trial container, synthetic EEG generation, and ground-truth probes.

Synthetic trials are pink noise plus a common 10 Hz rhythm.  During the MI
window (2-6 s) the class's channel group has its rhythm amplitude scaled
by (1 - erd_depth), a surrogate for event-related desynchronization.  A
per-subject mixing perturbation models cross-subject variability.

Container format (little endian):
  8-byte magic "EEGTRLS1", uint32 header length, JSON header
  (fs, n_trials, n_channels, n_samples, labels, subject_ids, has_masks),
  float32 trial-major payload, then bit-packed probe masks if present.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .dsp import MI_SECONDS, REST_SECONDS
from .errors import BadMagicError, ConfigError, SizeMismatchError, TruncatedFileError

MAGIC = b"EEGTRLS1"

# Paul Kellet's "economy" pink noise: three cascaded one-pole lowpass taps
# summed with a direct term.  Gains chosen to track 1/f within ~1 dB/octave.
PINK_POLES = (0.99765, 0.96300, 0.57000)
PINK_GAINS = (0.0990460, 0.2965164, 1.0526913)
PINK_DIRECT = 0.1848


@dataclass
class TrialSet:
    fs: float
    trials: np.ndarray              # (n, C, T) float32
    labels: np.ndarray              # (n,) int64 in [0,4)
    subject_ids: np.ndarray         # (n,) int64
    probe_masks: np.ndarray | None = None  # (n, T) bool, True inside MI window only

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        n = self.trials.shape[0]
        if self.labels.shape != (n,) or self.subject_ids.shape != (n,):
            raise ConfigError("labels/subject_ids must match the number of trials")

    @property
    def n_trials(self) -> int:
        return self.trials.shape[0]


def _default_groups() -> list[list[int]]:
    return [[0, 1, 2, 3], [5, 6, 7, 8], [10, 11, 12, 13], [15, 16, 17, 18]]


@dataclass
class SynthConfig:
    n_subjects: int = 9
    trials_per_class: int = 72
    n_channels: int = 22
    fs: float = 250.0
    trial_seconds: float = 6.0
    class_groups: list[list[int]] = field(default_factory=_default_groups)
    erd_depth: float = 0.5
    noise_level: float = 0.85
    rhythm_amp: float = 2.0
    subject_scale: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.erd_depth <= 1.0):
            raise ConfigError(f"erd_depth={self.erd_depth} outside [0,1]")
        if len(self.class_groups) != 4:
            raise ConfigError("need one channel group per class (4)")
        seen: set[int] = set()
        for grp in self.class_groups:
            for ch in grp:
                if not (0 <= ch < self.n_channels):
                    raise ConfigError(f"channel {ch} outside [0,{self.n_channels})")
                if ch in seen:
                    raise ConfigError(f"channel {ch} appears in two class groups")
                seen.add(ch)
        if self.trial_seconds < REST_SECONDS + MI_SECONDS:
            raise ConfigError("trials must cover the rest and MI windows")


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Pink noise along the last axis via the cascaded one-pole approximation."""
    white = rng.standard_normal(shape)
    out = PINK_DIRECT * white
    for pole, gain in zip(PINK_POLES, PINK_GAINS):
        out = out + sps.lfilter([gain], [1.0, -pole], white, axis=-1)
    return out


def _rhythm(rng: np.random.Generator, n_samples: int, fs: float) -> np.ndarray:
    t = np.arange(n_samples) / fs
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return np.sin(2.0 * np.pi * 10.0 * t + phase)


def synth_generate(cfg: SynthConfig) -> TrialSet:
    cfg.validate()
    n_samples = int(round(cfg.trial_seconds * cfg.fs))
    mi_start = int(round(REST_SECONDS * cfg.fs))
    mi_end = mi_start + int(round(MI_SECONDS * cfg.fs))
    n_per_subject = 4 * cfg.trials_per_class
    n_total = cfg.n_subjects * n_per_subject
    trials = np.empty((n_total, cfg.n_channels, n_samples), dtype=np.float32)
    labels = np.empty(n_total, dtype=np.int64)
    subject_ids = np.empty(n_total, dtype=np.int64)

    i = 0
    for s in range(cfg.n_subjects):
        rng = np.random.default_rng([cfg.seed, s])
        mixing = np.eye(cfg.n_channels) + cfg.subject_scale * rng.standard_normal(
            (cfg.n_channels, cfg.n_channels)
        )
        for label in range(4):
            group = cfg.class_groups[label]
            for _ in range(cfg.trials_per_class):
                x = cfg.noise_level * pink_noise(rng, (cfg.n_channels, n_samples))
                rhythm = cfg.rhythm_amp * _rhythm(rng, n_samples, cfg.fs)
                amp = np.ones((cfg.n_channels, n_samples))
                amp[group, mi_start:mi_end] = 1.0 - cfg.erd_depth
                x += amp * rhythm
                trials[i] = (mixing @ x).astype(np.float32)
                labels[i] = label
                subject_ids[i] = s
                i += 1
    return TrialSet(cfg.fs, trials, labels, subject_ids)


def splice_rest_probe(ts: TrialSet, probe_seconds: float, rng: np.random.Generator) -> TrialSet:
    """Replace a window inside each MI segment with fresh rest-statistics signal."""
    if probe_seconds >= MI_SECONDS:
        raise ConfigError(f"probe_seconds={probe_seconds} must be < {MI_SECONDS}")
    n, c, t = ts.trials.shape
    masks = np.zeros((n, t), dtype=bool)
    trials = ts.trials.copy()
    n_probe = int(round(probe_seconds * ts.fs))
    if n_probe == 0:
        return TrialSet(ts.fs, trials, ts.labels.copy(), ts.subject_ids.copy(), masks)
    mi_start = int(round(REST_SECONDS * ts.fs))
    mi_end = mi_start + int(round(MI_SECONDS * ts.fs))
    # probe statistics mirror the generator's rest signal at default amplitudes
    cfg = SynthConfig(n_channels=c, fs=ts.fs)
    for i in range(n):
        start = int(rng.integers(mi_start, mi_end - n_probe + 1))
        probe = cfg.noise_level * pink_noise(rng, (c, n_probe))
        probe += cfg.rhythm_amp * _rhythm(rng, n_probe, ts.fs)
        trials[i, :, start:start + n_probe] = probe.astype(np.float32)
        masks[i, start:start + n_probe] = True
    return TrialSet(ts.fs, trials, ts.labels.copy(), ts.subject_ids.copy(), masks)


# -- container IO ------------------------------------------------------------

def save(ts: TrialSet, path) -> None:
    n, c, t = ts.trials.shape
    header = json.dumps(
        {
            "fs": ts.fs,
            "n_trials": n,
            "n_channels": c,
            "n_samples": t,
            "labels": ts.labels.tolist(),
            "subject_ids": ts.subject_ids.tolist(),
            "has_masks": ts.probe_masks is not None,
        },
        sort_keys=True,
    ).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(ts.trials, dtype="<f4").tobytes())
        if ts.probe_masks is not None:
            fh.write(np.packbits(ts.probe_masks.reshape(-1)).tobytes())
    os.replace(tmp, path)


def load(path) -> TrialSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise BadMagicError("not a trial container")
    if len(raw) < 12:
        raise TruncatedFileError("missing header length")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise TruncatedFileError("truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise TruncatedFileError(f"unreadable header: {exc}") from exc
    n, c, t = header["n_trials"], header["n_channels"], header["n_samples"]
    if len(header["labels"]) != n or len(header["subject_ids"]) != n:
        raise SizeMismatchError("label/subject arrays disagree with n_trials")
    payload = raw[12 + hlen:]
    n_bytes = 4 * n * c * t
    mask_bytes = (n * t + 7) // 8 if header["has_masks"] else 0
    if len(payload) < n_bytes + mask_bytes:
        raise TruncatedFileError("payload shorter than header promises")
    if len(payload) != n_bytes + mask_bytes:
        raise SizeMismatchError("payload longer than header promises")
    trials = np.frombuffer(payload[:n_bytes], dtype="<f4").reshape(n, c, t).copy()
    masks = None
    if header["has_masks"]:
        bits = np.unpackbits(np.frombuffer(payload[n_bytes:], dtype=np.uint8))
        masks = bits[: n * t].astype(bool).reshape(n, t)
    return TrialSet(header["fs"], trials, header["labels"], header["subject_ids"], masks)
