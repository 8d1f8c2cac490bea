"""Synthetic trial generation (spectral oracles via scipy.signal.welch),
rest-probe splicing, and the trial container format."""

import numpy as np
import pytest
from scipy import signal as sps
from scipy import stats

from eeggate.data import (
    SynthConfig,
    TrialSet,
    load,
    pink_noise,
    save,
    splice_rest_probe,
    synth_generate,
)
from eeggate.errors import (
    BadMagicError,
    ConfigError,
    SizeMismatchError,
    TruncatedFileError,
)


@pytest.fixture(scope="module")
def default_set():
    return synth_generate(SynthConfig(seed=0))


@pytest.fixture(scope="module")
def small_cfg():
    # spectral assertions below compare plain Welch band powers, which a
    # broadband noise floor biases toward 1 regardless of the generator's
    # correctness; measure the rhythm mechanics at a low noise level
    return SynthConfig(n_subjects=2, trials_per_class=24, noise_level=0.4, seed=1)


@pytest.fixture(scope="module")
def small_set(small_cfg):
    return synth_generate(small_cfg)


def band_power(x, fs, lo=8.0, hi=12.0):
    freqs, psd = sps.welch(x, fs=fs, nperseg=min(256, x.shape[-1]), axis=-1)
    sel = (freqs >= lo) & (freqs <= hi)
    return psd[..., sel].sum(axis=-1)


# -- generation -----------------------------------------------------------------

def test_default_geometry(default_set):
    assert default_set.trials.shape == (2592, 22, 1500)
    assert default_set.trials.dtype == np.float32
    assert default_set.fs == 250.0
    assert set(default_set.labels.tolist()) == {0, 1, 2, 3}
    assert set(default_set.subject_ids.tolist()) == set(range(9))
    # 72 trials per class per subject
    for s in range(9):
        for k in range(4):
            n = ((default_set.subject_ids == s) & (default_set.labels == k)).sum()
            assert n == 72


def test_seed_determinism(small_cfg, small_set):
    again = synth_generate(small_cfg)
    assert small_set.trials.tobytes() == again.trials.tobytes()
    np.testing.assert_array_equal(small_set.labels, again.labels)


def test_different_seeds_differ(small_cfg, small_set):
    import dataclasses

    other = synth_generate(dataclasses.replace(small_cfg, seed=small_cfg.seed + 1))
    assert (other.trials != small_set.trials).any()


def test_subjects_are_independent_substreams(small_cfg, small_set):
    # regenerating with more subjects leaves earlier subjects bit-identical
    import dataclasses

    bigger = synth_generate(dataclasses.replace(small_cfg, n_subjects=3))
    n_keep = (small_set.subject_ids < 2).sum()
    np.testing.assert_array_equal(
        bigger.trials[bigger.subject_ids < 2], small_set.trials[:n_keep]
    )


def test_erd_band_power_ratio(small_cfg, small_set):
    # mu-band power during MI on the class's channel group should fall to
    # about (1 - depth)^2 of the rest-window power
    cfg, ts = small_cfg, small_set
    target = (1.0 - cfg.erd_depth) ** 2
    for k in range(4):
        grp = cfg.class_groups[k]
        x = ts.trials[ts.labels == k][:, grp]
        p_rest = band_power(x[..., :500], cfg.fs).mean()
        p_mi = band_power(x[..., 500:1500], cfg.fs).mean()
        ratio = p_mi / p_rest
        assert p_mi < p_rest
        assert abs(ratio - target) <= 0.2 * target, f"class {k}: ratio {ratio:.4f}"


def test_off_group_spectra_equal_across_classes(small_cfg, small_set):
    # channels outside every class group carry no class information:
    # two-sample test on MI-window mu power must not reject
    cfg, ts = small_cfg, small_set
    used = {ch for grp in cfg.class_groups for ch in grp}
    off = [ch for ch in range(cfg.n_channels) if ch not in used]
    p0 = band_power(ts.trials[ts.labels == 0][:, off, 500:1500], cfg.fs).reshape(-1)
    p1 = band_power(ts.trials[ts.labels == 1][:, off, 500:1500], cfg.fs).reshape(-1)
    _, pval = stats.mannwhitneyu(p0, p1)
    assert pval > 0.01


def test_pink_noise_slope():
    # spectrum should fall roughly 10 dB/decade (1/f) between 1 and 60 Hz
    rng = np.random.default_rng(2)
    x = pink_noise(rng, (8, 100_000))
    freqs, psd = sps.welch(x, fs=250.0, nperseg=4096, axis=-1)
    sel = (freqs >= 1.0) & (freqs <= 60.0)
    slope = np.polyfit(np.log10(freqs[sel]), np.log10(psd[:, sel].mean(axis=0)), 1)[0]
    assert -1.3 < slope < -0.7


def test_invalid_configs():
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(erd_depth=1.5))
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(class_groups=[[0], [0], [1], [2]]))
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(class_groups=[[0], [1], [2], [25]]))
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(trial_seconds=3.0))
    with pytest.raises(ConfigError):
        TrialSet(250.0, np.zeros((2, 3, 10), np.float32), np.zeros(3, np.int64), np.zeros(2, np.int64))


# -- probe splicing ---------------------------------------------------------------

def test_splice_zero_seconds_is_identity(small_set):
    out = splice_rest_probe(small_set, 0.0, np.random.default_rng(0))
    assert out.probe_masks is not None
    assert not out.probe_masks.any()
    assert out.trials.tobytes() == small_set.trials.tobytes()


def test_splice_one_second_mask_geometry(small_set):
    out = splice_rest_probe(small_set, 1.0, np.random.default_rng(0))
    masks = out.probe_masks
    assert masks.shape == (small_set.n_trials, 1500)
    counts = masks.sum(axis=1)
    np.testing.assert_array_equal(counts, 250)
    # all marked samples inside the MI window [500, 1500)
    assert not masks[:, :500].any()
    # contiguous: exactly one rising edge per trial
    edges = np.diff(masks.astype(np.int8), axis=1)
    assert ((edges == 1).sum(axis=1) == 1).all()


def test_splice_changes_only_masked_samples(small_set):
    out = splice_rest_probe(small_set, 1.0, np.random.default_rng(3))
    unchanged = ~out.probe_masks
    for i in range(0, small_set.n_trials, 37):
        np.testing.assert_array_equal(
            out.trials[i][:, unchanged[i]], small_set.trials[i][:, unchanged[i]]
        )
        assert (out.trials[i][:, out.probe_masks[i]] != small_set.trials[i][:, out.probe_masks[i]]).any()


def test_splice_restores_rest_band_power(small_cfg, small_set):
    # spliced windows carry full-amplitude rhythm: mu power there should be
    # near the rest-window level, not the attenuated MI level
    out = splice_rest_probe(small_set, 1.0, np.random.default_rng(4))
    k = 0
    grp = small_cfg.class_groups[k]
    idx = np.flatnonzero(out.labels == k)[:50]
    ratios = []
    for i in idx:
        m = out.probe_masks[i]
        probe = out.trials[i][grp][:, m]
        rest = out.trials[i][grp][:, :500]
        ratios.append(band_power(probe, small_cfg.fs).mean() / band_power(rest, small_cfg.fs).mean())
    assert 0.5 < float(np.median(ratios)) < 2.0


def test_splice_rejects_full_window(small_set):
    with pytest.raises(ConfigError):
        splice_rest_probe(small_set, 4.0, np.random.default_rng(0))


# -- container IO -----------------------------------------------------------------

def test_roundtrip_bit_exact(tmp_path, small_set):
    p = tmp_path / "trials.bin"
    save(small_set, p)
    back = load(p)
    assert back.fs == small_set.fs
    assert back.trials.tobytes() == small_set.trials.tobytes()
    np.testing.assert_array_equal(back.labels, small_set.labels)
    np.testing.assert_array_equal(back.subject_ids, small_set.subject_ids)
    assert back.probe_masks is None


def test_roundtrip_with_masks(tmp_path, small_set):
    spliced = splice_rest_probe(small_set, 0.5, np.random.default_rng(5))
    p = tmp_path / "trials.bin"
    save(spliced, p)
    back = load(p)
    np.testing.assert_array_equal(back.probe_masks, spliced.probe_masks)


def test_corrupted_magic(tmp_path, small_set):
    p = tmp_path / "trials.bin"
    save(small_set, p)
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load(p)


def test_truncated_payload(tmp_path, small_set):
    p = tmp_path / "trials.bin"
    save(small_set, p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(TruncatedFileError):
        load(p)


def test_size_mismatch_distinct_from_truncation(tmp_path, small_set):
    p = tmp_path / "trials.bin"
    save(small_set, p)
    p.write_bytes(p.read_bytes() + b"\x00" * 16)
    with pytest.raises(SizeMismatchError):
        load(p)
    assert not issubclass(SizeMismatchError, TruncatedFileError)
    assert not issubclass(TruncatedFileError, SizeMismatchError)


def test_save_is_atomic(tmp_path, small_set):
    p = tmp_path / "trials.bin"
    save(small_set, p)
    before = p.read_bytes()
    save(small_set, p)  # overwrite goes through a temp file + rename
    assert p.read_bytes() == before
    assert list(tmp_path.iterdir()) == [p]
