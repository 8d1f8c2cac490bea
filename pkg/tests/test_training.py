"""Optimizer, scheduler, fit/evaluate, metrics arithmetic, and the LOSO
harness on tiny synthetic sets."""

import dataclasses

import numpy as np
import pytest

from eeggate.errors import ContractError, DimensionError, DomainError
from eeggate.models import build_model
from eeggate.tensor import Tensor
from eeggate.training import (
    AdamWState,
    Metrics,
    Prepared,
    TrainConfig,
    adamw_step,
    cosine_lr,
    evaluate,
    fit,
    loso_compare,
    loso_evaluate,
)

# -- AdamW -----------------------------------------------------------------------

def test_adamw_single_step_hand_value():
    # theta=1, g=1, t=1, lr=0.002, wd=0.075:
    # m_hat = v_hat = 1, update = -lr*(1/(1+eps) + wd*theta) ~ -0.002150
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamWState([p], weight_decay=0.075)
    adamw_step([p], [np.array([1.0])], state, t=1, lr_t=0.002)
    assert p.data[0] == pytest.approx(0.997850, abs=1e-5)


def test_adamw_zero_grad_wd_zero_leaves_theta():
    p = Tensor(np.array([2.5]), requires_grad=True)
    state = AdamWState([p], weight_decay=0.0)
    adamw_step([p], [np.array([0.0])], state, t=1, lr_t=0.002)
    assert p.data[0] == 2.5


def test_adamw_wd_zero_matches_reference_adam():
    # independently coded Adam reference, 100 random steps
    rng = np.random.default_rng(0)
    theta = rng.normal(size=7)
    p = Tensor(theta.copy(), requires_grad=True)
    state = AdamWState([p], weight_decay=0.0)

    ref = theta.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.002
    for t in range(1, 101):
        g = rng.normal(size=7)
        adamw_step([p], [g.copy()], state, t=t, lr_t=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p.data, ref, atol=1e-12)


def test_adamw_decoupled_decay_applies_to_pre_update_value():
    # two steps with g=0 and wd>0 shrink theta geometrically
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamWState([p], weight_decay=0.5)
    adamw_step([p], [np.array([0.0])], state, t=1, lr_t=0.1)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)
    adamw_step([p], [np.array([0.0])], state, t=2, lr_t=0.1)
    assert p.data[0] == pytest.approx(0.95 * 0.95)


def test_adamw_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(DimensionError):
        adamw_step([p], [np.zeros(4)], AdamWState([p], 0.0), t=1, lr_t=0.1)


def test_adamw_step_index_starts_at_one():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(DomainError):
        adamw_step([p], [np.zeros(1)], AdamWState([p], 0.0), t=0, lr_t=0.1)


# -- cosine schedule -----------------------------------------------------------------

def test_cosine_endpoints():
    assert cosine_lr(0, 300, 0.002) == pytest.approx(0.002, abs=0)
    assert cosine_lr(300, 300, 0.002) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(150, 300, 0.002) == pytest.approx(0.001, abs=1e-18)


def test_cosine_with_eta_min():
    assert cosine_lr(10, 10, 0.002, eta_min=1e-4) == pytest.approx(1e-4)
    assert cosine_lr(0, 10, 0.002, eta_min=1e-4) == pytest.approx(0.002)


def test_cosine_clamps_beyond_horizon():
    assert cosine_lr(11, 10, 0.002, eta_min=1e-4) == 1e-4


def test_cosine_sequence_non_increasing():
    seq = [cosine_lr(t, 300, 0.002) for t in range(301)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))


# -- metrics ---------------------------------------------------------------------------

def test_metrics_hand_case():
    m = Metrics.from_accuracies([0.6, 0.7, 0.8])
    assert m.avg == pytest.approx(70.0, abs=1e-6)
    assert m.std == pytest.approx(8.1650, abs=1e-4)
    assert m.std == pytest.approx(np.std([60.0, 70.0, 80.0]), abs=1e-9)


def test_metrics_recomputable():
    accs = [0.31, 0.55, 0.72, 0.48]
    m = Metrics.from_accuracies(accs)
    arr = np.asarray(accs) * 100.0
    assert m.avg == pytest.approx(arr.mean(), abs=1e-9)
    assert m.std == pytest.approx(arr.std(), abs=1e-9)


# -- fit / evaluate -----------------------------------------------------------------------

def toy_prepared(n=64, c=3, t_rest=40, t_mi=120, seed=0, n_subjects=1, strength=4.0):
    """Linearly separable toy set: class k marks channel k with a strong
    offset pattern in the MI window."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=n)
    subjects = rng.integers(0, n_subjects, size=n)
    rest = rng.normal(size=(n, c, t_rest))
    mi = rng.normal(size=(n, c, t_mi))
    for i, k in enumerate(labels):
        mi[i, k % c] += strength * (1.0 if k < 2 else -1.0)
        mi[i, (k + 1) % c] += strength * (1.0 if k % 2 else -1.0)
    return Prepared(rest, mi, labels.astype(np.int64), subjects.astype(np.int64))


def test_fit_rejects_empty():
    empty = Prepared(np.zeros((0, 2, 40)), np.zeros((0, 2, 120)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    model = build_model(2, 250.0, 120, use_gate=False)
    with pytest.raises(DomainError):
        fit(model, empty, TrainConfig(epochs=1))


def test_fit_zero_epochs_leaves_parameters():
    data = toy_prepared()
    model = build_model(3, 250.0, 120, use_gate=False, seed=0)
    before = [p.data.copy() for _, p in model.parameters()]
    fit(model, data, TrainConfig(epochs=0, use_gate=False))
    for (name, p), b in zip(model.parameters(), before):
        np.testing.assert_array_equal(p.data, b, err_msg=name)


def test_fit_learns_separable_toy():
    data = toy_prepared(n=128, seed=1)
    model = build_model(3, 250.0, 120, use_gate=False, seed=0)
    cfg = TrainConfig(epochs=50, use_gate=False, batch_size=32, seed=0)
    history = fit(model, data, cfg)
    assert evaluate(model, data) >= 0.99
    assert np.isfinite(history).all()
    assert len(history) == 50 * 4


def test_fit_deterministic():
    data = toy_prepared(n=32, seed=2)
    outs = []
    for _ in range(2):
        model = build_model(3, 250.0, 120, use_gate=True, seed=5)
        fit(model, data, TrainConfig(epochs=2, batch_size=16, seed=9))
        outs.append(b"".join(p.data.tobytes() for _, p in model.parameters()))
    assert outs[0] == outs[1]


def test_fit_gate_on_trains_gate_parameters():
    data = toy_prepared(n=32, seed=3)
    model = build_model(3, 250.0, 120, use_gate=True, seed=0)
    w_before = model.gate.adjacency_raw.data.copy()
    fit(model, data, TrainConfig(epochs=1, batch_size=16, seed=0))
    assert (model.gate.adjacency_raw.data != w_before).any()


def test_fit_detects_forbidden_subject():
    data = toy_prepared(n=32, seed=4, n_subjects=2)
    model = build_model(3, 250.0, 120, use_gate=False, seed=0)
    with pytest.raises(ContractError):
        fit(model, data, TrainConfig(epochs=1, use_gate=False), forbid_subjects={0})


def test_fit_float32_dtype_runs_and_casts():
    data = toy_prepared(n=32, seed=5)
    model = build_model(3, 250.0, 120, use_gate=True, seed=0)
    fit(model, data, TrainConfig(epochs=1, batch_size=16, dtype="float32"))
    assert model.gate.temporal.data.dtype == np.float32


def test_evaluate_perfect_and_chance():
    data = toy_prepared(n=64, seed=6)
    model = build_model(3, 250.0, 120, use_gate=False, seed=0)
    fit(model, data, TrainConfig(epochs=50, use_gate=False, batch_size=32, seed=0))
    assert evaluate(model, data) >= 0.99

    # constant predictor vs uniform random labels: ~0.25
    rng = np.random.default_rng(7)
    n = 1000
    chance = Prepared(
        rng.normal(size=(n, 3, 40)),
        rng.normal(size=(n, 3, 120)) * 1e-9,
        rng.integers(0, 4, size=n).astype(np.int64),
        np.zeros(n, np.int64),
    )
    fresh = build_model(3, 250.0, 120, use_gate=False, seed=1)
    acc = evaluate(fresh, chance)
    assert abs(acc - 0.25) < 0.05


def test_evaluate_empty_raises():
    model = build_model(3, 250.0, 120, use_gate=False)
    empty = Prepared(np.zeros((0, 3, 40)), np.zeros((0, 3, 120)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    with pytest.raises(DomainError):
        evaluate(model, empty)


# -- LOSO ------------------------------------------------------------------------------------

def test_loso_requires_two_subjects():
    data = toy_prepared(n=16, seed=8, n_subjects=1)
    with pytest.raises(DomainError):
        loso_evaluate(data, TrainConfig(epochs=1, use_gate=False))


def test_loso_two_easy_subjects():
    data = toy_prepared(n=96, seed=9, n_subjects=2, strength=5.0)
    cfg = TrainConfig(epochs=40, use_gate=False, batch_size=24, seed=0)
    metrics = loso_evaluate(data, cfg)
    assert len(metrics.per_subject_accuracy) == 2
    assert all(a >= 0.9 for a in metrics.per_subject_accuracy)


def test_loso_subject_order_invariance():
    data = toy_prepared(n=48, seed=10, n_subjects=2)
    cfg = TrainConfig(epochs=2, use_gate=False, batch_size=16, seed=3)
    a = loso_evaluate(data, cfg)
    # reorder the array so subject 1's block precedes subject 0's while
    # keeping within-subject trial order; the canonical subject-stable sort
    # must make every fold identical
    order = np.concatenate(
        [np.flatnonzero(data.subject_ids == 1), np.flatnonzero(data.subject_ids == 0)]
    )
    b = loso_evaluate(data.subset(order), cfg)
    assert list(a.per_subject_accuracy) == list(b.per_subject_accuracy)
    assert a.avg == b.avg


def test_loso_compare_reports_difference():
    data = toy_prepared(n=48, seed=12, n_subjects=2)
    cfg = TrainConfig(epochs=1, batch_size=16, seed=0)
    report = loso_compare(data, cfg)
    assert report["diff_avg"] == pytest.approx(report["with"].avg - report["without"].avg)
    assert len(report["with"].per_subject_accuracy) == 2
    assert len(report["without"].per_subject_accuracy) == 2


def test_loso_return_models():
    data = toy_prepared(n=48, seed=13, n_subjects=2)
    cfg = TrainConfig(epochs=1, use_gate=True, batch_size=16, seed=0)
    metrics, models = loso_evaluate(data, cfg, return_models=True)
    assert set(models) == {0, 1}
    assert all(m.use_gate for m in models.values())
