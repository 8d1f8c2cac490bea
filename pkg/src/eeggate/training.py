"""AdamW with cosine annealing, the training loop, and the LOSO harness."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import dsp, models
from . import tensor as tt
from .data import TrialSet
from .errors import ContractError, DimensionError, DomainError, NumericError
from .models import IntegratedModel, build_model, integrated_forward
from .tensor import Tensor


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.002
    weight_decay: float = 0.075
    epochs: int = 300
    eta_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    use_gate: bool = True
    gate_dropout: float = 0.25
    clf_dropout: float = 0.25
    # compute dtype for the training loop; float32 roughly halves memory
    # traffic on long runs, float64 is the default everywhere else
    dtype: str = "float64"


@dataclass
class Prepared:
    """Filtered, standardized, segmented trials ready for batching."""

    rest: np.ndarray        # (N, C, T_rest) float64
    mi: np.ndarray          # (N, C, T_mi) float64
    labels: np.ndarray      # (N,) int64
    subject_ids: np.ndarray  # (N,) int64

    def subset(self, idx) -> "Prepared":
        return Prepared(self.rest[idx], self.mi[idx], self.labels[idx], self.subject_ids[idx])

    def __len__(self) -> int:
        return len(self.labels)


def prepare(ts: TrialSet, cfg: dsp.PreprocConfig = dsp.PreprocConfig()) -> Prepared:
    rest, mi = dsp.preprocess_trials(ts.trials, ts.fs, cfg)
    return Prepared(rest, mi, ts.labels.copy(), ts.subject_ids.copy())


# -- optimizer ----------------------------------------------------------------

class AdamWState:
    def __init__(self, params: list[Tensor], weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamWState,
    t: int,
    lr_t: float,
) -> None:
    """Decoupled weight decay Adam update, in place. ``t`` starts at 1."""
    if t < 1:
        raise DomainError("step index starts at 1")
    b1, b2 = state.betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} vs param {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        # decay decoupled from the gradient, applied to the pre-update value
        p.data -= lr_t * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)


def cosine_lr(t: int, t_max: int, lr_max: float, eta_min: float = 0.0) -> float:
    if t > t_max:
        return eta_min
    return eta_min + (lr_max - eta_min) * (1.0 + math.cos(math.pi * t / t_max)) / 2.0


# -- fit / evaluate --------------------------------------------------------------

def fit(
    model: IntegratedModel,
    train_set: Prepared,
    config: TrainConfig,
    forbid_subjects: set[int] | frozenset[int] = frozenset(),
) -> list[float]:
    """Train in place; returns per-step loss history."""
    n = len(train_set)
    if n == 0:
        raise DomainError("empty training set")
    if train_set.labels.min() < 0 or train_set.labels.max() >= models.N_CLASSES:
        raise DomainError("labels outside [0,4)")
    dtype = np.dtype(config.dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DomainError(f"unsupported compute dtype {config.dtype!r}")
    model.astype(dtype)
    rest_all = train_set.rest.astype(dtype, copy=False)
    mi_all = train_set.mi.astype(dtype, copy=False)
    named = model.parameters()
    params = [t for _, t in named]
    state = AdamWState(params, config.weight_decay, (config.beta1, config.beta2), config.adam_eps)
    rng = np.random.default_rng([config.seed, 0x5EED])
    history: list[float] = []
    forbidden = np.array(sorted(forbid_subjects), dtype=np.int64)
    step = 0
    for epoch in range(config.epochs):
        lr_t = cosine_lr(epoch, config.epochs, config.lr, config.eta_min)
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            if forbidden.size and np.isin(train_set.subject_ids[idx], forbidden).any():
                raise ContractError("held-out subject leaked into a training batch")
            tt.zero_grads(params)
            logits = integrated_forward(
                rest_all[idx],
                mi_all[idx],
                model,
                "train",
                key=(config.seed, epoch, bi),
            )
            loss = tt.softmax_cross_entropy(logits, train_set.labels[idx])
            val = loss.item()
            if not math.isfinite(val):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            step += 1
            adamw_step(params, [p.grad for p in params], state, step, lr_t)
            history.append(val)
    return history


def evaluate(model: IntegratedModel, test_set: Prepared, batch_size: int = 64) -> float:
    """Accuracy; argmax ties break toward the lowest class index."""
    n = len(test_set)
    if n == 0:
        raise DomainError("empty test set")
    correct = 0
    for start in range(0, n, batch_size):
        idx = slice(start, min(start + batch_size, n))
        logits = integrated_forward(test_set.rest[idx], test_set.mi[idx], model, "eval")
        correct += int((np.argmax(logits.data, axis=1) == test_set.labels[idx]).sum())
    return correct / n


@dataclass
class Metrics:
    per_subject_accuracy: list[float]
    avg: float  # percent
    std: float  # percent, population std across subjects

    @staticmethod
    def from_accuracies(accs) -> "Metrics":
        accs = [float(a) for a in accs]
        arr = np.asarray(accs)
        return Metrics(accs, float(arr.mean() * 100.0), float(arr.std() * 100.0))


# -- LOSO harness ----------------------------------------------------------------

def _canonical_order(subject_ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Train indices sorted by subject id (stable), so subject-block order
    in the container does not affect batching."""
    idx = np.nonzero(mask)[0]
    return idx[np.argsort(subject_ids[idx], kind="stable")]


def _fold_seed(seed: int, subject: int) -> int:
    return (seed * 1_000_003 + subject * 7919 + 17) % (2**31)


def _run_fold(prepared: Prepared, subject: int, config: TrainConfig):
    test_mask = prepared.subject_ids == subject
    train_idx = _canonical_order(prepared.subject_ids, ~test_mask)
    train_set = prepared.subset(train_idx)
    test_set = prepared.subset(np.nonzero(test_mask)[0])
    fold_cfg = replace(config, seed=_fold_seed(config.seed, subject))
    n_ch, t_mi = prepared.mi.shape[1], prepared.mi.shape[2]
    fs = prepared.rest.shape[2] / dsp.REST_SECONDS
    model = build_model(
        n_ch, fs, t_mi, config.use_gate,
        gate_dropout=config.gate_dropout, clf_dropout=config.clf_dropout,
        seed=fold_cfg.seed,
    )
    fit(model, train_set, fold_cfg, forbid_subjects={int(subject)})
    acc = evaluate(model, test_set)
    return acc, model


def _run_fold_star(args):
    acc, _ = _run_fold(*args)
    return acc


def loso_evaluate(
    dataset: TrialSet | Prepared,
    config: TrainConfig,
    jobs: int = 1,
    return_models: bool = False,
):
    """Leave-one-subject-out: train on all other subjects, test on each in turn."""
    prepared = dataset if isinstance(dataset, Prepared) else prepare(dataset)
    subjects = sorted(int(s) for s in np.unique(prepared.subject_ids))
    if len(subjects) < 2:
        raise DomainError("LOSO needs at least 2 subjects")
    fold_models: dict[int, IntegratedModel] = {}
    accs = []
    if jobs > 1 and not return_models:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_run_fold_star, [(prepared, s, config) for s in subjects]))
    else:
        for s in subjects:
            acc, model = _run_fold(prepared, s, config)
            accs.append(acc)
            fold_models[s] = model
    metrics = Metrics.from_accuracies(accs)
    if return_models:
        return metrics, fold_models
    return metrics


def loso_compare(dataset: TrialSet | Prepared, config: TrainConfig, jobs: int = 1):
    """Run LOSO with and without the gate under identical seeds."""
    prepared = dataset if isinstance(dataset, Prepared) else prepare(dataset)
    with_gate = loso_evaluate(prepared, replace(config, use_gate=True), jobs=jobs)
    without_gate = loso_evaluate(prepared, replace(config, use_gate=False), jobs=jobs)
    return {
        "with": with_gate,
        "without": without_gate,
        "diff_avg": with_gate.avg - without_gate.avg,
        "diff_std": with_gate.std - without_gate.std,
    }
