"""Compact downstream classifier and the gate + classifier integration.

The classifier is a small square -> pool -> log pipeline: temporal
convolution, spatial convolution collapsing electrodes, batch norm,
square activation, average pooling, clamped log, dropout, dense layer.
With ``use_gate`` off it consumes the raw MI window directly, bit-exactly
matching a plain classifier run.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from . import tensor as tt
from .errors import BadMagicError, LengthError, TruncatedFileError
from .gate import GateParams, _fan_in_uniform, gate_block_forward
from .tensor import BatchNormState, Tensor

N_CLASSES = 4
CLF_KERNELS = 8
CLF_TEMPORAL_SIZE = 25
POOL_WINDOW = 75
POOL_STRIDE = 15
CLF_DROPOUT_LAYER = 2

MODEL_MAGIC = b"EEGMODL1"


def pooled_length(t_mi: int) -> int:
    t_conv = t_mi - CLF_TEMPORAL_SIZE + 1
    if t_conv < POOL_WINDOW:
        raise LengthError(f"T_mi={t_mi} too short for conv+pool chain")
    return (t_conv - POOL_WINDOW) // POOL_STRIDE + 1


class ClassifierParams:
    def __init__(self, n_channels: int, t_mi: int, dropout_p: float = 0.25, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_channels = n_channels
        self.t_mi = t_mi
        self.dropout_p = float(dropout_p)
        self.feature_width = CLF_KERNELS * pooled_length(t_mi)
        self.temporal = Tensor(
            _fan_in_uniform(rng, (CLF_KERNELS, 1, 1, CLF_TEMPORAL_SIZE)), requires_grad=True
        )
        self.spatial = Tensor(
            _fan_in_uniform(rng, (CLF_KERNELS, CLF_KERNELS, n_channels, 1)), requires_grad=True
        )
        self.bn = BatchNormState(CLF_KERNELS)
        bound = 1.0 / np.sqrt(self.feature_width)
        self.dense_w = Tensor(
            rng.uniform(-bound, bound, size=(self.feature_width, N_CLASSES)), requires_grad=True
        )
        self.dense_b = Tensor(np.zeros(N_CLASSES), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("clf.temporal", self.temporal),
            ("clf.spatial", self.spatial),
            ("clf.bn.gamma", self.bn.gamma),
            ("clf.bn.beta", self.bn.beta),
            ("clf.dense_w", self.dense_w),
            ("clf.dense_b", self.dense_b),
        ]

    def state_items(self) -> list[tuple[str, Tensor]]:
        return self.parameters() + [
            ("clf.bn.running_mean", Tensor(self.bn.running_mean)),
            ("clf.bn.running_var", Tensor(self.bn.running_var)),
        ]

    def astype(self, dtype) -> "ClassifierParams":
        self.temporal.data = self.temporal.data.astype(dtype, copy=False)
        self.spatial.data = self.spatial.data.astype(dtype, copy=False)
        self.dense_w.data = self.dense_w.data.astype(dtype, copy=False)
        self.dense_b.data = self.dense_b.data.astype(dtype, copy=False)
        self.bn.astype(dtype)
        return self


def _classifier_trunk(x: Tensor, params: ClassifierParams, mode: str) -> Tensor:
    y = tt.conv2d(x, params.temporal, "valid")
    y = tt.conv2d(y, params.spatial, "valid")
    y = tt.batch_norm(y, params.bn, mode)
    y = tt.square(y)
    y = tt.avg_pool(y, POOL_WINDOW, POOL_STRIDE)
    y = tt.log_clamped(y)
    return tt.reshape(y, (x.shape[0], params.feature_width))


def classifier_forward(
    x: Tensor, params: ClassifierParams, mode: str, key: tuple[int, int, int] = (0, 0, 0)
) -> Tensor:
    """Logits for x (B,1,C,T_mi)."""
    feats = _classifier_trunk(tt._lift(x), params, mode)
    feats = tt.dropout(feats, params.dropout_p, mode, (*key, CLF_DROPOUT_LAYER))
    return tt.dense(feats, params.dense_w, params.dense_b)


class IntegratedModel:
    def __init__(self, gate: GateParams, clf: ClassifierParams, use_gate: bool):
        self.gate = gate
        self.clf = clf
        self.use_gate = bool(use_gate)

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = list(self.clf.parameters())
        if self.use_gate:
            named = self.gate.parameters() + named
        return named

    def state_items(self) -> list[tuple[str, Tensor]]:
        return self.gate.state_items() + self.clf.state_items()

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def astype(self, dtype) -> "IntegratedModel":
        self.gate.astype(dtype)
        self.clf.astype(dtype)
        return self


def build_model(
    n_channels: int,
    fs: float,
    t_mi: int,
    use_gate: bool,
    gate_dropout: float = 0.25,
    clf_dropout: float = 0.25,
    seed: int = 0,
) -> IntegratedModel:
    gate = GateParams(n_channels, fs, dropout_p=gate_dropout, seed=seed)
    clf = ClassifierParams(n_channels, t_mi, dropout_p=clf_dropout, seed=seed + 1)
    return IntegratedModel(gate, clf, use_gate)


def integrated_forward(
    rest_raw,
    mi_raw,
    model: IntegratedModel,
    mode: str,
    key: tuple[int, int, int] = (0, 0, 0),
    gate_override: float | None = None,
):
    """Logits; with the gate on, the classifier sees the gated MI window."""
    mi_raw = tt._lift(mi_raw)
    b, c, t = mi_raw.shape
    if model.use_gate:
        if gate_override is None:
            out = gate_block_forward(rest_raw, mi_raw, model.gate, mode, key)
            gated = out.gated_mi
        else:
            up = Tensor(np.full((b, 1, t), float(gate_override), dtype=mi_raw.data.dtype))
            gated = mi_raw * up
        x = gated.reshape(b, 1, c, t)
    else:
        x = mi_raw.reshape(b, 1, c, t)
    return classifier_forward(x, model.clf, mode, key)


def extract_features(model: IntegratedModel, mi_or_gated) -> np.ndarray:
    """Eval-mode penultimate (pre-dense) activations, flattened per trial."""
    x = tt._lift(mi_or_gated)
    b, c, t = x.shape
    return _classifier_trunk(x.reshape(b, 1, c, t), model.clf, "eval").data


def features(model: IntegratedModel, rest_raw, mi_raw) -> np.ndarray:
    """Features of the input the classifier actually sees (gated if use_gate)."""
    if model.use_gate:
        gated = gate_block_forward(rest_raw, mi_raw, model.gate, "eval").gated_mi
        return extract_features(model, gated.data)
    return extract_features(model, mi_raw)


# -- model files ----------------------------------------------------------------

def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]


def save_model(path, model: IntegratedModel, train_config_hash: str = "") -> None:
    named = model.state_items()
    manifest, blob = tt.encode_params(named)
    header = json.dumps(
        {
            "use_gate": model.use_gate,
            "n_channels": model.clf.n_channels,
            "fs": model.gate.fs,
            "t_mi": model.clf.t_mi,
            "gate_dropout": model.gate.dropout_p,
            "clf_dropout": model.clf.dropout_p,
            "config_hash": train_config_hash,
            "params": manifest,
        },
        sort_keys=True,
    ).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)
    os.replace(tmp, path)


def load_model(path) -> IntegratedModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MODEL_MAGIC:
        raise BadMagicError("not a model file")
    if len(raw) < 12:
        raise TruncatedFileError("missing header length")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise TruncatedFileError("truncated model header")
    header = json.loads(raw[12:12 + hlen])
    values = tt.decode_params(header["params"], raw[12 + hlen:])
    model = build_model(
        header["n_channels"],
        header["fs"],
        header["t_mi"],
        header["use_gate"],
        gate_dropout=header["gate_dropout"],
        clf_dropout=header["clf_dropout"],
    )
    lookup = dict(model.gate.parameters() + model.clf.parameters())
    for name, arr in values.items():
        if name in lookup:
            lookup[name].data = arr
        elif name.endswith("running_mean") or name.endswith("running_var"):
            prefix, attr = name.rsplit(".", 1)
            bn = {
                "gate.bn_t": model.gate.bn_t,
                "gate.bn_s": model.gate.bn_s,
                "clf.bn": model.clf.bn,
            }[prefix]
            setattr(bn, attr, arr)
        else:
            raise TruncatedFileError(f"unknown parameter {name!r}")
    return model
