"""Rest-similarity gating block.

Pipeline: shared temporal convolution + batch norm on both the rest and MI
branches; a learned graph attention over electrodes on the rest branch
only; a shared spatial convolution collapsing the electrode axis; then a
per-time-step gate in [0,1] computed as (1 - cos(center, feature)) / 2,
where the center vector is the time-mean of rest features.  The gate is
linearly resampled to the raw MI length and multiplies every channel.

The adjacency is derived from an unconstrained learnable matrix:
A = softplus((W + W^T)/2) with a zeroed diagonal, so degrees stay positive
and the normalization D^(-1/2) (A + I) D^(-1/2) is always well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .tensor import BatchNormState, Tensor

N_KERNELS = 16
COSINE_EPS = 1e-8

REST_DROPOUT_LAYER = 0
MI_DROPOUT_LAYER = 1


def temporal_kernel_size(fs: float) -> int:
    return int(round(fs / 32.0))


class GateParams:
    """Learnable state of the gating block for C electrodes at rate fs."""

    def __init__(self, n_channels: int, fs: float, dropout_p: float = 0.25, seed: int = 0):
        kt = temporal_kernel_size(fs)
        rng = np.random.default_rng(seed)
        self.n_channels = n_channels
        self.fs = float(fs)
        self.kernel_size = kt
        self.dropout_p = float(dropout_p)
        self.temporal = Tensor(_fan_in_uniform(rng, (N_KERNELS, 1, 1, kt)), requires_grad=True)
        self.bn_t = BatchNormState(N_KERNELS)
        self.spatial = Tensor(
            _fan_in_uniform(rng, (N_KERNELS, N_KERNELS, n_channels, 1)), requires_grad=True
        )
        self.bn_s = BatchNormState(N_KERNELS)
        # zeros => softplus(0) everywhere off-diagonal: a near-uniform initial graph
        self.adjacency_raw = Tensor(np.zeros((n_channels, n_channels)), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("gate.temporal", self.temporal),
            ("gate.bn_t.gamma", self.bn_t.gamma),
            ("gate.bn_t.beta", self.bn_t.beta),
            ("gate.spatial", self.spatial),
            ("gate.bn_s.gamma", self.bn_s.gamma),
            ("gate.bn_s.beta", self.bn_s.beta),
            ("gate.adjacency_raw", self.adjacency_raw),
        ]

    def state_items(self) -> list[tuple[str, Tensor]]:
        return self.parameters() + [
            ("gate.bn_t.running_mean", Tensor(self.bn_t.running_mean)),
            ("gate.bn_t.running_var", Tensor(self.bn_t.running_var)),
            ("gate.bn_s.running_mean", Tensor(self.bn_s.running_mean)),
            ("gate.bn_s.running_var", Tensor(self.bn_s.running_var)),
        ]

    def astype(self, dtype) -> "GateParams":
        self.temporal.data = self.temporal.data.astype(dtype, copy=False)
        self.spatial.data = self.spatial.data.astype(dtype, copy=False)
        self.adjacency_raw.data = self.adjacency_raw.data.astype(dtype, copy=False)
        self.bn_t.astype(dtype)
        self.bn_s.astype(dtype)
        return self


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def temporal_block(x: Tensor, params: GateParams, mode: str) -> Tensor:
    """Valid 1 x k_t convolution shared across channels, then batch norm."""
    return tt.batch_norm(tt.conv2d(x, params.temporal, "valid"), params.bn_t, mode)


def attention_matrix(w: Tensor) -> Tensor:
    """Nonnegative symmetric adjacency with zero diagonal from raw weights."""
    c = w.shape[0]
    sym = (w + tt.transpose(w)) * 0.5
    return tt.softplus(sym) * Tensor(1.0 - np.eye(c, dtype=w.data.dtype))


def normalized_attention(a: Tensor) -> Tensor:
    """S = sigmoid(D^(-1/2) (A + I) D^(-1/2)) for nonnegative symmetric A."""
    c = a.shape[0]
    a_tilde = a + Tensor(np.eye(c, dtype=a.data.dtype))
    dinv = tt.power(tt.reduce_sum(a_tilde, axes=(1,)), -0.5)
    m = a_tilde * tt.reshape(dinv, (c, 1)) * tt.reshape(dinv, (1, c))
    return tt.sigmoid(m)


def graph_attention(w: Tensor, x_rest: Tensor) -> Tensor:
    """Mix electrodes of rest features with the learned attention matrix."""
    return tt.node_mix(normalized_attention(attention_matrix(w)), x_rest)


def spatial_block(
    x: Tensor, params: GateParams, mode: str, key: tuple[int, int, int] = (0, 0, 0), layer: int = 0
) -> Tensor:
    """C x 1 convolution collapsing electrodes, batch norm, ELU, dropout."""
    if x.shape[2] != params.n_channels:
        raise DimensionError(f"expected height {params.n_channels}, got {x.shape[2]}")
    y = tt.batch_norm(tt.conv2d(x, params.spatial, "valid"), params.bn_s, mode)
    return tt.dropout(tt.elu(y), params.dropout_p, mode, (*key, layer))


def _similarity(rest_feats: Tensor, mi_feats: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if rest_feats.shape[1] != mi_feats.shape[1]:
        raise DimensionError("feature dimensions of rest and MI branches differ")
    b, d, _, m = mi_feats.shape
    center = tt.reduce_mean(rest_feats, axes=(2, 3))  # (B, D)
    mi = tt.reshape(mi_feats, (b, d, m))
    dots = tt.reduce_sum(center.reshape(b, d, 1) * mi, axes=(1,))  # (B, M)
    cn = tt.clamp_min(tt.sqrt(tt.reduce_sum(center * center, axes=(1,))), COSINE_EPS)
    mn = tt.clamp_min(tt.sqrt(tt.reduce_sum(mi * mi, axes=(1,))), COSINE_EPS)
    cos = tt.clip(dots / (cn.reshape(b, 1) * mn), -1.0, 1.0)
    gate = (1.0 - cos) * 0.5
    return gate, cos, center


def similarity_gate(rest_feats: Tensor, mi_feats: Tensor) -> Tensor:
    """Per-MI-time-step gate: negative cosine to the rest center mapped onto [0,1]."""
    return _similarity(rest_feats, mi_feats)[0]


def apply_gate(raw_mi: Tensor, gate: Tensor) -> Tensor:
    """Resample the gate to the raw MI length and multiply all channels."""
    raw_mi = tt._lift(raw_mi)
    gate = tt._lift(gate)
    if gate.data.min() < 0.0 or gate.data.max() > 1.0:
        raise ContractError("gate values outside [0,1]")
    b, _, t = raw_mi.shape
    up = tt.linear_resample(gate, t)
    return raw_mi * up.reshape(b, 1, t)


@dataclass
class GateOutput:
    gate: Tensor            # (B, M) in [0,1]
    upsampled_gate: Tensor  # (B, T_mi)
    gated_mi: Tensor        # (B, C, T_mi)
    center: Tensor          # (B, D)
    cosine: np.ndarray      # (B, M) diagnostics


def gate_block_forward(
    rest_raw,
    mi_raw,
    params: GateParams,
    mode: str,
    key: tuple[int, int, int] = (0, 0, 0),
) -> GateOutput:
    rest_raw = tt._lift(rest_raw)
    mi_raw = tt._lift(mi_raw)
    b, c, t_rest = rest_raw.shape
    _, _, t_mi = mi_raw.shape
    rest_x = rest_raw.reshape(b, 1, c, t_rest)
    mi_x = mi_raw.reshape(b, 1, c, t_mi)

    rest_t = temporal_block(rest_x, params, mode)
    rest_t = graph_attention(params.adjacency_raw, rest_t)
    rest_f = spatial_block(rest_t, params, mode, key, REST_DROPOUT_LAYER)

    mi_t = temporal_block(mi_x, params, mode)
    mi_f = spatial_block(mi_t, params, mode, key, MI_DROPOUT_LAYER)

    gate, cos, center = _similarity(rest_f, mi_f)
    up = tt.linear_resample(gate, t_mi)
    gated = mi_raw * up.reshape(b, 1, t_mi)
    return GateOutput(gate=gate, upsampled_gate=up, gated_mi=gated, center=center, cosine=cos.data)
