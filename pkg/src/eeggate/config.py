"""Merged run configuration: file values override defaults, flags override both."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RunConfig:
    # synthetic data
    n_subjects: int = 9
    trials_per_class: int = 72
    n_channels: int = 22
    fs: float = 250.0
    trial_seconds: float = 6.0
    erd_depth: float = 0.5
    noise_level: float = 0.85
    rhythm_amp: float = 2.0
    subject_scale: float = 0.03
    # preprocessing
    filter_order: int = 4
    band_lo: float = 0.5
    band_hi: float = 38.0
    ems_alpha: float = 1e-3
    ems_eps: float = 1e-4
    # training
    batch_size: int = 64
    lr: float = 0.002
    weight_decay: float = 0.075
    epochs: int = 300
    eta_min: float = 0.0
    gate_dropout: float = 0.25
    clf_dropout: float = 0.25
    # t-SNE
    perplexity: float = 30.0
    tsne_iters: int = 1000
    # general
    seed: int = 0

    @staticmethod
    def field_docs() -> dict[str, str]:
        return {f.name: f"config key (default {f.default})" for f in dataclasses.fields(RunConfig)}

    @staticmethod
    def from_sources(config_path: str | None, overrides: dict) -> "RunConfig":
        values: dict = {}
        known = {f.name: f.type for f in dataclasses.fields(RunConfig)}
        if config_path is not None:
            try:
                with open(config_path) as fh:
                    file_values = json.load(fh)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            if not isinstance(file_values, dict):
                raise ConfigError("config file must hold a JSON object")
            unknown = sorted(set(file_values) - set(known))
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
            values.update(file_values)
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
        return RunConfig(**values)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)
