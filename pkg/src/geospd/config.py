"""Run configuration: validated fields, JSON round-trip, and the mapping to
a model configuration given a dataset manifest."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .data import DatasetManifest
from .errors import InvalidInput, IoError
from .model import ModelConfig

QUERY_SOURCES = ("node-spd",)

# Encoder constants (not exposed as run options).
SPATIAL_HIDDEN = 64
TEMPORAL_KERNEL = 31
GRU_HIDDEN = 64
HEAD_DIM = 32
STFT_WINDOW = 32


@dataclass(frozen=True)
class RunConfig:
    """Everything a training/evaluation run needs beyond the dataset itself."""

    dataset: str = ""
    d: int = 20              # encoder output channels / signal SPD dim
    l: int = 8               # attention-space SPD dim
    beta: float = 0.3        # alignment loss weight, 0 disables
    kappa: float = 0.1       # alignment temperature
    tau: float = 1.0         # attention softmax temperature
    tau_top: int = 3         # kept similarities per graph node
    eps: float = 1e-4        # SPD regularization
    reeig_threshold: float = 1e-4
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 150
    seed: int = 0
    meta_optimizer: bool = True
    query_source: str = "node-spd"

    def __post_init__(self):
        if self.d < 1 or self.l < 1 or self.l > self.d:
            raise InvalidInput(f"model dims need 1 <= l <= d, got d={self.d}, l={self.l}")
        if not 0.0 <= self.beta < 1.0:
            raise InvalidInput(f"beta must be in [0, 1), got {self.beta}")
        if self.kappa <= 0 or self.tau <= 0 or self.eps <= 0 or self.reeig_threshold <= 0:
            raise InvalidInput("kappa, tau, eps and reeig-threshold must be positive")
        if self.tau_top < 1:
            raise InvalidInput(f"tau-top must be at least 1, got {self.tau_top}")
        if self.lr < 0:
            raise InvalidInput(f"lr must be nonnegative, got {self.lr}")
        if self.batch_size < 1:
            raise InvalidInput(f"batch-size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidInput(f"epochs must be nonnegative, got {self.epochs}")
        if self.seed < 0:
            raise InvalidInput(f"seed must be nonnegative, got {self.seed}")
        if self.query_source not in QUERY_SOURCES:
            raise InvalidInput(
                f"query-source {self.query_source!r} not in {QUERY_SOURCES}"
            )

    @staticmethod
    def from_dict(values: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(values) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**values)

    @staticmethod
    def from_file(path) -> "RunConfig":
        p = Path(path)
        try:
            raw = p.read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {p}: {exc}") from exc
        try:
            values = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise InvalidInput(f"config {p} must hold a JSON object")
        return RunConfig.from_dict(values)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def override(self, **changes) -> "RunConfig":
        merged = self.to_dict()
        merged.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(merged)

    def model_config(self, manifest: DatasetManifest) -> ModelConfig:
        """Bind the run options to a dataset's shapes. Encoder constants are
        capped by the epoch length so short epochs remain usable."""
        window = min(STFT_WINDOW, manifest.samples_per_epoch)
        return ModelConfig(
            n_channels=manifest.channels,
            n_epochs=manifest.epochs,
            n_samples=manifest.samples_per_epoch,
            num_classes=manifest.num_classes,
            spatial_hidden=SPATIAL_HIDDEN,
            temporal_kernel=min(TEMPORAL_KERNEL, manifest.samples_per_epoch),
            feat_channels=self.d,
            bimap_out=self.l,
            gru_hidden=GRU_HIDDEN,
            head_dim=HEAD_DIM,
            stft_window=window,
            stft_hop=max(1, window // 2),
            tau_top=self.tau_top,
            eps=self.eps,
            reeig_threshold=self.reeig_threshold,
            temperature=self.tau,
            beta=self.beta,
            kappa=self.kappa,
        )
