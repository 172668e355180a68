"""Experiment configuration: a documented JSON schema plus its hash.

Schema (all sections optional except store_dir/output_root; defaults in
parentheses):

    {
      "store_dir": "path to the imported dataset store",
      "output_root": "experiment output directory",
      "seed": 0,
      "train": {
        "epochs": 1000, "lr": 0.001, "lr_decay_factor": 0.8,
        "lr_decay_every": 100, "early_stop_patience": 200,
        "batch_size": 32, "val_count": 9,
        "stats_scope": "train" | "all", "sigma_mode": "beta" | "beta_tilde"
      },
      "schedule": {"steps": 600, "beta_start": 1e-4, "beta_end": 0.02},
      "unet": {
        "level_channels": [4, 8, 16, 32, 64], "conv_kernel": 3,
        "down_kernel": 4, "attention_heads": 4, "doa_embed_dim": 16,
        "step_embed_dim": 32, "doa_mode": "label" | "continuous",
        "pad_input": true
      },
      "metrics": {
        "band_count": 44, "band_fmax": 15000.0,
        "band_spacing": "linear" | "log", "nfft": 2048,
        "lowpass_hz": 1500.0, "magnitude_floor": 1e-6,
        "figure_subject": null, "figure_azimuth_deg": 0.0,
        "figure_elevation_deg": 0.0
      }
    }

The config hash covers everything that affects results (seed, train,
schedule, unet, metrics) but not the filesystem paths, so moving an
experiment does not orphan its artifacts. The HRIRDIFF_OUT environment
variable overrides output_root.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dataset import SubjectStore
from .errors import ConfigurationError
from .network import UNetConfig
from .training import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_SCHEDULE_STEPS,
    TrainConfig,
)

_UNET_KEYS = {
    "level_channels", "conv_kernel", "down_kernel", "attention_heads",
    "doa_embed_dim", "step_embed_dim", "doa_mode", "pad_input",
}
_METRIC_DEFAULTS = {
    "band_count": 44,
    "band_fmax": 15000.0,
    "band_spacing": "linear",
    "nfft": 2048,
    "lowpass_hz": 1500.0,
    "magnitude_floor": 1e-6,
    "figure_subject": None,
    "figure_azimuth_deg": 0.0,
    "figure_elevation_deg": 0.0,
}


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = DEFAULT_SCHEDULE_STEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if self.steps < 1 or not (0 < self.beta_start <= self.beta_end < 1):
            raise ConfigurationError("invalid schedule parameters")


@dataclass(frozen=True)
class ExperimentConfig:
    store_dir: str
    output_root: str
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet_overrides: tuple = ()
    metrics: tuple = ()

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - {"store_dir", "output_root", "seed", "train", "schedule",
                               "unet", "metrics"}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        for key in ("store_dir", "output_root"):
            if key not in data:
                raise ConfigurationError(f"config is missing {key!r}")

        seed = data.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigurationError("seed must be an integer")

        train_section = dict(data.get("train", {}))
        if "seed" in train_section:
            raise ConfigurationError("set the seed at the top level, not under train")
        try:
            train = TrainConfig(seed=seed, **train_section)
        except TypeError as exc:
            raise ConfigurationError(f"bad train section: {exc}") from exc

        try:
            schedule = ScheduleConfig(**data.get("schedule", {}))
        except TypeError as exc:
            raise ConfigurationError(f"bad schedule section: {exc}") from exc

        unet = dict(data.get("unet", {}))
        if set(unet) - _UNET_KEYS:
            raise ConfigurationError(f"unknown unet options: {sorted(set(unet) - _UNET_KEYS)}")
        if "level_channels" in unet:
            unet["level_channels"] = tuple(unet["level_channels"])

        metrics = {**_METRIC_DEFAULTS, **dict(data.get("metrics", {}))}
        if set(metrics) - set(_METRIC_DEFAULTS):
            raise ConfigurationError(
                f"unknown metric options: {sorted(set(metrics) - set(_METRIC_DEFAULTS))}"
            )
        if metrics["band_spacing"] not in ("linear", "log"):
            raise ConfigurationError("band_spacing must be 'linear' or 'log'")

        store_dir = str(data["store_dir"])
        output_root = os.environ.get("HRIRDIFF_OUT") or str(data["output_root"])
        if base_dir is not None:
            store_dir = str((base_dir / store_dir).resolve())
            output_root = str((Path(output_root) if os.path.isabs(output_root)
                               else base_dir / output_root).resolve())
        return cls(
            store_dir=store_dir, output_root=output_root, seed=seed, train=train,
            schedule=schedule, unet_overrides=tuple(sorted(unet.items())),
            metrics=tuple(sorted(metrics.items())),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    @property
    def metric_options(self) -> dict:
        return dict(self.metrics)

    def unet_config(self, store: SubjectStore) -> UNetConfig:
        return UNetConfig(
            signal_length=store.hrir_length,
            grid_size=store.grid_size,
            **dict(self.unet_overrides),
        )

    def config_hash(self) -> str:
        payload = {
            "seed": self.seed,
            "train": asdict(self.train),
            "schedule": asdict(self.schedule),
            "unet": dict(self.unet_overrides),
            "metrics": dict(self.metrics),
        }
        canon = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))
