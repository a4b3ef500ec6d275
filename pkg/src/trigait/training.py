"""End-to-end training loop: P x K x T batches through the three branches,
combined loss, stepped learning-rate schedule, JSONL metrics log, and
atomically written checkpoints that resume bit-exactly."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .dataset import DatasetIndex, SequenceStore, load_dataset, sample_batch
from .errors import CheckpointError, ConfigError, DataError
from .network import VARIANTS, GaitRecognizer, ModelConfig

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    data_root: str = ""
    out_dir: str = ""
    variant: str = "full"
    P: int = 8
    K: int = 2
    T: int = 10
    epochs: int = 200
    steps_per_epoch: int = 1
    base_lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (100, 160)
    lr_gamma: float = 0.1
    weight_decay: float = 5e-4
    alpha: float = 1.0
    beta: float = 0.1
    k_neighbors: int = 7
    view_angle_deg: float = 0.0
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be at least 1")
        if self.P < 2 or self.K < 2:
            raise ConfigError("P and K must both be at least 2 (triplet structure)")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if any(m2 <= m1 for m1, m2 in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ConfigError("lr_milestones must be strictly increasing")
        if any(not 0 <= m < self.epochs for m in self.lr_milestones):
            raise ConfigError("lr_milestones must lie in [0, epochs)")
        if self.base_lr <= 0 or self.lr_gamma <= 0:
            raise ConfigError("base_lr and lr_gamma must be positive")
        if self.weight_decay < 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError("weight_decay, alpha and beta must be non-negative")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError("train config must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, path: str | Path) -> "TrainConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        return cls.from_dict(data or {})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule: base_lr * gamma^(milestones passed)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    passed = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.base_lr * config.lr_gamma**passed


def reference_schedule_config(**overrides) -> TrainConfig:
    """The reference full-scale schedule: 1200 epochs, LR 1e-3 cut 10x at
    epochs 200 and 600, batch 32 x 4 x 30."""
    base = dict(P=32, K=4, T=30, epochs=1200, base_lr=1e-3, lr_milestones=(200, 600), lr_gamma=0.1)
    base.update(overrides)
    return TrainConfig(**base)


def _atomic_torch_save(payload: dict, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, model: GaitRecognizer, optimizer, epoch: int, step: int,
                    config: TrainConfig, sampler_rng: np.random.Generator) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "global_step": step,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "train_config": config.to_dict(),
        "model_config": model.config.to_dict(),
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": sampler_rng.bit_generator.state,
    }
    _atomic_torch_save(payload, Path(path))


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    return payload


def model_from_checkpoint(payload: dict) -> GaitRecognizer:
    model = GaitRecognizer(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


class Trainer:
    """Owns the model, optimizer, sampler RNG, and the run directory."""

    def __init__(self, config: TrainConfig, index: DatasetIndex | None = None, log=None):
        self.config = config
        self.log = log if log is not None else (lambda msg: None)
        self.index = index if index is not None else load_dataset(config.data_root)
        self._check_projections()
        self.store = SequenceStore(self.index)
        self.train_ids = self.index.identities("train")
        if len(self.train_ids) < config.P:
            raise DataError(f"train split has {len(self.train_ids)} identities; config asks for P={config.P}")

        torch.manual_seed(config.seed)
        model_config = ModelConfig(
            variant=config.variant,
            num_ids=len(self.train_ids),
            k_neighbors=config.k_neighbors,
        )
        self.model = GaitRecognizer(model_config)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay
        )
        self.sampler_rng = np.random.default_rng(config.seed)
        self.start_epoch = 0
        self.global_step = 0
        self.out_dir = Path(config.out_dir) if config.out_dir else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def _check_projections(self):
        view = self.config.view_angle_deg
        if self.index.projection_view_deg is None:
            raise DataError(
                "dataset has no precomputed projections; run "
                f"`trigait project --data {self.index.root} --view {view}` first"
            )
        if self.index.projection_view_deg != view:
            raise DataError(
                f"projections were rendered at {self.index.projection_view_deg} deg but the config "
                f"asks for {view} deg; re-run `trigait project --data {self.index.root} --view {view}`"
            )

    def restore(self, checkpoint_path: str | Path) -> None:
        payload = load_checkpoint(checkpoint_path)
        if payload["train_config"] != self.config.to_dict():
            raise CheckpointError("checkpoint was written with a different train config")
        self.model.load_state_dict(payload["model_state"])
        self.optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng"])
        self.sampler_rng.bit_generator.state = payload["numpy_rng"]
        self.start_epoch = payload["epoch"] + 1
        self.global_step = payload["global_step"]

    def _step(self, lr: float) -> dict:
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batch = sample_batch(self.index, self.config.P, self.config.K, self.config.T, self.sampler_rng, self.store)
        tensors = (
            torch.from_numpy(batch.silhouettes),
            torch.from_numpy(batch.projections),
            torch.from_numpy(batch.poses),
            torch.from_numpy(batch.labels),
        )
        self.model.train()
        self.optimizer.zero_grad()
        bundle = self.model.training_loss(tensors, self.config.alpha, self.config.beta)
        bundle.total.backward()
        self.optimizer.step()
        self.global_step += 1
        return {
            "step": self.global_step,
            "lr": lr,
            "triplet": bundle.triplet.item(),
            "ce": bundle.ce.item(),
            "total": bundle.total.item(),
        }

    def train(self, resume_from: str | Path | None = None, on_step=None) -> Path | None:
        if resume_from is not None:
            self.restore(resume_from)
        metrics_fh = None
        if self.out_dir is not None:
            metrics_fh = open(self.out_dir / "metrics.jsonl", "a")
        try:
            for epoch in range(self.start_epoch, self.config.epochs):
                lr = lr_at(epoch, self.config)
                for _ in range(self.config.steps_per_epoch):
                    record = self._step(lr)
                    record["epoch"] = epoch
                    if metrics_fh is not None:
                        metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                        metrics_fh.flush()
                    if on_step is not None:
                        on_step(record)
                if self.out_dir is not None and (
                    (epoch + 1) % self.config.checkpoint_every == 0 or epoch + 1 == self.config.epochs
                ):
                    self.checkpoint(epoch)
            if self.out_dir is not None:
                final = self.out_dir / "checkpoint_final.pt"
                save_checkpoint(final, self.model, self.optimizer, self.config.epochs - 1,
                                self.global_step, self.config, self.sampler_rng)
                return final
            return None
        finally:
            if metrics_fh is not None:
                metrics_fh.close()

    def checkpoint(self, epoch: int) -> Path:
        path = self.out_dir / f"checkpoint_{epoch + 1:05d}.pt"
        save_checkpoint(path, self.model, self.optimizer, epoch, self.global_step, self.config, self.sampler_rng)
        return path
