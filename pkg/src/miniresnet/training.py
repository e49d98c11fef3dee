"""SGD training with a step learning-rate schedule and the two test protocols."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ANGLES, PreparedDataset, denormalize_label, split_kfold
from .errors import ConfigError, ContractError, TrainingDiverged
from .evaluation import PredictionSet
from .model import ModelConfig, Network, build_model, save_weights
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

# Standard deviation of a unit normal truncated at ±2.
_TRUNC_STD = 0.87962566103423978


@dataclass(frozen=True)
class TrainingConfig:
    initial_lr: float = 0.1
    lr_drop_epochs: tuple[int, ...] = (30, 60, 80, 90)
    lr_drop_factor: float = 10.0
    weight_decay: float = 0.0002
    batch_size: int = 256
    epochs: int = 120
    seed: int = 0
    target_angle: str = "yaw"
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if self.initial_lr <= 0 or self.lr_drop_factor <= 0:
            raise ConfigError("initial_lr and lr_drop_factor must be positive")
        if any(b <= a for a, b in zip(self.lr_drop_epochs, self.lr_drop_epochs[1:])):
            raise ConfigError(f"lr_drop_epochs must be strictly increasing, got {list(self.lr_drop_epochs)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalization)")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("epochs and weight_decay must be non-negative")
        if self.target_angle not in ANGLES:
            raise ConfigError(f"target_angle must be one of {ANGLES}, got {self.target_angle!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"lr_drop_epochs": list(self.lr_drop_epochs)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"training config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    def replace(self, **kw) -> "TrainingConfig":
        return dataclasses.replace(self, **kw)


def desk_scale(config: TrainingConfig, epochs: int = 60, reference_epochs: int = 120, batch_size: int = 8) -> TrainingConfig:
    """Shrink epochs and batch size; drop epochs scale by the same ratio."""
    ratio = epochs / reference_epochs
    drops = []
    for e in config.lr_drop_epochs:
        d = max(1, int(round(e * ratio)))
        if drops and d <= drops[-1]:
            d = drops[-1] + 1
        drops.append(d)
    return config.replace(epochs=epochs, lr_drop_epochs=tuple(drops), batch_size=batch_size)


DESK_WIDTH_DIVISOR = 8


def desk_model(config: ModelConfig) -> ModelConfig:
    return config.scaled(DESK_WIDTH_DIVISOR, name=f"{config.name}-desk")


# ---------------------------------------------------------------------------
# Initialization, schedule, update
# ---------------------------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, limit: float = 2.0) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > limit
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > limit
    return z


def init_weights(network: Network, seed: int = 0) -> Network:
    """Variance-scaling init: conv/dense weights ~ truncated normal with variance 2/fan_in.

    Biases and batch-norm betas are zeroed, gammas set to one and running
    statistics reset.
    """
    rng = np.random.default_rng(seed)
    for name, p in network.named_parameters().items():
        if p.decay:
            fan_in = int(np.prod(p.shape[1:]))
            std = np.sqrt(2.0 / fan_in) / _TRUNC_STD
            p.data[...] = truncated_normal(rng, p.shape) * std
        elif name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    for name, b in network.named_buffers().items():
        b[...] = 1.0 if name.endswith("running_var") else 0.0
    return network


def lr_at_epoch(config: TrainingConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``; a drop at E applies from epoch E onward."""
    drops = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.initial_lr / config.lr_drop_factor**drops


def sgd_step(network: Network, lr: float, weight_decay: float, epoch: int = 0, step: int = 0) -> None:
    """In-place ``w <- w - lr * (g + wd * w)``; decay only on conv/dense weights."""
    params = network.parameter_list()
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in {_param_name(network, p)}", epoch, step)
    for p in params:
        if p.decay and weight_decay:
            p.data *= 1.0 - lr * weight_decay
        if p.grad is not None:
            p.data -= lr * p.grad


def _param_name(network: Network, p) -> str:
    for name, q in network.named_parameters().items():
        if q is p:
            return name
    return "?"


def compute_loss(predictions, labels) -> T.Tensor:
    """Mean squared error between normalized predictions and labels."""
    pred = predictions if isinstance(predictions, Tensor) else Tensor(predictions)
    return T.mse_loss(pred, labels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainingRun:
    run_id: str
    network: Network
    config: TrainingConfig
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def epochs_completed(self) -> int:
        return len(self.losses)

    def write_loss_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "lr", "seconds"])
            for i, (l, lr, s) in enumerate(zip(self.losses, self.lrs, self.seconds)):
                w.writerow([i, repr(l), repr(lr), f"{s:.4f}"])
        return path


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a final partial batch is kept only if it has >= 2 samples."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


def train(
    network: Network,
    dataset: PreparedDataset,
    config: TrainingConfig,
    run_id: str = "run0",
    checkpoint_dir=None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainingRun:
    """Train ``network`` in place; it is left in infer mode."""
    if len(dataset) < 2:
        raise ContractError("training needs at least two samples")
    if dataset.target_size != network.config.input_size:
        raise ConfigError(
            f"dataset images are {dataset.target_size}px, model expects {network.config.input_size}px"
        )
    images = dataset.images.astype(network.dtype, copy=False)
    labels = dataset.labels(config.target_angle).astype(network.dtype)
    rng = np.random.default_rng(config.seed)
    run = TrainingRun(run_id, network, config)
    for epoch in range(config.epochs):
        network.set_mode("train")
        lr = lr_at_epoch(config, epoch)
        t0 = time.perf_counter()
        total, seen = 0.0, 0
        for step, idx in enumerate(iterate_minibatches(len(dataset), config.batch_size, rng)):
            network.zero_grad()
            with Tape() as tape:
                out = network.forward(Tensor(images[idx]), "train")
                loss = compute_loss(out, labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                network.set_mode("infer")
                raise TrainingDiverged("non-finite loss", epoch, step, run.losses)
            tape.backward(loss)
            try:
                sgd_step(network, lr, config.weight_decay, epoch, step)
            except TrainingDiverged as exc:
                exc.history = list(run.losses)
                network.set_mode("infer")
                raise
            total += value * len(idx)
            seen += len(idx)
        run.losses.append(total / max(seen, 1))
        run.lrs.append(lr)
        run.seconds.append(time.perf_counter() - t0)
        log.info("%s epoch %d loss %.6f lr %g (%.2fs)", run_id, epoch, run.losses[-1], lr, run.seconds[-1])
        if on_epoch is not None:
            on_epoch(epoch, run.losses[-1])
        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_weights(network, Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.bin")
    network.set_mode("infer")
    return run


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

PROTOCOLS = ("cv5", "train_test_x5")


@dataclass
class ProtocolResult:
    protocol: str
    runs: list[TrainingRun]
    predictions: list[PredictionSet]


def predict_degrees(network: Network, dataset: PreparedDataset) -> np.ndarray:
    return denormalize_label(network.predict(dataset.images).astype(np.float64))


def _job(model_config, train_set, test_set, test_idx, config, run_id, seed, checkpoint_root):
    net = init_weights(build_model(model_config), seed)
    cfg = config.replace(seed=seed)
    ckpt = None if checkpoint_root is None else Path(checkpoint_root) / run_id
    run = train(net, train_set, cfg, run_id=run_id, checkpoint_dir=ckpt)
    preds = PredictionSet(
        predict_degrees(net, test_set),
        test_set.angle_degrees(config.target_angle),
        angle=config.target_angle,
        run_id=run_id,
        indices=test_idx,
    )
    return run, preds


def run_protocol(
    protocol: str,
    datasets: Sequence[PreparedDataset],
    model_config: ModelConfig,
    config: TrainingConfig,
    folds: int = 5,
    repeats: int = 5,
    jobs: int = 1,
    checkpoint_root=None,
) -> ProtocolResult:
    """Run ``cv5`` (k-fold on one dataset) or ``train_test_x5`` (seeded repeats).

    Fold ``i`` and repeat ``i`` use seed ``config.seed + i`` for both weight
    init and shuffling. ``jobs > 1`` runs them on a thread pool.
    """
    if protocol in ("cv", "cv5"):
        protocol = "cv5"
        if len(datasets) != 1:
            raise ConfigError("cv5 takes exactly one dataset")
        ds = datasets[0]
        split = split_kfold(len(ds), folds, config.seed)
        tasks = []
        for i, test_idx in enumerate(split):
            train_idx = np.sort(np.concatenate([f for j, f in enumerate(split) if j != i]))
            tasks.append((model_config, ds.subset(train_idx), ds.subset(test_idx), test_idx, config,
                          f"fold{i}", config.seed + i, checkpoint_root))
    elif protocol in ("cycles", "train_test_x5"):
        protocol = "train_test_x5"
        if len(datasets) != 2:
            raise ConfigError("train_test_x5 takes a training and a test dataset")
        train_set, test_set = datasets
        idx = np.arange(len(test_set))
        tasks = [
            (model_config, train_set, test_set, idx, config, f"cycle{i}", config.seed + i, checkpoint_root)
            for i in range(repeats)
        ]
    else:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda t: _job(*t), tasks))
    else:
        results = [_job(*t) for t in tasks]
    return ProtocolResult(protocol, [r for r, _ in results], [p for _, p in results])
