"""Summed per-part cross-entropy, the two-group SGD schedule, and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, load_image, platform_id
from .errors import ConfigError, DataError, NumericalError
from .model import LPN, GeoSample, ModelConfig, load_checkpoint, save_checkpoint, to_tensor
from .transforms import random_crop, random_hflip, random_rotation

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "split", "mean_loss", "lr_backbone", "lr_new")


@dataclass
class AugmentConfig:
    random_crop: bool = True
    horizontal_flip: bool = True
    satellite_rotation: bool = True
    crop_padding: int = 10
    rotation_jitter: float = 10.0


@dataclass
class TrainConfig:
    epochs: int = 120
    lr_backbone: float = 0.001
    lr_new: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32  # classes per step; every class brings one view per platform
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 80
    checkpoint_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("lr_backbone", "lr_new", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs and self.lr_decay_epoch >= self.epochs:
            raise ConfigError(f"lr_decay_epoch ({self.lr_decay_epoch}) must be < epochs ({self.epochs})")

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            if f.name == "augment":
                for g in dataclasses.fields(AugmentConfig):
                    d[f"train.augment.{g.name}"] = getattr(self.augment, g.name)
            else:
                d[f"train.{f.name}"] = getattr(self, f.name)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        aug_names = {f.name for f in dataclasses.fields(AugmentConfig)}
        kwargs, aug = {}, {}
        for key, value in values.items():
            if key.startswith("train.augment."):
                name = key[len("train.augment."):]
                if name not in aug_names:
                    raise ConfigError(f"unknown setting {key!r}")
                aug[name] = value
            elif key.startswith("train."):
                name = key[len("train."):]
                if name not in names or name == "augment":
                    raise ConfigError(f"unknown setting {key!r}")
                kwargs[name] = value
        try:
            return cls(augment=AugmentConfig(**aug), **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    """``(backbone_lr, new_layer_lr)`` in effect during 1-based ``epoch``."""
    factor = cfg.lr_decay_factor if epoch > cfg.lr_decay_epoch else 1.0
    return cfg.lr_backbone * factor, cfg.lr_new * factor


# --------------------------------------------------------------------------- losses

def _log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def part_loss(logits, label: int) -> float:
    """``-log softmax(logits)[label]`` for a 1-based label."""
    z = np.asarray(logits, dtype=np.float64)
    if not 1 <= label <= z.shape[-1]:
        raise ValueError(f"label {label} outside [1, {z.shape[-1]}]")
    return float(-_log_softmax(z)[label - 1])


def part_loss_grad(logits, label: int) -> np.ndarray:
    """Gradient of :func:`part_loss` w.r.t. the logits: ``softmax - onehot``."""
    z = np.asarray(logits, dtype=np.float64)
    if not 1 <= label <= z.shape[-1]:
        raise ValueError(f"label {label} outside [1, {z.shape[-1]}]")
    g = np.exp(_log_softmax(z))
    g[label - 1] -= 1.0
    return g


def summed_part_ce(logits: list[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """Sum over parts of the batch-mean cross-entropy; ``labels`` are 0-based."""
    return sum(F.cross_entropy(z, labels) for z in logits)


def batch_loss(samples: list[GeoSample], model: LPN, training=False) -> float:
    """Mean over samples of the per-part summed cross-entropy."""
    if not samples:
        raise ValueError("batch_loss needs at least one sample")
    C = model.cfg.num_classes
    for s in samples:
        if s.label is None or not 1 <= s.label <= C:
            raise ValueError(f"sample label {s.label} outside [1, {C}]")
    model.train(training)
    total = 0.0
    with torch.no_grad():
        by_platform: dict[int, list[GeoSample]] = {}
        for s in samples:
            by_platform.setdefault(s.platform, []).append(s)
        for j, group in by_platform.items():
            x = to_tensor(np.stack([s.image for s in group]))
            y = torch.tensor([s.label - 1 for s in group])
            logits, _ = model(x, j)
            total += sum(F.cross_entropy(z, y, reduction="sum") for z in logits).item()
    model.eval()
    return total / len(samples)


# --------------------------------------------------------------------------- training

@dataclass
class PlatformData:
    images: torch.Tensor  # (N, 3, H, W) uint8
    labels: np.ndarray  # (N,) 1-based

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.by_class = {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}


def platform_data_from_arrays(images, labels) -> PlatformData:
    arr = np.asarray(images)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).contiguous()
    return PlatformData(t, labels)


def platform_data_from_manifest(m: DatasetManifest, size: int) -> PlatformData:
    imgs = np.stack([load_image(p, size, dtype=np.uint8) for p in m.paths])
    return platform_data_from_arrays(imgs, m.labels)


def _check_label_space(data: dict[int, PlatformData], num_classes: int):
    expected = set(range(1, num_classes + 1))
    for j, d in data.items():
        got = set(d.by_class)
        if got != expected:
            missing, extra = sorted(expected - got)[:5], sorted(got - expected)[:5]
            raise DataError(f"platform {j} label space does not match [1, {num_classes}]: "
                            f"missing {missing}, unexpected {extra}")


@dataclass
class TrainResult:
    model: LPN
    log: list[dict]
    checkpoint: Path | None = None


def _make_optimizer(model: LPN, cfg: TrainConfig):
    return torch.optim.SGD(
        [{"params": list(model.backbone_parameters()), "lr": cfg.lr_backbone, "name": "backbone"},
         {"params": list(model.new_parameters()), "lr": cfg.lr_new, "name": "new"}],
        lr=cfg.lr_new, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _augment(x: torch.Tensor, platform: int, aug: AugmentConfig, gen: torch.Generator):
    x = x.float() / 255.0
    if aug.random_crop:
        x = random_crop(x, aug.crop_padding, gen)
    if aug.horizontal_flip:
        x = random_hflip(x, gen)
    if aug.satellite_rotation and platform == 1:
        x = random_rotation(x, gen, aug.rotation_jitter)
    return x


def train(data, train_cfg: TrainConfig, model_cfg: ModelConfig, out_dir=None, seed=0,
          resume=None, progress=None) -> TrainResult:
    """Instance-loss training over platform datasets sharing one label space.

    ``data`` maps platform (id or name) to a :class:`DatasetManifest` or a
    :class:`PlatformData`. Each step samples ``batch_size`` classes and one
    image per platform for each of them; the loss sums the per-part
    cross-entropies of every platform, averaged over the sampled classes.
    With ``out_dir`` the loss log is written to ``loss_log.csv`` and the
    latest state to ``checkpoint.pt`` at every ``checkpoint_every`` epochs.
    """
    from .config import derive_seeds

    seeds = derive_seeds(seed)
    prepared: dict[int, PlatformData] = {}
    for key, value in data.items():
        j = platform_id(key)
        prepared[j] = value if isinstance(value, PlatformData) else platform_data_from_manifest(value, model_cfg.input_size)
    if set(prepared) != set(model_cfg.platforms):
        raise DataError(f"data platforms {sorted(prepared)} differ from model platforms {list(model_cfg.platforms)}")
    _check_label_space(prepared, model_cfg.num_classes)

    data_rng = np.random.default_rng(seeds["data"])
    aug_gen = torch.Generator().manual_seed(seeds["augment"])
    torch.manual_seed(seeds["init"])
    model = LPN(model_cfg)
    optimizer = _make_optimizer(model, train_cfg)
    log: list[dict] = []
    start_epoch = 1

    if resume is not None:
        model, extra = load_checkpoint(resume)
        if model.cfg != model_cfg:
            raise ConfigError(f"checkpoint {resume} was trained with a different model config")
        optimizer = _make_optimizer(model, train_cfg)
        if "optimizer" in extra:
            optimizer.load_state_dict(extra["optimizer"])
        start_epoch = int(extra.get("epoch", 0)) + 1
        log = list(extra.get("log", []))
        if "data_rng" in extra:
            data_rng.bit_generator.state = extra["data_rng"]
        if "aug_rng" in extra:
            aug_gen.set_state(extra["aug_rng"])
        if "torch_rng" in extra:
            torch.set_rng_state(extra["torch_rng"])

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.pt" if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_log(out_dir / "loss_log.csv", log)

    def snapshot(epoch):
        if ckpt_path is None:
            return
        save_checkpoint(ckpt_path, model, {
            "epoch": epoch, "optimizer": optimizer.state_dict(), "log": log, "seed": seed,
            "train_config": train_cfg.to_dict(), "data_rng": data_rng.bit_generator.state,
            "aug_rng": aug_gen.get_state(), "torch_rng": torch.get_rng_state(),
        })

    if start_epoch == 1:
        snapshot(0)

    classes = np.arange(1, model_cfg.num_classes + 1)
    for epoch in range(start_epoch, train_cfg.epochs + 1):
        lr_b, lr_n = lr_at_epoch(train_cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr_b if group["name"] == "backbone" else lr_n
        model.train()
        order = data_rng.permutation(classes)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            batch_classes = order[start:start + train_cfg.batch_size]
            if len(batch_classes) < 2 and len(order) >= 2:
                continue  # BatchNorm needs more than one sample per branch
            y = torch.from_numpy(batch_classes - 1)
            loss = 0.0
            for j in sorted(prepared):
                d = prepared[j]
                idx = [d.by_class[int(c)][data_rng.integers(len(d.by_class[int(c)]))] for c in batch_classes]
                x = _augment(d.images[idx], j, train_cfg.augment, aug_gen)
                logits, _ = model(x, j)
                loss = loss + summed_part_ce(logits, y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}, "
                                     f"classes {batch_classes.tolist()}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch_classes)
            count += len(batch_classes)
        row = {"epoch": epoch, "split": "train", "mean_loss": total / max(count, 1),
               "lr_backbone": lr_b, "lr_new": lr_n}
        log.append(row)
        if progress is not None:
            progress(row)
        logger.info("epoch %d loss %.4f", epoch, row["mean_loss"])
        if out_dir is not None:
            _write_log(out_dir / "loss_log.csv", log)
            if epoch % train_cfg.checkpoint_every == 0 or epoch == train_cfg.epochs:
                snapshot(epoch)

    model.eval()
    return TrainResult(model, log, ckpt_path)


def _write_log(path: Path, log: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
