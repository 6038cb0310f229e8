"""Multi-branch part-based embedding network.

Parameter names in ``state_dict`` (and therefore in checkpoints) are::

    backbones.<branch>.<block>.<layer>.<param>
    classifiers.part<i>.fc.{weight,bias}
    classifiers.part<i>.bn.{weight,bias,running_mean,running_var,num_batches_tracked}
    classifiers.part<i>.cls.{weight,bias}

``<branch>`` is ``aerial`` and ``ground`` when aerial weights are shared,
otherwise ``satellite``, ``drone`` and ``ground``; only branches for the
configured platforms exist. Tiny blocks are ``block1..block4`` each holding
``conv``, ``bn``; the reference backbone uses torchvision ResNet-50 names
(``conv1``, ``bn1``, ``layer1`` ... ``layer4``).
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import format_config, parse_config
from .data import PLATFORMS, platform_id
from .errors import ConfigError
from .partition import PartitionSpec, Strategy, build_assignment

__all__ = [
    "ModelConfig",
    "GeoSample",
    "LPN",
    "TinyBackbone",
    "reference50_backbone",
    "ClassBlock",
    "PartPooling",
    "extract_features",
    "classify_part",
    "embed",
    "embed_images",
    "to_tensor",
    "save_checkpoint",
    "load_checkpoint",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
BACKBONES = ("tiny", "reference50")
BACKBONE_STRIDE = 16  # both backbones


@dataclass
class ModelConfig:
    num_classes: int
    backbone: str = "tiny"
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(Strategy.SQUARE_RING, 4))
    # applied to the ground branch; defaults to rows with the same part count
    ground_partition: PartitionSpec | None = None
    bottleneck_dim: int = 512
    dropout_rate: float = 0.5
    share_aerial_weights: bool = True
    platforms: tuple[int, ...] = (1, 2)
    input_size: int = 256
    tiny_channels: tuple[int, ...] = (8, 16, 32, 64)

    def __post_init__(self):
        self.backbone = str(self.backbone).lower()
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if not isinstance(self.partition, PartitionSpec):
            self.partition = PartitionSpec(*self.partition)
        if self.ground_partition is None:
            self.ground_partition = PartitionSpec(Strategy.ROW, self.partition.n)
        elif not isinstance(self.ground_partition, PartitionSpec):
            self.ground_partition = PartitionSpec(*self.ground_partition)
        if self.ground_partition.n != self.partition.n:
            raise ConfigError("aerial and ground partitions must use the same part count "
                              "because classifiers are shared per part index")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.bottleneck_dim < 1:
            raise ConfigError("bottleneck_dim must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        plats = self.platforms if isinstance(self.platforms, (tuple, list)) else (self.platforms,)
        self.platforms = tuple(sorted({platform_id(p) for p in plats}))
        self.tiny_channels = tuple(int(c) for c in self.tiny_channels)
        if len(self.tiny_channels) != 4:
            raise ConfigError("tiny_channels needs four entries, one per block")
        if self.input_size < BACKBONE_STRIDE or self.input_size % BACKBONE_STRIDE:
            raise ConfigError(f"input_size must be a positive multiple of {BACKBONE_STRIDE}")
        side = self.input_size // BACKBONE_STRIDE
        for spec in (self.partition, self.ground_partition):
            try:
                spec.validate(side, side)
            except ValueError as exc:
                raise ConfigError(f"input_size {self.input_size}: {exc}") from None

    @property
    def n_parts(self) -> int:
        return self.partition.n

    @property
    def descriptor_dim(self) -> int:
        return self.n_parts * self.bottleneck_dim

    def branch_of(self, platform) -> str:
        j = platform_id(platform)
        if j not in self.platforms:
            raise ValueError(f"platform {j} ({PLATFORMS[j]}) has no branch; model platforms: {self.platforms}")
        if j in (1, 2) and self.share_aerial_weights:
            return "aerial"
        return PLATFORMS[j]

    def partition_for(self, platform) -> PartitionSpec:
        return self.ground_partition if platform_id(platform) == 3 else self.partition

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, PartitionSpec):
                d[f"model.{f.name}.strategy"] = value.strategy.value
                d[f"model.{f.name}.n"] = value.n
            else:
                d[f"model.{f.name}"] = value
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in values.items():
            if not key.startswith("model."):
                continue
            parts = key.split(".")
            name = parts[1]
            if name not in names:
                raise ConfigError(f"unknown model setting {key!r}")
            if len(parts) == 3:
                kwargs.setdefault(name, {})[parts[2]] = value
            else:
                kwargs[name] = value
        for name in ("partition", "ground_partition"):
            if isinstance(kwargs.get(name), dict):
                spec = kwargs[name]
                kwargs[name] = PartitionSpec(spec.get("strategy", "square_ring"), int(spec.get("n", 4)))
        if "platforms" in kwargs and not isinstance(kwargs["platforms"], tuple):
            kwargs["platforms"] = (kwargs["platforms"],)
        if "num_classes" not in kwargs:
            raise ConfigError("model.num_classes is required")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class GeoSample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    platform: int
    label: int | None = None

    def __post_init__(self):
        self.platform = platform_id(self.platform)
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError("image contains non-finite values")


class _ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(2)


class TinyBackbone(nn.Sequential):
    """Four (conv3x3, BN, ReLU, 2x max-pool) blocks: 256x256x3 -> 16x16xC."""

    stride = BACKBONE_STRIDE

    def __init__(self, channels=(8, 16, 32, 64)):
        super().__init__()
        c_in = 3
        for k, c in enumerate(channels, start=1):
            self.add_module(f"block{k}", _ConvBlock(c_in, c))
            c_in = c
        self.out_channels = c_in
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")


def reference50_backbone() -> nn.Sequential:
    """ResNet-50 trunk with the conv5_1 stride set to 1 (output stride 16, 2048 channels)."""
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.layer4[0].conv2.stride = (1, 1)
    net.layer4[0].downsample[0].stride = (1, 1)
    trunk = nn.Sequential()
    for name in ("conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"):
        trunk.add_module(name, getattr(net, name))
    trunk.out_channels = 2048
    trunk.stride = BACKBONE_STRIDE
    return trunk


class ClassBlock(nn.Module):
    """FC -> BN -> Dropout -> Cls. ``forward`` returns ``(logits, bottleneck)``."""

    def __init__(self, in_dim, bottleneck_dim, num_classes, dropout_rate=0.5):
        super().__init__()
        self.fc = nn.Linear(in_dim, bottleneck_dim)
        self.bn = nn.BatchNorm1d(bottleneck_dim)
        self.dropout = nn.Dropout(dropout_rate)
        self.cls = nn.Linear(bottleneck_dim, num_classes)
        nn.init.kaiming_normal_(self.fc.weight, a=0, mode="fan_out")
        nn.init.zeros_(self.fc.bias)
        nn.init.ones_(self.bn.weight)
        nn.init.zeros_(self.bn.bias)
        # small logits at init keep the starting loss near ln(C) per part
        nn.init.normal_(self.cls.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)

    def forward(self, x):
        b = self.bn(self.fc(x))
        return self.cls(self.dropout(b)), b


class PartPooling(nn.Module):
    """Average pooling over the cells of each part; ``(N, C, H, W) -> (N, n, C)``."""

    def __init__(self, spec: PartitionSpec):
        super().__init__()
        self.spec = spec
        self._weights: dict[tuple[int, int], torch.Tensor] = {}

    def weights(self, H, W, dtype=torch.float32):
        key = (H, W)
        if key not in self._weights:
            a = build_assignment(self.spec, H, W)
            m = a.one_hot() / a.counts[None, :]
            self._weights[key] = torch.from_numpy(m)
        return self._weights[key].to(dtype)

    def forward(self, f):
        N, C, H, W = f.shape
        return torch.einsum("ncp,pk->nkc", f.reshape(N, C, H * W), self.weights(H, W, f.dtype))


class LPN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbones = nn.ModuleDict()
        for j in cfg.platforms:
            branch = cfg.branch_of(j)
            if branch not in self.backbones:
                self.backbones[branch] = self._make_backbone()
        feat_dim = next(iter(self.backbones.values())).out_channels
        self.classifiers = nn.ModuleDict({
            f"part{i}": ClassBlock(feat_dim, cfg.bottleneck_dim, cfg.num_classes, cfg.dropout_rate)
            for i in range(1, cfg.n_parts + 1)
        })
        self.pools = {branch: PartPooling(cfg.partition_for(j)) for j in cfg.platforms
                      for branch in [cfg.branch_of(j)]}
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def _make_backbone(self):
        if self.cfg.backbone == "tiny":
            return TinyBackbone(self.cfg.tiny_channels)
        return reference50_backbone()

    def backbone_parameters(self):
        return self.backbones.parameters()

    def new_parameters(self):
        return self.classifiers.parameters()

    def check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images shaped (N, 3, H, W), got {tuple(x.shape)}")
        stride = next(iter(self.backbones.values())).stride
        H, W = x.shape[-2:]
        if H % stride or W % stride:
            raise ValueError(f"image size {H}x{W} is incompatible with the {self.cfg.backbone} "
                             f"backbone (sides must be multiples of {stride})")

    def feature_map(self, x: torch.Tensor, platform) -> torch.Tensor:
        """Backbone output ``(N, C, H', W')`` for images in ``[0, 1]``."""
        self.check_input(x)
        branch = self.cfg.branch_of(platform)
        return self.backbones[branch]((x - self.pixel_mean) / self.pixel_std)

    def pool(self, f: torch.Tensor, platform) -> torch.Tensor:
        return self.pools[self.cfg.branch_of(platform)](f)

    def heads(self, parts: torch.Tensor):
        """Per-part classifiers on ``(N, n, C)`` part features."""
        logits, bottlenecks = [], []
        for i in range(self.cfg.n_parts):
            z, b = self.classifiers[f"part{i + 1}"](parts[:, i])
            logits.append(z)
            bottlenecks.append(b)
        return logits, torch.stack(bottlenecks, dim=1)

    def forward(self, x: torch.Tensor, platform):
        """Returns ``(logits, bottlenecks)``: a list of ``n`` ``(N, C)`` tensors and ``(N, n, d)``."""
        return self.heads(self.pool(self.feature_map(x, platform), platform))


def to_tensor(images) -> torch.Tensor:
    """``(N, H, W, 3)`` float in ``[0, 1]`` or uint8 -> ``(N, 3, H, W)`` float32."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr))
    t = t.float() / 255.0 if arr.dtype == np.uint8 else t.float()
    return t.permute(0, 3, 1, 2).contiguous()


def extract_features(sample: GeoSample, model: LPN) -> np.ndarray:
    """Backbone feature map of one sample as ``(H, W, C)``."""
    model.eval()
    with torch.no_grad():
        f = model.feature_map(to_tensor(sample.image), sample.platform)
    return f[0].permute(1, 2, 0).numpy()


def classify_part(g, part_index: int, model: LPN):
    """Classifier module ``part_index`` (1-based) on a pooled part feature, eval mode.

    Returns ``(logits, bottleneck)`` as numpy vectors.
    """
    n = model.cfg.n_parts
    if not 1 <= part_index <= n:
        raise ValueError(f"part_index {part_index} outside [1, {n}]")
    model.eval()
    with torch.no_grad():
        z, b = model.classifiers[f"part{part_index}"](torch.as_tensor(np.asarray(g), dtype=torch.float32)[None])
    return z[0].numpy(), b[0].numpy()


def embed_images(model: LPN, images, platform, batch_size=32, transform=None) -> np.ndarray:
    """Per-part bottlenecks ``(N, n, d)`` for a stack of images, in eval mode.

    ``transform`` is applied to each ``(B, 3, H, W)`` batch before the forward pass.
    """
    model.eval()
    out = []
    arr = np.asarray(images)
    with torch.no_grad():
        for start in range(0, len(arr), batch_size):
            x = to_tensor(arr[start:start + batch_size])
            if transform is not None:
                x = transform(x)
            _, b = model(x, platform)
            out.append(b.numpy())
    if not out:
        return np.zeros((0, model.cfg.n_parts, model.cfg.bottleneck_dim), dtype=np.float32)
    return np.concatenate(out)


def embed(sample: GeoSample, model: LPN) -> np.ndarray:
    """Test-time descriptor: part bottlenecks concatenated in part order, length ``n * d``."""
    return embed_images(model, sample.image[None], sample.platform)[0].reshape(-1)


def save_checkpoint(path, model: LPN, extra: dict | None = None) -> None:
    """Single torch archive with the model config as text and the state dict."""
    payload = {
        "format": "lpn-checkpoint",
        "version": 1,
        "config": format_config(model.cfg.to_dict()),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[LPN, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != "lpn-checkpoint":
        raise ConfigError(f"{path} is not an LPN checkpoint")
    cfg = ModelConfig.from_dict(parse_config(payload["config"], source=str(path)))
    model = LPN(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
