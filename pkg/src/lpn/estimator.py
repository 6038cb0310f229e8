"""scikit-learn style wrappers: a partition pooling transformer and a trainable embedder."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .data import platform_id
from .model import LPN, ModelConfig, embed_images, to_tensor
from .objective import AugmentConfig, TrainConfig, platform_data_from_arrays, train
from .partition import PartitionSpec, build_assignment


def check_feature_maps(X) -> np.ndarray:
    """Validate a stack of ``(N, H, W, C)`` finite feature maps."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or min(X.shape[1:]) < 1:
        raise ValueError(f"expected feature maps shaped (N, H, W, C), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature maps contain NaN or infinity")
    return X


def check_images(X) -> np.ndarray:
    """Validate ``(N, H, W, 3)`` images: uint8, or floats in ``[0, 1]``."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (N, H, W, 3), got {X.shape}")
    if X.dtype != np.uint8:
        X = X.astype(np.float32)
        if not np.all(np.isfinite(X)):
            raise ValueError("images contain NaN or infinity")
        if X.size and (X.min() < 0 or X.max() > 1):
            raise ValueError("float images must lie in [0, 1]")
    return X


def check_platforms(platform, n_samples: int) -> np.ndarray:
    if np.ndim(platform) == 0:
        return np.full(n_samples, platform_id(platform), dtype=np.int64)
    arr = np.array([platform_id(p) for p in platform], dtype=np.int64)
    if len(arr) != n_samples:
        raise ValueError(f"{len(arr)} platform entries for {n_samples} samples")
    return arr


class PartPooler(BaseEstimator, TransformerMixin):
    """Pool ``(N, H, W, C)`` feature maps into ``(N, n_parts * C)`` part descriptors.

    Output columns are ordered part-major: all ``C`` channels of part 1 (the
    innermost ring, top band or left band) first.
    """

    def __init__(self, strategy="square_ring", n_parts=4):
        self.strategy = strategy
        self.n_parts = n_parts

    def fit(self, X, y=None):
        X = check_feature_maps(X)
        _, H, W, C = X.shape
        self.assignment_ = build_assignment(PartitionSpec(self.strategy, self.n_parts), H, W)
        self.n_channels_ = C
        return self

    def transform(self, X):
        check_is_fitted(self, "assignment_")
        X = check_feature_maps(X)
        if X.shape[1:3] != self.assignment_.shape or X.shape[3] != self.n_channels_:
            raise ValueError(f"fitted on maps of shape {self.assignment_.shape + (self.n_channels_,)}, "
                             f"got {X.shape[1:]}")
        N, H, W, C = X.shape
        weights = self.assignment_.one_hot() / self.assignment_.counts
        return np.einsum("npc,pk->nkc", X.reshape(N, H * W, C), weights).reshape(N, -1)


class LPNEmbedder(BaseEstimator, TransformerMixin):
    """Train the part-based network on labelled multi-platform images and embed new ones.

    ``fit(X, y, platform=...)`` expects every class to have at least one
    image on each platform present. ``transform`` returns the concatenated
    part bottlenecks; ``predict`` returns the class whose summed per-part
    softmax is largest.
    """

    def __init__(self, n_parts=4, strategy="square_ring", backbone="tiny", bottleneck_dim=512,
                 dropout_rate=0.5, share_aerial_weights=True, epochs=120, batch_size=32,
                 lr_backbone=0.001, lr_new=0.01, momentum=0.9, weight_decay=0.0005,
                 lr_decay_factor=0.1, lr_decay_epoch=80, augment=True, random_state=0):
        self.n_parts = n_parts
        self.strategy = strategy
        self.backbone = backbone
        self.bottleneck_dim = bottleneck_dim
        self.dropout_rate = dropout_rate
        self.share_aerial_weights = share_aerial_weights
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_backbone = lr_backbone
        self.lr_new = lr_new
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_epoch = lr_decay_epoch
        self.augment = augment
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        flag = bool(self.augment)
        return TrainConfig(
            epochs=self.epochs, lr_backbone=self.lr_backbone, lr_new=self.lr_new, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.batch_size, lr_decay_factor=self.lr_decay_factor,
            lr_decay_epoch=min(self.lr_decay_epoch, max(self.epochs - 1, 0)),
            augment=AugmentConfig(random_crop=flag, horizontal_flip=flag, satellite_rotation=flag))

    def fit(self, X, y, platform=2):
        X = check_images(X)
        platforms = check_platforms(platform, len(X))
        self.label_encoder_ = LabelEncoder().fit(y)
        labels = self.label_encoder_.transform(y) + 1
        self.classes_ = self.label_encoder_.classes_
        cfg = ModelConfig(num_classes=len(self.classes_), backbone=self.backbone,
                          partition=PartitionSpec(self.strategy, self.n_parts),
                          bottleneck_dim=self.bottleneck_dim, dropout_rate=self.dropout_rate,
                          share_aerial_weights=self.share_aerial_weights,
                          platforms=tuple(np.unique(platforms).tolist()), input_size=X.shape[1])
        data = {int(j): platform_data_from_arrays(X[platforms == j], labels[platforms == j])
                for j in np.unique(platforms)}
        result = train(data, self._train_config(), cfg, seed=self.random_state)
        self.model_ = result.model
        self.loss_log_ = result.log
        return self

    def part_embeddings(self, X, platform=2) -> np.ndarray:
        check_is_fitted(self, "model_")
        return embed_images(self.model_, check_images(X), platform_id(platform))

    def transform(self, X, platform=2):
        return self.part_embeddings(X, platform).reshape(len(X), -1)

    def predict_proba(self, X, platform=2):
        check_is_fitted(self, "model_")
        X = check_images(X)
        model: LPN = self.model_
        model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), 32):
                logits, _ = model(to_tensor(X[start:start + 32]), platform_id(platform))
                out.append(torch.stack([z.softmax(-1) for z in logits]).mean(0).numpy())
        return np.concatenate(out)

    def predict(self, X, platform=2):
        return self.classes_[self.predict_proba(X, platform).argmax(axis=1)]
