"""Per-pixel feature backbone and its supervised pre-training.

A small resolution-preserving conv stack (3x3, stride 1, padding 1):
three layers widening to the feature width and two more at that width,
ReLU between, linear last. An H x W image becomes an (H*W) x d feature
matrix, row-major by pixel.

Pre-training attaches a throwaway (C_base+1)-way 1x1 pixel classifier
and minimizes label-smoothed cross-entropy over all pixels; afterwards
the backbone is frozen and only its features are consumed downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .optim import ScheduleSpec, SgdOptimizer, schedule_lr
from .taskgen import Dataset, SegSample
from .tensor import (
    Tensor,
    backward,
    cross_entropy_smoothed,
    im2col3x3,
    make_rng,
    matmul,
)

__all__ = [
    "BackboneParams",
    "FeatureMap",
    "PretrainConfig",
    "PretrainResult",
    "build_backbone",
    "encode",
    "encode_batch",
    "pretrain",
    "horizontal_flip",
    "freeze",
    "pixel_accuracy",
]


@dataclass
class FeatureMap:
    """Per-pixel features of one image; row i is pixel (i // W, i % W)."""

    features: Tensor          # [n, d]
    spatial: tuple[int, int]  # (H, W) with n = H * W
    source_id: int

    @property
    def num_pixels(self) -> int:
        return self.features.shape[0]


@dataclass
class BackboneParams:
    """Conv stack weights; layer i holds (w: [9*C_in, C_out], b: [1, C_out])."""

    layers: list[tuple[Tensor, Tensor]]
    feature_dim: int
    input_channels: int = 3

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    @property
    def frozen(self) -> bool:
        return all(t.frozen for t in self.tensors())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def clone(self, requires_grad: bool = True) -> "BackboneParams":
        """Deep copy with fresh, unfrozen tensors."""
        layers = [(Tensor(w.data.copy(), requires_grad=requires_grad),
                   Tensor(b.data.copy(), requires_grad=requires_grad))
                  for w, b in self.layers]
        return BackboneParams(layers=layers, feature_dim=self.feature_dim,
                              input_channels=self.input_channels)


def _channel_plan(feature_dim: int, input_channels: int) -> list[tuple[int, int]]:
    hidden = max(4, feature_dim // 2)
    widths = [input_channels, hidden, hidden, feature_dim, feature_dim, feature_dim]
    return list(zip(widths[:-1], widths[1:]))


def build_backbone(feature_dim: int = 32, input_channels: int = 3, seed: int = 0,
                   dtype=np.float64) -> BackboneParams:
    """He-initialized five-layer conv stack at constant resolution."""
    if feature_dim < 2:
        raise ConfigError(f"feature_dim must be >= 2, got {feature_dim}")
    layers = []
    for i, (c_in, c_out) in enumerate(_channel_plan(feature_dim, input_channels)):
        rng = make_rng(seed, 100 + i)
        std = np.sqrt(2.0 / (9 * c_in))
        w = Tensor((rng.standard_normal((9 * c_in, c_out)) * std).astype(dtype),
                   requires_grad=True)
        b = Tensor(np.zeros((1, c_out), dtype=dtype), requires_grad=True)
        layers.append((w, b))
    return BackboneParams(layers=layers, feature_dim=feature_dim,
                          input_channels=input_channels)


def _forward_stack(x: Tensor, params: BackboneParams) -> Tensor:
    """(B, H, W, C_in) -> (B*H*W, d); ReLU on all but the last layer."""
    b, h, w, _ = x.shape
    last = len(params.layers) - 1
    for i, (wt, bt) in enumerate(params.layers):
        cols = im2col3x3(x)
        z = matmul(cols, wt) + bt
        if i != last:
            z = z.relu()
        c_out = wt.shape[1]
        x = z.reshape(b, h, w, c_out)
    return x.reshape(b * h * w, params.feature_dim)


def _to_bhwc(images: np.ndarray, dtype) -> Tensor:
    """[B, C, H, W] image stack -> (B, H, W, C) input tensor."""
    return Tensor(np.ascontiguousarray(images.transpose(0, 2, 3, 1)).astype(dtype))


def encode(sample: SegSample | np.ndarray, params: BackboneParams,
           source_id: int = -1) -> FeatureMap:
    """Features for one image; pure function of (image, params)."""
    if isinstance(sample, SegSample):
        image = sample.image
        source_id = sample.sample_id
    else:
        image = sample
    if image.ndim != 3 or image.shape[0] != params.input_channels:
        raise ConfigError(
            f"expected a [{params.input_channels}, H, W] image, got shape {image.shape}")
    dtype = params.layers[0][0].dtype
    x = _to_bhwc(image[None], dtype)
    feats = _forward_stack(x, params)
    return FeatureMap(features=feats, spatial=(image.shape[1], image.shape[2]),
                      source_id=source_id)


def encode_batch(images: np.ndarray, params: BackboneParams) -> Tensor:
    """[B, C, H, W] -> (B*H*W, d) feature tensor, rows ordered by (image, pixel)."""
    if images.ndim != 4 or images.shape[1] != params.input_channels:
        raise ConfigError(
            f"expected [B, {params.input_channels}, H, W] images, got shape {images.shape}")
    dtype = params.layers[0][0].dtype
    return _forward_stack(_to_bhwc(images, dtype), params)


def horizontal_flip(sample: SegSample, rng: np.random.Generator,
                    prob: float = 0.5) -> SegSample:
    """Mirror image and mask about the vertical axis with probability prob."""
    if rng.random() >= prob:
        return sample
    return SegSample(image=np.ascontiguousarray(sample.image[:, :, ::-1]),
                     mask=np.ascontiguousarray(sample.mask[:, ::-1]),
                     class_set=sample.class_set,
                     sample_id=sample.sample_id)


def freeze(params: BackboneParams) -> BackboneParams:
    """Make every backbone tensor immutable to optimizers and grad-free."""
    for t in params.tensors():
        t.frozen = True
        t.requires_grad = False
        t.grad = None
    return params


@dataclass
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 8
    lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    schedule: str = "cosine"
    flip_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


@dataclass
class PretrainResult:
    params: BackboneParams
    head_w: Tensor            # [d, C_base + 1], discarded after stage 1
    head_b: Tensor            # [1, C_base + 1]
    label_map: dict[int, int]  # class id -> head index (0 = background)
    epoch_losses: list[float]
    run_log: dict


def _build_label_map(class_ids: Sequence[int]) -> dict[int, int]:
    return {0: 0, **{c: i + 1 for i, c in enumerate(sorted(class_ids))}}


def _mapped_labels(mask: np.ndarray, label_map: dict[int, int]) -> np.ndarray:
    present = set(int(v) for v in np.unique(mask))
    unknown = present - set(label_map)
    if unknown:
        raise ConfigError(
            f"mask contains class ids {sorted(unknown)} outside the training "
            f"classes {sorted(k for k in label_map if k != 0)}")
    lut = np.zeros(max(label_map) + 1, dtype=np.intp)
    for cid, idx in label_map.items():
        lut[cid] = idx
    return lut[mask.reshape(-1)]


def pretrain(train_set: Dataset, cfg: PretrainConfig,
             feature_dim: int = 32, dtype=np.float64) -> PretrainResult:
    """Stage 1: supervised pixel classification over base classes + background."""
    cfg.validate()
    if len(train_set) == 0:
        raise ConfigError("pre-training set is empty")
    params = build_backbone(feature_dim=feature_dim,
                            input_channels=train_set.samples[0].image.shape[0],
                            seed=cfg.seed, dtype=dtype)
    label_map = _build_label_map(train_set.class_ids)
    num_out = len(label_map)
    head_rng = make_rng(cfg.seed, 200)
    head_w = Tensor((head_rng.standard_normal((feature_dim, num_out))
                     * np.sqrt(1.0 / feature_dim)).astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros((1, num_out), dtype=dtype), requires_grad=True)

    # mapped labels are validated up front so bad data fails before training
    all_labels = [_mapped_labels(s.mask, label_map) for s in train_set.samples]

    steps_per_epoch = int(np.ceil(len(train_set) / cfg.batch_size))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    schedule = ScheduleSpec(kind=cfg.schedule, base_lr=cfg.lr, total_steps=total_steps)
    opt = SgdOptimizer(params.tensors() + [head_w, head_b], lr=cfg.lr,
                       momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    epoch_losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = make_rng(cfg.seed, 300, epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            picked = order[start:start + cfg.batch_size]
            batch = [horizontal_flip(train_set.samples[int(i)], rng, cfg.flip_prob)
                     for i in picked]
            images = np.stack([s.image for s in batch])
            labels = np.concatenate([_mapped_labels(s.mask, label_map) for s in batch])
            feats = encode_batch(images, params)
            logits = matmul(feats, head_w) + head_b
            loss = cross_entropy_smoothed(logits, labels, epsilon=cfg.label_smoothing)
            backward(loss)
            opt.step(lr=schedule_lr(schedule, step))
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))

    run_log = {
        "stage": "pretrain",
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "label_smoothing": cfg.label_smoothing,
        "schedule": cfg.schedule,
        "flip_prob": cfg.flip_prob,
        "seed": cfg.seed,
        "feature_dim": feature_dim,
        "num_head_classes": num_out,
        "steps": step,
    }
    return PretrainResult(params=params, head_w=head_w, head_b=head_b,
                          label_map=label_map, epoch_losses=epoch_losses,
                          run_log=run_log)


def pixel_accuracy(result: PretrainResult, samples: Iterable[SegSample]) -> float:
    """Fraction of pixels whose head argmax matches the mapped label."""
    correct = 0
    total = 0
    for s in samples:
        feats = encode(s, result.params)
        logits = feats.features.data @ result.head_w.data + result.head_b.data
        pred = logits.argmax(axis=1)
        labels = _mapped_labels(s.mask, result.label_map)
        correct += int((pred == labels).sum())
        total += labels.size
    return correct / max(total, 1)
