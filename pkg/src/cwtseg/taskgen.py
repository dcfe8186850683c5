"""Deterministic synthetic segmentation data and episode sampling.

Each class is a (shape archetype, surface texture, hue center) triple.
A sample renders one instance of its class over a cluttered canvas, with
per-sample draws of scale, position, rotation, color shift, and optional
occlusion. Two domains, shapesA and shapesB, use disjoint archetype and
texture banks so transfer between them is a genuine distribution shift.

Everything is keyed off counter-based random streams: the same spec
always produces bit-identical data, independent of generation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EpisodeExhaustedError
from .tensor import make_rng

__all__ = [
    "VariationKnobs",
    "DatasetSpec",
    "SegSample",
    "Dataset",
    "SplitSpec",
    "EpisodeTask",
    "generate_dataset",
    "split_classes",
    "sample_episode",
    "binarize_mask",
    "export_dataset",
    "load_dataset",
    "ARCHETYPE_BANKS",
    "TEXTURE_BANKS",
]

DOMAINS = ("shapesA", "shapesB")

# Foreground archetypes, identified by name. The two banks are disjoint.
ARCHETYPE_BANKS: dict[str, tuple[str, ...]] = {
    "shapesA": ("circle", "square", "triangle_up", "cross", "diamond", "hbar"),
    "shapesB": ("ring", "star4", "triangle_down", "hexagon", "lshape", "vbar"),
}

TEXTURE_BANKS: dict[str, tuple[str, ...]] = {
    "shapesA": ("solid", "stripes", "checker", "dots"),
    "shapesB": ("rings", "gradient", "diag", "speckle"),
}

_FG_SATURATION = 0.85
_RECORD_MAGIC = b"SEG1"


@dataclass(frozen=True)
class VariationKnobs:
    """Per-sample appearance variation.

    scale_range: shape radius as a fraction of the half image size.
    position_jitter: center offset, fraction of the half image size.
    rotation_range: rotation drawn from [-r, r] radians.
    color_jitter: hue shift in [-j, j] hue-circle turns, plus a value
        shift of half that amount.
    occlusion_prob: probability of an occluding blob over the shape.
    distractor_range: count range (inclusive) of secondary objects drawn
        from *other* classes with their full appearance but labeled
        background, so that foreground identity is defined by the support
        set rather than by salience alone. Secondary objects are drawn
        slightly smaller (0.8x scale) and placed anywhere on the canvas.
    style_offset: half-distance between a class's two appearance styles.
        Each instance flips a fair coin and shifts its hue by +offset or
        -offset before jitter, making classes bimodal: a support instance
        of one style only partially describes a query of the other, which
        is the appearance gap query-conditioned adaptation must close.
    """

    scale_range: tuple[float, float] = (0.3, 0.5)
    position_jitter: float = 0.2
    rotation_range: float = 0.3
    color_jitter: float = 0.0
    occlusion_prob: float = 0.0
    distractor_range: tuple[int, int] = (0, 0)
    style_offset: float = 0.0

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi < 1, got {self.scale_range}")
        if not 0.0 <= self.position_jitter <= 1.0:
            raise ConfigError(f"position_jitter must be in [0, 1], got {self.position_jitter}")
        if not 0.0 <= self.rotation_range <= np.pi:
            raise ConfigError(f"rotation_range must be in [0, pi], got {self.rotation_range}")
        if not 0.0 <= self.color_jitter <= 0.5:
            raise ConfigError(f"color_jitter must be in [0, 0.5], got {self.color_jitter}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        dlo, dhi = self.distractor_range
        if not (0 <= dlo <= dhi <= 8):
            raise ConfigError(
                f"distractor_range must satisfy 0 <= lo <= hi <= 8, got {self.distractor_range}")
        if not 0.0 <= self.style_offset <= 0.25:
            raise ConfigError(
                f"style_offset must be in [0, 0.25], got {self.style_offset}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["distractor_range"] = list(self.distractor_range)
        return d

    @staticmethod
    def from_dict(d: dict) -> "VariationKnobs":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        if "distractor_range" in d:
            d["distractor_range"] = tuple(d["distractor_range"])
        return VariationKnobs(**d)


@dataclass(frozen=True)
class DatasetSpec:
    domain: str = "shapesA"
    num_classes: int = 12
    images_per_class: int = 60
    image_size: int = 32
    variation: VariationKnobs = field(default_factory=VariationKnobs)
    seed: int = 0

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}, expected one of {DOMAINS}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.images_per_class < 1:
            raise ConfigError(f"images_per_class must be >= 1, got {self.images_per_class}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        self.variation.validate()
        if self.variation.distractor_range[1] > 0 and self.num_classes < 2:
            raise ConfigError(
                "distractor objects need at least 2 classes to draw from, "
                f"got num_classes={self.num_classes}")

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "num_classes": self.num_classes,
            "images_per_class": self.images_per_class,
            "image_size": self.image_size,
            "variation": self.variation.to_dict(),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        d = dict(d)
        if "variation" in d:
            d["variation"] = VariationKnobs.from_dict(d["variation"])
        return DatasetSpec(**d)

    def class_recipe(self, class_id: int) -> tuple[str, str, float]:
        """(archetype, texture, hue_center) for a 1-based class id."""
        arch_bank = ARCHETYPE_BANKS[self.domain]
        tex_bank = TEXTURE_BANKS[self.domain]
        i = class_id - 1
        archetype = arch_bank[i % len(arch_bank)]
        texture = tex_bank[(i + i // len(arch_bank)) % len(tex_bank)]
        hue_center = (i / self.num_classes) % 1.0
        return archetype, texture, hue_center


@dataclass
class SegSample:
    """One image with a dense integer mask (0 = background)."""

    image: np.ndarray        # float32 [C_in, H, W], values in [0, 1]
    mask: np.ndarray         # uint8 [H, W] of class ids
    class_set: frozenset[int]
    sample_id: int

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class Dataset:
    spec: DatasetSpec
    samples: list[SegSample]
    class_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        self.by_class: dict[int, list[int]] = {c: [] for c in self.class_ids}
        for i, s in enumerate(self.samples):
            for c in s.class_set:
                if c in self.by_class:
                    self.by_class[c].append(i)

    def __len__(self) -> int:
        return len(self.samples)

    def restrict(self, class_ids: Iterable[int]) -> "Dataset":
        """Samples containing at least one pixel of an in-subset class."""
        keep = tuple(sorted(class_ids))
        keep_set = set(keep)
        samples = [s for s in self.samples if s.class_set & keep_set]
        return Dataset(spec=self.spec, samples=samples, class_ids=keep)


@dataclass(frozen=True)
class SplitSpec:
    split_index: int
    num_splits: int = 4

    def validate(self, num_classes: int) -> None:
        if self.num_splits < 1:
            raise ConfigError(f"num_splits must be >= 1, got {self.num_splits}")
        if not 0 <= self.split_index < self.num_splits:
            raise ConfigError(
                f"split_index {self.split_index} out of range for {self.num_splits} splits")
        if num_classes < 2 * self.num_splits:
            raise ConfigError(
                f"need num_classes >= 2 * num_splits so every split keeps novel classes, "
                f"got {num_classes} classes for {self.num_splits} splits")


@dataclass
class EpisodeTask:
    """One few-shot task: a class, K support samples, Q query samples.

    Support and query masks are binarized to {0 background, 1 foreground}.
    """

    class_id: int
    support: list[SegSample]
    query: list[SegSample]


# -- color helpers ------------------------------------------------------------

def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, all components in [0, 1]."""
    h = np.asarray(h, dtype=np.float64) % 1.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.select([i == k for k in range(6)], choices_r)
    g = np.select([i == k for k in range(6)], choices_g)
    b = np.select([i == k for k in range(6)], choices_b)
    return r, g, b


# -- archetype stencils -------------------------------------------------------

def _stencil(archetype: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean membership test in shape-local coordinates (unit radius)."""
    if archetype == "circle":
        return u * u + v * v <= 1.0
    if archetype == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.82
    if archetype == "triangle_up":
        return (v <= 0.85) & (v >= 1.9 * np.abs(u) - 0.95)
    if archetype == "cross":
        arm = (np.abs(u) <= 0.38) | (np.abs(v) <= 0.38)
        return arm & (np.maximum(np.abs(u), np.abs(v)) <= 0.95)
    if archetype == "diamond":
        return np.abs(u) + np.abs(v) <= 1.05
    if archetype == "hbar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.45)
    if archetype == "ring":
        rho2 = u * u + v * v
        return (rho2 <= 1.0) & (rho2 >= 0.45 * 0.45)
    if archetype == "star4":
        a = (u + v) / np.sqrt(2.0)
        b = (u - v) / np.sqrt(2.0)
        return (np.abs(a * b) <= 0.09) & (u * u + v * v <= 1.0)
    if archetype == "triangle_down":
        return (v >= -0.85) & (v <= -1.9 * np.abs(u) + 0.95)
    if archetype == "hexagon":
        m = np.maximum(np.abs(u), np.maximum(np.abs(0.5 * u + 0.866 * v),
                                             np.abs(0.5 * u - 0.866 * v)))
        return m <= 0.9
    if archetype == "lshape":
        box = (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
        notch = (u > -0.15) & (v < 0.15)
        return box & ~notch
    if archetype == "vbar":
        return (np.abs(u) <= 0.45) & (np.abs(v) <= 1.0)
    raise ConfigError(f"unknown archetype {archetype!r}")


def _texture_value(texture: str, u, v, su, sv, base_value: float,
                   rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel value channel for a texture; su/sv are pixel-unit
    shape-local coordinates so textures translate, rotate, and tile with
    the shape."""
    if texture == "solid":
        return np.full(shape, base_value)
    if texture == "stripes":
        band = np.floor(sv / 2.0) % 2 == 0
        return np.where(band, base_value, base_value * 0.4)
    if texture == "checker":
        cell = (np.floor(su / 2.0) + np.floor(sv / 2.0)) % 2 == 0
        return np.where(cell, base_value, base_value * 0.45)
    if texture == "dots":
        dot = (np.mod(su, 4.0) < 2.0) & (np.mod(sv, 4.0) < 2.0)
        return np.where(dot, base_value * 0.35, base_value)
    if texture == "rings":
        rho = np.sqrt(u * u + v * v)
        band = np.floor(rho * 3.0) % 2 == 0
        return np.where(band, base_value, base_value * 0.45)
    if texture == "gradient":
        return base_value * (0.5 + 0.5 * np.clip((u + 1.0) / 2.0, 0.0, 1.0))
    if texture == "diag":
        band = np.floor((su + sv) / 2.0) % 2 == 0
        return np.where(band, base_value, base_value * 0.4)
    if texture == "speckle":
        bits = rng.random(shape) < 0.5
        return np.where(bits, base_value, base_value * 0.5)
    raise ConfigError(f"unknown texture {texture!r}")


def _blob_region(h: int, w: int, cx: float, cy: float, radius: float,
                 aspect: float, angle: float, rough: np.ndarray) -> np.ndarray:
    """Ragged elliptical blob; ``rough`` is per-pixel edge noise in [-1, 1]."""
    rows = np.arange(h)[:, None] - cy
    cols = np.arange(w)[None, :] - cx
    ca, sa = np.cos(angle), np.sin(angle)
    eu = (ca * cols + sa * rows) / radius
    ev = (-sa * cols + ca * rows) / (radius * aspect)
    return eu * eu + ev * ev <= 1.0 + 0.35 * rough


def _paint(image: np.ndarray, region: np.ndarray, r, g, b) -> None:
    for ch, plane in enumerate((r, g, b)):
        image[ch][region] = np.broadcast_to(plane, region.shape)[region]


def _paint_class_shape(image: np.ndarray, spec: DatasetSpec, class_id: int,
                       rng: np.random.Generator, *, scale: float, cx: float,
                       cy: float, angle: float, hue_shift: float,
                       value_shift: float) -> np.ndarray:
    """Paint one textured class instance; returns its pixel region."""
    size = spec.image_size
    archetype, texture, hue_center = spec.class_recipe(class_id)
    radius = scale * (size / 2.0)
    rows = np.arange(size)[:, None] - cy
    cols = np.arange(size)[None, :] - cx
    ca, sa = np.cos(angle), np.sin(angle)
    su = ca * cols + sa * rows          # pixel-unit shape-local coords
    sv = -sa * cols + ca * rows
    u = su / radius
    v = sv / radius
    region = _stencil(archetype, u, v)
    hue = (hue_center + hue_shift) % 1.0
    base_value = float(np.clip(0.9 + value_shift, 0.55, 1.0))
    tex_value = np.clip(
        _texture_value(texture, u, v, su, sv, base_value, rng, (size, size)), 0.0, 1.0)
    fr, fgc, fb = _hsv_to_rgb(hue, _FG_SATURATION, tex_value)
    _paint(image, region, fr, fgc, fb)
    return region


def _render_sample(spec: DatasetSpec, class_id: int, sample_idx: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    knobs = spec.variation

    # fixed draw order keeps the stream layout independent of outcomes
    scale = rng.uniform(*knobs.scale_range)
    off_x = knobs.position_jitter * (size / 2.0) * rng.uniform(-1.0, 1.0)
    off_y = knobs.position_jitter * (size / 2.0) * rng.uniform(-1.0, 1.0)
    angle = rng.uniform(-knobs.rotation_range, knobs.rotation_range)
    hue_shift = rng.uniform(-knobs.color_jitter, knobs.color_jitter)
    value_shift = rng.uniform(-knobs.color_jitter / 2.0, knobs.color_jitter / 2.0)
    occl_roll = rng.random()
    if knobs.style_offset > 0.0:  # conditional draw keeps legacy streams intact
        hue_shift += knobs.style_offset * (1.0 if rng.random() < 0.5 else -1.0)

    # background canvas: low-saturation tint with pixel noise
    bg_hue = rng.random()
    bg_value = 0.35 + rng.uniform(-0.06, 0.06, size=(size, size))
    r0, g0, b0 = _hsv_to_rgb(bg_hue, 0.12, np.clip(bg_value, 0.0, 1.0))
    image = np.stack([r0, g0, b0]).astype(np.float64)
    image += rng.uniform(-0.02, 0.02, size=(3, size, size))

    # clutter blobs: mid-saturation distractors, labeled background
    for _ in range(int(rng.integers(2, 5))):
        ccx = rng.uniform(0, size - 1)
        ccy = rng.uniform(0, size - 1)
        crad = rng.uniform(1.5, 3.5)
        casp = rng.uniform(0.5, 1.0)
        cang = rng.uniform(0, np.pi)
        chue = rng.random()
        rough = rng.uniform(-1.0, 1.0, size=(size, size))
        bits = rng.random((size, size)) < 0.5
        region = _blob_region(size, size, ccx, ccy, crad, casp, cang, rough)
        val = np.where(bits, 0.68, 0.45)
        cr, cg, cb = _hsv_to_rgb(chue, 0.5, val)
        _paint(image, region, cr, cg, cb)

    # secondary objects from other classes, labeled background; painted
    # before the annotated shape so the latter wins any overlap
    dlo, dhi = knobs.distractor_range
    if dhi > 0:
        other_ids = [c for c in range(1, spec.num_classes + 1) if c != class_id]
        for _ in range(int(rng.integers(dlo, dhi + 1))):
            d_class = other_ids[int(rng.integers(len(other_ids)))]
            d_scale = 0.8 * rng.uniform(*knobs.scale_range)
            d_cx = rng.uniform(0, size - 1)
            d_cy = rng.uniform(0, size - 1)
            d_angle = rng.uniform(-knobs.rotation_range, knobs.rotation_range)
            d_hue = rng.uniform(-knobs.color_jitter, knobs.color_jitter)
            d_value = rng.uniform(-knobs.color_jitter / 2.0, knobs.color_jitter / 2.0)
            if knobs.style_offset > 0.0:
                d_hue += knobs.style_offset * (1.0 if rng.random() < 0.5 else -1.0)
            _paint_class_shape(image, spec, d_class, rng, scale=d_scale,
                               cx=d_cx, cy=d_cy, angle=d_angle,
                               hue_shift=d_hue, value_shift=d_value)

    # the annotated shape
    cx = (size - 1) / 2.0 + off_x
    cy = (size - 1) / 2.0 + off_y
    radius = scale * (size / 2.0)
    fg_region = _paint_class_shape(image, spec, class_id, rng, scale=scale,
                                   cx=cx, cy=cy, angle=angle,
                                   hue_shift=hue_shift, value_shift=value_shift)

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[fg_region] = class_id

    # occluder: background-looking blob over the shape
    ox = cx + rng.uniform(-0.7, 0.7) * radius
    oy = cy + rng.uniform(-0.7, 0.7) * radius
    orad = rng.uniform(0.35, 0.6) * radius
    oasp = rng.uniform(0.6, 1.0)
    oang = rng.uniform(0, np.pi)
    ohue = rng.random()
    orough = rng.uniform(-1.0, 1.0, size=(size, size))
    if occl_roll < knobs.occlusion_prob:
        region = _blob_region(size, size, ox, oy, max(orad, 1.0), oasp, oang, orough)
        orr, org, orb = _hsv_to_rgb(ohue, 0.18, 0.45)
        _paint(image, region, orr, org, orb)
        mask[region] = 0

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, mask


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Render every sample of every class, deterministically from the spec.

    Each sample gets its own counter-based stream keyed by (seed, class,
    index, attempt); a sample whose foreground was fully occluded or
    clipped away is regenerated under the next attempt key.
    """
    spec.validate()
    samples: list[SegSample] = []
    class_ids = tuple(range(1, spec.num_classes + 1))
    sample_id = 0
    for class_id in class_ids:
        for idx in range(spec.images_per_class):
            for attempt in range(32):
                rng = make_rng(spec.seed, class_id, idx, attempt)
                image, mask = _render_sample(spec, class_id, idx, rng)
                if (mask == class_id).any():
                    break
            else:
                raise ConfigError(
                    f"could not render a visible instance of class {class_id} "
                    f"(sample {idx}) in 32 attempts; widen scale_range or lower "
                    f"occlusion_prob")
            samples.append(SegSample(image=image, mask=mask,
                                     class_set=frozenset({class_id}),
                                     sample_id=sample_id))
            sample_id += 1
    return Dataset(spec=spec, samples=samples, class_ids=class_ids)


def split_classes(dataset: Dataset, split: SplitSpec) -> tuple[Dataset, Dataset]:
    """Round-robin base/novel partition.

    Novel classes are those whose 0-based index is congruent to the split
    index modulo num_splits; the rest are base. Each returned subset keeps
    only samples containing one of its classes.
    """
    split.validate(len(dataset.class_ids))
    novel = tuple(c for c in dataset.class_ids
                  if (c - 1) % split.num_splits == split.split_index)
    base = tuple(c for c in dataset.class_ids if c not in novel)
    return dataset.restrict(base), dataset.restrict(novel)


def binarize_mask(mask: np.ndarray, class_id: int) -> np.ndarray:
    """1 where mask equals class_id, else 0."""
    return (mask == class_id).astype(np.uint8)


def _binarized_copy(sample: SegSample, class_id: int) -> SegSample:
    return SegSample(image=sample.image,
                     mask=binarize_mask(sample.mask, class_id),
                     class_set=frozenset({1}) if (sample.mask == class_id).any() else frozenset(),
                     sample_id=sample.sample_id)


def sample_episode(pool: Dataset, class_pool: Sequence[int], k_shot: int,
                   q_queries: int, rng: np.random.Generator) -> EpisodeTask:
    """Draw a class uniformly, then K+Q of its samples without replacement.

    Classes without enough samples are dropped and redrawn; when every
    candidate class is exhausted an error is raised.
    """
    if k_shot < 1 or q_queries < 1:
        raise ConfigError(f"need k_shot >= 1 and q_queries >= 1, got {k_shot}, {q_queries}")
    candidates = [c for c in class_pool if c in pool.by_class]
    if not candidates:
        raise EpisodeExhaustedError("class pool is empty or disjoint from the dataset")
    need = k_shot + q_queries
    while candidates:
        class_id = int(candidates[int(rng.integers(len(candidates)))])
        indices = pool.by_class[class_id]
        if len(indices) < need:
            candidates.remove(class_id)
            continue
        picked = rng.choice(len(indices), size=need, replace=False)
        chosen = [pool.samples[indices[int(i)]] for i in picked]
        support = [_binarized_copy(s, class_id) for s in chosen[:k_shot]]
        query = [_binarized_copy(s, class_id) for s in chosen[k_shot:]]
        return EpisodeTask(class_id=class_id, support=support, query=query)
    raise EpisodeExhaustedError(
        f"no class in the pool has {need} samples for a {k_shot}-shot episode")


# -- on-disk format ------------------------------------------------------------

def _write_record(path: Path, sample: SegSample) -> None:
    c, h, w = sample.image.shape
    with open(path, "wb") as f:
        f.write(_RECORD_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(sample.image.astype("<f4").tobytes())
        f.write(sample.mask.astype(np.uint8).tobytes())


def _read_record(path: Path, sample_id: int) -> SegSample:
    raw = path.read_bytes()
    if raw[:4] != _RECORD_MAGIC:
        raise ConfigError(f"{path} is not a sample record (bad magic {raw[:4]!r})")
    h, w, c = struct.unpack("<III", raw[4:16])
    img_bytes = c * h * w * 4
    image = np.frombuffer(raw[16:16 + img_bytes], dtype="<f4").reshape(c, h, w)
    mask = np.frombuffer(raw[16 + img_bytes:16 + img_bytes + h * w],
                         dtype=np.uint8).reshape(h, w)
    ids = frozenset(int(x) for x in np.unique(mask) if x != 0)
    return SegSample(image=image.copy(), mask=mask.copy(), class_set=ids,
                     sample_id=sample_id)


def export_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """One directory per class, one flat binary record per sample, plus a
    manifest carrying the generating spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters = {c: 0 for c in dataset.class_ids}
    for sample in dataset.samples:
        class_id = min(sample.class_set)
        class_dir = out / f"class_{class_id:03d}"
        class_dir.mkdir(exist_ok=True)
        _write_record(class_dir / f"sample_{counters[class_id]:04d}.seg", sample)
        counters[class_id] += 1
    manifest = {
        "format": "seg-dataset-v1",
        "spec": dataset.spec.to_dict(),
        "class_ids": list(dataset.class_ids),
        "samples_per_class": {str(c): n for c, n in sorted(counters.items())},
        "seed": dataset.spec.seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(in_dir: str | Path) -> Dataset:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    spec = DatasetSpec.from_dict(manifest["spec"])
    class_ids = tuple(int(c) for c in manifest["class_ids"])
    samples: list[SegSample] = []
    sample_id = 0
    for class_id in class_ids:
        class_dir = root / f"class_{class_id:03d}"
        for record in sorted(class_dir.glob("sample_*.seg")):
            samples.append(_read_record(record, sample_id))
            sample_id += 1
    return Dataset(spec=spec, samples=samples, class_ids=class_ids)
