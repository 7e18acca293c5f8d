"""Preprocessing, 2.5D slabs, augmentation and the balanced epoch sampler."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import (AugmentationConfigError, CropError, PipelineError, SamplerError,
                     SlabIndexError, logger)
from .hierarchy import ALL_FORMATS, TargetFormat, encode_target

HU_MIN = -1024.0
HU_MAX = 600.0
STAGE_HU = "hu"
STAGE_NORMALIZED = "normalized"


def normalize_hu(v):
    """Clip to [-1024, 600] HU and map linearly onto [0, 1]."""
    arr = np.asarray(v)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if np.isnan(arr).any():
        raise PipelineError("NaN value in HU input")
    out = (np.clip(arr, HU_MIN, HU_MAX) - arr.dtype.type(HU_MIN)) / arr.dtype.type(HU_MAX - HU_MIN)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(eq=False)
class CTVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stage: str = STAGE_HU

    @property
    def depth(self) -> int:
        return self.data.shape[0]


def normalize_volume(vol: CTVolume) -> CTVolume:
    if vol.stage != STAGE_HU:
        raise PipelineError(f"Volume already at stage '{vol.stage}', refusing to normalize twice")
    return CTVolume(data=normalize_hu(vol.data.astype(np.float32)), spacing=vol.spacing,
                    stage=STAGE_NORMALIZED)


def extract_slab(volume, z: int) -> np.ndarray:
    """Slices (z-1, z, z+1) with edge replication at the volume borders."""
    data = volume.data if isinstance(volume, CTVolume) else np.asarray(volume)
    depth = data.shape[0]
    if not 0 <= z < depth:
        raise SlabIndexError(f"Slice index {z} out of range for depth {depth}")
    return data[[max(z - 1, 0), z, min(z + 1, depth - 1)]]


@dataclass(eq=False)
class Slab:
    intensity: np.ndarray
    target: np.ndarray
    format: TargetFormat
    source_id: str = ""
    slice_index: int = 0

    def validate(self):
        if self.intensity.ndim != 3 or self.intensity.shape[0] != 3:
            raise PipelineError(f"Slab intensity must be 3×H×W, got {self.intensity.shape}")
        if self.target.shape != (self.format.channels,) + self.intensity.shape[1:]:
            raise PipelineError(
                f"Target shape {self.target.shape} inconsistent with format '{self.format.value}'"
            )
        if self.intensity.min() < 0.0 or self.intensity.max() > 1.0:
            raise PipelineError("Slab intensity outside [0, 1]")
        return self


@dataclass
class AugmentConfig:
    patch_size: int = 64
    crop: str = "random"
    scale_range: tuple[float, float] = (0.7, 1.4)
    p_scale: float = 0.2
    rotation_range: tuple[float, float] = (-180.0, 180.0)
    p_rotation: float = 0.2
    p_mirror: float = 0.5
    noise_sigma: tuple[float, float] = (0.0, 0.1)
    p_noise: float = 0.15
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    p_blur: float = 0.2
    brightness_range: tuple[float, float] = (0.7, 1.3)
    p_brightness: float = 0.15
    contrast_range: tuple[float, float] = (0.65, 1.5)
    p_contrast: float = 0.15
    p_morphology: float = 0.15

    def __post_init__(self):
        if self.crop not in ("random", "center"):
            raise AugmentationConfigError(f"crop must be 'random' or 'center', got '{self.crop}'")
        if self.patch_size < 1:
            raise AugmentationConfigError("patch size must be positive")

    @classmethod
    def disabled(cls, patch_size=64, crop="center") -> "AugmentConfig":
        return cls(patch_size=patch_size, crop=crop, p_scale=0.0, p_rotation=0.0, p_mirror=0.0,
                   p_noise=0.0, p_blur=0.0, p_brightness=0.0, p_contrast=0.0, p_morphology=0.0)


_CROSS = ndimage.generate_binary_structure(2, 1)


def _resample(intensity, labels, angle_deg, scale):
    theta = math.radians(angle_deg)
    # output -> input mapping: rotate by -theta, shrink by scale
    matrix = np.array([[math.cos(theta), math.sin(theta)],
                       [-math.sin(theta), math.cos(theta)]]) / scale
    center = (np.array(labels.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center
    intensity = np.stack([
        ndimage.affine_transform(channel, matrix, offset=offset, order=1, mode="nearest")
        for channel in intensity
    ])
    labels = ndimage.affine_transform(labels, matrix, offset=offset, order=0, mode="constant", cval=0)
    return intensity.astype(np.float32), labels


def affine_resample(slab: Slab, angle_deg: float, scale: float = 1.0) -> Slab:
    """In-plane rotation/scale; intensity bilinear, target nearest-neighbour."""
    labels = np.argmax(slab.target, axis=0)
    intensity, labels = _resample(slab.intensity, labels, angle_deg, scale)
    return Slab(intensity, encode_target(labels, slab.format), slab.format,
                slab.source_id, slab.slice_index)


def mirror(slab: Slab, axes: Sequence[int]) -> Slab:
    """Flip intensity axes (0 = slice, 1 = row, 2 = column); target follows in-plane flips."""
    intensity, target = slab.intensity, slab.target
    for axis in axes:
        intensity = np.flip(intensity, axis=axis)
        if axis > 0:
            target = np.flip(target, axis=axis)
    return Slab(np.ascontiguousarray(intensity), np.ascontiguousarray(target), slab.format,
                slab.source_id, slab.slice_index)


def _random_morphology(labels, rng):
    lesion = labels == 2
    if rng.random() < 0.5:
        grown = ndimage.binary_dilation(lesion, structure=_CROSS) & (labels >= 1)
        labels[grown] = 2
    else:
        shrunk = ndimage.binary_erosion(lesion, structure=_CROSS)
        labels[lesion & ~shrunk] = 1
    return labels


def augment(slab: Slab, rng: np.random.Generator, cfg: AugmentConfig) -> Slab:
    height, width = slab.intensity.shape[1:]
    size = cfg.patch_size
    if size > height or size > width:
        raise AugmentationConfigError(f"Patch size {size} larger than slab {height}×{width}")

    intensity = slab.intensity.astype(np.float32, copy=True)
    labels = np.argmax(slab.target, axis=0)

    scale = rng.uniform(*cfg.scale_range) if rng.random() < cfg.p_scale else 1.0
    angle = rng.uniform(*cfg.rotation_range) if rng.random() < cfg.p_rotation else 0.0
    if scale != 1.0 or angle != 0.0:
        intensity, labels = _resample(intensity, labels, angle, scale)

    for axis in (0, 1, 2):
        if rng.random() < cfg.p_mirror:
            intensity = np.flip(intensity, axis=axis)
            if axis > 0:
                labels = np.flip(labels, axis=axis - 1)

    if rng.random() < cfg.p_noise:
        sigma = rng.uniform(*cfg.noise_sigma)
        intensity = intensity + rng.normal(0.0, sigma, size=intensity.shape).astype(np.float32)
    if rng.random() < cfg.p_blur:
        sigma = rng.uniform(*cfg.blur_sigma)
        intensity = ndimage.gaussian_filter(intensity, sigma=(0.0, sigma, sigma))
    if rng.random() < cfg.p_brightness:
        intensity = intensity * rng.uniform(*cfg.brightness_range)
    if rng.random() < cfg.p_contrast:
        mean = intensity.mean()
        intensity = (intensity - mean) * rng.uniform(*cfg.contrast_range) + mean

    labels = np.ascontiguousarray(labels)
    if slab.format is TargetFormat.LESION and rng.random() < cfg.p_morphology:
        labels = _random_morphology(labels, rng)

    if cfg.crop == "random":
        top = int(rng.integers(0, height - size + 1))
        left = int(rng.integers(0, width - size + 1))
    else:
        top, left = (height - size) // 2, (width - size) // 2
    intensity = intensity[:, top:top + size, left:left + size]
    labels = labels[top:top + size, left:left + size]

    intensity = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    return Slab(np.ascontiguousarray(intensity), encode_target(labels, slab.format), slab.format,
                slab.source_id, slab.slice_index)


def draw_rng(epoch_seed: int, draw_index: int) -> np.random.Generator:
    """Independent stream per draw, so augmentation order never matters."""
    return np.random.default_rng([int(epoch_seed), int(draw_index)])


@dataclass(frozen=True)
class Draw:
    format: TargetFormat
    source_id: str
    slice_index: int
    index: int


@dataclass(frozen=True)
class EpochPlan:
    quota: int
    draws: tuple[Draw, ...]
    seed: int
    formats: tuple[TargetFormat, ...] = ALL_FORMATS

    def _check_batch_size(self, batch_size):
        n = len(self.formats)
        if batch_size < n or batch_size % n:
            raise SamplerError(f"Batch size {batch_size} is not a multiple of {n} formats")

    def batches(self, batch_size: int) -> Iterator[tuple[Draw, ...]]:
        self._check_batch_size(batch_size)
        for start in range(0, len(self.draws), batch_size):
            yield self.draws[start:start + batch_size]

    def is_balanced(self, batch_size: int) -> bool:
        """Every window of ``batch_size`` consecutive draws holds the same count per format."""
        self._check_batch_size(batch_size)
        per_format = batch_size // len(self.formats)
        for start in range(0, len(self.draws) - batch_size + 1):
            window = self.draws[start:start + batch_size]
            for fmt in self.formats:
                if sum(1 for d in window if d.format is fmt) != per_format:
                    return False
        return True


def sample_epoch(catalog: Mapping[TargetFormat, Sequence[tuple[str, int]]], quota: int, seed: int) -> EpochPlan:
    """Uniform with-replacement draws, ``quota`` per format, interleaved round-robin."""
    if quota < 1:
        raise SamplerError(f"quota must be positive, got {quota}")
    formats = tuple(f for f in ALL_FORMATS if f in catalog)
    if not formats:
        raise SamplerError("Catalog holds no target formats")

    rng = np.random.default_rng(seed)
    picks = {}
    for fmt in formats:
        items = catalog[fmt]
        if not items:
            raise SamplerError(f"No annotated slices available for format '{fmt.value}'")
        picks[fmt] = [items[i] for i in rng.integers(0, len(items), size=quota)]

    draws = []
    for k in range(quota):
        for fmt in formats:
            source_id, z = picks[fmt][k]
            draws.append(Draw(fmt, str(source_id), int(z), len(draws)))
    logger.debug(f"Epoch plan seed={seed}: {len(draws)} draws over {[f.value for f in formats]}")
    return EpochPlan(quota=quota, draws=tuple(draws), seed=seed, formats=formats)


@dataclass(frozen=True)
class CatalogEntry:
    path: str
    format: str
    annotated_slices: tuple[int, ...]
    ct: str = ""

    def to_json(self) -> dict:
        return {"path": self.path, "format": self.format,
                "annotated_slices": list(self.annotated_slices), "ct": self.ct}


def load_catalog(path) -> list[CatalogEntry]:
    """Read a catalog manifest: JSON list of {path, format, annotated_slices, ct}."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SamplerError(f"Cannot read catalog {path}: {e}") from e
    if not isinstance(raw, list):
        raise SamplerError(f"Catalog {path} must be a JSON list")

    base = path.parent
    entries = []
    for i, item in enumerate(raw):
        try:
            entries.append(CatalogEntry(
                path=str(base / item["path"]),
                format=str(item["format"]).lower(),
                annotated_slices=tuple(int(z) for z in item.get("annotated_slices", [])),
                ct=str(base / item["ct"]) if item.get("ct") else "",
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise SamplerError(f"Catalog {path} entry {i}: {e}") from e
    return entries


def write_catalog(entries: Sequence[CatalogEntry], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([e.to_json() for e in entries], f, indent=2)
    return path


@dataclass(frozen=True)
class CropBox:
    offset: tuple[int, ...]
    size: tuple[int, ...]
    source_shape: tuple[int, ...]


def crop_to_lung(volume, mask, margin: int = 2, min_size: Sequence[int] | None = None):
    """Tight box around ``mask`` plus ``margin``, optionally grown to ``min_size``."""
    volume = np.asarray(volume)
    mask = np.asarray(mask, dtype=bool)
    if volume.shape != mask.shape:
        raise CropError(f"Volume {volume.shape} and mask {mask.shape} differ in shape")
    if not mask.any():
        raise CropError("Cannot crop to an empty lung mask")

    coords = np.argwhere(mask)
    lo = np.maximum(coords.min(axis=0) - margin, 0)
    hi = np.minimum(coords.max(axis=0) + margin + 1, volume.shape)
    if min_size is not None:
        for axis, (want, n) in enumerate(zip(min_size, volume.shape)):
            want = min(int(want), n)
            deficit = want - (hi[axis] - lo[axis])
            if deficit > 0:
                lo[axis] -= deficit // 2
                hi[axis] += deficit - deficit // 2
                if lo[axis] < 0:
                    hi[axis] -= lo[axis]
                    lo[axis] = 0
                if hi[axis] > n:
                    lo[axis] -= hi[axis] - n
                    hi[axis] = n

    box = CropBox(offset=tuple(int(v) for v in lo), size=tuple(int(v) for v in hi - lo),
                  source_shape=tuple(volume.shape))
    window = tuple(slice(a, b) for a, b in zip(lo, hi))
    return volume[window].copy(), box


def uncrop(cropped, box: CropBox, fill=0):
    out = np.full(box.source_shape, fill, dtype=np.asarray(cropped).dtype)
    window = tuple(slice(o, o + s) for o, s in zip(box.offset, box.size))
    out[window] = cropped
    return out
