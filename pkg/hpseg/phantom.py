"""Synthetic chest CT phantoms with complete six-structure ground truth.

Truth layout follows the silver six-class convention:
0 background, 1 healthy lung, 2 GGO, 3 consolidation, 4 vessel, 5 airway.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PhantomSpecError, logger
from .hierarchy import HierLabelVolume, TargetFormat

BACKGROUND, HEALTHY, GGO, CONSOLIDATION, VESSEL, AIRWAY = range(6)
SILVER_THRESHOLD_HU = -300.0

_FORMAT_LUT = {
    TargetFormat.LUNG: np.array([0, 1, 1, 1, 0, 0], dtype=np.uint8),
    TargetFormat.LESION: np.array([0, 1, 2, 2, 0, 0], dtype=np.uint8),
    TargetFormat.SEPARATION: np.array([0, 1, 2, 3, 0, 0], dtype=np.uint8),
    TargetFormat.AIRWAY: np.array([0, 0, 0, 0, 0, 1], dtype=np.uint8),
    TargetFormat.VESSEL: np.array([0, 0, 0, 0, 1, 0], dtype=np.uint8),
}


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (3.0, 6.0)
    # radius fraction of the consolidation core inside each lesion
    core_fraction: tuple[float, float] = (0.0, 0.6)
    tree_depth: int = 3
    branching: int = 2
    branch_angle: float = 35.0
    airway_radius: float = 2.0
    vessel_radius: float = 1.8
    air_hu: float = -1000.0
    body_hu: float = 40.0
    lung_hu: float = -800.0
    ggo_hu: float = -500.0
    consolidation_hu: float = -100.0
    airway_hu: float = -1000.0
    vessel_hu: float = 100.0
    noise_sigma: float = 20.0
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise PhantomSpecError(f"dims must be at least 32 per axis for tree generation, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise PhantomSpecError(f"spacing must be positive, got {self.spacing}")
        if self.branching not in (1, 2):
            raise PhantomSpecError(f"branching factor must be 1 or 2, got {self.branching}")
        if self.tree_depth < 1:
            raise PhantomSpecError(f"tree depth must be >= 1, got {self.tree_depth}")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise PhantomSpecError(f"invalid lesion count range {self.lesion_count}")
        lo, hi = self.lesion_radius
        if lo <= 0 or hi < lo:
            raise PhantomSpecError(f"invalid lesion radius range {self.lesion_radius}")
        lo, hi = self.core_fraction
        if lo < 0 or hi > 1 or hi < lo:
            raise PhantomSpecError(f"invalid core fraction range {self.core_fraction}")
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise sigma must be non-negative")
        if min(self.airway_radius, self.vessel_radius) < 1.0:
            raise PhantomSpecError("tube radii must be at least one voxel")
        if not self.ggo_hu <= SILVER_THRESHOLD_HU < self.consolidation_hu:
            raise PhantomSpecError(
                f"GGO mean must be <= {SILVER_THRESHOLD_HU} HU and consolidation mean above it"
            )


@dataclass(frozen=True)
class TubeSegment:
    level: int
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)


@dataclass(eq=False)
class Phantom:
    ct: np.ndarray
    truth: np.ndarray
    spacing: tuple[float, float, float]
    seed: int
    segments: dict[str, tuple[TubeSegment, ...]] = field(default_factory=dict)

    @property
    def shape(self):
        return self.truth.shape


def _grow_tree(rng, start, axis, spread, phi, length, radius, level, spec, out):
    """Recursive planar tree in the plane of unit vectors ``axis`` and ``spread``.

    ``phi`` is measured from ``axis`` towards ``spread``.
    """
    direction = math.cos(phi) * axis + math.sin(phi) * spread
    end = np.asarray(start) + length * direction
    out.append(TubeSegment(level, tuple(float(v) for v in start), tuple(float(v) for v in end), radius))
    if level + 1 >= spec.tree_depth:
        return

    theta = math.radians(spec.branch_angle)
    if spec.branching == 2:
        turns = (-theta, theta)
    else:
        turns = (theta if level % 2 == 0 else -theta,)
    for turn in turns:
        jitter = math.radians(rng.uniform(-3.0, 3.0))
        child_length = length * 0.85 * rng.uniform(0.95, 1.05)
        child_radius = max(1.0, radius * 0.8)
        _grow_tree(rng, end, axis, spread, phi + turn + jitter, child_length, child_radius, level + 1, spec, out)


def _rasterize(segments, dims) -> np.ndarray:
    """Union of capsules (points within ``radius`` of each segment)."""
    mask = np.zeros(dims, dtype=bool)
    upper = np.array(dims) - 1
    for seg in segments:
        p, q = np.array(seg.start), np.array(seg.end)
        lo = np.clip(np.floor(np.minimum(p, q) - seg.radius - 1), 0, upper).astype(int)
        hi = np.clip(np.ceil(np.maximum(p, q) + seg.radius + 1), 0, upper).astype(int)
        grid = np.stack(np.meshgrid(
            *(np.arange(a, b + 1) for a, b in zip(lo, hi)), indexing="ij"
        ), axis=-1).astype(np.float64)
        v = q - p
        t = np.clip(((grid - p) @ v) / max(float(v @ v), 1e-12), 0.0, 1.0)
        closest = p + t[..., None] * v
        inside = ((grid - closest) ** 2).sum(axis=-1) <= seg.radius ** 2
        mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= inside
    return mask


def generate(spec: PhantomSpec) -> Phantom:
    """Build a phantom; identical specs give bit-identical volumes."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D, H, W = spec.dims
    zz, yy, xx = np.indices(spec.dims, dtype=np.float64)
    cz, cy, cx = (D - 1) / 2, (H - 1) / 2, (W - 1) / 2

    truth = np.zeros(spec.dims, dtype=np.uint8)
    body = ((yy - cy) / (0.45 * H)) ** 2 + ((xx - cx) / (0.47 * W)) ** 2 <= 1.0
    lung = np.zeros(spec.dims, dtype=bool)
    for side in (-1, 1):
        lung |= (((zz - cz) / (0.42 * D)) ** 2
                 + ((yy - cy) / (0.33 * H)) ** 2
                 + ((xx - (cx + side * 0.22 * W)) / (0.17 * W)) ** 2) <= 1.0
    truth[lung] = HEALTHY

    lung_voxels = np.argwhere(lung)
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        center = lung_voxels[rng.integers(len(lung_voxels))]
        radius = rng.uniform(*spec.lesion_radius)
        core = rng.uniform(*spec.core_fraction) * radius
        dist = np.sqrt((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)
        blob = (dist <= radius) & lung
        truth[blob & (truth != CONSOLIDATION)] = GGO
        truth[(dist <= core) & lung] = CONSOLIDATION

    # both trees run along y with a slight z tilt and spread in x; the airway fills the
    # low slices and the vessel tree, grown the opposite way, the high ones
    root = 0.22 * min(H, W)
    axis = np.array([0.15, 1.0, 0.0]) / math.hypot(0.15, 1.0)
    spread = np.array([0.0, 0.0, 1.0])
    segments = {}
    airway_segments, vessel_segments = [], []
    _grow_tree(rng, (0.2 * D, 0.2 * H, cx), axis, spread, 0.0, root, spec.airway_radius, 0, spec,
               airway_segments)
    _grow_tree(rng, (D - 1 - 0.2 * D, H - 1 - 0.2 * H, cx), -axis, spread, 0.0, root, spec.vessel_radius, 0, spec,
               vessel_segments)
    segments["airway"] = tuple(airway_segments)
    segments["vessel"] = tuple(vessel_segments)
    truth[_rasterize(vessel_segments, spec.dims)] = VESSEL
    truth[_rasterize(airway_segments, spec.dims)] = AIRWAY

    ct = np.full(spec.dims, spec.air_hu, dtype=np.float64)
    ct[body] = spec.body_hu
    for label, hu in ((HEALTHY, spec.lung_hu), (GGO, spec.ggo_hu), (CONSOLIDATION, spec.consolidation_hu),
                      (VESSEL, spec.vessel_hu), (AIRWAY, spec.airway_hu)):
        ct[truth == label] = hu
    if spec.noise_sigma > 0:
        ct += rng.normal(0.0, spec.noise_sigma, size=spec.dims)

    # lesion intensities stay on their side of the silver threshold
    ggo = truth == GGO
    ct[ggo] = np.minimum(ct[ggo], SILVER_THRESHOLD_HU)
    cons = truth == CONSOLIDATION
    ct[cons] = np.maximum(ct[cons], SILVER_THRESHOLD_HU + 1.0)

    logger.debug(
        f"Phantom seed={spec.seed} dims={spec.dims}: {n_lesions} lesions, "
        f"{len(airway_segments)} airway and {len(vessel_segments)} vessel segments"
    )
    return Phantom(ct=ct.astype(np.float32), truth=truth, spacing=tuple(spec.spacing),
                   seed=spec.seed, segments=segments)


def as_format(ph: Phantom, fmt: TargetFormat) -> HierLabelVolume:
    """Export the partial annotation a dataset of format ``fmt`` would carry."""
    return HierLabelVolume(labels=_FORMAT_LUT[fmt][ph.truth], format=fmt, spacing=ph.spacing)


def silver_labels(ct, lesion_mask) -> tuple[np.ndarray, np.ndarray]:
    """Split a lesion mask into GGO (<= -300 HU) and consolidation (> -300 HU)."""
    ct = np.asarray(ct)
    lesion_mask = np.asarray(lesion_mask, dtype=bool)
    ggo = lesion_mask & (ct <= SILVER_THRESHOLD_HU)
    consolidation = lesion_mask & (ct > SILVER_THRESHOLD_HU)
    return ggo, consolidation


def label_masks(labels) -> dict[str, np.ndarray]:
    """Seven binary masks from a six-class label volume."""
    t = np.asarray(labels)
    return {
        "lung": (t >= HEALTHY) & (t <= CONSOLIDATION),
        "healthy": t == HEALTHY,
        "lesion": (t == GGO) | (t == CONSOLIDATION),
        "ggo": t == GGO,
        "consolidation": t == CONSOLIDATION,
        "airway": t == AIRWAY,
        "vessel": t == VESSEL,
    }


def truth_masks(ph: Phantom) -> dict[str, np.ndarray]:
    return label_masks(ph.truth)


def format_masks(labels, fmt: TargetFormat) -> dict[str, np.ndarray]:
    """The masks a partial annotation of format ``fmt`` actually determines."""
    t = np.asarray(labels)
    if fmt is TargetFormat.AIRWAY:
        return {"airway": t == 1}
    if fmt is TargetFormat.VESSEL:
        return {"vessel": t == 1}
    masks = {"lung": t >= 1}
    if fmt is TargetFormat.LESION:
        masks["lesion"] = t == 2
    elif fmt is TargetFormat.SEPARATION:
        masks.update(healthy=t == 1, lesion=t >= 2, ggo=t == 2, consolidation=t == 3)
    return masks
