"""Target formats and the polymorphic sum-reduction algebra.

The polymorphic head always emits four channels (background, healthy lung,
GGO, consolidation). Coarser annotation formats are matched by summing
channels, so a lesion or lung label still trains all four outputs.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, EncodingError, ShapeError


class TargetFormat(str, enum.Enum):
    LUNG = "lung"
    LESION = "lesion"
    SEPARATION = "separation"
    AIRWAY = "airway"
    VESSEL = "vessel"

    @property
    def channels(self) -> int:
        return _CHANNELS[self]

    @property
    def polymorphic(self) -> bool:
        """True for formats supervised through the polymorphic head."""
        return self in _REDUCTIONS

    @classmethod
    def parse(cls, value) -> "TargetFormat":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            raise EncodingError(f"Unknown target format '{value}'") from e


_CHANNELS = {
    TargetFormat.LUNG: 2,
    TargetFormat.LESION: 3,
    TargetFormat.SEPARATION: 4,
    TargetFormat.AIRWAY: 2,
    TargetFormat.VESSEL: 2,
}

# contiguous (start, stop) channel groups of the 4-channel field
_REDUCTIONS = {
    TargetFormat.SEPARATION: ((0, 1), (1, 2), (2, 3), (3, 4)),
    TargetFormat.LESION: ((0, 1), (1, 2), (2, 4)),
    TargetFormat.LUNG: ((0, 1), (1, 4)),
}

ALL_FORMATS = tuple(TargetFormat)
POLY_CHANNELS = 4
PROB_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class HierLabelVolume:
    labels: np.ndarray
    format: TargetFormat
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeError(f"Label volume must be D×H×W, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise EncodingError(f"Label volume must hold integers, got {labels.dtype}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ShapeError(f"Spacing must be three positive values, got {self.spacing}")
        _check_label_range(labels, self.format)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.labels.shape

    def annotated_slices(self) -> list[int]:
        """Axial indices holding at least one foreground label."""
        return [int(z) for z in np.flatnonzero(self.labels.reshape(self.labels.shape[0], -1).any(axis=1))]


@dataclass(frozen=True, eq=False)
class PolyProbField:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.shape[0] != POLY_CHANNELS:
            raise ShapeError(f"Polymorphic field needs {POLY_CHANNELS} channels, got {probs.shape[0]}")
        _check_distribution(probs, "polymorphic")
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True, eq=False)
class DualProbField:
    airway: np.ndarray
    vessel: np.ndarray

    def __post_init__(self):
        for name in ("airway", "vessel"):
            probs = np.asarray(getattr(self, name))
            if probs.shape[0] != 2:
                raise ShapeError(f"{name} field needs 2 channels, got {probs.shape[0]}")
            _check_distribution(probs, name)
            object.__setattr__(self, name, probs)
        if self.airway.shape != self.vessel.shape:
            raise ShapeError(f"airway {self.airway.shape} and vessel {self.vessel.shape} fields differ")


def _check_label_range(labels, fmt: TargetFormat):
    bad = labels[(labels < 0) | (labels >= fmt.channels)]
    if bad.size:
        raise EncodingError(
            f"Label value {int(bad.flat[0])} out of range for format '{fmt.value}' "
            f"(expected 0..{fmt.channels - 1})"
        )


def _check_distribution(probs, name):
    if probs.size and (probs.min() < -PROB_TOLERANCE or probs.max() > 1 + PROB_TOLERANCE):
        raise ContractError(f"{name} probabilities must lie in [0, 1]")
    if probs.size and np.abs(probs.sum(axis=0) - 1.0).max() > PROB_TOLERANCE:
        raise ContractError(f"{name} probabilities must sum to 1 per pixel")


def encode_target(labels, fmt: TargetFormat) -> np.ndarray:
    """One-hot encode an integer label grid into ``fmt.channels`` leading channels."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise EncodingError(f"Labels must be integers, got {labels.dtype}")
    _check_label_range(labels, fmt)
    onehot = np.eye(fmt.channels, dtype=np.float32)[labels]
    return np.moveaxis(onehot, -1, 0)


def reduce_probs(probs, fmt: TargetFormat, axis: int = 0):
    """Sum the 4-channel polymorphic field down to ``fmt``'s channel layout.

    Works on numpy arrays and torch tensors; with tensors the reduction stays
    on the autograd graph, so summed channels receive identical gradients.
    """
    groups = _REDUCTIONS.get(fmt)
    if groups is None:
        raise ContractError(
            f"Format '{fmt.value}' is supervised by the multitask head and cannot be reduced"
        )
    if probs.shape[axis] != POLY_CHANNELS:
        raise ShapeError(f"Expected {POLY_CHANNELS} channels on axis {axis}, got {probs.shape[axis]}")

    if torch.is_tensor(probs):
        parts = [probs.narrow(axis, start, stop - start).sum(dim=axis) for start, stop in groups]
        return torch.stack(parts, dim=axis)

    probs = np.asarray(probs)
    parts = [np.take(probs, range(start, stop), axis=axis).sum(axis=axis) for start, stop in groups]
    return np.stack(parts, axis=axis)


MASK_NAMES = ("lung", "healthy", "lesion", "ggo", "consolidation", "airway", "vessel")


def compose_masks(poly: PolyProbField, dual: DualProbField) -> dict[str, np.ndarray]:
    """Binary masks from the argmax of each head; ties go to the lowest channel."""
    cls = np.argmax(poly.probs, axis=0)
    return {
        "lung": cls >= 1,
        "healthy": cls == 1,
        "lesion": cls >= 2,
        "ggo": cls == 2,
        "consolidation": cls == 3,
        "airway": np.argmax(dual.airway, axis=0) == 1,
        "vessel": np.argmax(dual.vessel, axis=0) == 1,
    }
