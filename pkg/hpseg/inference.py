"""Whole-volume prediction by stacking 2.5D slice predictions."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError, logger
from .hierarchy import MASK_NAMES, DualProbField, PolyProbField, compose_masks
from .network import SCALES, HPSegNet, ModelConfig, load_checkpoint
from .phantom import AIRWAY, BACKGROUND, CONSOLIDATION, GGO, HEALTHY, VESSEL
from .pipeline import STAGE_HU, CTVolume, extract_slab, normalize_volume
from .volume_io import write_volume


@dataclass(eq=False)
class VolumePrediction:
    poly: np.ndarray
    airway: np.ndarray
    vessel: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def depth(self) -> int:
        return self.poly.shape[0]


def pad_inplane(data, multiple):
    pads = [(-n) % multiple for n in data.shape[1:]]
    if not any(pads):
        return data
    mode = "reflect" if all(p < n for p, n in zip(pads, data.shape[1:])) else "symmetric"
    return np.pad(data, ((0, 0), (0, pads[0]), (0, pads[1])), mode=mode)


def predict_volume(volume, model, batch_size: int = 8, expected: ModelConfig | None = None) -> VolumePrediction:
    """Softmax of the full-resolution heads for every axial slice.

    ``volume`` is a CTVolume (normalized here if still in HU) or an already
    normalized D×H×W array; ``model`` is a network or a checkpoint path.
    """
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model, expected)
    if isinstance(volume, CTVolume):
        spacing = volume.spacing
        if volume.stage == STAGE_HU:
            volume = normalize_volume(volume)
        data = volume.data
    else:
        spacing = (1.0, 1.0, 1.0)
        data = np.asarray(volume)
    if data.ndim != 3 or data.shape[0] < 1:
        raise ShapeError(f"Expected a D×H×W volume with D >= 1, got shape {data.shape}")

    height, width = data.shape[1:]
    padded = pad_inplane(data.astype(np.float32), SCALES[-1])
    dtype = next(model.parameters()).dtype

    poly, airway, vessel = [], [], []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, padded.shape[0], batch_size):
                zs = range(start, min(start + batch_size, padded.shape[0]))
                x = torch.from_numpy(np.stack([extract_slab(padded, z) for z in zs])).to(dtype)
                out = model(x)
                poly.append(F.softmax(out.poly[0], dim=1)[..., :height, :width].numpy())
                airway.append(F.softmax(out.airway[0], dim=1)[..., :height, :width].numpy())
                vessel.append(F.softmax(out.vessel[0], dim=1)[..., :height, :width].numpy())
    finally:
        model.train(was_training)

    logger.debug(f"Predicted volume of depth {data.shape[0]} at {height}×{width}")
    return VolumePrediction(np.concatenate(poly), np.concatenate(airway), np.concatenate(vessel),
                            tuple(spacing))


def derive_masks(pred: VolumePrediction) -> dict[str, np.ndarray]:
    """Compose the seven binary masks slice by slice."""
    slices = [
        compose_masks(PolyProbField(pred.poly[z]), DualProbField(pred.airway[z], pred.vessel[z]))
        for z in range(pred.depth)
    ]
    return {name: np.stack([s[name] for s in slices]) for name in MASK_NAMES}


def combined_labels(masks: Mapping[str, np.ndarray]) -> np.ndarray:
    """Six-class silver layout; airway overrides vessel, which overrides the lung classes."""
    out = np.full(masks["lung"].shape, BACKGROUND, dtype=np.uint8)
    out[masks["healthy"]] = HEALTHY
    out[masks["ggo"]] = GGO
    out[masks["consolidation"]] = CONSOLIDATION
    out[masks["vessel"]] = VESSEL
    out[masks["airway"]] = AIRWAY
    return out


def write_masks(masks: Mapping[str, np.ndarray], out_dir, spacing=(1.0, 1.0, 1.0)) -> dict[str, Path]:
    """One RVOL label file per mask, plus ``combined.rvol`` when all seven are given."""
    out_dir = Path(out_dir)
    paths = {}
    for name, mask in masks.items():
        paths[name] = write_volume(out_dir / f"{name}.rvol", mask.astype(np.uint8), spacing,
                                   kind="labels", format_tag=f"mask:{name}")
    if set(MASK_NAMES) <= set(masks):
        paths["combined"] = write_volume(out_dir / "combined.rvol", combined_labels(masks), spacing,
                                         kind="labels", format_tag="silver")
    logger.info(f"Wrote {len(paths)} mask volumes to {out_dir}")
    return paths


def infer(model: HPSegNet, volume: CTVolume, out_dir) -> dict[str, Path]:
    masks = derive_masks(predict_volume(volume, model))
    return write_masks(masks, out_dir, volume.spacing)
