"""Hierarchical polymorphic multitask loss.

All functions take batched tensors laid out N×C×spatial (channel axis 1).
Numpy inputs are accepted and promoted to float64 tensors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError, ShapeError
from .hierarchy import ALL_FORMATS, TargetFormat, reduce_probs
from .network import NetworkOutputs

DSL_WEIGHTS = (0.75, 0.125, 0.0625, 0.03125, 0.015625)
NORMALIZATION_TOLERANCE = 1e-4
LOG_CLAMP = 1e-12
SILVER_CHANNELS = 6


def _as_tensor(x):
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.ndim < 2:
        raise ShapeError(f"Expected N×C×... tensors, got {tuple(pred.shape)}")


def _check_normalized(pred):
    with torch.no_grad():
        if pred.numel() and (pred.sum(dim=1) - 1.0).abs().max().item() > NORMALIZATION_TOLERANCE:
            raise ContractError("Predictions must sum to 1 over the channel axis")


def gdl(pred, target):
    """Generalized Dice loss over foreground channels, mean over batch items.

    Channel weights are 1/area² of the target; channels absent from an item's
    target are dropped, and an item with no foreground at all contributes 0.
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target).to(pred.dtype)
    _check_pair(pred, target)
    _check_normalized(pred)

    p = pred[:, 1:].flatten(2)
    y = target[:, 1:].flatten(2)
    area = y.sum(dim=2)
    present = area > 0
    weights = torch.where(present, 1.0 / area.clamp_min(1.0) ** 2, torch.zeros_like(area))

    numerator = (weights * (p * y).sum(dim=2)).sum(dim=1)
    denominator = (weights * (p + y).sum(dim=2)).sum(dim=1)
    has_foreground = present.any(dim=1)
    safe = torch.where(has_foreground, denominator, torch.ones_like(denominator))
    per_item = torch.where(has_foreground, 1.0 - 2.0 * numerator / safe, torch.zeros_like(safe))
    return per_item.mean()


def cross_entropy(pred, target):
    """Mean over pixels of -sum_c y_c log(p_c), background included."""
    pred = _as_tensor(pred)
    target = _as_tensor(target).to(pred.dtype)
    _check_pair(pred, target)
    return -(target * torch.log(pred.clamp_min(LOG_CLAMP))).sum(dim=1).mean()


def combined(pred, target):
    return gdl(pred, target) + cross_entropy(pred, target)


def dsl(losses: Sequence):
    """Deep supervision: weights (0.75, 0.125, 0.0625, 0.03125, 0.015625), index 0 = full size."""
    if len(losses) != len(DSL_WEIGHTS):
        raise ContractError(f"Deep supervision needs {len(DSL_WEIGHTS)} scale losses, got {len(losses)}")
    return sum(w * loss for w, loss in zip(DSL_WEIGHTS, losses))


def downsample_target(target, factor: int):
    """Nearest-neighbour downsampling; keeps targets one-hot."""
    if factor == 1:
        return target
    return target[..., ::factor, ::factor]


def _head_probs(outputs: NetworkOutputs, fmt: TargetFormat, scale: int):
    if fmt.polymorphic:
        probs = F.softmax(outputs.poly[scale], dim=1)
        return reduce_probs(probs, fmt, axis=1)
    return F.softmax(outputs.head(fmt.value)[scale], dim=1)


def scale_losses(outputs: NetworkOutputs, target, fmt: TargetFormat) -> list:
    """Combined loss of ``fmt``'s head at every output scale."""
    losses = []
    for s, logits in enumerate(outputs.poly):
        factor = target.shape[-1] // logits.shape[-1]
        target_s = downsample_target(target, factor).to(logits.dtype)
        losses.append(combined(_head_probs(outputs, fmt, s), target_s))
    return losses


def format_loss(outputs: NetworkOutputs, target, formats: Sequence[TargetFormat], deep_supervision=True):
    """Loss of one single-format group; returns (value, per-scale values)."""
    kinds = set(formats)
    if len(kinds) != 1:
        raise ContractError(f"format_loss needs items of one format, got {sorted(f.value for f in kinds)}")
    fmt = kinds.pop()
    target = _as_tensor(target)
    if target.shape[1] != fmt.channels:
        raise ShapeError(f"Target for '{fmt.value}' must have {fmt.channels} channels, got {target.shape[1]}")

    losses = scale_losses(outputs, target, fmt)
    value = dsl(losses) if deep_supervision else losses[0]
    return value, losses


def mean_components(components: Mapping):
    """Arithmetic mean of the per-format components present."""
    if not components:
        raise ContractError("Cannot average an empty set of loss components")
    return sum(components.values()) / len(components)


@dataclass
class LossBreakdown:
    total: float
    components: dict[str, float]
    scales: tuple[float, ...]
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_json(self, **extra) -> str:
        record = dict(extra)
        record.update({"total": self.total, "components": self.components, "scales": list(self.scales)})
        return json.dumps(record, sort_keys=True)


def total_loss(outputs: NetworkOutputs, groups: Mapping[TargetFormat, tuple], deep_supervision=True) -> LossBreakdown:
    """Mean of per-format losses; ``groups`` maps format -> (row indices, one-hot targets)."""
    if not groups:
        raise ContractError("Empty batch")

    values, per_scale = {}, []
    for fmt in ALL_FORMATS:
        if fmt not in groups:
            continue
        index, target = groups[fmt]
        value, losses = format_loss(outputs.select(index), target, [fmt] * len(index), deep_supervision)
        values[fmt.value] = value
        per_scale.append(losses)

    loss = mean_components(values)
    scales = tuple(float(sum(l[s].item() for l in per_scale) / len(per_scale)) for s in range(len(per_scale[0])))
    return LossBreakdown(
        total=float(loss.item()),
        components={name: float(v.item()) for name, v in values.items()},
        scales=scales,
        loss=loss,
    )


def silver_probs(outputs: NetworkOutputs, scale: int):
    """Six-channel field [poly * a0 * v0, a0 * v1 (vessel), a1 (airway)] in truth-label order."""
    poly = F.softmax(outputs.poly[scale], dim=1)
    airway = F.softmax(outputs.airway[scale], dim=1)
    vessel = F.softmax(outputs.vessel[scale], dim=1)
    background = airway[:, :1] * vessel[:, :1]
    return torch.cat([poly * background, airway[:, :1] * vessel[:, 1:], airway[:, 1:]], dim=1)


def silver_loss(outputs: NetworkOutputs, labels, deep_supervision=True):
    """Combined CE+GDL of the six-channel silver field against N×H×W truth labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 3:
        raise ShapeError(f"Silver labels must be N×H×W, got {tuple(labels.shape)}")
    target = F.one_hot(labels, SILVER_CHANNELS).permute(0, 3, 1, 2)
    losses = []
    for s, logits in enumerate(outputs.poly):
        factor = target.shape[-1] // logits.shape[-1]
        losses.append(combined(silver_probs(outputs, s), downsample_target(target, factor).to(logits.dtype)))
    return dsl(losses) if deep_supervision else losses[0]
