"""Training loop: balanced batches, total loss, AdamW steps, best-epoch retention."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .engine import OptimState, adamw_step, decay_lr, grad, make_optimizer
from .errors import BatchCompositionError, ConfigError, TrainingError, logger
from .hierarchy import ALL_FORMATS, TargetFormat, encode_target, reduce_probs
from .inference import VolumePrediction, pad_inplane, predict_volume
from .loss import combined, silver_loss, total_loss
from .network import SCALES, HPSegNet, ModelConfig, load_checkpoint, save_checkpoint
from .phantom import AIRWAY, CONSOLIDATION, GGO, HEALTHY, VESSEL, Phantom, as_format
from .pipeline import (AugmentConfig, CatalogEntry, Draw, Slab, augment, crop_to_lung, draw_rng,
                       extract_slab, normalize_hu, sample_epoch)
from .volume_io import read_volume

MODES = ("gold", "silver-pretrain")
SILVER = "silver"
SILVER_LABELS = (0, HEALTHY, GGO, CONSOLIDATION, VESSEL, AIRWAY)


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 40
    quota: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-5
    lr_decay: float = 0.985
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    mode: str = "gold"
    formats: tuple[TargetFormat, ...] = ALL_FORMATS
    deep_supervision: bool = True
    crop_lung: bool = False
    silver_steps: int = 200
    init_checkpoint: str = ""
    checkpoint: str = "checkpoint.hpck"
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if not self.formats:
            raise ConfigError("at least one training format is required")
        n = len(self.formats)
        if self.batch_size < n or self.batch_size % n:
            raise ConfigError(f"batch size {self.batch_size} must be a multiple of {n} formats")
        if self.epochs < 1 or self.quota < 1:
            raise ConfigError("epochs and quota must be positive")
        if self.quota * n < self.batch_size:
            raise ConfigError(
                f"quota {self.quota} over {n} formats yields {self.quota * n} draws per epoch, "
                f"fewer than one batch of {self.batch_size}"
            )
        if self.mode == "silver-pretrain" and self.silver_steps < 1:
            raise ConfigError("silver pretraining needs at least one step per epoch")
        if self.model.patch_size != self.augment.patch_size:
            raise ConfigError(
                f"model patch size {self.model.patch_size} differs from augmentation patch size "
                f"{self.augment.patch_size}"
            )
        self.model.validate()
        return self


@dataclass(eq=False)
class VolumeRecord:
    """A normalized CT volume with one annotation (or the full six-class truth)."""
    source_id: str
    intensity: np.ndarray
    labels: np.ndarray
    format: TargetFormat | None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def silver(self) -> bool:
        return self.format is None

    @property
    def annotated(self) -> list[int]:
        flat = self.labels.reshape(self.labels.shape[0], -1)
        return [int(z) for z in np.flatnonzero(flat.any(axis=1))]


def _crop_lung(source_id, image, labels, patch_size):
    min_size = (labels.shape[0], patch_size, patch_size)
    cropped, box = crop_to_lung(image, labels > 0, min_size=min_size)
    labels, _ = crop_to_lung(labels, labels > 0, min_size=min_size)
    logger.debug(f"{source_id}: lung crop {box.size} at {box.offset}")
    return cropped, labels


def records_from_phantom(ph: Phantom, formats: Iterable[TargetFormat] = ALL_FORMATS, source_id: str = "",
                         silver: bool = False, crop_lung: bool = False, patch_size: int = 64) -> list[VolumeRecord]:
    source_id = source_id or f"phantom-{ph.seed}"
    intensity = normalize_hu(ph.ct).astype(np.float32)
    if silver:
        return [VolumeRecord(source_id, intensity, ph.truth.copy(), None, ph.spacing)]

    records = []
    for fmt in formats:
        labels = as_format(ph, fmt).labels
        image = intensity
        if crop_lung and fmt is TargetFormat.LUNG:
            image, labels = _crop_lung(source_id, intensity, labels, patch_size)
        records.append(VolumeRecord(source_id, image, labels, fmt, ph.spacing))
    return records


def records_from_catalog(entries: Sequence[CatalogEntry], crop_lung: bool = False,
                         patch_size: int = 64) -> list[VolumeRecord]:
    """One record per entry; entries sharing a CT path share its source id and intensity array.

    With ``crop_lung`` the lung-format entries are cut to their lung box.
    """
    records, volumes = [], {}
    for entry in entries:
        if not entry.ct:
            raise TrainingError(f"Catalog entry {entry.path} has no CT volume")
        if entry.ct not in volumes:
            ct, ct_header = read_volume(entry.ct)
            volumes[entry.ct] = (normalize_hu(ct).astype(np.float32), ct_header.spacing)
        intensity, spacing = volumes[entry.ct]
        labels, _ = read_volume(entry.path)
        if labels.shape != intensity.shape:
            raise TrainingError(f"{entry.path}: labels {labels.shape} do not match CT {intensity.shape}")
        fmt = None if entry.format == SILVER else TargetFormat.parse(entry.format)
        labels = labels.astype(np.int64)
        if crop_lung and fmt is TargetFormat.LUNG:
            intensity, labels = _crop_lung(entry.ct, intensity, labels, patch_size)
        records.append(VolumeRecord(entry.ct, intensity, labels, fmt, spacing))
    return records


@dataclass(eq=False)
class Batch:
    x: torch.Tensor
    groups: dict[TargetFormat, tuple[torch.Tensor, torch.Tensor]]
    draws: tuple[Draw, ...]

    def counts(self) -> dict[TargetFormat, int]:
        return {fmt: len(index) for fmt, (index, _) in self.groups.items()}


def assemble_batch(draws: Sequence[Draw], records: Mapping[tuple, VolumeRecord], aug: AugmentConfig,
                   epoch_seed: int, formats: Sequence[TargetFormat], dtype=torch.float32) -> Batch:
    """Augmented slabs for ``draws``; every format must appear equally often."""
    per_format = len(draws) // len(formats)
    counts = defaultdict(int)
    for d in draws:
        counts[d.format] += 1
    if len(draws) % len(formats) or any(counts[f] != per_format for f in formats) or set(counts) - set(formats):
        raise BatchCompositionError(
            f"Unbalanced batch: {({f.value: n for f, n in counts.items()})}, expected {per_format} per format"
        )

    slabs = []
    for d in draws:
        record = records[(d.format, d.source_id)]
        slab = Slab(extract_slab(record.intensity, d.slice_index),
                    encode_target(record.labels[d.slice_index], d.format), d.format,
                    d.source_id, d.slice_index)
        slabs.append(augment(slab, draw_rng(epoch_seed, d.index), aug))

    x = torch.from_numpy(np.stack([s.intensity for s in slabs])).to(dtype)
    groups = {}
    for fmt in ALL_FORMATS:
        rows = [i for i, s in enumerate(slabs) if s.format is fmt]
        if rows:
            target = torch.from_numpy(np.stack([slabs[i].target for i in rows])).to(dtype)
            groups[fmt] = (torch.tensor(rows, dtype=torch.long), target)
    return Batch(x=x, groups=groups, draws=tuple(draws))


def select_best_epoch(losses: Sequence[float]) -> int:
    """Index of the minimal loss; the earliest epoch wins ties."""
    if not losses:
        raise TrainingError("No validation losses recorded")
    best = 0
    for i, value in enumerate(losses):
        if value < losses[best]:
            best = i
    return best


def volume_loss(pred: VolumePrediction, labels, fmt: TargetFormat) -> float:
    """Full-resolution combined loss of one volume prediction against ``fmt`` labels."""
    if fmt.polymorphic:
        probs = reduce_probs(pred.poly, fmt, axis=1)
    else:
        probs = getattr(pred, fmt.value)
    probs = torch.from_numpy(np.ascontiguousarray(np.moveaxis(probs, 1, 0))).double().unsqueeze(0)
    target = torch.from_numpy(encode_target(labels, fmt)).double().unsqueeze(0)
    return float(combined(probs, target))


def validate(model, records: Sequence[VolumeRecord], expected: ModelConfig | None = None) -> float:
    """Mean over formats of the mean per-volume L0 loss."""
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model, expected)
    records = [r for r in records if not r.silver]
    if not records:
        raise TrainingError("Validation set is empty")

    predictions = {}
    per_format = defaultdict(list)
    for record in sorted(records, key=lambda r: (r.format.value, r.source_id)):
        key = (record.source_id, record.intensity.shape)
        if key not in predictions:
            predictions[key] = predict_volume(record.intensity, model)
        per_format[record.format].append(volume_loss(predictions[key], record.labels, record.format))

    means = [float(np.mean(per_format[f])) for f in ALL_FORMATS if f in per_format]
    return float(np.mean(means))


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    best_epoch: int
    val_losses: list[float]


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.default_rng([int(seed), int(epoch)]).integers(2 ** 31))


def _dump_batch(out_dir: Path, epoch: int, step: int, batch: Batch) -> Path:
    path = out_dir / f"nan_batch_e{epoch}_s{step}.npz"
    draws = json.dumps([{"format": d.format.value, "source_id": d.source_id, "slice": d.slice_index}
                        for d in batch.draws])
    np.savez(path, x=batch.x.numpy(), draws=np.array(draws))
    return path


def _init_model(cfg: TrainConfig) -> HPSegNet:
    if cfg.init_checkpoint:
        model, _ = load_checkpoint(cfg.init_checkpoint, expected=cfg.model)
        logger.info(f"Initialized from {cfg.init_checkpoint}")
        return model
    return HPSegNet(cfg.model)


def _optimizer(cfg: TrainConfig, model) -> OptimState:
    return make_optimizer(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                          betas=cfg.betas, eps=cfg.eps, decay=cfg.lr_decay)


def _step(model, opt: OptimState, loss):
    params = list(model.parameters())
    adamw_step(opt, params, grad(loss, params))


@contextmanager
def _seeded(seed: int):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _resolve(out_dir: Path, name: str) -> Path:
    path = Path(name)
    return path if path.is_absolute() else out_dir / path


def train(cfg: TrainConfig, records: Sequence[VolumeRecord], out_dir,
          val_records: Sequence[VolumeRecord] | None = None) -> TrainResult:
    """Gold-mode training; keeps the weights of the epoch with the lowest validation loss."""
    cfg.validate()
    if cfg.mode != "gold":
        return pretrain_silver(cfg, records, out_dir)
    with _seeded(cfg.seed):
        return _train_gold(cfg, records, Path(out_dir), val_records)


def _train_gold(cfg: TrainConfig, records, out_dir: Path, val_records) -> TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)

    formats = tuple(cfg.formats)
    by_key = {(r.format, r.source_id): r for r in records if not r.silver and r.format in formats}
    catalog = {fmt: [(sid, z) for (f, sid), r in sorted(by_key.items(), key=lambda kv: kv[0][1])
                     if f is fmt for z in r.annotated]
               for fmt in formats}
    missing = [f.value for f in formats if not catalog[f]]
    if missing:
        raise TrainingError(f"No training data for formats {missing}")
    val_records = list(records if val_records is None else val_records)

    model = _init_model(cfg)
    opt = _optimizer(cfg, model)
    checkpoint = _resolve(out_dir, cfg.checkpoint)
    log_path = out_dir / "train_log.jsonl"
    val_losses: list[float] = []

    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            lr = decay_lr(opt, epoch)
            epoch_seed = _epoch_seed(cfg.seed, epoch)
            plan = sample_epoch(catalog, cfg.quota, epoch_seed)
            model.train()
            step_losses = []
            for step, draws in enumerate(plan.batches(cfg.batch_size)):
                if len(draws) < cfg.batch_size:
                    logger.debug(f"Epoch {epoch}: dropping incomplete final batch of {len(draws)}")
                    break
                batch = assemble_batch(draws, by_key, cfg.augment, epoch_seed, formats)
                breakdown = total_loss(model(batch.x), batch.groups, cfg.deep_supervision)
                if not math.isfinite(breakdown.total):
                    dump = _dump_batch(out_dir, epoch, step, batch)
                    raise TrainingError(f"Non-finite loss at epoch {epoch} step {step}; batch dumped to {dump}")
                _step(model, opt, breakdown.loss)
                step_losses.append(breakdown.total)
                log.write(breakdown.to_json(epoch=epoch, step=step, lr=lr) + "\n")

            val_loss = validate(model, val_records)
            val_losses.append(val_loss)
            log.write(json.dumps({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(step_losses)),
                                  "val_loss": val_loss}, sort_keys=True) + "\n")
            log.flush()
            logger.info(f"Epoch {epoch}: train {np.mean(step_losses):.4f} val {val_loss:.4f} lr {lr:.3e}")

            if select_best_epoch(val_losses) == epoch:
                save_checkpoint(checkpoint, model, opt.to_section())

    best = select_best_epoch(val_losses)
    logger.info(f"Best epoch {best} (validation loss {val_losses[best]:.4f}) saved to {checkpoint}")
    return TrainResult(checkpoint=checkpoint, log=log_path, best_epoch=best, val_losses=val_losses)


def pretrain_silver(cfg: TrainConfig, records: Sequence[VolumeRecord], out_dir) -> TrainResult:
    """Silver-standard pretraining: one full six-class slice per step, all heads supervised."""
    with _seeded(cfg.seed):
        return _pretrain_silver(cfg, records, Path(out_dir))


def _pretrain_silver(cfg: TrainConfig, records, out_dir: Path) -> TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)

    silver = [r for r in records if r.silver]
    if not silver:
        raise TrainingError("Silver pretraining needs six-class truth volumes")
    for r in silver:
        absent = sorted(set(SILVER_LABELS) - set(np.unique(r.labels).tolist()))
        if absent:
            raise TrainingError(f"{r.source_id}: silver truth lacks structure labels {absent}")
    slices = [(i, z) for i, r in enumerate(silver) for z in r.annotated]
    # full slices go through the network, so pad them in-plane to the coarsest scale
    padded = [(pad_inplane(r.intensity, SCALES[-1]), pad_inplane(r.labels, SCALES[-1])) for r in silver]

    model = _init_model(cfg)
    opt = _optimizer(cfg, model)
    checkpoint = _resolve(out_dir, cfg.checkpoint)
    log_path = out_dir / "pretrain_log.jsonl"
    losses = []

    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            lr = decay_lr(opt, epoch)
            rng = np.random.default_rng(_epoch_seed(cfg.seed, epoch))
            model.train()
            epoch_losses = []
            for step in range(cfg.silver_steps):
                i, z = slices[int(rng.integers(len(slices)))]
                record = silver[i]
                intensity, labels = padded[i]
                x = torch.from_numpy(extract_slab(intensity, z)[None].copy()).float()
                loss = silver_loss(model(x), labels[z][None], cfg.deep_supervision)
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"Non-finite silver loss at epoch {epoch} step {step} ({record.source_id}, z={z})")
                _step(model, opt, loss)
                epoch_losses.append(loss.item())
                log.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, "mode": "silver-pretrain",
                                      "total": loss.item()}, sort_keys=True) + "\n")
            losses.append(float(np.mean(epoch_losses)))
            logger.info(f"Silver epoch {epoch}: loss {losses[-1]:.4f}")

    save_checkpoint(checkpoint, model, opt.to_section())
    return TrainResult(checkpoint=checkpoint, log=log_path, best_epoch=len(losses) - 1, val_losses=losses)

