"""Desk-scale ablation matrix over training configurations."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from .errors import ConfigError, logger
from .hierarchy import ALL_FORMATS, TargetFormat
from .inference import derive_masks, predict_volume
from .metrics import dice
from .network import load_checkpoint
from .phantom import Phantom, PhantomSpec, generate, truth_masks
from .pipeline import CTVolume
from .trainer import TrainConfig, pretrain_silver, records_from_phantom, train

POLY = (TargetFormat.LUNG, TargetFormat.LESION, TargetFormat.SEPARATION)


@dataclass(frozen=True)
class AblationRow:
    name: str
    formats: tuple[TargetFormat, ...]
    attention: bool = True
    deep_supervision: bool = True
    pretrain: bool = False


ROWS = {
    "specialized": AblationRow("specialized", (TargetFormat.SEPARATION,), attention=False, deep_supervision=False),
    "hpl": AblationRow("hpl", POLY),
    "hpl_m": AblationRow("hpl_m", ALL_FORMATS),
    "hpl_m_ssp": AblationRow("hpl_m_ssp", ALL_FORMATS, pretrain=True),
}
DICE_TARGETS = ("lung", "lesion", "ggo", "consolidation", "airway", "vessel")


@dataclass
class AblationConfig:
    rows: tuple[str, ...] = tuple(ROWS)
    train_phantoms: int = 8
    heldout_phantoms: int = 20
    separation_fraction: float = 0.1
    pretrain_epochs: int = 2
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        unknown = [r for r in self.rows if r not in ROWS]
        if unknown:
            raise ConfigError(f"Unknown ablation rows {unknown}; choose from {list(ROWS)}")
        if not 0 < self.separation_fraction <= 1:
            raise ConfigError("separation_fraction must lie in (0, 1]")
        if self.train_phantoms < 1 or self.heldout_phantoms < 1:
            raise ConfigError("phantom counts must be positive")
        return self


def _phantoms(cfg: AblationConfig, count: int, offset: int) -> list[Phantom]:
    return [generate(dataclasses.replace(cfg.phantom, seed=cfg.seed + offset + i)) for i in range(count)]


def _row_config(cfg: AblationConfig, row: AblationRow, out_dir: Path) -> TrainConfig:
    per_format = max(1, cfg.train.batch_size // len(ALL_FORMATS))
    model = dataclasses.replace(cfg.train.model, attention=row.attention)
    return dataclasses.replace(cfg.train, formats=row.formats, batch_size=per_format * len(row.formats),
                               deep_supervision=row.deep_supervision, model=model, mode="gold",
                               checkpoint=str(out_dir / "checkpoint.hpck"), init_checkpoint="")


def _training_records(cfg: AblationConfig, row: AblationRow, phantoms):
    n_separation = max(1, round(cfg.separation_fraction * len(phantoms)))
    records = []
    for i, ph in enumerate(phantoms):
        formats = [f for f in row.formats if f is not TargetFormat.SEPARATION or i < n_separation]
        records += records_from_phantom(ph, formats, source_id=f"train-{i}", crop_lung=cfg.train.crop_lung,
                                        patch_size=cfg.train.model.patch_size)
    return records


def run_ablation(cfg: AblationConfig, out_dir) -> pd.DataFrame:
    """Train every configured row and score it on held-out phantoms.

    Writes ``ablation.csv`` (one row per configuration, mean Dice per target)
    and ``ablation_volumes.csv`` (per held-out volume, for paired comparisons).
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = _phantoms(cfg, cfg.train_phantoms, 0)
    heldout = _phantoms(cfg, cfg.heldout_phantoms, 10_000)

    per_volume = []
    for name in cfg.rows:
        row = ROWS[name]
        row_dir = out_dir / name
        train_cfg = _row_config(cfg, row, row_dir)
        records = _training_records(cfg, row, train_set)

        if row.pretrain:
            silver = [r for i, ph in enumerate(train_set)
                      for r in records_from_phantom(ph, source_id=f"silver-{i}", silver=True)]
            pre_cfg = dataclasses.replace(train_cfg, mode="silver-pretrain", epochs=cfg.pretrain_epochs,
                                          checkpoint=str(row_dir / "pretrain.hpck"))
            train_cfg = dataclasses.replace(train_cfg, init_checkpoint=str(pretrain_silver(pre_cfg, silver, row_dir).checkpoint))

        logger.info(f"Ablation row '{name}': formats {[f.value for f in row.formats]}, {len(records)} volumes")
        result = train(train_cfg, records, row_dir)
        model, _ = load_checkpoint(result.checkpoint)

        for i, ph in enumerate(heldout):
            masks = derive_masks(predict_volume(CTVolume(ph.ct, ph.spacing), model))
            truth = truth_masks(ph)
            entry = {"config": name, "volume": f"heldout-{i}"}
            entry.update({f"dice_{t}": dice(masks[t], truth[t]) for t in DICE_TARGETS})
            per_volume.append(entry)

    volumes = pd.DataFrame(per_volume)
    volumes.to_csv(out_dir / "ablation_volumes.csv", index=False)
    summary = volumes.groupby("config", sort=False)[[f"dice_{t}" for t in DICE_TARGETS]].mean().reset_index()
    summary.to_csv(out_dir / "ablation.csv", index=False)
    logger.info(f"Ablation summary written to {out_dir / 'ablation.csv'}")
    return summary
