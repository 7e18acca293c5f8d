import dataclasses

import pytest
import numpy as np
import pandas as pd

from hpseg.ablation import AblationConfig, run_ablation
from hpseg.hierarchy import TargetFormat
from hpseg.inference import derive_masks, predict_volume
from hpseg.metrics import dice
from hpseg.network import load_checkpoint
from hpseg.phantom import PhantomSpec, generate, truth_masks
from hpseg.pipeline import AugmentConfig, CTVolume
from hpseg.trainer import TrainConfig, pretrain_silver, records_from_phantom, train

DESK = TrainConfig(augment=AugmentConfig.disabled(patch_size=64, crop="random"))


def phantom_set(count, offset=0):
    return [generate(PhantomSpec(seed=offset + i)) for i in range(count)]


@pytest.mark.slow
class TestAcceptance:
    """Desk-scale training experiments on synthetic phantoms"""

    def test_overfit_capacity(self, tmp_path):
        """Test eight fully annotated phantoms are learned to high volumetric Dice"""
        phantoms = phantom_set(8)
        records = [r for i, ph in enumerate(phantoms) for r in records_from_phantom(ph, source_id=f"train-{i}")]
        result = train(DESK, records, tmp_path)
        model, _ = load_checkpoint(result.checkpoint)

        scores = {t: [] for t in ("lung", "lesion", "airway", "vessel", "ggo", "consolidation")}
        for ph in phantoms:
            masks = derive_masks(predict_volume(CTVolume(ph.ct, ph.spacing), model))
            truth = truth_masks(ph)
            for target, values in scores.items():
                values.append(dice(masks[target], truth[target]))

        means = {t: float(np.mean(v)) for t, v in scores.items()}
        for target in ("lung", "lesion", "airway", "vessel"):
            assert means[target] >= 0.90, means
        for target in ("ggo", "consolidation"):
            assert means[target] >= 0.80, means

    def test_multitask_polymorphic_beats_specialized(self, tmp_path):
        """Test the full format mix beats separation-only training on held-out lesion subtypes"""
        cfg = AblationConfig(rows=("specialized", "hpl_m"), train_phantoms=10, heldout_phantoms=20,
                             separation_fraction=0.1, train=DESK)
        run_ablation(cfg, tmp_path)

        volumes = pd.read_csv(tmp_path / "ablation_volumes.csv")
        volumes["subtypes"] = volumes["dice_ggo"] + volumes["dice_consolidation"]
        paired = volumes.pivot(index="volume", columns="config", values="subtypes")

        assert len(paired) == 20
        assert (paired["hpl_m"] - paired["specialized"]).mean() > 0.0

    def test_silver_pretraining_does_not_hurt(self, tmp_path):
        """Test silver initialisation reaches no higher validation loss at epoch five than random init"""
        phantoms = phantom_set(8)
        heldout = phantom_set(4, offset=10_000)
        records = [r for i, ph in enumerate(phantoms) for r in records_from_phantom(ph, source_id=f"train-{i}")]
        val_records = [r for i, ph in enumerate(heldout)
                       for r in records_from_phantom(ph, [TargetFormat.SEPARATION], source_id=f"heldout-{i}")]
        silver = [r for i, ph in enumerate(phantoms)
                  for r in records_from_phantom(ph, source_id=f"silver-{i}", silver=True)]
        base = dataclasses.replace(DESK, epochs=5)

        pre_cfg = dataclasses.replace(base, mode="silver-pretrain", epochs=2,
                                      checkpoint=str(tmp_path / "pretrain.hpck"))
        pretrained = pretrain_silver(pre_cfg, silver, tmp_path / "pretrain").checkpoint
        random_init = train(base, records, tmp_path / "random", val_records)
        silver_init = train(dataclasses.replace(base, init_checkpoint=str(pretrained)), records,
                            tmp_path / "silver", val_records)

        assert len(random_init.val_losses) == len(silver_init.val_losses) == 5
        assert silver_init.val_losses[4] <= random_init.val_losses[4]


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
