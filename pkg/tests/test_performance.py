import pytest
import time
from collections import Counter

import numpy as np
import torch

from hpseg.hierarchy import ALL_FORMATS, TargetFormat, encode_target, reduce_probs
from hpseg.loss import combined
from hpseg.metrics import confusion, dice, fpe_fne, sens_spec
from hpseg.pipeline import sample_epoch


class TestPerformance:
    """Test bulk properties and that they hold fast enough"""

    def test_batch_balance(self):
        """Test 10,000 batches each hold exactly B/5 items per format"""
        catalog = {fmt: [(f"{fmt.value}-{i}", z) for i in range(3) for z in range(16)] for fmt in ALL_FORMATS}
        batch_size = 10

        start_time = time.time()
        plan = sample_epoch(catalog, quota=20_000, seed=123)
        batches = list(plan.batches(batch_size))
        for batch in batches:
            counts = Counter(d.format for d in batch)
            assert counts == {fmt: batch_size // len(ALL_FORMATS) for fmt in ALL_FORMATS}
        elapsed = time.time() - start_time

        assert len(batches) == 10_000
        assert elapsed < 10.0, f"Sampling and checking took {elapsed:.3f}s for 10,000 batches"

    def test_metric_oracle(self):
        """Test confusion metrics against per-voxel counting on 1000 random 8³ pairs"""
        rng = np.random.default_rng(2024)
        start_time = time.time()

        for _ in range(1000):
            pred = rng.random((8, 8, 8)) < rng.random()
            target = rng.random((8, 8, 8)) < rng.random()
            tp = fp = fn = tn = 0
            for p, t in zip(pred.ravel().tolist(), target.ravel().tolist()):
                tp += p and t
                fp += p and not t
                fn += t and not p
                tn += not p and not t

            assert confusion(pred, target) == (tp, fp, fn, tn)
            expected_dice = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
            assert dice(pred, target) == expected_dice
            fpe, fne = fpe_fne(pred, target)
            assert fpe == (fp / (tp + fp) if tp + fp else None)
            assert fne == (fn / (tp + fn) if tp + fn else None)
            sens, spec = sens_spec(pred, target)
            assert sens == (tp / (tp + fn) if tp + fn else None)
            assert spec == (tn / (tn + fp) if tn + fp else None)

        elapsed = time.time() - start_time
        assert elapsed < 30.0, f"Metric oracle took {elapsed:.3f}s for 1000 pairs"

    def test_sum_derivative_identity(self):
        """Test sibling channels share gradients on 50 random batches in under 30s"""
        gen = torch.Generator().manual_seed(77)
        rng = np.random.default_rng(77)
        start_time = time.time()

        for _ in range(50):
            for fmt, siblings in ((TargetFormat.LESION, (2, 3)), (TargetFormat.LUNG, (1, 2, 3))):
                logits = torch.randn((4, 4, 16, 16), generator=gen, dtype=torch.float64)
                probs = torch.softmax(logits, dim=1).requires_grad_(True)
                labels = rng.integers(0, fmt.channels, size=(4, 16, 16))
                target = torch.from_numpy(np.stack([encode_target(l, fmt) for l in labels])).double()
                combined(reduce_probs(probs, fmt, axis=1), target).backward()

                first = probs.grad[:, siblings[0]]
                for other in siblings[1:]:
                    torch.testing.assert_close(probs.grad[:, other], first, rtol=1e-10, atol=0)

        elapsed = time.time() - start_time
        assert elapsed < 30.0, f"Sum-derivative checks took {elapsed:.3f}s for 50 batches"


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
