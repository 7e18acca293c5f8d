import pytest
import numpy as np
from scipy import ndimage

from hpseg.errors import ContractError, ShapeError
from hpseg.metrics import (
    MetricsConfig, confusion, dice, evaluate, fpe_fne, largest_cc, sens_spec, skeletonize,
    slicewise_dice, summarize, tree_metrics,
)


def line_mask(length=10):
    mask = np.zeros((length + 4, 5, 5), dtype=bool)
    mask[2:2 + length, 2, 2] = True
    return mask


def y_tree():
    """Trunk along z plus two diagonal children in the z-x plane, one voxel thick."""
    mask = np.zeros((22, 5, 22), dtype=bool)
    trunk = [(z, 2, 10) for z in range(1, 11)]
    left = [(10 + k, 2, 10 - k) for k in range(1, 10)]
    right = [(10 + k, 2, 10 + k) for k in range(1, 10)]
    for branch in (trunk, left, right):
        for v in branch:
            mask[v] = True
    return mask, trunk, left, right


class TestConfusion:
    """Test confusion-count metrics"""

    def test_brute_force_agreement(self):
        """Test counts and rates against a per-voxel loop"""
        rng = np.random.default_rng(0)
        for _ in range(20):
            pred = rng.random((8, 8, 8)) < 0.4
            target = rng.random((8, 8, 8)) < 0.3
            tp = fp = fn = tn = 0
            for p, t in zip(pred.ravel(), target.ravel()):
                if p and t:
                    tp += 1
                elif p:
                    fp += 1
                elif t:
                    fn += 1
                else:
                    tn += 1
            assert confusion(pred, target) == (tp, fp, fn, tn)
            assert dice(pred, target) == 2 * tp / (2 * tp + fp + fn)
            assert fpe_fne(pred, target) == (fp / (tp + fp), fn / (tp + fn))
            assert sens_spec(pred, target) == (tp / (tp + fn), tn / (tn + fp))

    def test_empty_masks(self):
        """Test empty/empty Dice is 1 and undefined rates are None"""
        empty = np.zeros((2, 2, 2), dtype=bool)
        assert dice(empty, empty) == 1.0
        assert fpe_fne(empty, empty) == (None, None)
        assert sens_spec(empty, empty) == (None, 1.0)

    def test_disjoint(self):
        """Test disjoint masks give Dice 0"""
        a = np.zeros((1, 2, 2), dtype=bool)
        b = a.copy()
        a[0, 0, 0] = True
        b[0, 1, 1] = True
        assert dice(a, b) == 0.0

    def test_shape_mismatch(self):
        """Test differing shapes are rejected"""
        with pytest.raises(ShapeError):
            dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_slicewise(self):
        """Test slice-wise Dice averages per slice"""
        pred = np.zeros((2, 2, 2), dtype=bool)
        target = pred.copy()
        target[1, 0, 0] = True
        assert slicewise_dice(pred, target) == 0.5


class TestLargestComponent:
    """Test largest connected component selection"""

    def test_keeps_biggest(self):
        """Test the largest 26-connected component survives"""
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[0, 0, 0] = True
        mask[2:5, 2:5, 2] = True
        out = largest_cc(mask)
        assert not out[0, 0, 0]
        assert out.sum() == 9

    def test_diagonal_connectivity(self):
        """Test corner-touching voxels form one component"""
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[0, 0, 0] = mask[1, 1, 1] = mask[2, 2, 2] = True
        assert largest_cc(mask).sum() == 3

    def test_tie_goes_to_first(self):
        """Test equal components resolve to the first in raster order"""
        mask = np.zeros((1, 1, 5), dtype=bool)
        mask[0, 0, 0] = mask[0, 0, 4] = True
        out = largest_cc(mask)
        assert out[0, 0, 0] and not out[0, 0, 4]

    def test_empty(self):
        """Test an empty mask stays empty"""
        assert not largest_cc(np.zeros((2, 2, 2), dtype=bool)).any()


class TestSkeleton:
    """Test skeleton extraction and branch tracing"""

    def test_line_is_one_branch(self):
        """Test a one-voxel line is its own skeleton"""
        skel = skeletonize(line_mask())
        assert skel.branch_count == 1
        assert len(skel.voxels) == 10
        assert skel.total_length == pytest.approx(10.0)

    def test_spacing_scales_length(self):
        """Test anisotropic spacing along the line axis"""
        skel = skeletonize(line_mask(), spacing=(2.0, 1.0, 1.0))
        assert skel.total_length == pytest.approx(20.0)

    def test_y_tree_branches(self):
        """Test a Y-tree decomposes into three branches around one junction"""
        mask, *_ = y_tree()
        skel = skeletonize(mask)
        assert skel.branch_count == 3
        assert sum(1 for d in skel.degrees.values() if d >= 3) == 1
        assert all(b.terminal for b in skel.branches)

    def test_tube_length_bounds(self):
        """Test a thick tube thins to roughly its centre line"""
        zz, yy, xx = np.indices((20, 11, 11))
        tube = ((yy - 5) ** 2 + (xx - 5) ** 2 <= 4) & (zz >= 3) & (zz <= 15)
        skel = skeletonize(tube)
        assert skel.branch_count == 1
        assert 6.0 <= skel.total_length <= 14.0
        assert not (skel.mask(tube.shape) & ~tube).any()

    def test_single_voxel(self):
        """Test an isolated voxel is a zero-length branch"""
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[1, 1, 1] = True
        skel = skeletonize(mask)
        assert skel.branch_count == 1
        assert skel.total_length == 0.0

    def test_empty_mask(self):
        """Test empty masks cannot be skeletonized"""
        with pytest.raises(ContractError):
            skeletonize(np.zeros((3, 3, 3), dtype=bool))


class TestTreeMetrics:
    """Test tree length and branch detection rates"""

    def test_line_fixture(self):
        """Test 7 of 10 line voxels detected gives TD 0.7"""
        target = line_mask()
        pred = np.zeros_like(target)
        pred[2:9, 2, 2] = True
        td, bd = tree_metrics(pred, target)
        assert td == pytest.approx(0.7, abs=1e-12)
        assert bd == 0.0

    def test_y_fixture(self):
        """Test two of three fully covered branches gives BD 2/3"""
        target, trunk, left, _ = y_tree()
        pred = np.zeros_like(target)
        for v in trunk + left:
            pred[v] = True
        _, bd = tree_metrics(pred, target)
        assert bd == pytest.approx(2 / 3)

    def test_only_largest_prediction_counts(self):
        """Test stray prediction components are ignored"""
        target = line_mask()
        pred = np.zeros_like(target)
        pred[2:8, 2, 2] = True
        pred[9:12, 2, 2] = True
        td, _ = tree_metrics(pred, target)
        assert td == pytest.approx(0.6)

    def test_empty_target(self):
        """Test undefined rates for an empty target"""
        empty = np.zeros((4, 4, 4), dtype=bool)
        assert tree_metrics(empty, empty) == (None, None)

    def test_monotone_under_dilation(self):
        """Test growing the prediction never lowers TD or BD"""
        target, *_ = y_tree()
        pred = np.zeros_like(target)
        pred[3:12, 2, 10] = True
        structure = ndimage.generate_binary_structure(3, 3)
        previous = (0.0, 0.0)
        for _ in range(4):
            td, bd = tree_metrics(pred, target)
            assert td >= previous[0] and bd >= previous[1]
            previous = (td, bd)
            pred = ndimage.binary_dilation(pred, structure=structure)


class TestEvaluate:
    """Test per-target reports and aggregation"""

    def test_reports_and_summary(self):
        """Test reports for shared targets and the summary table"""
        target = line_mask()
        pred = target.copy()
        pred[2, 2, 2] = False
        reports = evaluate({'airway': pred, 'lung': target}, {'airway': target, 'lung': target, 'vessel': target},
                           cfg=MetricsConfig(slicewise=True), volume='v0')

        assert [r.target for r in reports] == ['airway', 'lung']
        airway = reports[0]
        assert airway.td == pytest.approx(0.9)
        assert airway.branch_fraction == 0.8
        assert reports[1].td is None
        assert reports[1].dice == 1.0
        assert reports[1].slicewise_dice == 1.0

        table = summarize(reports + reports)
        assert list(table['target']) == ['airway', 'lung']
        assert table.loc[table['target'] == 'lung', 'dice_mean'].item() == 1.0
        assert table.loc[table['target'] == 'airway', 'count'].item() == 2
        assert 'td_mean' in table.columns


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
