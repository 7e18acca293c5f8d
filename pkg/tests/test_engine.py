import pytest
import numpy as np
import torch

from hpseg.engine import OptimState, adamw_step, decay_lr, fd_check, grad, make_optimizer
from hpseg.errors import ConfigError, ContractError, ShapeError
from hpseg.hierarchy import ALL_FORMATS, encode_target
from hpseg.loss import total_loss
from hpseg.network import ModelConfig, build_model


def toy_problem(seed=0):
    gen = torch.Generator().manual_seed(seed)
    w1 = torch.randn(5, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    w2 = torch.randn(1, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    x = torch.randn(7, 4, generator=gen, dtype=torch.float64)

    def loss_fn():
        return (torch.tanh(x @ w1.T) @ w2.T).pow(2).mean()

    return loss_fn, [w1, w2]


class TestGrad:
    """Test exact gradients"""

    def test_matches_closed_form(self):
        """Test the gradient of a quadratic"""
        w = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64, requires_grad=True)
        (g,) = grad((w ** 2).sum(), [w])
        assert torch.equal(g, 2 * w.detach())

    def test_unused_parameter_gets_zeros(self):
        """Test parameters off the graph get exact zeros"""
        a = torch.ones(2, requires_grad=True)
        b = torch.ones(3, requires_grad=True)
        ga, gb = grad((a * 3).sum(), [a, b])
        assert torch.equal(ga, torch.full((2,), 3.0))
        assert torch.equal(gb, torch.zeros(3))

    def test_constant_loss(self):
        """Test a loss without a graph gives zeros"""
        a = torch.ones(2, requires_grad=True)
        (g,) = grad(torch.tensor(1.5), [a])
        assert torch.equal(g, torch.zeros(2))

    def test_non_scalar_root(self):
        """Test a vector root is rejected"""
        a = torch.ones(2, requires_grad=True)
        with pytest.raises(ContractError):
            grad(a * 2, [a])


class TestFiniteDifferences:
    """Test the finite-difference checker"""

    def test_toy_network_passes(self):
        """Test a random two-layer net matches central differences"""
        loss_fn, params = toy_problem()
        report = fd_check(loss_fn, params, step=1e-5, tolerance=1e-4)

        assert report.checked == 25
        assert report.passed, f"max relative error {report.max_rel_error:.3e}"

    def test_parameters_restored(self):
        """Test perturbed coordinates are put back"""
        loss_fn, params = toy_problem(1)
        before = [p.detach().clone() for p in params]
        fd_check(loss_fn, params, samples=6, seed=3)
        for p, b in zip(params, before):
            assert torch.equal(p.detach(), b)

    def test_sampling(self):
        """Test coordinate sampling limits the work"""
        loss_fn, params = toy_problem(2)
        report = fd_check(loss_fn, params, samples=4)
        assert report.checked + len(report.flagged) == 4

    def test_wrong_gradient_detected(self):
        """Test a detached path produces a failing report"""
        w = torch.tensor([0.5, 1.5], dtype=torch.float64, requires_grad=True)

        def loss_fn():
            return (w.detach() ** 2).sum() + 0.0 * w.sum()

        assert not fd_check(loss_fn, [w]).passed

    def test_kink_flagged(self):
        """Test a coordinate on a kink is flagged, not scored"""
        w = torch.tensor([0.0, 2.0], dtype=torch.float64, requires_grad=True)
        report = fd_check(lambda: w.abs().sum(), [w])
        assert report.flagged == [(0, 0)]
        assert report.checked == 1

    def test_roundoff_floor(self):
        """Test gradients far below the loss roundoff are not scored as relative noise"""
        w = torch.tensor([1e-3, -2e-3], dtype=torch.float64, requires_grad=True)
        report = fd_check(lambda: 1.0 + 1e-6 * (w ** 2).sum(), [w])

        eps = torch.finfo(torch.float64).eps
        assert report.floor == pytest.approx(64.0 * eps * (1.0 + 5e-12) / 1e-5 / 1e-4)
        assert report.checked == 2
        assert report.passed, f"max relative error {report.max_rel_error:.3e}"

    def test_explicit_floor(self):
        """Test a caller-supplied floor is used as given"""
        loss_fn, params = toy_problem()
        assert fd_check(loss_fn, params, samples=2, floor=1e-8).floor == 1e-8

    @pytest.mark.slow
    def test_full_model_all_formats(self):
        """Test the desk network and the five-format loss against central differences"""
        model = build_model(ModelConfig(seed=5)).double()
        gen = torch.Generator().manual_seed(5)
        x = torch.rand(len(ALL_FORMATS), 3, 64, 64, generator=gen, dtype=torch.float64)
        rng = np.random.default_rng(5)
        groups = {}
        for i, fmt in enumerate(ALL_FORMATS):
            labels = rng.integers(0, fmt.channels, size=(64, 64))
            target = torch.from_numpy(encode_target(labels, fmt)[None]).double()
            groups[fmt] = (torch.tensor([i]), target)

        report = fd_check(lambda: total_loss(model(x), groups).loss, list(model.parameters()),
                          step=1e-5, tolerance=1e-4, samples=200, seed=1)

        assert report.checked + len(report.flagged) == 200
        assert report.checked >= 150
        assert report.max_rel_error <= 1e-4, f"max relative error {report.max_rel_error:.3e}"

    def test_bad_step(self):
        """Test a non-positive step is rejected"""
        loss_fn, params = toy_problem()
        with pytest.raises(ContractError):
            fd_check(loss_fn, params, step=0.0)


class TestAdamW:
    """Test the optimizer contract"""

    def test_zero_gradient_only_decays(self):
        """Test a zero gradient shrinks parameters by (1 - lr*wd)"""
        p = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
        state = make_optimizer([p], lr=1e-3, weight_decay=0.1)
        adamw_step(state, [p], [torch.zeros(2, dtype=torch.float64)])

        expected = torch.tensor([1.0, -2.0], dtype=torch.float64) * (1 - 1e-3 * 0.1)
        torch.testing.assert_close(p.detach(), expected, rtol=0, atol=1e-15)
        assert state.step_count == 1

    def test_constant_gradient_step_size(self):
        """Test updates approach lr under a constant gradient"""
        p = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        state = make_optimizer([p], lr=0.01, weight_decay=0.0)
        g = torch.tensor([0.5, -2.0, 7.0], dtype=torch.float64)
        for _ in range(200):
            before = p.detach().clone()
            adamw_step(state, [p], [g])
        step = (before - p.detach()).abs()
        torch.testing.assert_close(step, torch.full((3,), 0.01, dtype=torch.float64), rtol=1e-4, atol=0)

    def test_gradient_shape_mismatch(self):
        """Test mismatched gradients are rejected"""
        p = torch.zeros(3, requires_grad=True)
        state = make_optimizer([p])
        with pytest.raises(ShapeError):
            adamw_step(state, [p], [torch.zeros(2)])
        with pytest.raises(ShapeError):
            adamw_step(state, [p], [])

    def test_invalid_learning_rate(self):
        """Test a non-positive learning rate is rejected"""
        with pytest.raises(ConfigError):
            make_optimizer([torch.zeros(1, requires_grad=True)], lr=0.0)

    def test_section_round_trip(self):
        """Test moments and settings survive a checkpoint section"""
        p = torch.zeros(4, dtype=torch.float64, requires_grad=True)
        state = make_optimizer([p], lr=2e-3)
        adamw_step(state, [p], [torch.arange(4, dtype=torch.float64)])
        decay_lr(state, 3)

        q = p.detach().clone().requires_grad_(True)
        restored = OptimState.from_section([q], state.to_section())
        m0, v0 = state.moments(p)
        m1, v1 = restored.moments(q)

        assert torch.equal(m0, m1) and torch.equal(v0, v1)
        assert restored.lr == state.lr
        assert restored.epoch == 3
        assert restored.step_count == 1


class TestDecay:
    """Test exponential learning-rate decay"""

    def test_reference_values(self):
        """Test the first two epochs from 1e-4"""
        state = make_optimizer([torch.zeros(1, requires_grad=True)], lr=1e-4)
        assert decay_lr(state, 0) == pytest.approx(1e-4)
        assert decay_lr(state, 1) == pytest.approx(9.85e-5, rel=1e-12)
        assert decay_lr(state, 2) == pytest.approx(9.70225e-5, rel=1e-12)
        assert state.lr == pytest.approx(9.70225e-5, rel=1e-12)

    def test_negative_epoch(self):
        """Test negative epochs are rejected"""
        state = make_optimizer([torch.zeros(1, requires_grad=True)])
        with pytest.raises(ContractError):
            decay_lr(state, -1)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
