"""Gradients, finite-difference verification and the AdamW optimizer state.

Reverse-mode differentiation is torch.autograd; this module pins down the
contracts the trainer relies on (scalar roots, exact zeros off the graph,
decoupled weight decay, exponential learning-rate decay).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError, ShapeError, logger


def grad(loss, params: Sequence[torch.Tensor], retain_graph: bool = False) -> list[torch.Tensor]:
    """Exact gradients of a scalar ``loss``; parameters off the graph get zeros."""
    params = list(params)
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ContractError("Gradient root must be a scalar tensor")
    if not params:
        return []
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True, retain_graph=retain_graph)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass(frozen=True)
class FDCoordinate:
    param: int
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FDReport:
    tolerance: float
    step: float
    floor: float = 0.0
    coordinates: list[FDCoordinate] = field(default_factory=list)
    flagged: list[tuple[int, int]] = field(default_factory=list)

    @property
    def checked(self) -> int:
        return len(self.coordinates)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.coordinates), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _coordinates(params, samples, seed):
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)
    if samples is None or samples >= total:
        chosen = np.arange(total)
    else:
        chosen = np.sort(np.random.default_rng(seed).choice(total, size=samples, replace=False))
    out = []
    for flat in chosen:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        out.append((k, int(flat - offsets[k])))
    return out


def fd_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], step: float = 1e-5,
             tolerance: float = 1e-4, samples: int | None = None, seed: int = 0,
             kink_tolerance: float = 0.1, floor: float | None = None) -> FDReport:
    """Compare autograd against central differences on sampled coordinates.

    A coordinate whose one-sided differences disagree by more than
    ``kink_tolerance`` (relative) sits on a non-smooth point, such as an
    active log clamp; it is reported in ``flagged`` and left out of the error.
    Relative errors are taken against at least ``floor``, by default the
    magnitude below which roundoff in the loss swamps the difference quotient.
    """
    if step <= 0:
        raise ContractError(f"Finite-difference step must be positive, got {step}")
    params = list(params)
    report = FDReport(tolerance=tolerance, step=step)
    if not params:
        return report

    analytic = grad(loss_fn(), params)
    with torch.no_grad():
        base = float(loss_fn())
        if floor is None:
            eps = torch.finfo(params[0].dtype).eps
            floor = 64.0 * eps * max(abs(base), 1.0) / step / tolerance
        report.floor = floor
        for k, i in _coordinates(params, samples, seed):
            flat = params[k].view(-1)
            original = flat[i].item()
            flat[i] = original + step
            f_plus = float(loss_fn())
            flat[i] = original - step
            f_minus = float(loss_fn())
            flat[i] = original

            forward = (f_plus - base) / step
            backward = (base - f_minus) / step
            if abs(forward - backward) > kink_tolerance * max(abs(forward), abs(backward), 1.0):
                report.flagged.append((k, i))
                continue

            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = analytic[k].view(-1)[i].item()
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            report.coordinates.append(FDCoordinate(k, i, exact, numeric, rel))

    logger.debug(f"fd_check: {report.checked} coordinates, {len(report.flagged)} flagged, "
                 f"max relative error {report.max_rel_error:.3e}")
    return report


@dataclass
class OptimState:
    optimizer: torch.optim.AdamW
    initial_lr: float = 1e-4
    weight_decay: float = 1e-5
    decay: float = 0.985
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epoch: int = 0

    @property
    def params(self) -> list[torch.Tensor]:
        return list(self.optimizer.param_groups[0]["params"])

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    @property
    def step_count(self) -> int:
        steps = [s["step"] for s in self.optimizer.state.values() if "step" in s]
        return int(max((float(s) for s in steps), default=0))

    def moments(self, param) -> tuple[torch.Tensor, torch.Tensor]:
        state = self.optimizer.state.get(param, {})
        if "exp_avg" not in state:
            return torch.zeros_like(param), torch.zeros_like(param)
        return state["exp_avg"], state["exp_avg_sq"]

    def to_section(self) -> dict:
        """Checkpoint section: scalar settings plus per-parameter moment tensors."""
        state = self.optimizer.state_dict()["state"]
        tensors = {f"{i}.{key}": value for i, entries in state.items()
                   for key, value in entries.items() if torch.is_tensor(value)}
        meta = {"initial_lr": self.initial_lr, "lr": self.lr, "weight_decay": self.weight_decay,
                "decay": self.decay, "betas": list(self.betas), "eps": self.eps, "epoch": self.epoch}
        return {"meta": meta, "tensors": tensors}

    @classmethod
    def from_section(cls, params, section: dict) -> "OptimState":
        meta = section["meta"]
        state = make_optimizer(params, lr=meta["initial_lr"], weight_decay=meta["weight_decay"],
                               betas=tuple(meta["betas"]), eps=meta["eps"], decay=meta["decay"])
        saved = state.optimizer.state_dict()
        per_param: dict[int, dict] = {}
        for name, tensor in section["tensors"].items():
            index, key = name.split(".", 1)
            per_param.setdefault(int(index), {})[key] = tensor
        saved["state"] = per_param
        saved["param_groups"][0]["lr"] = meta["lr"]
        state.optimizer.load_state_dict(saved)
        state.epoch = int(meta["epoch"])
        return state


def make_optimizer(params, lr: float = 1e-4, weight_decay: float = 1e-5, betas=(0.9, 0.999),
                   eps: float = 1e-8, decay: float = 0.985) -> OptimState:
    if lr <= 0:
        raise ConfigError(f"Learning rate must be positive, got {lr}")
    optimizer = torch.optim.AdamW(list(params), lr=lr, betas=tuple(betas), eps=eps,
                                  weight_decay=weight_decay, foreach=False)
    return OptimState(optimizer=optimizer, initial_lr=lr, weight_decay=weight_decay, decay=decay,
                      betas=tuple(betas), eps=eps)


def adamw_step(state: OptimState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> OptimState:
    """θ ← θ·(1 − lr·wd), then the Adam update with bias-corrected moments."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"Gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = g.detach().to(p.dtype)
    state.optimizer.step()
    for p in params:
        p.grad = None
    return state


def decay_lr(state: OptimState, epoch: int) -> float:
    """lr = initial_lr · decay^epoch, written into the optimizer."""
    if epoch < 0:
        raise ContractError(f"Epoch must be non-negative, got {epoch}")
    lr = state.initial_lr * state.decay ** epoch
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.epoch = epoch
    return lr
