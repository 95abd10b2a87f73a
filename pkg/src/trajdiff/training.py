"""Diffusion and constraint-violation losses and the training loop.

The constraint-aware objective adds, for every conditioned sample, the
violation of a one-step reverse prediction divided by the average violation
of ground-truth forward draws at the same step:

    total = L_diff + weight * mean_i( V(x~_{k-1}) / max(mu_gt, floor) )

``mu_gt`` is a constant with respect to the network parameters.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import problems
from .dataset import NormalizationStats, TrajectoryDataset
from .denoiser import Denoiser, DenoiserConfig, init, save_checkpoint
from .diffusion import NoiseSchedule, default_schedule, forward_sample, make_schedule, one_step_predict, reverse_step
from .exceptions import EmptyDatasetError, NonFiniteLossError
from .problems import Task

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "L_diff", "L_vio_norm", "total", "wall_seconds")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    p_uncond: float = 0.1
    violation_weight: float = 0.01
    n_gt: int = 10
    mu_floor: float = 1e-3
    constraint_aware: bool = False
    seed: int = 0
    K: int = 64
    beta_start: float | None = None
    beta_end: float | None = None
    gt_marginal: str = "consistent"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if not 0 <= self.p_uncond < 1:
            raise ValueError("p_uncond must lie in [0, 1)")
        if self.violation_weight < 0:
            raise ValueError("violation_weight must be >= 0")
        if self.n_gt < 1 or self.mu_floor <= 0:
            raise ValueError("need n_gt >= 1 and mu_floor > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.K < 1:
            raise ValueError("need epochs >= 0, batch_size >= 1, K >= 1")
        if self.gt_marginal not in ("consistent", "literal"):
            raise ValueError("gt_marginal must be 'consistent' or 'literal'")
        if (self.beta_start is None) != (self.beta_end is None):
            raise ValueError("set both beta_start and beta_end, or neither")

    def schedule(self) -> NoiseSchedule:
        if self.beta_start is None:
            return default_schedule(self.K)
        return make_schedule(self.K, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


class _Violation(torch.autograd.Function):
    """Batched ``V(x, y)`` with the hand-written adjoint as its backward."""

    @staticmethod
    def forward(ctx, x_phys, y_phys, task):
        val, grad = problems.violation_values(x_phys.detach().cpu().double().numpy(), y_phys, task, with_grad=True)
        ctx.save_for_backward(torch.as_tensor(grad, dtype=x_phys.dtype))
        return torch.as_tensor(val, dtype=x_phys.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out[:, None] * grad, None, None


def violation_tensor(x_phys: torch.Tensor, y_phys: np.ndarray, task: Task) -> torch.Tensor:
    """Differentiable per-row violation of physical decision vectors."""
    return _Violation.apply(x_phys, np.asarray(y_phys, dtype=float), task)


def _denorm_torch(x: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    lo = torch.as_tensor(stats.x_lo, dtype=x.dtype)
    hi = torch.as_tensor(stats.x_hi, dtype=x.dtype)
    return lo + (x + 1.0) * 0.5 * (hi - lo)


def _y_physical(y, stats: NormalizationStats) -> np.ndarray:
    y = y.detach().cpu().numpy() if isinstance(y, torch.Tensor) else np.asarray(y)
    return stats.denormalize_y(y.astype(np.float64))


def diffusion_loss(model, x0, y, k, eps, b, sched: NoiseSchedule) -> torch.Tensor:
    """Batch mean of ``||eps_theta(x_k, k, y or null) - eps||^2``.

    Rows with ``b`` true use the null condition. When no row is dropped the
    model is only ever called with the condition.
    """
    x_k = forward_sample(x0, k, eps, sched)
    b = torch.as_tensor(b, dtype=torch.bool)
    eps_pred = model(x_k, k, y, null_mask=b) if bool(b.any()) else model(x_k, k, y)
    return ((eps_pred - eps) ** 2).sum(dim=1).mean()


def _violation_of_prediction(x_k, k, eps_pred, z, y_phys, sched, task, stats):
    x_tilde = torch.clamp(reverse_step(x_k, k, eps_pred, z, sched), -1.0, 1.0)
    return violation_tensor(_denorm_torch(x_tilde, stats), y_phys, task)


def violation_loss(model, x0, y, k, eps, z, sched: NoiseSchedule, task: Task, stats: NormalizationStats,
                   reduce: bool = True) -> torch.Tensor:
    """Violation of the clipped one-step conditional reverse prediction.

    ``x_k`` is data here; gradients reach the parameters only through the
    network's noise prediction.
    """
    if y is None:
        raise ValueError("violation loss requires condition")
    x_k = forward_sample(x0, k, eps, sched).detach()
    x_tilde = one_step_predict(x_k, k, model, y, z, sched)
    vals = violation_tensor(_denorm_torch(x_tilde, stats), _y_physical(y, stats), task)
    return vals.mean() if reduce else vals


def gt_violation_mean(x0, y, k, n_gt: int, sched: NoiseSchedule, task: Task, stats: NormalizationStats,
                      rng=None, marginal: str = "consistent"):
    """Average violation of ``n_gt`` forward-process draws of ``x_{k-1}``.

    ``marginal="consistent"`` draws from N(sqrt(ab_{k-1}) x0, (1 - ab_{k-1}) I);
    ``"literal"`` uses mean sqrt(ab_k) x0 with the same spread. Draws are
    clipped to [-1, 1] before denormalizing. Accepts one sample or a batch.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x0 = x0.detach().cpu().numpy() if isinstance(x0, torch.Tensor) else np.asarray(x0)
    single = x0.ndim == 1
    x0 = np.atleast_2d(x0).astype(np.float64)
    y_phys = np.atleast_2d(_y_physical(y, stats))
    kk = np.asarray(k.detach().cpu().numpy() if isinstance(k, torch.Tensor) else k).reshape(-1)
    kk = np.broadcast_to(kk, (x0.shape[0],))
    if np.any(kk < 1) or np.any(kk > sched.K):
        raise IndexError(f"step index out of range [1, {sched.K}]")
    ab_prev = sched.alpha_bar_at(kk - 1)[:, None, None]
    ab_mean = ab_prev if marginal == "consistent" else sched.alpha_bar_at(kk)[:, None, None]
    b, n = x0.shape
    noise = rng.standard_normal((b, n_gt, n))
    draws = np.sqrt(ab_mean) * x0[:, None, :] + np.sqrt(1.0 - ab_prev) * noise
    phys = stats.denormalize_x(np.clip(draws, -1.0, 1.0)).reshape(b * n_gt, n)
    vals = problems.violation_values(phys, np.repeat(y_phys, n_gt, axis=0), task).reshape(b, n_gt)
    mu = vals.mean(axis=1)
    return float(mu[0]) if single else mu


def hybrid_loss(model, x0, y, k, eps, b, z, sched: NoiseSchedule, task: Task, stats: NormalizationStats,
                config: TrainConfig, rng=None):
    """Diffusion loss plus the normalized violation penalty on conditioned rows.

    One forward corruption per row is shared by both terms. Returns
    ``(total, parts)`` where ``parts`` holds detached floats.
    """
    x_k = forward_sample(x0, k, eps, sched)
    b = torch.as_tensor(b, dtype=torch.bool)
    eps_pred = model(x_k, k, y, null_mask=b) if bool(b.any()) else model(x_k, k, y)
    l_diff = ((eps_pred - eps) ** 2).sum(dim=1).mean()

    keep = ~b
    if not bool(keep.any()):
        ratio = l_diff.new_zeros(())
    else:
        y_phys = _y_physical(y[keep], stats)
        k_keep = k[keep]
        v_pred = _violation_of_prediction(x_k[keep].detach(), k_keep, eps_pred[keep], z[keep], y_phys, sched, task, stats)
        mu = gt_violation_mean(x0[keep], y[keep], k_keep, config.n_gt, sched, task, stats, rng, config.gt_marginal)
        denom = torch.as_tensor(np.maximum(mu, config.mu_floor), dtype=v_pred.dtype)
        ratio = (v_pred / denom).mean()
    total = l_diff + config.violation_weight * ratio
    return total, {"L_diff": float(l_diff.detach()), "L_vio_norm": float(ratio.detach()), "total": float(total.detach())}


@dataclass
class TrainResult:
    model: Denoiser
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    schedule: NoiseSchedule | None = None


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in LOG_COLUMNS})


def train(
    dataset: TrajectoryDataset,
    config: TrainConfig,
    denoiser_config: DenoiserConfig | None = None,
    out_dir=None,
    dtype=torch.float32,
) -> TrainResult:
    """Adam over shuffled minibatches; deterministic given ``config.seed``.

    The unconstrained path (``constraint_aware=False``) never evaluates the
    task constraints. Randomness used only by the violation term comes from a
    separate stream, so a zero violation weight reproduces the unconstrained
    parameter trajectory exactly.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("empty dataset")
    task, stats = dataset.task, dataset.stats
    sched = config.schedule()
    dcfg = denoiser_config or DenoiserConfig.for_task(task)
    model = init(dcfg, config.seed, dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    gen = torch.Generator().manual_seed(config.seed)
    vio_rng = np.random.default_rng([config.seed, 1])

    X = torch.from_numpy(dataset.x).to(dtype)
    Y = torch.from_numpy(dataset.y).to(dtype)
    N, n = X.shape
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    provenance = {
        "train_config": config.to_dict(),
        "task": task.to_dict(),
        "schedule": sched.to_dict(),
        "dataset": dataset.provenance,
    }
    result = TrainResult(model=model, schedule=sched)
    start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        perm = torch.randperm(N, generator=gen)
        sums = {"L_diff": 0.0, "L_vio_norm": 0.0, "total": 0.0}
        n_batches = 0
        for bi, s in enumerate(range(0, N, config.batch_size)):
            idx = perm[s : s + config.batch_size]
            x0, y = X[idx], Y[idx]
            B = x0.shape[0]
            k = torch.randint(1, sched.K + 1, (B,), generator=gen)
            eps = torch.randn(B, n, generator=gen, dtype=dtype)
            b = torch.rand(B, generator=gen) < config.p_uncond

            if config.constraint_aware:
                z = torch.as_tensor(vio_rng.standard_normal((B, n)), dtype=dtype)
                z[k == 1] = 0.0
                loss, parts = hybrid_loss(model, x0, y, k, eps, b, z, sched, task, stats, config, vio_rng)
            else:
                loss = diffusion_loss(model, x0, y, k, eps, b, sched)
                parts = {"L_diff": float(loss.detach()), "L_vio_norm": 0.0, "total": float(loss.detach())}
            if not np.isfinite(parts["total"]):
                raise NonFiniteLossError(epoch, bi, parts["total"])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            n_batches += 1
            for key in sums:
                sums[key] += parts[key]

        row = {key: val / n_batches for key, val in sums.items()}
        row.update(epoch=epoch, step=step, wall_seconds=time.perf_counter() - start)
        result.log.append(row)
        logger.info("epoch %d  L_diff %.4f  L_vio_norm %.4f", epoch, row["L_diff"], row["L_vio_norm"])
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            p = save_checkpoint(model, out_dir / f"epoch_{epoch:04d}", {**provenance, "epoch": epoch})
            result.checkpoints.append(p)

    model.eval()
    if out_dir is not None:
        p = save_checkpoint(model, out_dir / "final", {**provenance, "epoch": config.epochs})
        result.checkpoints.append(p)
        write_loss_log(result.log, out_dir / "loss_log.csv")
    return result
