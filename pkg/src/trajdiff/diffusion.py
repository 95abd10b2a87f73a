"""DDPM noise schedule, forward corruption and (guided) reverse sampling.

Step indices run from 1 to K. Tables are stored zero-based, so the value for
step ``k`` lives at position ``k - 1``. All functions accept numpy arrays or
torch tensors; ``k`` may be an int or a per-row integer array/tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    def alpha_bar_at(self, k):
        """``alpha_bar`` for step ``k`` with ``alpha_bar_0 = 1``."""
        table = np.concatenate([[1.0], self.alpha_bar])
        return table[np.asarray(k)]

    def to_dict(self) -> dict:
        return {"K": self.K, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(K: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``K`` steps."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, K)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta))


def default_schedule(K: int = 64) -> NoiseSchedule:
    """Linear schedule whose endpoints are 1e-4 and 0.02 at K = 500, rescaled by 500/K.

    Rescaling keeps the total corruption (and so ``alpha_bar_K``) close to that of
    the 500-step schedule when fewer steps are used.
    """
    scale = 500.0 / K
    return make_schedule(K, 1e-4 * scale, min(0.02 * scale, 0.999))


def _coef(table: np.ndarray, k, like):
    """Gather ``table[k - 1]`` shaped to broadcast against ``like`` rows."""
    K = table.shape[0]
    if isinstance(k, torch.Tensor):
        kk = k.detach().cpu().numpy()
    else:
        kk = np.asarray(k)
    if np.any(kk < 1) or np.any(kk > K):
        raise IndexError(f"step index out of range [1, {K}]")
    vals = table[kk.astype(np.int64) - 1]
    if isinstance(like, torch.Tensor):
        vals = torch.as_tensor(vals, dtype=like.dtype, device=like.device)
    if np.ndim(vals) == 1 and like.ndim > 1:
        vals = vals.reshape((-1,) + (1,) * (like.ndim - 1))
    return vals


def forward_sample(x0, k, eps, sched: NoiseSchedule):
    """Closed-form corruption ``sqrt(ab_k) x0 + sqrt(1 - ab_k) eps``."""
    if tuple(eps.shape) != tuple(x0.shape):
        raise ValueError("eps must match x0 in shape")
    return _coef(np.sqrt(sched.alpha_bar), k, x0) * x0 + _coef(np.sqrt(1.0 - sched.alpha_bar), k, x0) * eps


def guided_noise(eps_cond, eps_uncond, omega: float):
    """Classifier-free guidance: ``(omega + 1) eps_cond - omega eps_uncond``."""
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ValueError("conditional and unconditional noise must have equal shapes")
    return (omega + 1.0) * eps_cond - omega * eps_uncond


def reverse_step(x_k, k, eps_hat, z, sched: NoiseSchedule):
    """One ancestral step ``x_{k-1} = (x_k - b_k/sqrt(1-ab_k) eps_hat)/sqrt(a_k) + sigma_k z``."""
    inv_sqrt_alpha = _coef(1.0 / np.sqrt(sched.alpha), k, x_k)
    eps_coef = _coef(sched.beta / np.sqrt(1.0 - sched.alpha_bar), k, x_k)
    sigma = _coef(sched.sigma, k, x_k)
    return inv_sqrt_alpha * (x_k - eps_coef * eps_hat) + sigma * z


def _clip(x, lo=-1.0, hi=1.0):
    return torch.clamp(x, lo, hi) if isinstance(x, torch.Tensor) else np.clip(x, lo, hi)


def one_step_predict(x_k, k, denoiser, y, z, sched: NoiseSchedule):
    """Single conditional reverse step from ``x_k``, clipped to [-1, 1].

    Stays in the autograd graph of ``denoiser`` so losses on the result
    backpropagate into its parameters.
    """
    if y is None:
        raise ValueError("violation loss requires condition")
    eps_hat = denoiser(x_k, k, y)
    return _clip(reverse_step(x_k, k, eps_hat, z, sched))


@torch.no_grad()
def sample(
    denoiser,
    y: torch.Tensor,
    omega: float,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    clip_final: bool = True,
    dim: int | None = None,
) -> torch.Tensor:
    """Draw one trajectory per row of the normalized condition batch ``y``.

    ``denoiser(x, k, y)`` must accept ``y=None`` for the null condition. With
    ``omega == 0`` the unconditional branch is never evaluated.
    """
    n = dim if dim is not None else denoiser.config.input_dim
    b = y.shape[0]
    x = torch.randn(b, n, generator=generator, dtype=y.dtype)
    for k in range(sched.K, 0, -1):
        ks = torch.full((b,), k, dtype=torch.long)
        if omega == 0:
            eps_hat = denoiser(x, ks, y)
        else:
            both = denoiser(torch.cat([x, x]), torch.cat([ks, ks]), torch.cat([y, y]),
                            null_mask=torch.cat([torch.zeros(b, dtype=torch.bool), torch.ones(b, dtype=torch.bool)]))
            eps_hat = guided_noise(both[:b], both[b:], omega)
        z = torch.randn(b, n, generator=generator, dtype=y.dtype) if k > 1 else torch.zeros_like(x)
        x = reverse_step(x, ks, eps_hat, z, sched)
    return _clip(x) if clip_final else x


def sample_many(denoiser, conditions, n_per_condition: int, omega: float, sched: NoiseSchedule,
                seed: int = 0, batch_size: int = 1024, clip_final: bool = True):
    """Draw ``n_per_condition`` samples for every row of normalized ``conditions``.

    Returns ``(samples, index)`` as numpy arrays; samples for one condition are
    contiguous and ``index`` maps each sample to its condition row.
    """
    cond = torch.as_tensor(np.asarray(conditions), dtype=next(denoiser.parameters()).dtype)
    index = np.repeat(np.arange(cond.shape[0]), n_per_condition)
    gen = torch.Generator().manual_seed(seed)
    out = []
    for s in range(0, index.size, batch_size):
        rows = torch.as_tensor(index[s : s + batch_size])
        out.append(sample(denoiser, cond[rows], omega, sched, gen, clip_final))
    samples = torch.cat(out).numpy() if out else np.zeros((0, denoiser.config.input_dim))
    return samples, index
