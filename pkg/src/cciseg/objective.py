"""Loss components: segmentation cross-entropy, cosine alignment, Gaussian
log-likelihood, the contrastive variational MI upper-bound estimate, and the
composite objective.

The MI penalty works on positive pairs (z_i, z_i^do) of latent frames taken
before/after an intervention. A conditional Gaussian q(z | z^do) is fitted by
likelihood ascent; the bound contrasts each pair's conditional log-density
against the density of a uniformly re-drawn companion:

    estimate = mean_i [ log q(z_i | z_i^do) − log q(z_{k_i} | z_i^do) ],
    k_i ~ Uniform{0..N−1}  (self-pairing allowed).

All functions accept numpy arrays or torch tensors and preserve dtype, so the
same code path serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_LAMBDA1 = 0.1
DEFAULT_LAMBDA2 = 1.0

_EPS = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "iub":
        return torch.as_tensor(arr)
    return torch.as_tensor(arr, dtype=torch.float64 if arr.dtype == np.float64 else torch.float32)


def seg_loss(probs, labels) -> torch.Tensor:
    """Mean per-frame cross-entropy.

    ``probs`` of shape (..., T, 1) is treated as a binary beat probability
    against 0/1 labels of shape (..., T); shape (..., T, C) with C > 1 as a
    categorical distribution against integer labels.
    """
    p = _as_tensor(probs)
    y = _as_tensor(labels)
    if p.shape[:-1] != y.shape:
        raise ValueError(f"probability shape {tuple(p.shape)} does not match labels {tuple(y.shape)}")
    if float(p.min()) < -1e-6 or float(p.max()) > 1 + 1e-6:
        raise ValueError("probabilities outside [0, 1]")
    if p.shape[-1] == 1:
        p1 = p[..., 0].clamp(_EPS, 1 - _EPS)
        yf = y.to(p1.dtype)
        ce = -(yf * torch.log(p1) + (1 - yf) * torch.log(1 - p1))
    else:
        logp = torch.log(p.clamp(min=_EPS))
        ce = -logp.gather(-1, y.long().unsqueeze(-1)).squeeze(-1)
    return ce.mean()


def cosine_similarity(a, b) -> torch.Tensor:
    """Cosine of the angle between two vectors; undefined (raises) on zero input."""
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape != tb.shape or ta.dim() != 1:
        raise ValueError("expected two vectors of identical shape")
    na, nb = torch.linalg.vector_norm(ta), torch.linalg.vector_norm(tb)
    if float(na) == 0.0 or float(nb) == 0.0:
        raise ValueError("undefined similarity for a zero vector")
    return (ta @ tb) / (na * nb)


def frame_cosine_mean(z, z_do, eps: float = 1e-8) -> torch.Tensor:
    """Mean per-frame cosine similarity over matched (..., d) frame stacks.

    Norms are floored at ``eps`` so the training path never divides by zero;
    latent frames of a live encoder are never exactly zero in practice.
    """
    tz, tdo = _as_tensor(z), _as_tensor(z_do)
    if tz.shape != tdo.shape:
        raise ValueError("mismatched frame stacks")
    return torch.nn.functional.cosine_similarity(tz, tdo, dim=-1, eps=eps).mean()


def gaussian_loglik(z, mu, var) -> torch.Tensor:
    """Diagonal-Gaussian log-density, summed over the last dimension.

    Σ_j [ −½·ln(2π·var_j) − (z_j − μ_j)² / (2·var_j) ]; requires var > 0.
    """
    tz, tm, tv = _as_tensor(z), _as_tensor(mu), _as_tensor(var)
    if tz.shape != tm.shape or tz.shape != tv.shape:
        raise ValueError("z, mu, and var must share one shape")
    if float(tv.min()) <= 0.0:
        raise ValueError("variance must be strictly positive")
    return (-0.5 * torch.log(2 * torch.pi * tv) - (tz - tm) ** 2 / (2 * tv)).sum(dim=-1)


def qnet_ll(qnet, z, z_do) -> torch.Tensor:
    """Mean conditional log-likelihood of z under q(· | z_do); ascend to fit q."""
    tz, tdo = _as_tensor(z), _as_tensor(z_do)
    if tz.shape != tdo.shape:
        raise ValueError("z and z_do must share one shape")
    if tz.numel() == 0:
        raise ValueError("empty batch")
    mu, var = qnet(tdo)
    return gaussian_loglik(tz, mu, var).mean()


def vcci(qnet, z, z_do, rng: np.random.Generator | None = None,
         neg_idx=None) -> torch.Tensor:
    """Contrastive variational MI upper-bound estimate over N positive pairs.

    ``z`` and ``z_do`` are (N, d) stacks. Negative companions are drawn
    uniformly (with replacement, self allowed) from the batch, either via the
    caller's ``rng`` or a precomputed ``neg_idx``. Returns 0 for N < 2.
    """
    tz, tdo = _as_tensor(z), _as_tensor(z_do)
    if tz.dim() != 2 or tz.shape != tdo.shape:
        raise ValueError("expected matching (N, d) pair stacks")
    n = tz.shape[0]
    if n < 2:
        return torch.zeros((), dtype=tz.dtype)
    if neg_idx is None:
        if rng is None:
            raise ValueError("provide rng or neg_idx for negative sampling")
        neg_idx = rng.integers(0, n, size=n)
    idx = torch.as_tensor(np.asarray(neg_idx, dtype=np.int64))
    if idx.shape != (n,) or int(idx.min()) < 0 or int(idx.max()) >= n:
        raise ValueError("neg_idx must be N indices into the batch")
    mu, var = qnet(tdo)
    pos = gaussian_loglik(tz, mu, var)
    neg = gaussian_loglik(tz[idx], mu, var)
    return (pos - neg).mean()


def fit_qnet(qnet, z, z_do, steps: int = 500, lr: float = 1e-3) -> list[float]:
    """Adam ascent of the conditional log-likelihood; returns the per-step values."""
    tz, tdo = _as_tensor(z).detach(), _as_tensor(z_do).detach()
    opt = torch.optim.Adam(qnet.parameters(), lr=lr)
    trace = []
    for _ in range(steps):
        opt.zero_grad()
        nll = -qnet_ll(qnet, tz, tdo)
        nll.backward()
        opt.step()
        trace.append(-float(nll))
    return trace


@dataclass(frozen=True)
class LossBreakdown:
    l_seg: float
    i_vcci: float
    l_sim: float
    lambda1: float
    lambda2: float
    total: float

    def __post_init__(self):
        if not (-1.0 - 1e-6 <= self.l_sim <= 1.0 + 1e-6):
            raise ValueError(f"l_sim must lie in [-1, 1], got {self.l_sim}")


def total_loss(l_seg: float, i_vcci: float, l_sim: float,
               lambda1: float = DEFAULT_LAMBDA1,
               lambda2: float = DEFAULT_LAMBDA2) -> LossBreakdown:
    """Composite objective: l_seg + λ₁·i_vcci − λ₂·l_sim."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    l_seg, i_vcci, l_sim = float(l_seg), float(i_vcci), float(l_sim)
    return LossBreakdown(
        l_seg=l_seg, i_vcci=i_vcci, l_sim=l_sim,
        lambda1=float(lambda1), lambda2=float(lambda2),
        total=l_seg + lambda1 * i_vcci - lambda2 * l_sim,
    )
