"""Gauss-Markov posterior over latent state trajectories.

``q(x_0) = N(m_0, L_0 L_0^T)`` and ``q(x_t | x_{t-1}) = N(A_t x_{t-1}, L_t L_t^T)``.
All fields may carry leading batch dimensions (one chain per episode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = ["GaussMarkov", "sample_trajectory", "marginals", "entropy", "joint_covariance"]

_LOG_2PI_E = math.log(2.0 * math.pi) + 1.0


@dataclass
class GaussMarkov:
    m0: torch.Tensor  # (..., D)
    L0: torch.Tensor  # (..., D, D)
    A: torch.Tensor  # (..., T, D, D)
    L: torch.Tensor  # (..., T, D, D)
    b: torch.Tensor | None = None  # (..., T, D) optional offsets of the conditional means

    def __post_init__(self):
        if self.A.shape != self.L.shape:
            raise ValueError(f"A and L shapes differ: {tuple(self.A.shape)} vs {tuple(self.L.shape)}")
        D = self.m0.shape[-1]
        if self.L0.shape[-2:] != (D, D) or self.A.shape[-2:] != (D, D):
            raise ValueError("inconsistent state dimension")

    @property
    def num_steps(self) -> int:
        return self.A.shape[-3]

    @property
    def state_dim(self) -> int:
        return self.m0.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.m0.shape[:-1]

    def __getitem__(self, idx) -> "GaussMarkov":
        return GaussMarkov(self.m0[idx], self.L0[idx], self.A[idx], self.L[idx], None if self.b is None else self.b[idx])


def _mv(M: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (M @ v.unsqueeze(-1)).squeeze(-1)


def sample_trajectory(q: GaussMarkov, eps: torch.Tensor) -> torch.Tensor:
    """Push standard-normal draws ``eps`` of shape ``(..., T+1, D)`` through the chain.

    Extra leading dimensions of ``eps`` (e.g. a sample axis) broadcast against
    the batch shape of ``q``. Differentiable in every field of ``q``.
    """
    T, D = q.num_steps, q.state_dim
    if eps.shape[-2:] != (T + 1, D):
        raise ValueError(f"eps must end in shape {(T + 1, D)}, got {tuple(eps.shape)}")
    x = q.m0 + _mv(q.L0, eps[..., 0, :])
    xs = [x]
    for t in range(T):
        x = _mv(q.A[..., t, :, :], x) + _mv(q.L[..., t, :, :], eps[..., t + 1, :])
        if q.b is not None:
            x = x + q.b[..., t, :]
        xs.append(x)
    return torch.stack(xs, dim=-2)


def marginals(q: GaussMarkov) -> tuple[torch.Tensor, torch.Tensor]:
    """Means ``(..., T+1, D)`` and covariances ``(..., T+1, D, D)`` of every ``q(x_t)``."""
    m = q.m0
    S = q.L0 @ q.L0.transpose(-1, -2)
    means, covs = [m], [S]
    for t in range(q.num_steps):
        A_t = q.A[..., t, :, :]
        L_t = q.L[..., t, :, :]
        m = _mv(A_t, m)
        if q.b is not None:
            m = m + q.b[..., t, :]
        S = A_t @ S @ A_t.transpose(-1, -2) + L_t @ L_t.transpose(-1, -2)
        S = 0.5 * (S + S.transpose(-1, -2))
        means.append(m)
        covs.append(S)
    return torch.stack(means, dim=-2), torch.stack(covs, dim=-3)


def entropy(q: GaussMarkov) -> torch.Tensor:
    """Differential entropy of the whole chain, one value per batch element.

    The shear by ``A_t`` has unit Jacobian, so only the ``L`` factors enter:
    ``(T+1) D / 2 log(2 pi e) + sum_t log det L_t``.
    """
    d0 = torch.diagonal(q.L0, dim1=-2, dim2=-1)
    dt = torch.diagonal(q.L, dim1=-2, dim2=-1)
    if bool((d0 <= 0).any()) or bool((dt <= 0).any()):
        raise ValueError("Gauss-Markov factors must have strictly positive diagonals")
    T, D = q.num_steps, q.state_dim
    logdet = torch.log(d0).sum(-1) + torch.log(dt).sum((-1, -2))
    return 0.5 * (T + 1) * D * _LOG_2PI_E + logdet


def joint_covariance(q: GaussMarkov, max_size: int = 1000) -> torch.Tensor:
    """Dense covariance of ``(x_0, ..., x_T)`` for a single, small chain."""
    if q.m0.dim() != 1:
        raise ValueError("joint_covariance expects an unbatched chain")
    T, D = q.num_steps, q.state_dim
    n = (T + 1) * D
    if n > max_size:
        raise ValueError(f"joint covariance of size {n} exceeds the limit {max_size}")
    _, covs = marginals(q)
    out = q.m0.new_zeros(n, n)
    for s in range(T + 1):
        block = covs[s]
        out[s * D : (s + 1) * D, s * D : (s + 1) * D] = block
        # Cov(x_t, x_s) = A_t ... A_{s+1} S_s for t > s
        cross = block
        for t in range(s + 1, T + 1):
            cross = q.A[t - 1] @ cross
            out[t * D : (t + 1) * D, s * D : (s + 1) * D] = cross
            out[s * D : (s + 1) * D, t * D : (t + 1) * D] = cross.T
    return out
