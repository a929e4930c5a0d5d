"""Evidence lower bound of the GP state-space model.

Closed forms are used for the emission expectation, the entropy of q(X),
the prior on x_0 and the inducing-point KL. Only the transition expectation
is estimated, from reparameterised trajectories.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .linalg import inv_softplus, softplus
from .state_posterior import entropy, marginals, sample_trajectory

__all__ = [
    "EmissionModel",
    "ElboBreakdown",
    "emission_term",
    "transition_term",
    "prior_x0_term",
    "elbo_estimate",
]

_DTYPE = torch.float64
_LOG_2PI = math.log(2.0 * math.pi)


class EmissionModel(nn.Module):
    """Linear-Gaussian emission ``y = W_g x + b_g + N(0, s2_g I)``."""

    def __init__(self, obs_dim: int, state_dim: int, sigma_g2: float = 0.1, W=None, b=None, learn: bool = True):
        super().__init__()
        if W is None:
            # select the leading state coordinates
            W = torch.eye(obs_dim, state_dim, dtype=_DTYPE)
        if b is None:
            b = torch.zeros(obs_dim, dtype=_DTYPE)
        W = torch.as_tensor(W, dtype=_DTYPE).reshape(obs_dim, state_dim)
        b = torch.as_tensor(b, dtype=_DTYPE).reshape(obs_dim)
        if sigma_g2 <= 0:
            raise ValueError("sigma_g2 must be positive")
        self.Wg = nn.Parameter(W.clone(), requires_grad=learn)
        self.bg = nn.Parameter(b.clone(), requires_grad=learn)
        self.raw_sigma_g2 = nn.Parameter(torch.tensor(inv_softplus(float(sigma_g2)), dtype=_DTYPE))

    @property
    def sigma_g2(self) -> torch.Tensor:
        return softplus(self.raw_sigma_g2)

    def mean(self, X: torch.Tensor) -> torch.Tensor:
        return X @ self.Wg.T + self.bg


@dataclass
class ElboBreakdown:
    emission: torch.Tensor
    transition: torch.Tensor
    entropy: torch.Tensor
    kl_u: torch.Tensor
    prior_x0: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> "OrderedDict[str, float]":
        return OrderedDict(
            (k, float(getattr(self, k).detach()))
            for k in ("emission", "transition", "entropy", "kl_u", "prior_x0", "total")
        )


def emission_term(em: EmissionModel, means: torch.Tensor, covs: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    """``E_q[log p(Y | X)]`` from marginals ``m_t`` ``(..., T, D)`` and ``S_t`` ``(..., T, D, D)``.

    ``means``/``covs`` must already be restricted to ``t = 1..T``. Sums over
    time; leading batch dimensions are kept.
    """
    s2 = em.sigma_g2
    O = Y.shape[-1]
    resid = Y - em.mean(means)
    WtW = em.Wg.T @ em.Wg
    trace = (WtW * covs).sum((-1, -2))
    per_t = -0.5 * O * (_LOG_2PI + torch.log(s2)) - 0.5 * (resid * resid).sum(-1) / s2 - 0.5 * trace / s2
    return per_t.sum(-1)


def transition_term(gp, xhat: torch.Tensor, actions: torch.Tensor | None = None) -> torch.Tensor:
    """Single-trajectory estimate of the expected transition log-density.

    ``xhat`` is ``(..., T+1, D)``; ``actions`` is ``(..., T, P)`` and holds
    the action applied at each of the first T states. Returns one value per
    leading index.
    """
    xhat = torch.as_tensor(xhat, dtype=_DTYPE)
    prev = xhat[..., :-1, :]
    if actions is not None and actions.shape[-1] > 0:
        actions = torch.as_tensor(actions, dtype=_DTYPE).expand(prev.shape[:-1] + (actions.shape[-1],))
        prev = torch.cat([prev, actions], -1)
    lead = prev.shape[:-1]
    cond = gp.conditional(prev.reshape(-1, prev.shape[-1]))
    mean = cond.mean.reshape(lead + (-1,))
    var = cond.var.reshape(lead + (-1,))
    s2 = gp.sigma_f2
    resid = xhat[..., 1:, :] - mean
    per = -0.5 * var / s2 - 0.5 * (_LOG_2PI + torch.log(s2)) - 0.5 * resid * resid / s2
    return per.sum((-1, -2))


def prior_x0_term(m0: torch.Tensor, L0: torch.Tensor) -> torch.Tensor:
    """``E_{q(x_0)}[log N(x_0 | 0, I)]``."""
    D = m0.shape[-1]
    return -0.5 * D * _LOG_2PI - 0.5 * ((m0 * m0).sum(-1) + (L0 * L0).sum((-1, -2)))


def _group_by_length(batch: Sequence) -> "OrderedDict[int, list[int]]":
    groups: OrderedDict[int, list[int]] = OrderedDict()
    for i, ep in enumerate(batch):
        groups.setdefault(len(ep), []).append(i)
    return groups


def elbo_estimate(
    model,
    batch: Sequence,
    num_samples: int = 1,
    total_episodes: int | None = None,
    rng: np.random.Generator | None = None,
    eps: Sequence[torch.Tensor] | None = None,
) -> ElboBreakdown:
    """Stochastic ELBO for a mini-batch of episodes.

    Per-episode terms are summed and rescaled by ``total_episodes / len(batch)``;
    the inducing KL is subtracted once. Noise comes either from ``rng`` or
    from ``eps``, one ``(num_samples, B_g, T_g + 1, D)`` tensor per group of
    equal-length episodes in order of first appearance.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    total_episodes = len(batch) if total_episodes is None else total_episodes
    if rng is None and eps is None:
        raise ValueError("either rng or eps is required")
    D = model.state_dim
    parts = {"emission": 0.0, "transition": 0.0, "entropy": 0.0, "prior_x0": 0.0}
    for g, (T, idx) in enumerate(_group_by_length(batch).items()):
        Y = torch.as_tensor(np.stack([batch[i].Y for i in idx]), dtype=_DTYPE)
        acts = torch.as_tensor(np.stack([batch[i].A for i in idx]), dtype=_DTYPE)
        q = model.recognition.encode(Y, acts)
        means, covs = marginals(q)
        if eps is not None:
            e = torch.as_tensor(eps[g], dtype=_DTYPE)
        else:
            e = torch.from_numpy(rng.standard_normal((num_samples, len(idx), T + 1, D)))
        xs = sample_trajectory(q, e)
        parts["emission"] = parts["emission"] + emission_term(model.emission, means[:, 1:], covs[:, 1:], Y).sum()
        parts["transition"] = parts["transition"] + transition_term(model.transition, xs, acts).mean(0).sum()
        parts["entropy"] = parts["entropy"] + entropy(q).sum()
        parts["prior_x0"] = parts["prior_x0"] + prior_x0_term(q.m0, q.L0).sum()
    scale = total_episodes / len(batch)
    parts = {k: scale * v for k, v in parts.items()}
    kl = model.transition.kl_u()
    total = parts["emission"] + parts["transition"] + parts["entropy"] - kl + parts["prior_x0"]
    return ElboBreakdown(kl_u=kl, total=total, **parts)
