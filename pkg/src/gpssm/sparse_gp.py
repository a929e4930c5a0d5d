"""Sparse variational posterior over the D transition functions.

Each output dimension ``d`` has a GP prior with the identity-on-state mean
``eta_d(x~) = x~[d]`` and a kernel shared by all dimensions. The inducing
inputs ``Z`` are shared as well; ``q(u_d) = N(mu_d, Sigma_d)``.

With ``whiten=True`` the stored variational parameters describe
``v_d = Lz^{-1}(u_d - eta_d(Z))`` instead of ``u_d``. Both storages define the
same family, and :meth:`SparseGP.q_u` always returns the un-whitened
``(mu_d, chol Sigma_d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .kernels import Kernel
from .linalg import inv_softplus, softplus, tril_from_raw

__all__ = ["SparseGP", "Conditional", "uniform_inducing"]

_DTYPE = torch.float64


@dataclass
class Conditional:
    """Posterior mean/variance of every output dimension at a batch of inputs."""

    mean: torch.Tensor  # (N, D)
    var: torch.Tensor  # (N, D)


def uniform_inducing(low, high, num: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``num`` inducing inputs uniformly inside the box ``[low, high]``."""
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    return low + (high - low) * rng.random((num, low.size))


class SparseGP(nn.Module):
    def __init__(
        self,
        kernel: Kernel,
        Z,
        state_dim: int,
        sigma_f2: float = 0.01,
        q_sqrt_scale: float = 0.1,
        whiten: bool = True,
    ):
        super().__init__()
        Z = torch.as_tensor(Z, dtype=_DTYPE)
        if Z.dim() != 2 or Z.shape[0] < 1:
            raise ValueError("Z must be an (M, D+P) matrix with M >= 1")
        if Z.shape[1] != kernel.input_dim:
            raise ValueError(f"Z has {Z.shape[1]} columns, kernel expects {kernel.input_dim}")
        if not 1 <= state_dim <= Z.shape[1]:
            raise ValueError("state_dim must lie in [1, input_dim]")
        if not bool(torch.isfinite(Z).all()):
            raise ValueError("inducing inputs must be finite")
        self.kernel = kernel
        self.state_dim = int(state_dim)
        self.whiten = bool(whiten)
        self.pinned = False
        M = Z.shape[0]
        self.Z = nn.Parameter(Z.clone())
        self.raw_sigma_f2 = nn.Parameter(torch.tensor(inv_softplus(float(sigma_f2)), dtype=_DTYPE))
        if self.whiten:
            q_mu = torch.zeros(state_dim, M, dtype=_DTYPE)
            chol = q_sqrt_scale * torch.eye(M, dtype=_DTYPE).expand(state_dim, M, M)
        else:
            with torch.no_grad():
                Lz, _ = kernel.gram_cholesky(Z)
            q_mu = Z[:, :state_dim].T.clone()
            chol = q_sqrt_scale * Lz.expand(state_dim, M, M)
        self.q_mu = nn.Parameter(q_mu.contiguous())
        self.q_sqrt_raw = nn.Parameter(_raw_tril(chol))

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def sigma_f2(self) -> torch.Tensor:
        return softplus(self.raw_sigma_f2)

    @property
    def q_sqrt(self) -> torch.Tensor:
        return tril_from_raw(self.q_sqrt_raw)

    def mean_function(self, X: torch.Tensor) -> torch.Tensor:
        """Identity-on-state prior mean, ``(N, D+P) -> (N, D)``."""
        return X[..., : self.state_dim]

    def _chol_zz(self) -> torch.Tensor:
        Lz, _ = self.kernel.gram_cholesky(self.Z)
        return Lz

    def q_u(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Un-whitened ``(mu, chol_Sigma)`` with shapes ``(D, M)`` and ``(D, M, M)``."""
        if not self.whiten:
            return self.q_mu, self.q_sqrt
        Lz = self._chol_zz()
        mu = self.mean_function(self.Z).T + self.q_mu @ Lz.T
        return mu, Lz @ self.q_sqrt

    def set_q_u(self, mu, chol_sigma) -> None:
        """Overwrite the variational parameters from un-whitened values."""
        mu = torch.as_tensor(mu, dtype=_DTYPE)
        chol_sigma = torch.as_tensor(chol_sigma, dtype=_DTYPE)
        with torch.no_grad():
            if self.whiten:
                Lz = self._chol_zz()
                eta = self.mean_function(self.Z).T
                m = torch.linalg.solve_triangular(Lz, (mu - eta).unsqueeze(-1), upper=False).squeeze(-1)
                S = torch.linalg.solve_triangular(Lz, chol_sigma, upper=False)
            else:
                m, S = mu, chol_sigma
            self.q_mu.copy_(m)
            self.q_sqrt_raw.copy_(_raw_tril(S))

    def reset_to_prior(self) -> None:
        """Set ``q(u_d) = p(u_d)`` for every dimension."""
        M, D = self.num_inducing, self.state_dim
        with torch.no_grad():
            if self.whiten:
                self.q_mu.zero_()
                self.q_sqrt_raw.copy_(_raw_tril(torch.eye(M, dtype=_DTYPE).expand(D, M, M)))
            else:
                Lz = self._chol_zz()
                self.q_mu.copy_(self.mean_function(self.Z).T)
                self.q_sqrt_raw.copy_(_raw_tril(Lz.expand(D, M, M)))

    def conditional(self, Xs: torch.Tensor) -> Conditional:
        """Marginal posterior ``mu_d(x), v_d(x, x)`` for every row of ``Xs``."""
        Xs = torch.as_tensor(Xs, dtype=_DTYPE)
        eta = self.mean_function(Xs)
        if self.pinned:
            return Conditional(eta, torch.zeros_like(eta))
        Lz = self._chol_zz()
        Kzx = self.kernel.cross(self.Z, Xs)
        A = torch.linalg.solve_triangular(Lz, Kzx, upper=False)  # (M, N)
        kxx = self.kernel.diag(Xs)
        S = self.q_sqrt
        if self.whiten:
            proj = A  # whitened coordinates
            resid = self.q_mu
        else:
            proj = torch.linalg.solve_triangular(Lz.T, A, upper=True)  # Kzz^{-1} Kzx
            resid = self.q_mu - self.mean_function(self.Z).T
        mean = eta + (resid @ proj).T
        SA = S.transpose(-1, -2) @ proj  # (D, M, N)
        var = kxx.unsqueeze(0) - (A * A).sum(0).unsqueeze(0) + (SA * SA).sum(-2)
        return Conditional(mean, var.T.clamp_min(0.0))

    def posterior_mean(self, d: int, Xs: torch.Tensor) -> torch.Tensor:
        return self.conditional(Xs).mean[:, d]

    def posterior_var(self, d: int, Xs: torch.Tensor) -> torch.Tensor:
        return self.conditional(Xs).var[:, d]

    def kl_u(self) -> torch.Tensor:
        """``sum_d KL[q(u_d) || N(eta_d(Z), Kzz)]``."""
        if self.pinned:
            return torch.zeros((), dtype=_DTYPE)
        S = self.q_sqrt
        M, D = self.num_inducing, self.state_dim
        if self.whiten:
            W, m = S, self.q_mu
        else:
            Lz = self._chol_zz()
            W = torch.linalg.solve_triangular(Lz, S, upper=False)
            m = torch.linalg.solve_triangular(
                Lz, (self.q_mu - self.mean_function(self.Z).T).unsqueeze(-1), upper=False
            ).squeeze(-1)
        # log det of Lz cancels between log|Kzz| and log|Sigma| after whitening
        logdet_w = torch.log(torch.diagonal(W, dim1=-2, dim2=-1).abs()).sum()
        return 0.5 * ((W * W).sum() + (m * m).sum() - M * D) - logdet_w


def _raw_tril(L: torch.Tensor) -> torch.Tensor:
    diag = torch.diagonal(L, dim1=-2, dim2=-1)
    return (torch.tril(L, -1) + torch.diag_embed(inv_softplus(diag))).contiguous().clone()

