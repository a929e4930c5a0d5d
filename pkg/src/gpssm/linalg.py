"""Differentiable linear-algebra primitives shared by the model.

The Cholesky factorisation carries its own reverse-mode rule (the blocked
backward recurrence for ``Sigma_bar`` given ``L_bar``). Everything else is
composed from torch ops whose derivatives torch already provides.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

__all__ = [
    "CholeskyError",
    "cholesky",
    "jittered_cholesky",
    "chol_rev",
    "softplus",
    "inv_softplus",
    "tril_from_raw",
    "raw_from_tril",
    "pack_tril",
    "unpack_tril",
]

LOG_2PI = math.log(2.0 * math.pi)


class CholeskyError(ArithmeticError):
    """Raised when a matrix stays non-factorisable after jitter escalation."""

    def __init__(self, message: str, jitters: list[float]):
        super().__init__(f"{message} (attempted jitter levels: {jitters})")
        self.jitters = list(jitters)


def _phi(a: torch.Tensor) -> torch.Tensor:
    # lower triangle with the diagonal halved
    out = torch.tril(a)
    return out - 0.5 * torch.diag_embed(torch.diagonal(out, dim1=-2, dim2=-1))


def _solve_lower_right(b: torch.Tensor, lower: torch.Tensor) -> torch.Tensor:
    # b @ inv(lower)
    return torch.linalg.solve_triangular(lower, b, upper=False, left=False)


def _chol_symbolic_rev(L: torch.Tensor, Lbar: torch.Tensor) -> torch.Tensor:
    P = _phi(L.transpose(-1, -2) @ Lbar)
    P = P + P.transpose(-1, -2)
    # inv(L).T @ P @ inv(L)
    tmp = torch.linalg.solve_triangular(L.transpose(-1, -2), P, upper=True)
    tmp = _solve_lower_right(tmp, L)
    return _phi(tmp)


def chol_rev(L: torch.Tensor, Lbar: torch.Tensor, block_size: int = 64) -> torch.Tensor:
    """Blocked reverse-mode update through ``A = L L^T``.

    Given the sensitivity ``Lbar`` of a scalar with respect to the lower
    Cholesky factor, return the lower triangle of the sensitivity with
    respect to ``A`` (treating the upper triangle of ``A`` as unused). Works
    on arbitrary leading batch dimensions.
    """
    n = L.shape[-1]
    Abar = torch.tril(Lbar).clone()
    for k in range(n, 0, -block_size):
        j = max(0, k - block_size)
        R = L[..., j:k, :j]
        D = L[..., j:k, j:k]
        B = L[..., k:, :j]
        C = L[..., k:, j:k]
        Rbar = Abar[..., j:k, :j]
        Dbar = Abar[..., j:k, j:k]
        Bbar = Abar[..., k:, :j]
        Cbar = Abar[..., k:, j:k]
        if k < n:
            Cbar = _solve_lower_right(Cbar, D)
            Bbar = Bbar - Cbar @ R
            Dbar = torch.tril(Dbar) - torch.tril(Cbar.transpose(-1, -2) @ C)
        Dbar = _chol_symbolic_rev(D, Dbar)
        if j > 0:
            Rbar = Rbar - (Cbar.transpose(-1, -2) @ B) - (Dbar + Dbar.transpose(-1, -2)) @ R
        Abar[..., j:k, :j] = Rbar
        Abar[..., j:k, j:k] = Dbar
        Abar[..., k:, :j] = Bbar
        Abar[..., k:, j:k] = Cbar
    return torch.tril(Abar)


class _Cholesky(torch.autograd.Function):
    @staticmethod
    def forward(ctx, A, block_size):
        L, info = torch.linalg.cholesky_ex(A)
        if bool((info != 0).any()):
            raise torch.linalg.LinAlgError("matrix is not positive definite")
        ctx.save_for_backward(L)
        ctx.block_size = block_size
        return L

    @staticmethod
    def backward(ctx, Lbar):
        (L,) = ctx.saved_tensors
        Abar = chol_rev(L, Lbar, ctx.block_size)
        # symmetric gradient: A is symmetric by contract
        return 0.5 * (Abar + Abar.transpose(-1, -2)), None


def cholesky(A: torch.Tensor, block_size: int = 64) -> torch.Tensor:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    return _Cholesky.apply(A, block_size)


def jittered_cholesky(
    K: torch.Tensor,
    scale: float | torch.Tensor = 1.0,
    start: float = 1e-6,
    stop: float = 1e-2,
) -> tuple[torch.Tensor, float]:
    """Factorise ``K + jitter * scale * I`` escalating the jitter by x10.

    Returns the factor and the relative jitter actually used. ``scale`` is
    usually the kernel variance so that jitter is relative to it.
    """
    scale_value = float(scale.detach()) if torch.is_tensor(scale) else float(scale)
    eye = torch.eye(K.shape[-1], dtype=K.dtype, device=K.device)
    tried: list[float] = []
    jitter = start
    while jitter <= stop * (1.0 + 1e-9):
        level = jitter * scale_value
        tried.append(level)
        try:
            return cholesky(K + level * eye), jitter
        except torch.linalg.LinAlgError:
            jitter *= 10.0
    raise CholeskyError("Cholesky factorisation failed", tried)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def inv_softplus(y):
    """Inverse of softplus for positive ``y`` (float or tensor)."""
    if torch.is_tensor(y):
        return y + torch.log(-torch.expm1(-y))
    return y + math.log(-math.expm1(-y))


def tril_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """Map an unconstrained square matrix to lower-triangular with positive diagonal."""
    diag = softplus(torch.diagonal(raw, dim1=-2, dim2=-1))
    return torch.tril(raw, -1) + torch.diag_embed(diag)


def raw_from_tril(L: torch.Tensor) -> torch.Tensor:
    diag = inv_softplus(torch.diagonal(L, dim1=-2, dim2=-1))
    return torch.tril(L, -1) + torch.diag_embed(diag)


def _tril_indices(n: int) -> tuple[torch.Tensor, torch.Tensor]:
    # row-major order of the lower triangle
    rows, cols = torch.tril_indices(n, n)
    return rows, cols


def unpack_tril(vec: torch.Tensor, n: int, positive_diag: bool = True) -> torch.Tensor:
    """Fill an ``n x n`` lower triangle row-major from the last axis of ``vec``.

    With ``positive_diag`` the diagonal entries pass through softplus.
    """
    rows, cols = _tril_indices(n)
    if vec.shape[-1] != rows.numel():
        raise ValueError(f"expected {rows.numel()} packed values, got {vec.shape[-1]}")
    if positive_diag:
        on_diag = (rows == cols).to(vec.device)
        vec = torch.where(on_diag, softplus(vec), vec)
    out = vec.new_zeros(vec.shape[:-1] + (n, n))
    out[..., rows, cols] = vec
    return out


def pack_tril(L: torch.Tensor) -> torch.Tensor:
    n = L.shape[-1]
    rows, cols = _tril_indices(n)
    return L[..., rows, cols]
