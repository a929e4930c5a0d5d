"""Covariance functions over state-action inputs.

Every kernel is a ``torch.nn.Module`` whose positive hyperparameters are
stored unconstrained and mapped through softplus. The main entry points are
:meth:`Kernel.cross` (``K(X, Z)``), :meth:`Kernel.gram` and
:meth:`Kernel.diag`.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .linalg import inv_softplus, jittered_cholesky, softplus

__all__ = [
    "Kernel",
    "RBF",
    "Matern12",
    "ArcCosine0",
    "Sum",
    "WarpNet",
    "Warped",
    "build_kernel",
    "warp",
]

_DTYPE = torch.float64


def _as_matrix(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=_DTYPE)
    return x.reshape(1, -1) if x.dim() <= 1 else x


class Kernel(nn.Module):
    """Base class. Subclasses implement ``_cross`` and ``_diag``."""

    input_dim: int

    @property
    def total_variance(self) -> torch.Tensor:
        raise NotImplementedError

    def _cross(self, X: torch.Tensor, Z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _diag(self, X: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _check(self, X: torch.Tensor) -> None:
        if X.shape[-1] != self.input_dim:
            raise ValueError(
                f"input dimension {X.shape[-1]} does not match kernel input dimension {self.input_dim}"
            )

    def cross(self, X: torch.Tensor, Z: torch.Tensor) -> torch.Tensor:
        """Cross-covariance ``K[i, j] = k(X_i, Z_j)`` of shape ``(..., N, M)``."""
        X, Z = _as_matrix(X), _as_matrix(Z)
        self._check(X)
        self._check(Z)
        return self._cross(X, Z)

    def diag(self, X: torch.Tensor) -> torch.Tensor:
        """``k(X_i, X_i)`` for every row, without forming the Gram matrix."""
        X = _as_matrix(X)
        self._check(X)
        return self._diag(X)

    def evaluate(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Scalar ``k(x, y)`` for two input vectors."""
        x = torch.as_tensor(x, dtype=_DTYPE).reshape(1, -1)
        y = torch.as_tensor(y, dtype=_DTYPE).reshape(1, -1)
        if x.shape != y.shape:
            raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
        return self.cross(x, y)[0, 0]

    def gram(self, X: torch.Tensor, jitter: float = 0.0) -> torch.Tensor:
        """Symmetric Gram matrix of ``X`` with ``jitter`` added to the diagonal."""
        X = _as_matrix(X)
        K = self.cross(X, X)
        K = 0.5 * (K + K.transpose(-1, -2))
        if jitter:
            K = K + jitter * torch.eye(K.shape[-1], dtype=K.dtype)
        return K

    def gram_cholesky(self, X: torch.Tensor) -> tuple[torch.Tensor, float]:
        """Cholesky factor of ``gram(X)`` plus the absolute jitter it needed.

        Jitter starts at ``1e-6 * variance`` and grows x10 up to
        ``1e-2 * variance``.
        """
        K = self.gram(X)
        L, rel = jittered_cholesky(K, self.total_variance)
        return L, rel * float(self.total_variance.detach())


class _Stationary(Kernel):
    def __init__(self, input_dim: int, variance: float = 1.0, lengthscale: float | Sequence[float] = 1.0, ard: bool = False):
        super().__init__()
        self.input_dim = int(input_dim)
        self.ard = bool(ard)
        n_ls = self.input_dim if ard else 1
        ls = torch.as_tensor(lengthscale, dtype=_DTYPE).flatten()
        if ls.numel() == 1:
            ls = ls.expand(n_ls).clone()
        if ls.numel() != n_ls:
            raise ValueError(f"expected {n_ls} lengthscales, got {ls.numel()}")
        if variance <= 0 or bool((ls <= 0).any()):
            raise ValueError("variance and lengthscales must be positive")
        self.raw_variance = nn.Parameter(torch.tensor(inv_softplus(float(variance)), dtype=_DTYPE))
        self.raw_lengthscale = nn.Parameter(inv_softplus(ls))

    @property
    def variance(self) -> torch.Tensor:
        return softplus(self.raw_variance)

    @property
    def lengthscale(self) -> torch.Tensor:
        return softplus(self.raw_lengthscale)

    @property
    def total_variance(self) -> torch.Tensor:
        return self.variance

    def _scaled_sqdist(self, X, Z):
        diff = (X.unsqueeze(-2) - Z.unsqueeze(-3)) / self.lengthscale
        return (diff * diff).sum(-1)

    def _diag(self, X):
        return self.variance.expand(X.shape[:-1])


class RBF(_Stationary):
    """``s2 * exp(-0.5 * sum_i (x_i - y_i)^2 / l_i^2)``."""

    def _cross(self, X, Z):
        return self.variance * torch.exp(-0.5 * self._scaled_sqdist(X, Z))


class Matern12(_Stationary):
    """Exponential kernel ``s2 * exp(-r)`` with ``r`` the scaled distance."""

    def _cross(self, X, Z):
        r2 = self._scaled_sqdist(X, Z)
        positive = r2 > 0
        # sqrt has an infinite slope at 0; the cusp gets a zero subgradient
        r = torch.where(positive, torch.sqrt(torch.where(positive, r2, torch.ones_like(r2))), torch.zeros_like(r2))
        return self.variance * torch.exp(-r)


class ArcCosine0(_Stationary):
    """Order-0 arc-cosine kernel ``s2 * (1 - theta / pi)``.

    Inputs are divided by the lengthscales before the angle is taken.
    ``theta`` is 0 when either input is the zero vector.
    """

    _EDGE = 1e-12

    def _cross(self, X, Z):
        Xs = X / self.lengthscale
        Zs = Z / self.lengthscale
        nx = torch.linalg.vector_norm(Xs, dim=-1)
        nz = torch.linalg.vector_norm(Zs, dim=-1)
        denom = nx.unsqueeze(-1) * nz.unsqueeze(-2)
        dots = Xs @ Zs.transpose(-1, -2)
        nonzero = denom > 0
        cos = torch.where(nonzero, dots / torch.where(nonzero, denom, torch.ones_like(denom)), torch.ones_like(denom))
        cos = cos.clamp(-1.0, 1.0)
        interior = cos.abs() < 1.0 - self._EDGE
        # arccos is singular at +-1; those entries get constant angles and zero gradient
        theta = torch.where(
            interior,
            torch.arccos(torch.where(interior, cos, torch.zeros_like(cos))),
            torch.where(cos > 0, torch.zeros_like(cos), torch.full_like(cos, math.pi)),
        )
        return self.variance * (1.0 - theta / math.pi)


class Sum(Kernel):
    def __init__(self, kernels: Sequence[Kernel]):
        super().__init__()
        if len(kernels) < 2:
            raise ValueError("a sum kernel needs at least two children")
        dims = {k.input_dim for k in kernels}
        if len(dims) != 1:
            raise ValueError(f"children disagree on input dimension: {sorted(dims)}")
        self.input_dim = dims.pop()
        self.kernels = nn.ModuleList(kernels)

    @property
    def total_variance(self):
        return sum(k.total_variance for k in self.kernels)

    def _cross(self, X, Z):
        return sum(k._cross(X, Z) for k in self.kernels)

    def _diag(self, X):
        return sum(k._diag(X) for k in self.kernels)


class WarpNet(nn.Module):
    """Feed-forward tanh network used to warp kernel inputs."""

    def __init__(self, input_dim: int, widths: Sequence[int], init_scale: float = 1.0, seed: int = 0):
        super().__init__()
        if not widths:
            raise ValueError("warp network needs at least one layer")
        self.input_dim = int(input_dim)
        self.widths = [int(w) for w in widths]
        gen = torch.Generator().manual_seed(seed)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        fan_in = self.input_dim
        for width in self.widths:
            bound = init_scale / math.sqrt(fan_in)
            w = (torch.rand(width, fan_in, generator=gen, dtype=_DTYPE) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(width, dtype=_DTYPE)))
            fan_in = width

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"warp input has dimension {x.shape[-1]}, expected {self.input_dim}")
        h = x
        for w, b in zip(self.weights, self.biases):
            h = torch.tanh(h @ w.transpose(-1, -2) + b)
        return h


class Warped(Kernel):
    """``k(x, y) = base(warp(x), warp(y))`` with a leaf base kernel."""

    def __init__(self, net: WarpNet, base: Kernel):
        super().__init__()
        if isinstance(base, (Sum, Warped)):
            raise ValueError("the base of a warped kernel must be a leaf kernel")
        if base.input_dim != net.output_dim:
            raise ValueError("base kernel input dimension must equal the warp output width")
        self.input_dim = net.input_dim
        self.net = net
        self.base = base

    @property
    def total_variance(self):
        return self.base.total_variance

    def _cross(self, X, Z):
        return self.base._cross(self.net(X), self.net(Z))

    def _diag(self, X):
        return self.base._diag(self.net(X))


def warp(net: WarpNet, x: torch.Tensor) -> torch.Tensor:
    return net(torch.as_tensor(x, dtype=_DTYPE))


_LEAVES = {"rbf": RBF, "matern12": Matern12, "arccosine0": ArcCosine0}


def build_kernel(spec: dict, input_dim: int) -> Kernel:
    """Build a kernel from a config mapping.

    ``{"type": "rbf", "variance": 1.0, "lengthscale": 10.0, "ard": false}``;
    ``{"type": "sum", "children": [...]}``;
    ``{"type": "warped", "widths": [3, 2, 3, 2, 3], "base": {...}}``.
    """
    kind = spec["type"].lower()
    if kind in _LEAVES:
        return _LEAVES[kind](
            input_dim,
            variance=spec.get("variance", 1.0),
            lengthscale=spec.get("lengthscale", 1.0),
            ard=spec.get("ard", False),
        )
    if kind == "sum":
        return Sum([build_kernel(child, input_dim) for child in spec["children"]])
    if kind == "warped":
        net = WarpNet(input_dim, spec["widths"], seed=spec.get("seed", 0))
        return Warped(net, build_kernel(spec["base"], net.output_dim))
    raise ValueError(f"unknown kernel type {spec['type']!r}")
