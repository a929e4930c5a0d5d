"""Bi-directional GRU recognition network producing Gauss-Markov parameters."""

from __future__ import annotations

import torch
from torch import nn

from .linalg import inv_softplus, unpack_tril
from .state_posterior import GaussMarkov

__all__ = ["GRUCell", "RecognitionNet", "gru_step"]

_DTYPE = torch.float64


class GRUCell(nn.Module):
    """Single GRU cell with gates stacked as ``[update, reset, candidate]``.

    ``W`` acts on the input (``3H x In``), ``U`` on the hidden state
    (``3H x H``). The reset gate multiplies the hidden state *before* the
    recurrent matrix of the candidate.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        H = self.hidden_dim
        self.W = nn.Parameter(torch.zeros(3 * H, self.input_dim, dtype=_DTYPE))
        self.U = nn.Parameter(torch.zeros(3 * H, H, dtype=_DTYPE))
        self.b = nn.Parameter(torch.zeros(3 * H, dtype=_DTYPE))

    def reset_parameters(self, gen: torch.Generator, input_scale: float = 0.1) -> None:
        H = self.hidden_dim
        with torch.no_grad():
            self.W.copy_((torch.rand(self.W.shape, generator=gen, dtype=_DTYPE) * 2 - 1) * input_scale)
            for g in range(3):
                q, r = torch.linalg.qr(torch.randn(H, H, generator=gen, dtype=_DTYPE))
                self.U[g * H : (g + 1) * H].copy_(q * torch.sign(torch.diagonal(r)))
            self.b.zero_()

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        H = self.hidden_dim
        gx = x @ self.W.T + self.b
        Wz, Wr, Wh = gx[..., :H], gx[..., H : 2 * H], gx[..., 2 * H :]
        Uz, Ur, Uh = self.U[:H], self.U[H : 2 * H], self.U[2 * H :]
        z = torch.sigmoid(Wz + h @ Uz.T)
        r = torch.sigmoid(Wr + h @ Ur.T)
        cand = torch.tanh(Wh + (r * h) @ Uh.T)
        return (1.0 - z) * h + z * cand


def gru_step(cell: GRUCell, h_prev: torch.Tensor, inp: torch.Tensor) -> torch.Tensor:
    return cell(torch.as_tensor(h_prev, dtype=_DTYPE), torch.as_tensor(inp, dtype=_DTYPE))


class RecognitionNet(nn.Module):
    """Maps an episode ``[y_t, a_t]_{t=1..T}`` to ``q(X)``.

    ``A_t`` and ``L_t`` come from affine heads on ``[h_f_t; h_b_t]``;
    ``(m_0, L_0)`` come from a head on the backward state after it has
    consumed the whole sequence.
    """

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        state_dim: int,
        hidden_dim: int,
        seed: int = 0,
        init_transition_std: float = 0.1,
        init_state_std: float = 1.0,
        head_scale: float = 0.01,
        offset: bool = False,
    ):
        super().__init__()
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.state_dim = D = int(state_dim)
        self.hidden_dim = H = int(hidden_dim)
        n_in = self.obs_dim + self.action_dim
        n_tri = D * (D + 1) // 2
        self.fwd = GRUCell(n_in, H)
        self.bwd = GRUCell(n_in, H)
        self.head_A = nn.Linear(2 * H, D * D, dtype=_DTYPE)
        self.head_L = nn.Linear(2 * H, n_tri, dtype=_DTYPE)
        self.head_init = nn.Linear(H, D + n_tri, dtype=_DTYPE)
        self.head_b = nn.Linear(2 * H, D, dtype=_DTYPE) if offset else None
        # fixed input standardisation, set from training data
        self.register_buffer("input_shift", torch.zeros(n_in, dtype=_DTYPE))
        self.register_buffer("input_scale", torch.ones(n_in, dtype=_DTYPE))

        gen = torch.Generator().manual_seed(seed)
        self.fwd.reset_parameters(gen)
        self.bwd.reset_parameters(gen)
        rows, cols = torch.tril_indices(D, D)
        diag = rows == cols
        with torch.no_grad():
            for head in (self.head_A, self.head_L, self.head_init, self.head_b):
                if head is None:
                    continue
                head.weight.copy_((torch.rand(head.weight.shape, generator=gen, dtype=_DTYPE) * 2 - 1) * head_scale)
                head.bias.zero_()
            self.head_A.bias.copy_(torch.eye(D, dtype=_DTYPE).flatten())
            self.head_L.bias[diag] = inv_softplus(init_transition_std)
            self.head_init.bias[D:][diag] = inv_softplus(init_state_std)

    def set_standardisation(self, shift, scale) -> None:
        with torch.no_grad():
            self.input_shift.copy_(torch.as_tensor(shift, dtype=_DTYPE))
            self.input_scale.copy_(torch.as_tensor(scale, dtype=_DTYPE).clamp_min(1e-8))

    def hidden_states(self, inputs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Forward and backward hidden sequences, each ``(B, T, H)``."""
        B, T, _ = inputs.shape
        x = (inputs - self.input_shift) / self.input_scale
        h = inputs.new_zeros(B, self.hidden_dim)
        hf = []
        for t in range(T):
            h = self.fwd(h, x[:, t])
            hf.append(h)
        h = inputs.new_zeros(B, self.hidden_dim)
        hb = [None] * T
        for t in range(T - 1, -1, -1):
            h = self.bwd(h, x[:, t])
            hb[t] = h
        return torch.stack(hf, 1), torch.stack(hb, 1)

    def encode(self, Y: torch.Tensor, actions: torch.Tensor | None = None) -> GaussMarkov:
        """Encode a batch of equal-length episodes.

        ``Y`` is ``(B, T, O)`` or ``(T, O)``; ``actions`` is ``(B, T, P)``
        (may be omitted when ``P == 0``). An unbatched input gives an
        unbatched result.
        """
        Y = torch.as_tensor(Y, dtype=_DTYPE)
        unbatched = Y.dim() == 2
        if unbatched:
            Y = Y.unsqueeze(0)
            if actions is not None:
                actions = torch.as_tensor(actions, dtype=_DTYPE).unsqueeze(0)
        B, T, O = Y.shape
        if T < 1:
            raise ValueError("cannot encode an empty episode")
        if O != self.obs_dim:
            raise ValueError(f"observations have dimension {O}, expected {self.obs_dim}")
        if actions is None:
            actions = Y.new_zeros(B, T, 0)
        actions = torch.as_tensor(actions, dtype=_DTYPE)
        if actions.shape != (B, T, self.action_dim):
            raise ValueError(f"actions must have shape {(B, T, self.action_dim)}, got {tuple(actions.shape)}")
        hf, hb = self.hidden_states(torch.cat([Y, actions], -1))
        D = self.state_dim
        both = torch.cat([hf, hb], -1)
        A = self.head_A(both).reshape(B, T, D, D)
        L = unpack_tril(self.head_L(both), D)
        init = self.head_init(hb[:, 0])
        m0 = init[:, :D]
        L0 = unpack_tril(init[:, D:], D)
        b = None if self.head_b is None else self.head_b(both)
        q = GaussMarkov(m0, L0, A, L, b)
        return q[0] if unbatched else q
