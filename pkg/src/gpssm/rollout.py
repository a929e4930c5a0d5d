"""Free simulation of a learned model, transition export, and error metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "RolloutResult",
    "free_simulate",
    "initial_state_from_prefix",
    "transition_grid",
    "write_transition_csv",
    "write_rollout_quantiles",
    "tip_positions",
    "tip_error",
    "rmse_per_channel",
]

_DTYPE = torch.float64


@dataclass
class RolloutResult:
    samples: np.ndarray  # (S, T+1, D) latent trajectories
    observations: np.ndarray  # (S, T, O)
    std: np.ndarray  # (T, O) across-sample std of the observations

    @property
    def mean_observations(self) -> np.ndarray:
        return self.observations.mean(0)


def initial_state_from_prefix(model, Y_prefix, A_prefix=None) -> tuple[torch.Tensor, torch.Tensor]:
    """``(m_0, L_0)`` recognised from the first observations of an episode."""
    with torch.no_grad():
        q = model.recognition.encode(torch.as_tensor(Y_prefix, dtype=_DTYPE), None if A_prefix is None or np.size(A_prefix) == 0 else torch.as_tensor(A_prefix, dtype=_DTYPE))
    return q.m0, q.L0


def _frozen_function(model, rng: np.random.Generator, S: int):
    """Draw ``u_d ~ q(u_d)`` for each sample; return ``f(x~)`` conditional means."""
    gp = model.transition
    mu, chol = gp.q_u()
    D, M = mu.shape
    eps = torch.from_numpy(rng.standard_normal((S, D, M)))
    u = mu + (chol @ eps.unsqueeze(-1)).squeeze(-1)  # (S, D, M)
    Lz, _ = gp.kernel.gram_cholesky(gp.Z)
    resid = u - gp.mean_function(gp.Z).T  # (S, D, M)
    alpha = torch.cholesky_solve(resid.transpose(-1, -2), Lz)  # (S, M, D)

    def f(x):  # x: (S, D+P)
        Kxz = gp.kernel.cross(x, gp.Z)  # (S, M)
        return gp.mean_function(x) + torch.einsum("sm,smd->sd", Kxz, alpha)

    return f


def free_simulate(
    model,
    actions,
    num_samples: int = 1,
    seed: int = 0,
    init=None,
    prefix=None,
    horizon: int | None = None,
    process_noise: bool = True,
    observation_noise: bool = False,
    freeze_function: bool = False,
) -> RolloutResult:
    """Roll the learned dynamics forward under ``actions`` (``T x P``).

    The initial state comes from ``init = (m_0, L_0)`` or is recognised from
    ``prefix = (Y_prefix, A_prefix)``. Each step draws
    ``x_t ~ N(mu(x~_{t-1}), v(x~_{t-1}) + s2_f)`` from the per-step GP
    marginals; with ``process_noise=False`` the initial state is its mean and
    every step follows the posterior mean. ``freeze_function`` instead draws
    one function per sample through its inducing values.
    """
    rng = np.random.default_rng(seed)
    D, P = model.state_dim, model.action_dim
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2:
        actions = actions.reshape(len(actions) if actions.ndim else 0, -1) if actions.size else np.zeros((0, P))
    if actions.shape[1] != P:
        raise ValueError(f"model expects {P} action dimensions, got {actions.shape[1]}")
    T = len(actions) if horizon is None else int(horizon)
    if T > len(actions):
        if P:
            raise ValueError(f"horizon {T} exceeds the {len(actions)} supplied actions")
        actions = np.zeros((T, 0))
    actions = actions[:T]
    if init is None and prefix is None:
        raise ValueError("free_simulate needs an initial state (init) or an observation prefix")
    with torch.no_grad():
        if init is None:
            m0, L0 = initial_state_from_prefix(model, *prefix)
        else:
            m0, L0 = (torch.as_tensor(v, dtype=_DTYPE) for v in init)
        if m0.shape != (D,) or L0.shape != (D, D):
            raise ValueError("initial state has the wrong dimension for this model")
        S = int(num_samples)
        if process_noise:
            x = m0 + torch.from_numpy(rng.standard_normal((S, D))) @ L0.T
        else:
            x = m0.expand(S, D).clone()
        f = _frozen_function(model, rng, S) if freeze_function else None
        sf2 = model.transition.sigma_f2
        acts = torch.from_numpy(actions)
        xs = [x]
        for t in range(T):
            inp = torch.cat([x, acts[t].expand(S, P)], -1) if P else x
            if f is not None:
                mean, var = f(inp), torch.zeros(S, D, dtype=_DTYPE)
            else:
                cond = model.transition.conditional(inp)
                mean, var = cond.mean, cond.var
            if process_noise:
                x = mean + torch.sqrt(var + sf2) * torch.from_numpy(rng.standard_normal((S, D)))
            else:
                x = mean
            xs.append(x)
        X = torch.stack(xs, 1)
        Yp = model.emission.mean(X[:, 1:])
        if observation_noise:
            Yp = Yp + torch.sqrt(model.emission.sigma_g2) * torch.from_numpy(rng.standard_normal(tuple(Yp.shape)))
    obs = Yp.numpy()
    std = obs.std(0) if S > 1 else np.zeros(obs.shape[1:])
    return RolloutResult(X.numpy(), obs, std)


def transition_grid(model, grid) -> dict:
    """Posterior mean and variance of every transition output at probe inputs.

    Returns ``{"inputs": (N, D+P), "mean": (N, D), "var": (N, D), "Z": (M, D+P),
    "Z_mean": (M, D)}``.
    """
    gp = model.transition
    grid = torch.as_tensor(np.asarray(grid, dtype=np.float64).reshape(-1, gp.input_dim))
    with torch.no_grad():
        cond = gp.conditional(grid)
        zc = gp.conditional(gp.Z)
    return {
        "inputs": grid.numpy(),
        "mean": cond.mean.numpy(),
        "var": cond.var.numpy(),
        "Z": gp.Z.detach().numpy().copy(),
        "Z_mean": zc.mean.numpy(),
    }


def write_transition_csv(table: dict, path) -> None:
    """Rows of ``kind, x_0.., mean_d, var_d, lower_d, upper_d`` (band is +-2 sd)."""
    n_in = table["inputs"].shape[1]
    D = table["mean"].shape[1]
    header = ["kind"] + [f"x{i}" for i in range(n_in)]
    for d in range(D):
        header += [f"mean_{d}", f"var_{d}", f"lower_{d}", f"upper_{d}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(table["inputs"])):
            row = ["grid"] + [repr(float(v)) for v in table["inputs"][i]]
            for d in range(D):
                mu, var = float(table["mean"][i, d]), float(table["var"][i, d])
                sd = math.sqrt(max(var, 0.0))
                row += [repr(mu), repr(var), repr(mu - 2 * sd), repr(mu + 2 * sd)]
            w.writerow(row)
        for i in range(len(table["Z"])):
            row = ["inducing"] + [repr(float(v)) for v in table["Z"][i]]
            for d in range(D):
                row += [repr(float(table["Z_mean"][i, d])), "", "", ""]
            w.writerow(row)


def write_rollout_quantiles(result: RolloutResult, path) -> None:
    obs = result.observations
    O = obs.shape[2]
    header = ["t"]
    for o in range(O):
        header += [f"mean_{o}", f"p05_{o}", f"p95_{o}"]
    mean = obs.mean(0)
    p05, p95 = np.percentile(obs, 5, axis=0), np.percentile(obs, 95, axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(obs.shape[1]):
            row = [t + 1]
            for o in range(O):
                row += [repr(float(mean[t, o])), repr(float(p05[t, o])), repr(float(p95[t, o]))]
            w.writerow(row)


def tip_positions(obs, pole_length: float, position_channel: int = 0, angle_channel: int = 2) -> np.ndarray:
    """Pendulum tip ``(pos + l sin th, -l cos th)`` for observations ``(..., O)``."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] <= max(position_channel, angle_channel):
        raise ValueError(
            f"observations have {obs.shape[-1]} channels; need position channel {position_channel} "
            f"and angle channel {angle_channel}"
        )
    pos, th = obs[..., position_channel], obs[..., angle_channel]
    return np.stack([pos + pole_length * np.sin(th), -pole_length * np.cos(th)], -1)


def tip_error(pred, truth, pole_length: float, position_channel: int = 0, angle_channel: int = 2) -> float:
    """Mean tip distance between predicted (``(S, T, O)`` or ``(T, O)``) and true
    trajectories, in units of the pole length."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[None]
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape[1:] != truth.shape:
        raise ValueError(f"prediction shape {pred.shape[1:]} does not match truth {truth.shape}")
    tp = tip_positions(pred, pole_length, position_channel, angle_channel)
    tt = tip_positions(truth, pole_length, position_channel, angle_channel)
    return float(np.linalg.norm(tp - tt[None], axis=-1).mean() / pole_length)


def rmse_per_channel(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[None]
    return np.sqrt(((pred - np.asarray(truth)[None]) ** 2).mean(axis=(0, 1)))
