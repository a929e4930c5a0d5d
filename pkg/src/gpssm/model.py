"""The assembled GP state-space model and its construction from config."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .elbo import EmissionModel, elbo_estimate
from .kernels import build_kernel
from .recognition import RecognitionNet
from .sparse_gp import SparseGP, uniform_inducing

__all__ = ["GPSSM", "build_model", "inducing_box"]

_DTYPE = torch.float64


class GPSSM(nn.Module):
    def __init__(self, transition: SparseGP, emission: EmissionModel, recognition: RecognitionNet):
        super().__init__()
        self.transition = transition
        self.emission = emission
        self.recognition = recognition
        self.state_dim = transition.state_dim
        self.obs_dim = recognition.obs_dim
        self.action_dim = recognition.action_dim

    def elbo(self, batch, num_samples=1, total_episodes=None, rng=None, eps=None):
        return elbo_estimate(self, batch, num_samples, total_episodes, rng, eps)

    def param_set(self) -> "OrderedDict[str, torch.Tensor]":
        """All trainable tensors by name, unconstrained."""
        return OrderedDict((n, p) for n, p in self.named_parameters() if p.requires_grad)

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in self.state_dict().items())

    def load_tensors(self, tensors: dict) -> None:
        state = self.state_dict()
        missing = set(state) - set(tensors)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, value in state.items():
            arr = np.asarray(tensors[name])
            if tuple(arr.shape) != tuple(value.shape):
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tuple(value.shape)}")
        self.load_state_dict({k: torch.as_tensor(np.asarray(tensors[k]), dtype=_DTYPE) for k in state})


def inducing_box(dataset: Dataset, state_dim: int, W=None, b=None, fallback=(-2.0, 2.0)):
    """Bounds for initialising inducing inputs from the data.

    Latent coordinates are recovered through the pseudo-inverse of the
    emission map; coordinates with no spread fall back to ``fallback``.
    Action coordinates use the observed action range.
    """
    Y = np.concatenate([ep.Y for ep in dataset.episodes])
    O = Y.shape[1]
    W = np.eye(O, state_dim) if W is None else np.asarray(W, dtype=float).reshape(O, state_dim)
    b = np.zeros(O) if b is None else np.asarray(b, dtype=float).reshape(O)
    X = (Y - b) @ np.linalg.pinv(W).T
    low, high = X.min(0), X.max(0)
    flat = (high - low) < 1e-6
    low[flat], high[flat] = fallback
    if dataset.action_dim:
        A = np.concatenate([ep.A for ep in dataset.episodes])
        low = np.concatenate([low, A.min(0)])
        high = np.concatenate([high, A.max(0)])
    return low, high


def build_model(cfg: dict, obs_dim: int, action_dim: int, dataset: Dataset | None = None) -> GPSSM:
    """Construct a model from the ``model`` and ``recognition`` config sections.

    Without a dataset the inducing inputs and input standardisation are left
    at placeholders; this is how a model skeleton is made before loading a
    checkpoint.
    """
    m = cfg["model"]
    r = cfg["recognition"]
    D, P = int(m["state_dim"]), int(action_dim)
    seed = int(m.get("seed", 0))
    kernel = build_kernel(m["kernel"], D + P)
    M = int(m["num_inducing"])
    W, b = m.get("emission_W"), m.get("emission_b")
    if dataset is not None:
        low, high = inducing_box(dataset, D, W, b, tuple(m.get("z_fallback_range", (-2.0, 2.0))))
        Z = uniform_inducing(low, high, M, np.random.default_rng(seed))
    else:
        Z = np.zeros((M, D + P))
    transition = SparseGP(
        kernel,
        Z,
        D,
        sigma_f2=m.get("sigma_f2", 0.01),
        q_sqrt_scale=m.get("q_sqrt_scale", 0.1),
        whiten=m.get("whiten", True),
    )
    transition.pinned = bool(m.get("pin_transition", False))
    emission = EmissionModel(
        obs_dim, D, sigma_g2=m.get("sigma_g2", 0.1), W=W, b=b, learn=m.get("emission", "learned") == "learned"
    )
    if not m.get("learn_noise", True):
        transition.raw_sigma_f2.requires_grad_(False)
        emission.raw_sigma_g2.requires_grad_(False)
    recognition = RecognitionNet(
        obs_dim,
        P,
        D,
        int(r["hidden_dim"]),
        seed=int(seed if r.get("seed") is None else r["seed"]),
        init_transition_std=r.get("init_transition_std", 0.1),
        init_state_std=r.get("init_state_std", 1.0),
        offset=bool(r.get("offset", False)),
    )
    if dataset is not None and len(dataset):
        stacked = np.concatenate([np.concatenate([ep.Y, ep.A], 1) for ep in dataset.episodes])
        recognition.set_standardisation(stacked.mean(0), stacked.std(0) if len(stacked) > 1 else np.ones(stacked.shape[1]))
    model = GPSSM(transition, emission, recognition)
    if m.get("pin_transition", False):
        for name, p in transition.named_parameters():
            if name != "raw_sigma_f2":
                p.requires_grad_(False)
    return model
