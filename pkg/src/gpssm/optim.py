"""Gradients, Adam, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .data import Checkpoint, Dataset, load_checkpoint, save_checkpoint

__all__ = [
    "NonFiniteError",
    "gradient",
    "AdamState",
    "adam_step",
    "clip_by_global_norm",
    "TrainResult",
    "train",
    "checkpoint_from_state",
]

log = logging.getLogger(__name__)

ParamSet = Mapping[str, torch.Tensor]


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


def gradient(loss_fn: Callable[[ParamSet], torch.Tensor], params: ParamSet) -> "OrderedDict[str, torch.Tensor]":
    """Reverse-mode gradient of ``loss_fn(params)`` for every named tensor."""
    names = list(params)
    loss = loss_fn(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = OrderedDict()
    for name, g in zip(names, grads):
        g = torch.zeros_like(params[name]) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}", name)
        out[name] = g
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam descent step, applied in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps))
    return params, state


def clip_by_global_norm(grads: ParamSet, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g.mul_(max_norm / norm)
    return norm


# -- training loop --------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    model: object
    history: list[dict]


def checkpoint_from_state(model, adam: AdamState, rng: np.random.Generator, cfg: dict, step: int, extra: dict | None = None) -> Checkpoint:
    tensors = OrderedDict(("model." + k, v) for k, v in model.tensors().items())
    for name in adam.m:
        tensors["adam.m." + name] = adam.m[name].detach().numpy().copy()
        tensors["adam.v." + name] = adam.v[name].detach().numpy().copy()
    meta = {
        "step": step,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "obs_dim": model.obs_dim,
        "action_dim": model.action_dim,
    }
    if extra:
        meta.update(extra)
    return Checkpoint(tensors, cfg, _rng_state(rng), meta)


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _restore(model, cp: Checkpoint, tcfg: dict) -> tuple[AdamState, np.random.Generator, int]:
    model.load_tensors({k[len("model.") :]: v for k, v in cp.tensors.items() if k.startswith("model.")})
    a = cp.meta["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    for name in model.param_set():
        if "adam.m." + name in cp.tensors:
            adam.m[name] = torch.from_numpy(cp.tensors["adam.m." + name].copy())
            adam.v[name] = torch.from_numpy(cp.tensors["adam.v." + name].copy())
    rng = np.random.default_rng()
    rng.bit_generator.state = cp.rng_state
    return adam, rng, int(cp.meta["step"])


def train(
    cfg: dict,
    dataset: Dataset,
    run_dir,
    model=None,
    resume_from=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Maximise the ELBO with Adam on random mini-batches of episodes.

    Writes ``metrics.jsonl`` (one record per step) and checkpoints
    ``ckpt_<step>.bin`` plus ``final.bin`` into ``run_dir``. ``max_steps``
    stops early (used to simulate an interruption) without changing the
    schedule. A non-finite ELBO raises :class:`NonFiniteError` after saving
    the last good state to ``last_good.bin``.
    """
    from .model import build_model

    t = cfg["training"]
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = build_model(cfg, dataset.obs_dim, dataset.action_dim, dataset)
    params = model.param_set()
    adam = AdamState(lr=t.get("learning_rate", 1e-3), beta1=t.get("beta1", 0.9), beta2=t.get("beta2", 0.999), eps=t.get("eps", 1e-8))
    rng = np.random.default_rng(t.get("seed", 0))
    start = 0
    if resume_from is not None:
        adam, rng, start = _restore(model, load_checkpoint(resume_from), t)
    steps = int(t.get("steps", 1000))
    stop = steps if max_steps is None else min(steps, max_steps)
    n = len(dataset)
    bs = min(int(t.get("batch_size", 16)), n)
    num_samples = int(t.get("num_samples", 1))
    every = int(t.get("checkpoint_every", 0) or 0)
    clip = t.get("clip_grad_norm")
    metrics_path = run_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    history = []
    t0 = time.perf_counter()
    last_good = checkpoint_from_state(model, adam, rng, cfg, start)
    with open(metrics_path, mode, encoding="utf-8") as mfh:
        for step in range(start, stop):
            idx = np.sort(rng.choice(n, size=bs, replace=False)) if bs < n else np.arange(n)
            batch = [dataset.episodes[i] for i in idx]
            bd = model.elbo(batch, num_samples, n, rng)
            if not bool(torch.isfinite(bd.total)):
                save_checkpoint(last_good, run_dir / "last_good.bin")
                raise NonFiniteError(f"non-finite ELBO at step {step}")
            try:
                grads = gradient(lambda _p: -bd.total, params)
            except NonFiniteError:
                save_checkpoint(last_good, run_dir / "last_good.bin")
                raise
            gnorm = clip_by_global_norm(grads, float(clip)) if clip else math.sqrt(
                sum(float((g * g).sum()) for g in grads.values())
            )
            adam_step(adam, params, grads)
            rec = {"step": step, **bd.as_dict(), "grad_norm": gnorm, "wall_time": time.perf_counter() - t0}
            history.append(rec)
            mfh.write(json.dumps(rec) + "\n")
            done = step + 1
            if every and done % every == 0:
                last_good = checkpoint_from_state(model, adam, rng, cfg, done)
                save_checkpoint(last_good, run_dir / f"ckpt_{done}.bin")
            if t.get("log_every") and done % int(t["log_every"]) == 0:
                log.info("step %d elbo %.4f", done, rec["total"])
    final = checkpoint_from_state(model, adam, rng, cfg, stop)
    ckpt_path = run_dir / "final.bin"
    save_checkpoint(final, ckpt_path)
    return TrainResult(ckpt_path, metrics_path, model, history)
