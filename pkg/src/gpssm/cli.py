"""Command-line entry point: ``gpssm {generate,train,eval,export}``.

Every config key can be overridden with a flag of the same dotted name,
e.g. ``--training.steps=100`` or ``--model.kernel.type rbf``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import Config, ConfigError, config_hash, load_config, validate
from .data import (
    CheckpointError,
    Dataset,
    DatasetFormatError,
    cartpole_simulate,
    kink_generate,
    load_checkpoint,
    load_dataset,
    save_dataset,
    smooth_random_policy,
)
from .linalg import CholeskyError
from .model import build_model
from .optim import NonFiniteError, train
from .rollout import free_simulate, rmse_per_channel, tip_error, transition_grid, write_rollout_quantiles, write_transition_csv

__all__ = ["main", "cmd_generate", "cmd_train", "cmd_eval", "cmd_export"]

log = logging.getLogger("gpssm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def make_run_dir(cfg: Config, command: str, run_dir=None) -> Path:
    if run_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg.output.root) / f"{command}-{config_hash(cfg)}-{stamp}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.as_dict(), fh, sort_keys=False)
    return run_dir


def generate_dataset(cfg: Config) -> Dataset:
    g = cfg.data.generator
    if g.type == "kink":
        return kink_generate(g.n_episodes, g.length, g.sigma_f2, g.sigma_g2, g.seed)

    def factory(rng):
        return smooth_random_policy(rng, amplitude=g.amplitude, dt=g.dt)

    factory.factory = True
    return cartpole_simulate(
        g.n_episodes,
        g.length,
        dt=g.dt,
        action_fn=factory,
        seed=g.seed,
        observe=g.observe,
        action_lag=g.action_lag,
        obs_noise_std=g.obs_noise_std,
        init_std=g.init_std,
    )


def training_data(cfg: Config) -> Dataset:
    ds = load_dataset(cfg.data.path) if cfg.data.path else generate_dataset(cfg)
    n = cfg.data.train_episodes
    if n is not None:
        if n > len(ds):
            raise ConfigError("data.train_episodes", f"{n} requested but the dataset has {len(ds)}")
        ds = ds.subset(range(n))
    return ds


def load_model(cfg: Config, checkpoint):
    """Rebuild a model from a checkpoint; architecture comes from the checkpoint's config."""
    cp = load_checkpoint(checkpoint)
    saved = validate(cp.config, check_files=False) if cp.config else cfg
    model = build_model(saved.as_dict(), int(cp.meta["obs_dim"]), int(cp.meta["action_dim"]))
    tensors = {k[len("model.") :]: v for k, v in cp.tensors.items() if k.startswith("model.")}
    try:
        model.load_tensors(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(checkpoint, f"does not match the configured model: {exc}") from None
    return model


def cmd_generate(cfg: Config, run_dir=None) -> Path:
    run_dir = make_run_dir(cfg, "generate", run_dir)
    ds = generate_dataset(cfg)
    path = run_dir / "dataset.jsonl"
    save_dataset(ds, path)
    return path


def cmd_train(cfg: Config, run_dir=None, resume=None):
    run_dir = make_run_dir(cfg, "train", run_dir)
    ds = training_data(cfg)
    return train(cfg.as_dict(), ds, run_dir, resume_from=resume)


def cmd_eval(cfg: Config, checkpoint, test=None, run_dir=None) -> Path:
    """Free-simulate every test episode from a recognised initial state and score it."""
    test = test or cfg.data.test_path
    if test is None:
        raise ConfigError("data.test_path", "eval needs a test dataset")
    run_dir = make_run_dir(cfg, "eval", run_dir)
    model = load_model(cfg, checkpoint)
    ds = load_dataset(test)
    if ds.obs_dim != model.obs_dim or ds.action_dim != model.action_dim:
        raise ConfigError("data.test_path", "test dataset dimensions do not match the model")
    ro, ev = cfg.rollout, cfg.eval
    if ev.metric == "tip_error":
        for key in ("position_channel", "angle_channel"):
            if getattr(ev, key) >= ds.obs_dim:
                raise ConfigError(f"eval.{key}", f"channel {getattr(ev, key)} missing; test data has {ds.obs_dim} channels")
    per_episode = []
    for i, ep in enumerate(ds.episodes):
        k = min(ro.init_prefix, len(ep))
        res = free_simulate(
            model,
            ep.A,
            num_samples=ro.samples,
            seed=ro.seed + i,
            prefix=(ep.Y[:k], ep.A[:k]),
            horizon=ro.horizon,
            observation_noise=ro.observation_noise,
            freeze_function=ro.freeze_function,
        )
        T = res.observations.shape[1]
        truth = ep.Y[:T]
        if ev.metric == "tip_error":
            pole = ds.extras.get("pole_length", ev.pole_length)
            score = tip_error(res.observations, truth, pole, ev.position_channel, ev.angle_channel)
        else:
            score = rmse_per_channel(res.observations, truth).tolist()
        per_episode.append(score)
        write_rollout_quantiles(res, run_dir / f"rollout_{i}.csv")
    if ev.metric == "tip_error":
        summary = float(np.mean(per_episode))
    else:
        summary = np.mean(np.asarray(per_episode), 0).tolist()
    path = run_dir / "metrics.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"metric": ev.metric, "mean": summary, "per_episode": per_episode}, fh, indent=2)
    return path


def export_grid(cfg: Config, input_dim: int) -> np.ndarray:
    e = cfg.export
    if e.axis >= input_dim:
        raise ConfigError("export.axis", f"model input has {input_dim} dimensions")
    fixed = np.zeros(input_dim) if e.fixed is None else np.asarray(e.fixed, dtype=float)
    if fixed.shape != (input_dim,):
        raise ConfigError("export.fixed", f"expected {input_dim} values")
    if len(e.low) != len(e.high):
        raise ConfigError("export.high", "low and high must have the same length")
    if len(e.low) == 1:
        grid = np.tile(fixed, (e.points, 1))
        grid[:, e.axis] = np.linspace(e.low[0], e.high[0], e.points)
        return grid
    if len(e.low) != input_dim:
        raise ConfigError("export.low", f"expected 1 or {input_dim} values")
    # full tensor grid over every input dimension
    axes = [np.linspace(lo, hi, e.points) for lo, hi in zip(e.low, e.high)]
    return np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], -1)


def cmd_export(cfg: Config, checkpoint, run_dir=None, prior: bool = False) -> Path:
    run_dir = make_run_dir(cfg, "export", run_dir)
    model = load_model(cfg, checkpoint)
    if prior:
        model.transition.reset_to_prior()
    table = transition_grid(model, export_grid(cfg, model.transition.input_dim))
    path = run_dir / "transition.csv"
    write_transition_csv(table, path)
    return path


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError("", f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            i += 1
            value = extra[i]
        else:
            raise ConfigError(key, "override needs a value")
        out.append((key, value))
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpssm", description="GP state-space model: generate data, train, evaluate, export.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "export"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", "-c", help="YAML config file")
        sp.add_argument("--run-dir", help="output directory (default: <output.root>/<command>-<hash>-<time>)")
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to continue from")
        if name in ("eval", "export"):
            sp.add_argument("--checkpoint", required=True)
        if name == "eval":
            sp.add_argument("--test", help="test dataset (default: data.test_path)")
        if name == "export":
            sp.add_argument("--prior", action="store_true", help="reset q(u) to the prior before exporting")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, _split_overrides(extra))
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "generate":
                out = cmd_generate(cfg, args.run_dir)
            elif args.command == "train":
                out = cmd_train(cfg, args.run_dir, args.resume).checkpoint_path
            elif args.command == "eval":
                out = cmd_eval(cfg, args.checkpoint, args.test, args.run_dir)
            else:
                out = cmd_export(cfg, args.checkpoint, args.run_dir, args.prior)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, CholeskyError, torch.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
