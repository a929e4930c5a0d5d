"""Episodes, synthetic systems, and on-disk formats.

Episode convention: row ``i`` of ``Y`` is the observation of state
``x_{i+1}`` and row ``i`` of ``A`` is the action applied at state ``x_i``.
The initial state ``x_0`` is never observed.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Episode",
    "Dataset",
    "DatasetFormatError",
    "kink_f",
    "kink_iterate",
    "kink_generate",
    "CartPoleParams",
    "cartpole_derivatives",
    "cartpole_energy",
    "rk4_step",
    "cartpole_simulate",
    "sinusoid_policy",
    "smooth_random_policy",
    "save_dataset",
    "load_dataset",
    "convert_actuator_text",
    "Checkpoint",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class Episode:
    Y: np.ndarray  # (T, O)
    A: np.ndarray  # (T, P)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        T = self.Y.shape[0]
        self.A = np.asarray(self.A, dtype=np.float64).reshape(T, -1) if np.size(self.A) else np.zeros((T, 0))
        if self.A.shape[0] != T:
            raise ValueError(f"Y has {T} rows but A has {self.A.shape[0]}")
        if not (np.isfinite(self.Y).all() and np.isfinite(self.A).all()):
            raise ValueError("episode contains non-finite values")

    def __len__(self) -> int:
        return self.Y.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.Y.shape[1]

    @property
    def action_dim(self) -> int:
        return self.A.shape[1]


@dataclass
class Dataset:
    episodes: list[Episode]
    obs_dim: int
    action_dim: int
    dt: float | None = None
    name: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, ep in enumerate(self.episodes):
            if ep.obs_dim != self.obs_dim or ep.action_dim != self.action_dim:
                raise ValueError(
                    f"episode {i} has (O, P) = ({ep.obs_dim}, {ep.action_dim}), "
                    f"dataset declares ({self.obs_dim}, {self.action_dim})"
                )

    def __len__(self) -> int:
        return len(self.episodes)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.episodes[i] for i in indices], self.obs_dim, self.action_dim, self.dt, self.name, dict(self.extras))


# -- kink system -------------------------------------------------------------


def kink_f(x):
    """``x + 1`` below 4, ``13 - 2x`` from 4 on."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 4.0, x + 1.0, 13.0 - 2.0 * x)


def kink_iterate(x0: float, steps: int) -> np.ndarray:
    """Noise-free trajectory ``x_0 .. x_steps``."""
    xs = [float(x0)]
    for _ in range(steps):
        xs.append(float(kink_f(xs[-1])))
    return np.array(xs)


def kink_generate(
    n_episodes: int,
    length: int,
    sigma_f2: float = 0.01,
    sigma_g2: float = 0.1,
    seed: int = 0,
    x0: float | None = None,
    return_states: bool = False,
):
    """Sample episodes of the kink system.

    ``x_0 ~ N(0, 1)`` unless ``x0`` is given; ``x_t ~ N(f(x_{t-1}), sigma_f2)``;
    ``y_t ~ N(x_t, sigma_g2)`` for ``t = 1..length``. With ``return_states``
    the latent ``(n_episodes, length + 1)`` array is returned as well.
    """
    if n_episodes < 1 or length < 1:
        raise ValueError("n_episodes and length must be >= 1")
    rng = np.random.default_rng(seed)
    sf, sg = math.sqrt(sigma_f2), math.sqrt(sigma_g2)
    episodes, states = [], []
    for _ in range(n_episodes):
        x = np.empty(length + 1)
        x[0] = rng.standard_normal() if x0 is None else x0
        for t in range(1, length + 1):
            x[t] = kink_f(x[t - 1]) + sf * rng.standard_normal()
        y = x[1:] + sg * rng.standard_normal(length)
        episodes.append(Episode(y[:, None], np.zeros((length, 0))))
        states.append(x)
    ds = Dataset(episodes, 1, 0, None, "kink")
    return (ds, np.stack(states)) if return_states else ds


# -- cart-pole ---------------------------------------------------------------


@dataclass
class CartPoleParams:
    cart_mass: float = 0.5
    pole_mass: float = 0.5
    pole_length: float = 0.5
    gravity: float = 9.82
    max_force: float = 10.0


def cartpole_derivatives(state: np.ndarray, force: float, p: CartPoleParams) -> np.ndarray:
    """Frictionless cart with a uniform rod; angle 0 hangs straight down.

    State is ``(position, velocity, angle, angular velocity)``.
    """
    _, v, th, w = state
    M, m, l, g = p.cart_mass, p.pole_mass, p.pole_length, p.gravity
    s, c = math.sin(th), math.cos(th)
    acc = (4.0 * force + 2.0 * m * l * w * w * s + 3.0 * m * g * s * c) / (4.0 * (M + m) - 3.0 * m * c * c)
    ang_acc = -3.0 * (acc * c + g * s) / (2.0 * l)
    return np.array([v, acc, w, ang_acc])


def cartpole_energy(state: np.ndarray, p: CartPoleParams) -> float:
    _, v, th, w = state
    M, m, l, g = p.cart_mass, p.pole_mass, p.pole_length, p.gravity
    kinetic = 0.5 * (M + m) * v * v + 0.5 * m * l * v * w * math.cos(th) + m * l * l * w * w / 6.0
    potential = -0.5 * m * g * l * math.cos(th)
    return kinetic + potential


def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def sinusoid_policy(amplitude: float = 5.0, period: float = 2.0, phase: float = 0.0, dt: float = 0.1):
    def policy(t: int, state: np.ndarray) -> float:
        return amplitude * math.sin(2 * math.pi * t * dt / period + phase)

    return policy


def smooth_random_policy(rng: np.random.Generator, amplitude: float = 8.0, n_components: int = 3, dt: float = 0.1):
    """Sum of a few random sinusoids; smooth and open-loop."""
    periods = rng.uniform(0.5, 4.0, n_components)
    phases = rng.uniform(0, 2 * math.pi, n_components)
    weights = rng.normal(size=n_components)
    weights *= amplitude / max(np.abs(weights).sum(), 1e-12)

    def policy(t: int, state: np.ndarray) -> float:
        return float(np.sum(weights * np.sin(2 * math.pi * t * dt / periods + phases)))

    return policy


def cartpole_simulate(
    n_episodes: int,
    length: int,
    dt: float = 0.1,
    action_fn=None,
    seed: int = 0,
    params: CartPoleParams | None = None,
    observe: Sequence[int] = (0, 1, 2, 3),
    action_lag: int = 0,
    obs_noise_std: float = 0.0,
    init_std: float = 0.0,
    substeps: int = 10,
    position_bound: float = 50.0,
    return_states: bool = False,
):
    """Simulate episodes of the cart-pole under open- or closed-loop actions.

    ``action_fn(t, state) -> force`` may also be a factory
    ``action_fn(rng) -> policy`` flagged by ``action_fn.factory = True`` so
    each episode draws its own excitation. Forces are clipped to
    ``[-max_force, max_force]``. With ``action_lag = k`` the force acting on
    the cart at step ``t`` is the one commanded at ``t - k`` (zero before);
    ``A`` always records the commanded forces.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_episodes < 1 or length < 1:
        raise ValueError("n_episodes and length must be >= 1")
    p = params or CartPoleParams()
    rng = np.random.default_rng(seed)
    observe = list(observe)
    h = dt / substeps
    episodes, all_states = [], []
    for ep in range(n_episodes):
        if action_fn is None:
            policy = smooth_random_policy(rng, dt=dt)
        elif getattr(action_fn, "factory", False):
            policy = action_fn(rng)
        else:
            policy = action_fn
        s = init_std * rng.standard_normal(4)
        states, commanded = [s.copy()], []
        for t in range(length):
            a = float(np.clip(policy(t, s), -p.max_force, p.max_force))
            commanded.append(a)
            applied = commanded[t - action_lag] if t >= action_lag else 0.0
            for _ in range(substeps):
                s = rk4_step(lambda z: cartpole_derivatives(z, applied, p), s, h)
            if not np.all(np.isfinite(s)) or abs(s[0]) > position_bound:
                warnings.warn(f"episode {ep} diverged at step {t + 1}; truncating", RuntimeWarning)
                commanded.pop()
                break
            states.append(s.copy())
        states = np.array(states)
        T = len(states) - 1
        if T == 0:
            continue
        Y = states[1:, observe] + obs_noise_std * rng.standard_normal((T, len(observe)))
        episodes.append(Episode(Y, np.array(commanded)[:, None]))
        all_states.append(states)
    ds = Dataset(episodes, len(observe), 1, dt, "cartpole", {"observe": observe, "pole_length": p.pole_length})
    return (ds, all_states) if return_states else ds


# -- episode file format -------------------------------------------------------

_DATASET_FORMAT = "gpssm-episodes"
_DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def save_dataset(ds: Dataset, path) -> None:
    """One JSON object per line: a header, then one record per time step."""
    header = {
        "format": _DATASET_FORMAT,
        "version": _DATASET_VERSION,
        "obs_dim": ds.obs_dim,
        "action_dim": ds.action_dim,
        "dt": ds.dt,
        "name": ds.name,
        "num_episodes": len(ds.episodes),
        "extras": ds.extras,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for e, ep in enumerate(ds.episodes):
            for t in range(len(ep)):
                rec = {"episode": e, "t": t, "y": ep.Y[t].tolist(), "a": ep.A[t].tolist()}
                fh.write(json.dumps(rec) + "\n")


def _real_list(value, n: int, key: str, line: int) -> list[float]:
    if not isinstance(value, list) or len(value) != n:
        raise DatasetFormatError(line, f"field {key!r} must be a list of {n} numbers")
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise DatasetFormatError(line, f"field {key!r} contains a non-finite or non-numeric value")
    return [float(v) for v in value]


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(1, "missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, f"invalid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != _DATASET_FORMAT:
        raise DatasetFormatError(1, f"header must declare format {_DATASET_FORMAT!r}")
    if header.get("version") != _DATASET_VERSION:
        raise DatasetFormatError(1, f"unsupported version {header.get('version')!r}")
    try:
        O, P = int(header["obs_dim"]), int(header["action_dim"])
    except (KeyError, TypeError, ValueError):
        raise DatasetFormatError(1, "header needs integer obs_dim and action_dim") from None
    rows: dict[int, list[tuple[list[float], list[float]]]] = {}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lineno, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetFormatError(lineno, "record must be an object")
        missing = {"episode", "t", "y", "a"} - rec.keys()
        if missing:
            raise DatasetFormatError(lineno, f"missing fields {sorted(missing)}")
        e, t = rec["episode"], rec["t"]
        if not isinstance(e, int) or not isinstance(t, int) or e < 0 or t < 0:
            raise DatasetFormatError(lineno, "episode and t must be non-negative integers")
        steps = rows.setdefault(e, [])
        if t != len(steps):
            raise DatasetFormatError(lineno, f"episode {e}: expected t={len(steps)}, got t={t}")
        steps.append((_real_list(rec["y"], O, "y", lineno), _real_list(rec["a"], P, "a", lineno)))
    n_declared = header.get("num_episodes", len(rows))
    if sorted(rows) != list(range(len(rows))) or len(rows) != n_declared:
        raise DatasetFormatError(len(lines), f"episodes must be numbered 0..{n_declared - 1}")
    episodes = []
    for e in range(len(rows)):
        T = len(rows[e])
        Y = np.array([r[0] for r in rows[e]], dtype=np.float64).reshape(T, O)
        A = np.array([r[1] for r in rows[e]], dtype=np.float64).reshape(T, P)
        episodes.append(Episode(Y, A))
    return Dataset(episodes, O, P, header.get("dt"), header.get("name", ""), header.get("extras") or {})


def convert_actuator_text(path, episode_length: int | None = None) -> Dataset:
    """Read a two-column whitespace text file (valve opening, oil pressure).

    The pressure becomes the observation, the valve opening the action.
    Optionally split the sequence into episodes of ``episode_length``.
    """
    raw = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if raw.shape[1] != 2:
        raise ValueError(f"expected 2 columns (input, output), got {raw.shape[1]}")
    u, y = raw[:, 0], raw[:, 1]
    # the observation in row i + 1 follows the action in row i
    Y, A = y[1:, None], u[:-1, None]
    n = len(Y) if episode_length is None else int(episode_length)
    eps = [Episode(Y[i : i + n], A[i : i + n]) for i in range(0, len(Y) - n + 1, n)]
    return Dataset(eps, 1, 1, None, "actuator")


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"GPSSMCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(cp: Checkpoint, path) -> None:
    """Binary layout: magic, u32 version, u64 manifest length, JSON manifest,
    then for each tensor a u32 rank, u64 dims and little-endian float64 data."""
    entries, blobs, offset = [], [], 0
    for name, arr in cp.tensors.items():
        # ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.array(arr, dtype="<f8", order="C", copy=True)
        head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob = head + arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": cp.version,
        "tensors": entries,
        "config": cp.config,
        "rng_state": cp.rng_state,
        "meta": cp.meta,
    }
    mbytes = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", cp.version, len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(path, f"cannot read file ({exc.strerror})") from None
    if len(data) < 20 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(path, "not a checkpoint file or truncated header")
    version, mlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(path, f"version mismatch: file has {version}, expected {CHECKPOINT_VERSION}")
    start = 20
    if start + mlen > len(data):
        raise CheckpointError(path, "truncated manifest")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(path, "corrupt manifest") from None
    body = start + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        pos = body + entry["offset"]
        end = pos + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(path, f"truncated data for tensor {entry['name']!r}")
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos + 4)
        if list(shape) != entry["shape"]:
            raise CheckpointError(path, f"shape prefix of {entry['name']!r} disagrees with manifest")
        offset = pos + 4 + 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if offset + 8 * count != end:
            raise CheckpointError(path, f"size mismatch for tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        tensors[entry["name"]] = arr
    if expected_shapes:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise CheckpointError(path, f"missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(
                    path, f"shape mismatch for {name!r}: file {tensors[name].shape}, model {tuple(shape)}"
                )
    return Checkpoint(tensors, manifest.get("config", {}), manifest.get("rng_state"), manifest.get("meta", {}), version)
