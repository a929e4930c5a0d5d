"""Run configuration: YAML file, dotted overrides, schema validation."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

__all__ = ["Config", "ConfigError", "load_config", "apply_overrides", "validate", "config_hash"]


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    state_dim: int = Field(1, ge=1)
    kernel: dict = Field(default_factory=lambda: {"type": "rbf", "variance": 1.0, "lengthscale": 1.0})
    num_inducing: int = Field(20, ge=1)
    sigma_f2: float = Field(0.01, gt=0)
    sigma_g2: float = Field(0.1, gt=0)
    learn_noise: bool = True
    emission: Literal["learned", "fixed"] = "learned"
    emission_W: Optional[list] = None
    emission_b: Optional[list] = None
    whiten: bool = True
    q_sqrt_scale: float = Field(0.1, gt=0)
    z_fallback_range: tuple[float, float] = (-2.0, 2.0)
    pin_transition: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _kernel_shape(self):
        _check_kernel(self.kernel, "model.kernel")
        return self


class RecognitionSection(_Section):
    hidden_dim: int = Field(20, ge=1)
    init_transition_std: float = Field(0.1, gt=0)
    init_state_std: float = Field(1.0, gt=0)
    offset: bool = False
    seed: Optional[int] = None


class TrainingSection(_Section):
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    num_samples: int = Field(1, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)
    clip_grad_norm: Optional[float] = Field(None, gt=0)
    log_every: int = Field(0, ge=0)


class GeneratorSection(_Section):
    type: Literal["kink", "cartpole"] = "kink"
    n_episodes: int = Field(200, ge=1)
    length: int = Field(10, ge=1)
    sigma_f2: float = Field(0.01, gt=0)
    sigma_g2: float = Field(0.1, gt=0)
    seed: int = 0
    dt: float = Field(0.1, gt=0)
    observe: list[int] = Field(default_factory=lambda: [0, 1, 2, 3])
    action_lag: int = Field(0, ge=0)
    obs_noise_std: float = Field(0.0, ge=0)
    init_std: float = Field(0.0, ge=0)
    amplitude: float = Field(8.0, ge=0)


class DataSection(_Section):
    path: Optional[str] = None
    test_path: Optional[str] = None
    train_episodes: Optional[int] = Field(None, ge=1)
    generator: GeneratorSection = Field(default_factory=GeneratorSection)


class RolloutSection(_Section):
    samples: int = Field(50, ge=1)
    horizon: Optional[int] = Field(None, ge=1)
    init_prefix: int = Field(5, ge=1)
    observation_noise: bool = False
    freeze_function: bool = False
    seed: int = 0


class EvalSection(_Section):
    metric: Literal["tip_error", "rmse"] = "rmse"
    position_channel: int = Field(0, ge=0)
    angle_channel: int = Field(2, ge=0)
    pole_length: float = Field(0.5, gt=0)


class ExportSection(_Section):
    low: list[float] = Field(default_factory=lambda: [-2.0])
    high: list[float] = Field(default_factory=lambda: [8.0])
    points: int = Field(201, ge=1)
    axis: int = Field(0, ge=0)
    fixed: Optional[list[float]] = None


class OutputSection(_Section):
    root: str = "runs"


class Config(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    recognition: RecognitionSection = Field(default_factory=RecognitionSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    data: DataSection = Field(default_factory=DataSection)
    rollout: RolloutSection = Field(default_factory=RolloutSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    export: ExportSection = Field(default_factory=ExportSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def as_dict(self) -> dict:
        return self.model_dump(mode="json")


_KERNEL_KEYS = {
    "rbf": {"type", "variance", "lengthscale", "ard"},
    "matern12": {"type", "variance", "lengthscale", "ard"},
    "arccosine0": {"type", "variance", "lengthscale", "ard"},
    "sum": {"type", "children"},
    "warped": {"type", "widths", "base", "seed"},
}


def _check_kernel(spec: Any, path: str) -> None:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ValueError(f"{path}: kernel spec must be a mapping with a 'type'")
    kind = str(spec["type"]).lower()
    if kind not in _KERNEL_KEYS:
        raise ValueError(f"{path}.type: unknown kernel {spec['type']!r}")
    extra = set(spec) - _KERNEL_KEYS[kind]
    if extra:
        raise ValueError(f"{path}: unexpected keys {sorted(extra)}")
    for key in ("variance", "lengthscale"):
        vals = spec.get(key, 1.0)
        vals = vals if isinstance(vals, list) else [vals]
        if any(not isinstance(v, (int, float)) or v <= 0 for v in vals):
            raise ValueError(f"{path}.{key}: must be positive")
    if kind == "sum":
        children = spec.get("children")
        if not isinstance(children, list) or len(children) < 2:
            raise ValueError(f"{path}.children: a sum needs at least two kernels")
        for i, child in enumerate(children):
            _check_kernel(child, f"{path}.children.{i}")
    if kind == "warped":
        widths = spec.get("widths")
        if not isinstance(widths, list) or not widths or any(not isinstance(w, int) or w < 1 for w in widths):
            raise ValueError(f"{path}.widths: must be a non-empty list of positive integers")
        base = spec.get("base")
        _check_kernel(base, f"{path}.base")
        if str(base["type"]).lower() in ("sum", "warped"):
            raise ValueError(f"{path}.base: must be a leaf kernel")


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        child = node.get(k)
        if child is None:
            child = node[k] = {}
        if not isinstance(child, dict):
            raise ConfigError(dotted, f"{k!r} is not a section")
        node = child
    node[keys[-1]] = value


def apply_overrides(tree: dict, overrides: list[tuple[str, str]]) -> dict:
    """Apply ``(dotted.key, raw value)`` pairs; values are parsed as YAML scalars."""
    tree = copy.deepcopy(tree)
    for key, raw in overrides:
        _set_dotted(tree, key, yaml.safe_load(raw) if isinstance(raw, str) else raw)
    return tree


def validate(tree: dict, base_dir: Path | None = None, check_files: bool = True) -> Config:
    try:
        cfg = Config.model_validate(tree or {})
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        msg = err["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, ") :]
            if ": " in msg:
                loc, msg = msg.split(": ", 1)
        raise ConfigError(loc, msg) from None
    for key in ("path", "test_path") if check_files else ():
        value = getattr(cfg.data, key)
        if value is None:
            continue
        p = Path(value)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
            setattr(cfg.data, key, str(p))
        if not p.exists():
            raise ConfigError(f"data.{key}", f"file not found: {p}")
    return cfg


def load_config(path: str | Path | None, overrides: list[tuple[str, str]] | None = None) -> Config:
    tree: dict = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("", f"cannot read config file {path}: {exc.strerror}") from None
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("", f"invalid YAML: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError("", "top level must be a mapping")
        base_dir = path.parent
    tree = apply_overrides(tree, overrides or [])
    return validate(tree, base_dir)


def config_hash(cfg: Config) -> str:
    blob = json.dumps(cfg.as_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:10]
