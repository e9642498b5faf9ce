"""Run configuration: one flat, validated key set loaded from JSON.

Any key can be overridden from the environment as ``CTP_<KEY>`` (upper case),
e.g. ``CTP_TEACHER_STEPS=2000``. Unknown keys in the file are rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ContractError

ENV_PREFIX = "CTP_"

# accepted spellings for keys that have a canonical name
ALIASES = {"n_sample_steps": "denoise_steps"}

# per-environment window defaults: (horizon, stride)
WINDOW_DEFAULTS = {"maze": (8, 2), "integrator": (4, 1)}


@dataclass
class RunConfig:
    env: str = "maze"
    seed: int = 0
    out_dir: str = "runs/default"
    # data
    n_episodes: int = 300
    expert_frac: float = 0.5
    policy_noise: float = 0.3
    horizon: int = 0           # 0 picks the environment default
    stride: int = 0
    gamma: float = 0.99
    holdout_frac: float = 0.1
    # diffusion time
    eps: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    n_train: int = 18
    sigma_data: float = 0.5
    # teacher
    teacher_hidden: int = 256
    teacher_depth: int = 3
    teacher_lr: float = 1e-3
    teacher_lr_schedule: str = "cosine"
    teacher_steps: int = 20000
    batch_size: int = 128
    # distillation
    distill_steps: int = 16000
    distill_lr: float = 2e-4
    distill_batch_size: int = 64
    mu_ema: float = 0.995
    lambda_dsm: float = 1.0
    lambda_gan: float = 0.0
    solver_substeps: int = 1
    # inverse dynamics and critic
    aux_hidden: int = 128
    aux_depth: int = 2
    aux_lr: float = 1e-3
    aux_steps: int = 3000
    # planning and evaluation
    num_candidates: int = 16
    denoise_steps: int = 2
    teacher_grid: str = "uniform"  # grid for the multi-step teacher baseline
    eval_seeds: int = 30
    bench_seeds: int = 10
    bench_steps: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 20])
    warmup_plans: int = 10

    def __post_init__(self):
        if self.env in WINDOW_DEFAULTS:
            h, m = WINDOW_DEFAULTS[self.env]
            self.horizon = self.horizon or h
            self.stride = self.stride or m
        self.validate()

    def validate(self) -> None:
        if self.env not in WINDOW_DEFAULTS:
            raise ContractError(f"env must be one of {sorted(WINDOW_DEFAULTS)}, got {self.env!r}")
        positive = ["n_train", "horizon", "stride", "teacher_hidden", "teacher_depth", "teacher_steps",
                    "batch_size", "distill_steps", "distill_batch_size", "solver_substeps", "aux_hidden",
                    "aux_depth", "aux_steps", "num_candidates", "denoise_steps", "eval_seeds"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_episodes < 0 or self.warmup_plans < 0:
            raise ContractError("n_episodes and warmup_plans must be non-negative")
        if self.bench_seeds < 5:
            raise ContractError("bench_seeds must be >= 5 so score spreads are meaningful")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        if not 0.0 <= self.mu_ema <= 1.0:
            raise ContractError("mu_ema must lie in [0, 1]")
        if not 0.0 <= self.expert_frac <= 1.0:
            raise ContractError("expert_frac must lie in [0, 1]")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ContractError("holdout_frac must lie in [0, 1)")
        if not 0.0 < self.eps < self.t_max:
            raise ContractError("need 0 < eps < t_max")
        for name in ("teacher_lr", "distill_lr", "aux_lr", "sigma_data", "rho"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.lambda_dsm < 0 or self.lambda_gan < 0 or self.policy_noise < 0:
            raise ContractError("loss weights and policy noise must be non-negative")
        if self.teacher_lr_schedule not in ("constant", "cosine"):
            raise ContractError("teacher_lr_schedule must be 'constant' or 'cosine'")
        if self.teacher_grid not in ("uniform", "karras"):
            raise ContractError("teacher_grid must be 'uniform' or 'karras'")
        if not self.bench_steps or any(int(s) < 1 for s in self.bench_steps):
            raise ContractError("bench_steps must be a nonempty list of positive integers")
        self.bench_steps = [int(s) for s in self.bench_steps]

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(s) for s in raw.replace(" ", "").split(",") if s]
    except ValueError:
        raise ContractError(f"cannot parse {ENV_PREFIX}{name.upper()}={raw!r}") from None
    return raw


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """File values, then ``CTP_*`` environment variables, then explicit overrides."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ContractError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ContractError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ContractError("config file must hold a JSON object")
    for alias, name in ALIASES.items():
        if alias in values:
            if name in values:
                raise ContractError(f"config sets both {alias!r} and {name!r}")
            values[name] = values.pop(alias)
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ContractError(f"unknown config keys: {', '.join(unknown)}")
    defaults = RunConfig()
    environ = os.environ if environ is None else environ
    for name in known:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            values[name] = _coerce(name, environ[key], getattr(defaults, name))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ContractError(str(exc)) from None
