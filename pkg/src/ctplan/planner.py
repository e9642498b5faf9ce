"""Candidate generation, critic selection and the receding-horizon control loop."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctm import StudentModel
from .data import Normalizer
from .dynamics import Critic, InverseDynamics, extract_action
from .envs import EnvSpec, env_step, reset
from .errors import ContractError
from .numerics import no_grad
from .schedule import SamplingGrid, sampling_grid
from .teacher import TeacherModel, clamp_condition, sample_heun

SAMPLERS = ("ctm", "teacher")


@dataclass
class PlanRequest:
    state: np.ndarray           # environment units
    num_candidates: int = 16
    denoise_steps: int = 2
    seed: int = 0
    sampler: str = "ctm"

    def __post_init__(self):
        if self.num_candidates < 1:
            raise ContractError("num_candidates must be >= 1")
        if self.denoise_steps < 1:
            raise ContractError("denoise_steps must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ContractError(f"unknown sampler {self.sampler!r}")


@dataclass
class PlanResult:
    candidates: np.ndarray      # (N, H, d_s) normalized windows
    values: np.ndarray          # (N,)
    best_index: int
    action: np.ndarray          # environment units
    network_calls: int = 0


@dataclass
class ModelBundle:
    student: StudentModel | None
    critic: Critic
    invdyn: InverseDynamics
    state_norm: Normalizer
    teacher: TeacherModel | None = None
    stride: int = 1
    mode: str = "batched"       # "batched" | "sequential" | "threaded"
    teacher_grid: str = "uniform"

    @property
    def window_shape(self) -> tuple[int, int]:
        return (self.critic.horizon, self.critic.state_dim)


# -- samplers -----------------------------------------------------------------------

def initial_noise(shape, t_max: float, seeds, cond) -> np.ndarray:
    """``t_max * z`` per candidate with row 0 already clamped to the condition."""
    x = np.stack([t_max * np.random.default_rng(s).standard_normal(shape) for s in seeds])
    return clamp_condition(x, None if cond is None else np.broadcast_to(cond, (len(x), shape[-1])))


def ctm_sample(student: StudentModel, grid: SamplingGrid, x_init: np.ndarray, cond=None) -> np.ndarray:
    """Jump down the grid with ``x <- G(x, t_{n+1}, t_n)``; no noise is re-injected."""
    x = np.asarray(x_init, dtype=np.float64)
    times = grid.descending()
    with no_grad():
        for t, w in zip(times[:-1], times[1:]):
            x = student(x, t, w, cond)
    return x


def teacher_sample(teacher: TeacherModel, grid: SamplingGrid, x_init: np.ndarray, cond=None) -> np.ndarray:
    return sample_heun(teacher, grid, x_init, cond)


def _grid_for(bundle: ModelBundle, request: PlanRequest) -> SamplingGrid:
    model = bundle.student if request.sampler == "ctm" else bundle.teacher
    if model is None:
        raise ContractError(f"bundle has no model for sampler {request.sampler!r}")
    mode = "uniform" if request.sampler == "ctm" else bundle.teacher_grid
    return sampling_grid(model.schedule.t_max, model.schedule.eps, request.denoise_steps, mode,
                         model.schedule.rho)


def _sample(bundle: ModelBundle, request: PlanRequest, grid: SamplingGrid, x_init, cond) -> np.ndarray:
    if request.sampler == "ctm":
        return ctm_sample(bundle.student, grid, x_init, cond)
    return teacher_sample(bundle.teacher, grid, x_init, cond)


def generate_candidates(bundle: ModelBundle, request: PlanRequest, mode: str | None = None) -> np.ndarray:
    """``num_candidates`` windows conditioned on ``request.state``.

    Candidate ``i`` draws its initial noise from the stream seeded by
    ``(seed, i)``, so the set does not depend on the generation mode or order.
    """
    mode = mode or bundle.mode
    grid = _grid_for(bundle, request)
    shape = bundle.window_shape
    s_norm = bundle.state_norm.normalize(np.asarray(request.state, dtype=np.float64))
    t_max = grid.times[-1]
    seeds = [[request.seed, i] for i in range(request.num_candidates)]
    if mode == "batched":
        n = request.num_candidates
        x = initial_noise(shape, t_max, seeds, s_norm)
        return _sample(bundle, request, grid, x, np.broadcast_to(s_norm, (n, shape[1])).copy())

    def one(seed):
        x = initial_noise(shape, t_max, [seed], s_norm)
        return _sample(bundle, request, grid, x, s_norm[None].copy())[0]

    if mode == "sequential":
        out = [one(s) for s in seeds]
    elif mode == "threaded":
        with ThreadPoolExecutor() as pool:
            out = list(pool.map(one, seeds))
    else:
        raise ContractError(f"unknown generation mode {mode!r}")
    return np.stack(out)


def select_best(critic, candidates) -> tuple[int, np.ndarray]:
    """Index of the highest critic value, ties going to the lowest index."""
    if len(candidates) == 0:
        raise ContractError("select_best needs at least one candidate")
    values = np.asarray(critic(np.asarray(candidates)), dtype=np.float64).reshape(len(candidates))
    return int(np.argmax(values)), values


def _network_calls(bundle: ModelBundle) -> int:
    return sum(m.calls for m in (bundle.student, bundle.teacher) if m is not None)


def plan_step(bundle: ModelBundle, request: PlanRequest) -> PlanResult:
    before = _network_calls(bundle)
    candidates = generate_candidates(bundle, request)
    calls = _network_calls(bundle) - before
    best, values = select_best(bundle.critic, candidates)
    window = candidates[best]
    action = extract_action(bundle.invdyn, window[0], window[1])
    return PlanResult(candidates, values, best, np.asarray(action, dtype=np.float64), calls)


# -- control loop -------------------------------------------------------------------

@dataclass
class EpisodeConfig:
    seed: int = 0
    num_candidates: int = 16
    denoise_steps: int = 2
    sampler: str = "ctm"
    max_steps: int | None = None


@dataclass
class EpisodeTrace:
    seed: int
    records: list[dict] = field(default_factory=list)
    total_return: float = 0.0
    success: bool = False
    status: str = "ok"

    @property
    def plan_latencies_ms(self) -> list[float]:
        return [r["latency_ms"] for r in self.records if r["replanned"]]


def rollout(spec: EnvSpec, bundle: ModelBundle, cfg: EpisodeConfig = EpisodeConfig()) -> EpisodeTrace:
    """Observe, plan, act; each plan's action is held for ``stride`` environment steps."""
    rng = np.random.default_rng([cfg.seed, 0])
    s = reset(spec, rng)
    trace = EpisodeTrace(cfg.seed)
    action, value, index, latency = None, 0.0, -1, 0.0
    for k in range(cfg.max_steps or spec.max_steps):
        replan = k % bundle.stride == 0
        if replan:
            req = PlanRequest(s, cfg.num_candidates, cfg.denoise_steps, seed=cfg.seed * 100_003 + k,
                              sampler=cfg.sampler)
            t0 = time.perf_counter()
            res = plan_step(bundle, req)
            latency = (time.perf_counter() - t0) * 1e3
            action, value, index = res.action, float(res.values[res.best_index]), res.best_index
        try:
            s_next, r, done = env_step(spec, s, action)
        except (ValueError, FloatingPointError) as exc:
            trace.status = f"env fault: {exc}"
            break
        trace.records.append({"step": k, "state": s.tolist(), "action": np.clip(action, -1, 1).tolist(),
                              "value": value, "candidate": index, "replanned": replan,
                              "latency_ms": latency if replan else 0.0, "reward": r})
        trace.total_return += r
        s = s_next
        if done:
            trace.success = True
            break
    return trace


def write_traces(path, traces: list[EpisodeTrace], with_latency: bool = True) -> Path:
    """One JSON object per environment step; ``with_latency=False`` gives a reproducible file."""
    path = Path(path)
    with open(path, "w") as fh:
        for tr in traces:
            for rec in tr.records:
                rec = dict(rec, episode=tr.seed)
                if not with_latency:
                    rec.pop("latency_ms")
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
