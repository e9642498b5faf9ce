"""Probability-flow-ODE teacher denoiser and its Heun solver.

Windows are arrays of shape ``(batch, H, d_s)``; row ``0`` along the horizon
axis is the conditioning state. When a model is conditioned, that row is
inpainted with the clean state before and after every network evaluation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, NumericError, TrainingDivergence
from .numerics import Adam, Mlp, Tensor, concat, cosine_lr, grad, mlp_from_state, mlp_state, no_grad, square
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .schedule import (NoiseSchedule, SamplingGrid, TrainNoiseDist, input_scale, sample_sigma,
                       skip_coeffs, time_embedding)

log = logging.getLogger(__name__)


def clamp_condition(x, cond):
    """Overwrite horizon row 0 of ``x`` with ``cond`` (no-op when ``cond`` is None)."""
    if cond is None:
        return x
    cond = np.asarray(cond, dtype=np.float64)
    if isinstance(x, Tensor):
        mask = np.ones(x.shape[1:])
        mask[0] = 0.0
        fill = np.zeros(x.shape)
        fill[:, 0] = cond
        return x * mask + fill
    x = np.array(x, dtype=np.float64, copy=True)
    x[:, 0] = cond
    return x


def _batch_times(t, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t, (batch,)) if t.ndim == 0 else t.reshape(batch)


def denoiser_features(x: Tensor, t: np.ndarray, cond, sigma_data: float, emb_dim: int,
                      extra_times: list[np.ndarray] = ()) -> Tensor:
    """Network input: scaled flat window, raw condition row, time embeddings."""
    b = x.shape[0]
    flat = x.reshape(b, -1) * input_scale(t, sigma_data)[:, None]
    parts = [flat]
    if cond is not None:
        parts.append(np.asarray(cond, dtype=np.float64).reshape(b, -1))
    parts.append(time_embedding(t, emb_dim))
    for s in extra_times:
        parts.append(time_embedding(s, emb_dim))
    return concat(parts, axis=-1)


@dataclass
class TeacherModel:
    net: Mlp
    horizon: int
    state_dim: int
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    sigma_data: float = 0.5
    conditioned: bool = True
    emb_dim: int = 16
    calls: int = field(default=0, compare=False)

    @property
    def window_shape(self) -> tuple[int, int]:
        return (self.horizon, self.state_dim)

    @staticmethod
    def input_dim(horizon: int, state_dim: int, conditioned: bool, emb_dim: int) -> int:
        return horizon * state_dim + (state_dim if conditioned else 0) + emb_dim

    def residual(self, x, t, cond=None, detached: bool = False) -> Tensor:
        """The network branch ``F(x, t)``, reshaped to the window."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        t = _batch_times(t, x.shape[0])
        self.calls += 1
        feats = denoiser_features(x, t, cond if self.conditioned else None, self.sigma_data, self.emb_dim)
        return self.net(feats, detached=detached).reshape(x.shape)

    def denoise(self, x, t, cond=None, detached: bool = False) -> Tensor:
        return denoise(self, x, t, cond, detached)

    def __call__(self, x, t, cond=None) -> np.ndarray:
        with no_grad():
            return self.denoise(x, t, cond).data

    def checkpoint_arrays(self) -> dict:
        return mlp_state(self.net)

    def checkpoint_meta(self) -> dict:
        return {"kind": "teacher", "sizes": list(self.net.sizes), "horizon": self.horizon,
                "state_dim": self.state_dim, "sigma_data": self.sigma_data,
                "conditioned": self.conditioned, "emb_dim": self.emb_dim,
                "schedule": [self.schedule.eps, self.schedule.t_max, self.schedule.rho,
                             self.schedule.n_train]}


def denoise(model: TeacherModel, x, t, cond=None, detached: bool = False) -> Tensor:
    """``D(x, t) = c_skip(t) x + c_out(t) F(x, t)`` with the condition row re-clamped."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite window passed to denoise")
    if x.shape[1:] != model.window_shape:
        raise ContractError(f"window shape {x.shape[1:]} != {model.window_shape}")
    b = x.shape[0]
    t = _batch_times(t, b)
    if model.conditioned and cond is None:
        cond = x.data[:, 0].copy()
    if not model.conditioned:
        cond = None
    x = clamp_condition(x, cond)
    c_skip, c_out = skip_coeffs(t, model.sigma_data, model.schedule.eps)
    f = model.residual(x, t, cond, detached)
    out = x * c_skip[:, None, None] + f * c_out[:, None, None]
    return clamp_condition(out, cond)


def teacher_loss(model: TeacherModel, x0: np.ndarray, rng: np.random.Generator,
                 noise: TrainNoiseDist | None = None) -> Tensor:
    """Batch mean of ``||D(x0 + sigma n, sigma) - x0||^2`` with ``sigma ~ p_train``.

    The condition row is never noised and is excluded from the error.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or len(x0) == 0:
        raise ContractError("teacher_loss needs a nonempty (B, H, d) batch")
    noise = noise or TrainNoiseDist(eps=model.schedule.eps, t_max=model.schedule.t_max)
    b = len(x0)
    sigma = sample_sigma(noise, rng, b)
    n = rng.standard_normal(x0.shape)
    x_noisy = x0 + sigma[:, None, None] * n
    cond = x0[:, 0] if model.conditioned else None
    d = model.denoise(x_noisy, sigma, cond)
    diff = d - x0
    if model.conditioned:
        diff = diff[:, 1:]
    return square(diff).sum() * (1.0 / b)


# -- solver -----------------------------------------------------------------------

Denoiser = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SolverSpec:
    kind: str = "heun"
    substeps: int = 1

    def __post_init__(self):
        if self.substeps < 1:
            raise ContractError("substeps must be >= 1")
        if self.kind != "heun":
            raise ContractError(f"unsupported solver {self.kind!r}")


def _as_denoiser(model, cond) -> Denoiser:
    if isinstance(model, TeacherModel):
        return lambda x, t: model(x, t, cond)
    return model


def heun_step(denoiser: Denoiser, x: np.ndarray, t: float, u: float, eps: float,
              cond=None) -> np.ndarray:
    """One predictor-corrector step of ``dx/dt = (x - D(x, t)) / t`` from ``t`` to ``u``.

    A step landing on ``eps`` stays Euler: ``D(x, eps) = x`` makes the slope
    there identically zero, which would halve the final step.
    """
    h = u - t
    d1 = (x - denoiser(x, t)) / t
    x_next = clamp_condition(x + h * d1, cond)
    if u <= eps:
        return x_next
    d2 = (x_next - denoiser(x_next, u)) / u
    return clamp_condition(x + 0.5 * h * (d1 + d2), cond)


def heun_solve(model, x, t: float, u: float, spec: SolverSpec = SolverSpec(), cond=None,
               eps: float | None = None) -> np.ndarray:
    """Integrate the PF-ODE from ``t`` down to ``u`` with ``spec.substeps`` equal steps."""
    if not u < t:
        raise ContractError(f"solver needs u < t, got t={t}, u={u}")
    if eps is None:
        eps = model.schedule.eps if isinstance(model, TeacherModel) else 0.0
    if u < eps:
        raise ContractError(f"u={u} below eps={eps}")
    den = _as_denoiser(model, cond)
    x = np.asarray(x, dtype=np.float64)
    ts = np.linspace(t, u, spec.substeps + 1)
    ts[-1] = u
    for a, b in zip(ts[:-1], ts[1:]):
        x = heun_step(den, x, a, b, eps, cond)
    return x


def solve_on_grid(model: TeacherModel, x: np.ndarray, times: np.ndarray, t_idx: np.ndarray,
                  u_idx: np.ndarray, cond=None) -> np.ndarray:
    """Per-sample Heun integration along ``times`` from ``times[t_idx]`` to ``times[u_idx]``,
    one step per grid interval."""
    x = np.array(x, dtype=np.float64, copy=True)
    t_idx = np.asarray(t_idx)
    u_idx = np.asarray(u_idx)
    if np.any(u_idx >= t_idx):
        raise ContractError("solve_on_grid needs u < t for every sample")
    eps = model.schedule.eps
    for k in range(int(t_idx.max()), 0, -1):
        rows = np.nonzero((t_idx >= k) & (u_idx < k))[0]
        if len(rows) == 0:
            continue
        c = None if cond is None else np.asarray(cond)[rows]
        x[rows] = heun_step(_as_denoiser(model, c), x[rows], times[k], times[k - 1], eps, c)
    return x


def sample_heun(model: TeacherModel, grid: SamplingGrid, x_init: np.ndarray, cond=None) -> np.ndarray:
    """Multi-step teacher sampler: one Heun step per grid interval, Euler into ``eps``."""
    if not model.conditioned:
        cond = None
    x = clamp_condition(np.asarray(x_init, dtype=np.float64), cond)
    den = _as_denoiser(model, cond)
    times = grid.descending()
    for a, b in zip(times[:-1], times[1:]):
        x = heun_step(den, x, a, b, model.schedule.eps, cond)
    return x


# -- training ---------------------------------------------------------------------

@dataclass
class TeacherConfig:
    hidden: int = 256
    depth: int = 3
    emb_dim: int = 16
    lr: float = 2e-4
    lr_schedule: str = "constant"   # "constant" | "cosine"
    batch_size: int = 128
    steps: int = 10_000
    seed: int = 0
    holdout_frac: float = 0.1
    sigma_data: float = 0.5
    log_mean: float = -1.2
    log_std: float = 1.2
    conditioned: bool = True
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    log_every: int = 100
    eval_size: int = 1024


@dataclass
class TrainResult:
    model: object
    trace: list[tuple[int, float, float]]
    holdout_initial: float = float("nan")
    holdout_final: float = float("nan")


def split_holdout(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(n)
    n_hold = int(round(n * frac)) if n > 1 else 0
    n_hold = min(n_hold, n - 1)
    return np.sort(idx[n_hold:]), np.sort(idx[:n_hold])


def init_teacher(horizon: int, state_dim: int, cfg: TeacherConfig, rng: np.random.Generator) -> TeacherModel:
    d_in = TeacherModel.input_dim(horizon, state_dim, cfg.conditioned, cfg.emb_dim)
    sizes = (d_in,) + (cfg.hidden,) * cfg.depth + (horizon * state_dim,)
    net = Mlp.init(sizes, rng)
    return TeacherModel(net, horizon, state_dim, cfg.schedule, cfg.sigma_data, cfg.conditioned, cfg.emb_dim)


def _holdout_loss(model, windows, cfg, noise) -> float:
    if len(windows) == 0:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, 7919])
    sub = windows[: cfg.eval_size]
    with no_grad():
        return float(np.mean([teacher_loss(model, sub, rng, noise).item() for _ in range(4)]))


def train_teacher(windows: np.ndarray, cfg: TeacherConfig = TeacherConfig()) -> TrainResult:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise ContractError("train_teacher needs a nonempty (N, H, d) window array")
    rng = np.random.default_rng(cfg.seed)
    train_idx, hold_idx = split_holdout(len(windows), cfg.holdout_frac, rng)
    train, hold = windows[train_idx], windows[hold_idx]
    model = init_teacher(windows.shape[1], windows.shape[2], cfg, rng)
    noise = TrainNoiseDist(cfg.log_mean, cfg.log_std, cfg.schedule.eps, cfg.schedule.t_max)
    params = model.net.named_parameters()
    opt = Adam(params, cfg.lr)
    h0 = _holdout_loss(model, hold, cfg, noise)
    trace: list[tuple[int, float, float]] = []
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch = train[rng.integers(0, len(train), cfg.batch_size)]
        if cfg.lr_schedule == "cosine":
            opt.state.lr = cosine_lr(cfg.lr, step, cfg.steps)
        loss = teacher_loss(model, batch, rng, noise)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(f"teacher loss diverged at step {step}", step=step, trace=trace)
        opt.step(grad(loss, params.values()))
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, value, (time.perf_counter() - start) * 1e3))
    model.net.requires_grad_(False)
    h1 = _holdout_loss(model, hold, cfg, noise)
    log.info("teacher: held-out loss %.4g -> %.4g", h0, h1)
    return TrainResult(model, trace, h0, h1)


def save_teacher(path, model: TeacherModel):
    return save_checkpoint(path, model.checkpoint_arrays(), model.checkpoint_meta())


def teacher_from_checkpoint(arrays: dict, meta: dict) -> TeacherModel:
    if meta.get("kind") != "teacher":
        raise ContractError(f"checkpoint kind {meta.get('kind')!r} is not a teacher")
    net = mlp_from_state(arrays, meta["sizes"])
    return TeacherModel(net, meta["horizon"], meta["state_dim"], NoiseSchedule(*meta["schedule"]),
                        meta["sigma_data"], meta["conditioned"], meta["emb_dim"])


def load_teacher(path) -> TeacherModel:
    return teacher_from_checkpoint(*load_checkpoint(path))
