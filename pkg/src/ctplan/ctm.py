"""Consistency trajectory student, EMA target, discriminator and distillation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingDivergence
from .numerics import (Adam, Mlp, Tensor, clip, ema_update, grad, log as tlog, mlp_from_state,
                       mlp_state, no_grad, square)
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, TrainNoiseDist, karras_times, sample_sigma, skip_coeffs
from .teacher import (SolverSpec, TeacherModel, _batch_times, clamp_condition, denoiser_features,
                      heun_solve, solve_on_grid)

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-7


@dataclass
class StudentModel:
    """``G(x, t, w) = (w/t) x + (1 - w/t) g(x, t, w)`` with a skip-parameterized ``g``."""

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

    def _cond(self, x, cond):
        if not self.conditioned:
            return None
        if cond is None:
            return (x.data if isinstance(x, Tensor) else np.asarray(x))[:, 0].copy()
        return cond

    def g(self, x, t, w, cond=None, detached: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        b = x.shape[0]
        t = _batch_times(t, b)
        w = _batch_times(w, b)
        cond = self._cond(x, cond)
        x = clamp_condition(x, cond)
        self.calls += 1
        feats = denoiser_features(x, t, cond, self.sigma_data, self.emb_dim, [np.maximum(w, self.schedule.eps)])
        f = self.net(feats, detached=detached).reshape(x.shape)
        c_skip, c_out = skip_coeffs(t, self.sigma_data, self.schedule.eps)
        return clamp_condition(x * c_skip[:, None, None] + f * c_out[:, None, None], cond)

    def forward(self, x, t, w, cond=None, detached: bool = False) -> Tensor:
        return student_forward(self, x, t, w, cond, detached)

    def __call__(self, x, t, w, cond=None) -> np.ndarray:
        with no_grad():
            return self.forward(x, t, w, cond).data

    def copy(self) -> StudentModel:
        return StudentModel(self.net.copy(requires_grad=False), self.horizon, self.state_dim,
                            self.schedule, self.sigma_data, self.conditioned, self.emb_dim)

    def checkpoint_arrays(self) -> dict:
        return mlp_state(self.net)

    def checkpoint_meta(self, kind: str = "student") -> dict:
        return {"kind": kind, "sizes": list(self.net.sizes), "horizon": self.horizon,
                "state_dim": self.state_dim, "sigma_data": self.sigma_data,
                "conditioned": self.conditioned, "emb_dim": self.emb_dim,
                "schedule": [self.schedule.eps, self.schedule.t_max, self.schedule.rho,
                             self.schedule.n_train]}


def student_forward(model: StudentModel, x_t, t, w, cond=None, detached: bool = False) -> Tensor:
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    b = x.shape[0]
    t = _batch_times(t, b)
    w = _batch_times(w, b)
    if np.any(w > t) or np.any(w < 0):
        raise ContractError("student_forward needs 0 <= w <= t")
    cond = model._cond(x, cond)
    x = clamp_condition(x, cond)
    ratio = (w / t)[:, None, None]
    out = x * ratio + model.g(x, t, w, cond, detached) * (1.0 - ratio)
    return clamp_condition(out, cond)


def init_student(teacher: TeacherModel) -> StudentModel:
    """Copy the teacher backbone and append zeroed input rows for the w-embedding."""
    net = teacher.net.copy(requires_grad=True)
    w0 = net.weights[0].data
    net.weights[0].data = np.vstack([w0, np.zeros((teacher.emb_dim, w0.shape[1]))])
    net.sizes = (net.sizes[0] + teacher.emb_dim,) + net.sizes[1:]
    return StudentModel(net, teacher.horizon, teacher.state_dim, teacher.schedule, teacher.sigma_data,
                        teacher.conditioned, teacher.emb_dim)


# -- objectives -------------------------------------------------------------------

def compute_target(teacher: TeacherModel, target_model: StudentModel, x_t, t: float, u: float,
                   w: float, cond=None, spec: SolverSpec = SolverSpec()) -> np.ndarray:
    """``G_sg(Solver(x_t, t, u), u, w)``; never carries gradient."""
    if not (w <= u < t):
        raise ContractError(f"need w <= u < t, got t={t}, u={u}, w={w}")
    with no_grad():
        x_u = heun_solve(teacher, np.asarray(x_t, dtype=np.float64), t, u, spec, cond)
        return target_model(x_u, u, w, cond)


@dataclass
class CtmBatch:
    x0: np.ndarray
    x_t: np.ndarray
    cond: np.ndarray | None
    t_idx: np.ndarray
    u_idx: np.ndarray
    w_idx: np.ndarray


def sample_ctm_batch(x0: np.ndarray, times: np.ndarray, rng: np.random.Generator,
                     conditioned: bool) -> CtmBatch:
    """Grid indices ``t in {1..N-1}``, ``w in {0..t-1}``, ``u in {w..t-1}``; ``x_t = x0 + t z``."""
    b = len(x0)
    n = len(times)
    t_idx = rng.integers(1, n, b)
    w_idx = (rng.random(b) * t_idx).astype(np.int64)
    u_idx = w_idx + (rng.random(b) * (t_idx - w_idx)).astype(np.int64)
    z = rng.standard_normal(x0.shape)
    x_t = x0 + times[t_idx][:, None, None] * z
    cond = x0[:, 0].copy() if conditioned else None
    return CtmBatch(x0, clamp_condition(x_t, cond), cond, t_idx, u_idx, w_idx)


def ctm_terms(student: StudentModel, target_model: StudentModel, teacher: TeacherModel,
              batch: CtmBatch, times: np.ndarray) -> tuple[Tensor, Tensor]:
    """CTM distillation loss and the student estimate ``x_est`` (both at time eps)."""
    eps = times[0]
    t = times[batch.t_idx]
    u = times[batch.u_idx]
    w = times[batch.w_idx]
    b = len(batch.x0)
    with no_grad():
        x_u = solve_on_grid(teacher, batch.x_t, times, batch.t_idx, batch.u_idx, batch.cond)
        g_target = target_model(x_u, u, w, batch.cond)
        x_target = target_model(g_target, w, eps, batch.cond)
    x_w = student.forward(batch.x_t, t, w, batch.cond)
    x_est = target_model.forward(x_w, w, eps, batch.cond, detached=True)
    loss = square(x_est - x_target).sum() * (1.0 / b)
    return loss, x_est


def ctm_loss(student: StudentModel, target_model: StudentModel, teacher: TeacherModel,
             x0: np.ndarray, rng: np.random.Generator) -> Tensor:
    times = karras_times(student.schedule)
    batch = sample_ctm_batch(np.asarray(x0, dtype=np.float64), times, rng, student.conditioned)
    return ctm_terms(student, target_model, teacher, batch, times)[0]


def dsm_loss(student: StudentModel, x0: np.ndarray, rng: np.random.Generator,
             noise: TrainNoiseDist | None = None) -> Tensor:
    """Batch mean of ``||x0 - g(x_t, t, t)||^2`` using the raw network branch."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = noise or TrainNoiseDist(eps=student.schedule.eps, t_max=student.schedule.t_max)
    b = len(x0)
    sigma = sample_sigma(noise, rng, b)
    x_t = x0 + sigma[:, None, None] * rng.standard_normal(x0.shape)
    cond = x0[:, 0].copy() if student.conditioned else None
    diff = student.g(x_t, sigma, sigma, cond) - x0
    if student.conditioned:
        diff = diff[:, 1:]
    return square(diff).sum() * (1.0 / b)


def init_discriminator(horizon: int, state_dim: int, hidden: int, rng: np.random.Generator) -> Mlp:
    return Mlp.init((horizon * state_dim, hidden, hidden, 1), rng, out_activation="sigmoid")


@dataclass
class GanTerms:
    generator: Tensor      # -E log d(x_est); gradient reaches the student only
    objective: Tensor      # E log d(x0) + E log(1 - d(x_est)); the discriminator ascends it
    clamped: int


def gan_losses(disc: Mlp, x0: np.ndarray, x_est: Tensor) -> GanTerms:
    b = len(x0)
    real = clip(disc(np.asarray(x0).reshape(b, -1)), LOG_FLOOR, 1.0 - LOG_FLOOR)
    fake_det = clip(disc(x_est.data.reshape(b, -1)), LOG_FLOOR, 1.0 - LOG_FLOOR)
    fake = clip(disc(x_est.reshape(b, -1), detached=True), LOG_FLOOR, 1.0 - LOG_FLOOR)
    clamped = sum(int(np.sum((v.data <= LOG_FLOOR) | (v.data >= 1.0 - LOG_FLOOR)))
                  for v in (real, fake_det))
    objective = tlog(real).mean() + tlog(1.0 - fake_det).mean()
    generator = -tlog(fake).mean()
    return GanTerms(generator, objective, clamped)


def total_loss(l_ctm, l_dsm, l_gan, lambda_dsm: float, lambda_gan: float):
    return l_ctm + lambda_dsm * l_dsm + lambda_gan * l_gan


# -- distillation loop ------------------------------------------------------------

@dataclass
class DistillConfig:
    lambda_dsm: float = 1.0
    lambda_gan: float = 0.0
    mu_ema: float = 0.999
    batch_size: int = 128
    steps: int = 10_000
    lr: float = 8e-6
    solver: SolverSpec = field(default_factory=SolverSpec)
    seed: int = 0
    disc_hidden: int = 128
    disc_lr_mult: float = 10.0
    log_mean: float = -1.2
    log_std: float = 1.2
    log_every: int = 100

    def __post_init__(self):
        if self.lambda_dsm < 0 or self.lambda_gan < 0:
            raise ContractError("loss weights must be non-negative")
        if not 0.0 <= self.mu_ema <= 1.0:
            raise ContractError("mu_ema must lie in [0, 1]")


@dataclass
class DistillResult:
    student: StudentModel
    target: StudentModel
    disc: Mlp
    trace: list[tuple]   # (step, L_CTM, L_DSM, L_GAN, total, wallclock_ms)


def distill(teacher: TeacherModel, windows: np.ndarray, cfg: DistillConfig = DistillConfig()) -> DistillResult:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise ContractError("distill needs a nonempty (N, H, d) window array")
    rng = np.random.default_rng(cfg.seed)
    student = init_student(teacher)
    target = student.copy()
    disc = init_discriminator(teacher.horizon, teacher.state_dim, cfg.disc_hidden,
                              np.random.default_rng([cfg.seed, 1]))
    times = karras_times(teacher.schedule)
    noise = TrainNoiseDist(cfg.log_mean, cfg.log_std, teacher.schedule.eps, teacher.schedule.t_max)
    params = student.net.named_parameters()
    opt = Adam(params, cfg.lr)
    disc_params = disc.named_parameters()
    disc_opt = Adam(disc_params, cfg.lr * cfg.disc_lr_mult)
    use_gan = cfg.lambda_gan > 0
    trace: list[tuple] = []
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        x0 = windows[rng.integers(0, len(windows), cfg.batch_size)]
        batch = sample_ctm_batch(x0, times, rng, student.conditioned)
        l_ctm, x_est = ctm_terms(student, target, teacher, batch, times)
        l_dsm = dsm_loss(student, x0, rng, noise) if cfg.lambda_dsm > 0 else 0.0
        gan = gan_losses(disc, x0, x_est) if use_gan else None
        l_gan = gan.generator if use_gan else 0.0
        loss = total_loss(l_ctm, l_dsm, l_gan, cfg.lambda_dsm, cfg.lambda_gan)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(f"distillation loss diverged at step {step}", step=step, trace=trace)
        opt.step(grad(loss, params.values()))
        if use_gan:
            # ascent on the objective == descent on its negation
            disc_opt.step(grad(-gan.objective, disc_params.values()))
        ema_update(target.net.named_parameters(), params, cfg.mu_ema)
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, l_ctm.item(), _scalar(l_dsm), _scalar(l_gan), value,
                          (time.perf_counter() - start) * 1e3))
    student.net.requires_grad_(False)
    disc.requires_grad_(False)
    return DistillResult(student, target, disc, trace)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def save_student(path, model: StudentModel, kind: str = "student"):
    return save_checkpoint(path, model.checkpoint_arrays(), model.checkpoint_meta(kind))


def load_student(path) -> StudentModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") not in ("student", "target"):
        raise ContractError(f"checkpoint kind {meta.get('kind')!r} is not a student")
    net = mlp_from_state(arrays, meta["sizes"])
    return StudentModel(net, meta["horizon"], meta["state_dim"], NoiseSchedule(*meta["schedule"]),
                        meta["sigma_data"], meta["conditioned"], meta["emb_dim"])


def save_discriminator(path, disc: Mlp):
    return save_checkpoint(path, mlp_state(disc), {"kind": "discriminator", "sizes": list(disc.sizes)})


def load_discriminator(path) -> Mlp:
    arrays, meta = load_checkpoint(path)
    return mlp_from_state(arrays, meta["sizes"], out_activation="sigmoid")
