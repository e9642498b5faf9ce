"""Diffusion-time machinery: discretizations, noise-level sampling and
skip-connection coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

EPS = 0.002
T_MAX = 80.0
RHO = 7.0
SIGMA_DATA = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    eps: float = EPS
    t_max: float = T_MAX
    rho: float = RHO
    n_train: int = 18

    def __post_init__(self):
        if not 0.0 < self.eps < self.t_max:
            raise ContractError(f"need 0 < eps < t_max, got eps={self.eps}, t_max={self.t_max}")
        if self.rho <= 0:
            raise ContractError("rho must be positive")


def karras_times(schedule: NoiseSchedule) -> np.ndarray:
    """The ``n_train`` Karras boundary times, ascending from ``eps`` to ``t_max``."""
    n = schedule.n_train
    if n < 2:
        raise ContractError(f"n_train must be >= 2, got {n}")
    lo = schedule.eps ** (1.0 / schedule.rho)
    hi = schedule.t_max ** (1.0 / schedule.rho)
    times = (lo + np.arange(n) / (n - 1) * (hi - lo)) ** schedule.rho
    # pin the endpoints; the power round-trip is off by an ulp or two
    times[0] = schedule.eps
    times[-1] = schedule.t_max
    return times


@dataclass(frozen=True)
class SamplingGrid:
    steps: int
    times: tuple[float, ...]
    mode: str = "uniform"

    def descending(self) -> list[float]:
        return list(reversed(self.times))


def sampling_grid(t_max: float = T_MAX, eps: float = EPS, n_steps: int = 2,
                  mode: str = "uniform", rho: float = RHO) -> SamplingGrid:
    """Inference grid ``t_0 = eps < t_1 < ... < t_n = t_max``.

    ``uniform`` places ``t_k = k / n * t_max`` (k >= 1); ``karras`` reuses the
    training warp with ``n + 1`` points.
    """
    if n_steps < 1:
        raise ContractError(f"n_steps must be >= 1, got {n_steps}")
    if mode == "uniform":
        times = [eps] + [k / n_steps * t_max for k in range(1, n_steps + 1)]
    elif mode == "karras":
        times = list(karras_times(NoiseSchedule(eps, t_max, rho, n_steps + 1)))
    else:
        raise ContractError(f"unknown grid mode {mode!r}")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ContractError("grid times must be strictly increasing")
    return SamplingGrid(n_steps, tuple(float(t) for t in times), mode)


@dataclass(frozen=True)
class TrainNoiseDist:
    log_mean: float = -1.2
    log_std: float = 1.2
    eps: float = EPS
    t_max: float = T_MAX


def sample_sigma(dist: TrainNoiseDist, rng: np.random.Generator, size=None):
    """Log-normal noise levels clamped to ``[eps, t_max]``."""
    if dist.log_std < 0:
        raise ContractError("log_std must be non-negative")
    z = rng.standard_normal(size)
    return np.clip(np.exp(dist.log_mean + dist.log_std * z), dist.eps, dist.t_max)


def skip_coeffs(t, sigma_data: float = SIGMA_DATA, eps: float = EPS):
    """``(c_skip, c_out)`` with ``c_skip(eps) = 1`` and ``c_out(eps) = 0`` exactly."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < eps):
        raise ContractError(f"time below eps={eps}")
    dt = t - eps
    c_skip = sigma_data ** 2 / (dt ** 2 + sigma_data ** 2)
    c_out = sigma_data * dt / np.sqrt(sigma_data ** 2 + t ** 2)
    return c_skip, c_out


def input_scale(t, sigma_data: float = SIGMA_DATA):
    """Normalizes a noisy input of level ``t`` to roughly unit variance."""
    t = np.asarray(t, dtype=np.float64)
    return 1.0 / np.sqrt(t ** 2 + sigma_data ** 2)


def time_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal features of ``log(t) / 4``; shape ``(..., dim)``."""
    if dim % 2:
        raise ContractError("embedding dim must be even")
    c = np.log(np.asarray(t, dtype=np.float64)) / 4.0
    freqs = np.pi * 2.0 ** np.linspace(-2.0, 2.0, dim // 2)
    ang = c[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
