"""Inverse-dynamics action extractor and trajectory-return critic."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingDivergence
from .numerics import Adam, Mlp, Tensor, cosine_lr, grad, mlp_from_state, mlp_state, no_grad, square
from .numerics.checkpoint import load_checkpoint, save_checkpoint


def compute_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted reward-to-go ``R_k = r_k + gamma R_{k+1}``, zero past the episode end."""
    if not 0.0 <= gamma < 1.0:
        raise ContractError(f"gamma must lie in [0, 1), got {gamma}")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        acc = rewards[k] + gamma * acc
        out[k] = acc
    return out


@dataclass
class AuxConfig:
    hidden: int = 128
    depth: int = 2
    lr: float = 3e-4
    batch_size: int = 128
    steps: int = 5000
    seed: int = 0
    holdout_frac: float = 0.1
    log_every: int = 100
    lr_schedule: str = "constant"   # or "cosine"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"unknown lr_schedule {self.lr_schedule!r}")


def _fit(net: Mlp, inputs: np.ndarray, targets: np.ndarray, cfg: AuxConfig, name: str):
    """Minibatch MSE regression; returns (trace, held-out MSE before, after)."""
    rng = np.random.default_rng(cfg.seed)
    n = len(inputs)
    perm = rng.permutation(n)
    n_hold = min(int(round(n * cfg.holdout_frac)), n - 1)
    hold, train = perm[:n_hold], perm[n_hold:]
    params = net.named_parameters()
    opt = Adam(params, cfg.lr)

    def held_out() -> float:
        if n_hold == 0:
            return float("nan")
        with no_grad():
            return float(np.mean((net(inputs[hold]).data - targets[hold]) ** 2))

    h0 = held_out()
    trace = []
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        if cfg.lr_schedule == "cosine":
            opt.state.lr = cosine_lr(cfg.lr, step, cfg.steps)
        idx = train[rng.integers(0, len(train), cfg.batch_size)]
        pred = net(inputs[idx])
        loss = square(pred - targets[idx]).sum() * (1.0 / len(idx))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(f"{name} loss diverged at step {step}", step=step, trace=trace)
        opt.step(grad(loss, params.values()))
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, value, (time.perf_counter() - start) * 1e3))
    net.requires_grad_(False)
    return trace, h0, held_out()


# -- inverse dynamics ---------------------------------------------------------------

@dataclass
class InverseDynamics:
    net: Mlp
    state_dim: int
    action_dim: int
    stride: int
    action_lo: np.ndarray
    action_hi: np.ndarray

    def predict_normalized(self, s, s_next) -> Tensor:
        return self.net(np.concatenate([np.atleast_2d(s), np.atleast_2d(s_next)], axis=-1))

    def denormalize(self, a: np.ndarray) -> np.ndarray:
        half = 0.5 * (self.action_hi - self.action_lo)
        return (np.asarray(a) + 1.0) * half + self.action_lo


def invdyn_loss(model: InverseDynamics, s, s_next, a_norm) -> Tensor:
    """Batch mean of ``||a - h(s, s_next)||^2`` on normalized actions."""
    a_norm = np.atleast_2d(np.asarray(a_norm, dtype=np.float64))
    pred = model.predict_normalized(s, s_next)
    return square(pred - a_norm).sum() * (1.0 / len(a_norm))


def train_invdyn(s, s_next, a_norm, action_lo, action_hi, stride: int,
                 cfg: AuxConfig = AuxConfig()):
    """Fit ``h(s_k, s_{k+M}) -> a_k`` on normalized states/actions."""
    s, s_next, a_norm = (np.asarray(v, dtype=np.float64) for v in (s, s_next, a_norm))
    if len(s) < 2:
        raise ContractError("inverse dynamics needs at least two transitions")
    d_s, d_a = s.shape[1], a_norm.shape[1]
    net = Mlp.init((2 * d_s,) + (cfg.hidden,) * cfg.depth + (d_a,), np.random.default_rng([cfg.seed, 11]))
    model = InverseDynamics(net, d_s, d_a, stride, np.asarray(action_lo, float), np.asarray(action_hi, float))
    trace, h0, h1 = _fit(net, np.concatenate([s, s_next], axis=1), a_norm, cfg, "inverse dynamics")
    return model, {"trace": trace, "holdout_mse_initial": h0, "holdout_mse": h1}


def extract_action(model: InverseDynamics, s, s_next) -> np.ndarray:
    """Action in environment units for normalized states ``s -> s_next``."""
    with no_grad():
        a = model.predict_normalized(s, s_next).data
    a = model.denormalize(a)
    return a[0] if np.ndim(s) == 1 else a


def save_invdyn(path, model: InverseDynamics):
    arrays = mlp_state(model.net)
    arrays["action_lo"] = model.action_lo
    arrays["action_hi"] = model.action_hi
    return save_checkpoint(path, arrays, {"kind": "invdyn", "sizes": list(model.net.sizes),
                                          "state_dim": model.state_dim, "action_dim": model.action_dim,
                                          "stride": model.stride})


def load_invdyn(path) -> InverseDynamics:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "invdyn":
        raise ContractError("not an inverse-dynamics checkpoint")
    return InverseDynamics(mlp_from_state(arrays, meta["sizes"]), meta["state_dim"], meta["action_dim"],
                           meta["stride"], arrays["action_lo"], arrays["action_hi"])


# -- critic ---------------------------------------------------------------------------

@dataclass
class Critic:
    net: Mlp
    horizon: int
    state_dim: int
    gamma: float
    # regression runs on standardized returns; these undo it
    ret_mean: float = 0.0
    ret_scale: float = 1.0
    calls: int = field(default=0, compare=False)

    def raw(self, windows) -> Tensor:
        w = np.asarray(windows, dtype=np.float64) if not isinstance(windows, Tensor) else windows
        b = w.shape[0]
        if tuple(w.shape[1:]) != (self.horizon, self.state_dim):
            raise ContractError(f"critic expects windows of shape (H={self.horizon}, d={self.state_dim})")
        self.calls += 1
        return self.net(w.reshape(b, -1)).reshape(b)

    def __call__(self, windows) -> np.ndarray:
        with no_grad():
            return self.raw(windows).data * self.ret_scale + self.ret_mean


def critic_loss(critic: Critic, windows, returns) -> Tensor:
    """Batch mean of ``(V(x) - R)^2`` in return units."""
    pred = critic.raw(windows) * critic.ret_scale + critic.ret_mean
    return square(pred - np.asarray(returns, dtype=np.float64)).mean()


def train_critic(windows, returns, gamma: float, cfg: AuxConfig = AuxConfig()):
    windows = np.asarray(windows, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if len(windows) < 2 or len(windows) != len(returns):
        raise ContractError("critic needs matching windows and returns (at least two)")
    _, h, d = windows.shape
    mean = float(returns.mean())
    scale = float(returns.std())
    scale = scale if scale > 1e-8 else 1.0
    net = Mlp.init((h * d,) + (cfg.hidden,) * cfg.depth + (1,), np.random.default_rng([cfg.seed, 13]))
    critic = Critic(net, h, d, gamma, mean, scale)
    trace, h0, h1 = _fit(net, windows.reshape(len(windows), -1), ((returns - mean) / scale)[:, None],
                         cfg, "critic")
    return critic, {"trace": trace, "holdout_mse_initial": h0 * scale ** 2, "holdout_mse": h1 * scale ** 2}


def save_critic(path, critic: Critic):
    return save_checkpoint(path, mlp_state(critic.net),
                           {"kind": "critic", "sizes": list(critic.net.sizes), "horizon": critic.horizon,
                            "state_dim": critic.state_dim, "gamma": critic.gamma,
                            "ret_mean": critic.ret_mean, "ret_scale": critic.ret_scale})


def load_critic(path) -> Critic:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "critic":
        raise ContractError("not a critic checkpoint")
    return Critic(mlp_from_state(arrays, meta["sizes"]), meta["horizon"], meta["state_dim"], meta["gamma"],
                  meta["ret_mean"], meta["ret_scale"])
