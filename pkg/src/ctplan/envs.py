"""Desk-scale continuous-control environments and scripted policies.

Both environments are deterministic point masses with explicit Euler
integration ``p' = p + v dt``, ``v' = v + a dt``. The maze adds axis-separated
wall collisions and a sparse goal reward that ends the episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

Rect = tuple[float, float, float, float]  # x_lo, x_hi, y_lo, y_hi


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    state_dim: int
    action_dim: int
    dt: float = 0.1
    max_steps: int = 100
    goal: tuple[float, ...] = ()
    goal_radius: float = 0.0
    pos_bound: float = 1.0
    vel_bound: float = 1.0
    walls: tuple[Rect, ...] = ()
    start_box: tuple[tuple[float, float], ...] = ()
    expert_kp: float = 3.0
    expert_kd: float = 2.0

    @property
    def env_id(self) -> str:
        return self.kind

    @property
    def n_pos(self) -> int:
        return self.state_dim // 2


MAZE = EnvSpec(
    kind="maze", state_dim=4, action_dim=2, dt=0.1, max_steps=100,
    goal=(0.6, -0.6), goal_radius=0.2, pos_bound=1.0, vel_bound=1.0,
    walls=((-0.1, 0.1, -1.0, 0.3),),
    start_box=((-0.9, -0.4), (-0.9, 0.2)),
)

INTEGRATOR = EnvSpec(
    kind="integrator", state_dim=2, action_dim=1, dt=0.1, max_steps=60,
    goal=(0.0,), goal_radius=0.0, pos_bound=2.0, vel_bound=1.0,
    start_box=((-1.0, 1.0),),
)


def make_env(kind: str) -> EnvSpec:
    try:
        return {"maze": MAZE, "integrator": INTEGRATOR}[kind]
    except KeyError:
        raise ContractError(f"unknown environment {kind!r}") from None


def reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    pos = np.array([rng.uniform(lo, hi) for lo, hi in spec.start_box])
    return np.concatenate([pos, np.zeros(spec.n_pos)])


def _in_wall(spec: EnvSpec, p: np.ndarray) -> bool:
    return any(x0 <= p[0] <= x1 and y0 <= p[1] <= y1 for x0, x1, y0, y1 in spec.walls)


def in_goal(spec: EnvSpec, s: np.ndarray) -> bool:
    if spec.kind != "maze":
        return False
    return float(np.linalg.norm(s[:2] - np.asarray(spec.goal))) <= spec.goal_radius


def env_step(spec: EnvSpec, s, a) -> tuple[np.ndarray, float, bool]:
    """Advance one step; returns ``(s', reward, done)``. Actions are clipped to [-1, 1]."""
    s = np.asarray(s, dtype=np.float64)
    a = np.clip(np.asarray(a, dtype=np.float64).reshape(spec.action_dim), -1.0, 1.0)
    n = spec.n_pos
    p, v = s[:n].copy(), s[n:].copy()
    p_new = p + v * spec.dt
    v_new = np.clip(v + a * spec.dt, -spec.vel_bound, spec.vel_bound)
    if spec.walls:
        # resolve each axis separately so motion slides along walls
        q = p.copy()
        for axis in range(n):
            trial = q.copy()
            trial[axis] = p_new[axis]
            if _in_wall(spec, trial):
                v_new[axis] = 0.0
            else:
                q = trial
        p_new = q
    out = np.abs(p_new) > spec.pos_bound
    p_new = np.clip(p_new, -spec.pos_bound, spec.pos_bound)
    v_new[out] = 0.0
    s_new = np.concatenate([p_new, v_new])
    if spec.kind == "maze":
        if in_goal(spec, s_new):
            return s_new, 1.0, True
        return s_new, 0.0, False
    reward = -abs(float(p_new[0]) - spec.goal[0]) * spec.dt
    return s_new, reward, False


# -- scripted policies --------------------------------------------------------------

def _maze_target(spec: EnvSpec, p: np.ndarray) -> np.ndarray:
    if p[0] >= 0.1:
        return np.asarray(spec.goal)
    if p[1] < 0.5:
        return np.array([-0.35, 0.7])
    return np.array([0.4, 0.7])


def expert_action(spec: EnvSpec, s) -> np.ndarray:
    """PD controller toward the goal (through waypoints in the maze)."""
    s = np.asarray(s, dtype=np.float64)
    n = spec.n_pos
    p, v = s[:n], s[n:]
    target = _maze_target(spec, p) if spec.kind == "maze" else np.asarray(spec.goal)
    return np.clip(spec.expert_kp * (target - p) - spec.expert_kd * v, -1.0, 1.0)


def random_action(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, spec.action_dim)


@dataclass
class ScriptedPolicy:
    spec: EnvSpec
    kind: str              # "expert" | "random"
    noise: float = 0.3
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __call__(self, s) -> np.ndarray:
        if self.kind == "random":
            return random_action(self.spec, self.rng)
        a = expert_action(self.spec, s)
        if self.noise > 0:
            a = a + self.noise * self.rng.standard_normal(self.spec.action_dim)
        return np.clip(a, -1.0, 1.0)


def run_episode(spec: EnvSpec, policy, rng: np.random.Generator, max_steps: int | None = None):
    """Roll out ``policy`` from a fresh reset; returns (states, actions, rewards, terminal)."""
    s = reset(spec, rng)
    states, actions, rewards = [], [], []
    terminal = False
    for _ in range(max_steps or spec.max_steps):
        a = np.asarray(policy(s), dtype=np.float64)
        s_next, r, done = env_step(spec, s, a)
        states.append(s)
        actions.append(np.clip(a, -1.0, 1.0))
        rewards.append(r)
        s = s_next
        if done:
            terminal = True
            break
    return np.array(states), np.array(actions), np.array(rewards), terminal
