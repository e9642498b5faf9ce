"""Offline datasets: collection, normalization, windowing and the binary file format.

File layout (all integers/floats little-endian)::

    magic         8 bytes  b"CTPDATA\\0"
    version       uint32
    meta_len      uint32
    meta          UTF-8 JSON (env id, dims, stride, horizon, gamma, counts, seed)
    normalizers   float64[2*d_s + 2*d_a]  state lo, state hi, action lo, action hi
    trajectories  repeated: uint32 T, uint32 terminal,
                  float64[T*d_s] states, float64[T*d_a] actions, float64[T] rewards
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import compute_returns
from .envs import EnvSpec, ScriptedPolicy, make_env, run_episode
from .errors import ContractError, MissingArtifact

log = logging.getLogger(__name__)

MAGIC = b"CTPDATA\0"
FORMAT_VERSION = 1


@dataclass
class Trajectory:
    states: np.ndarray     # (T, d_s)
    actions: np.ndarray    # (T, d_a)
    rewards: np.ndarray    # (T,)
    terminal: bool = False

    def __post_init__(self):
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ContractError("trajectory arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class Normalizer:
    """Per-dimension affine map from ``[lo, hi]`` onto ``[-1, 1]``."""

    lo: np.ndarray
    hi: np.ndarray
    clip_count: int = field(default=0, compare=False)

    @classmethod
    def fit(cls, x: np.ndarray) -> Normalizer:
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        return cls(x.min(axis=0), x.max(axis=0))

    @property
    def _span(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span > 0, span, 2.0)

    def normalize(self, x, clip: bool = False) -> np.ndarray:
        z = 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / self._span - 1.0
        if clip:
            outside = int(np.sum(np.abs(z) > 1.0))
            if outside:
                self.clip_count += outside
                log.warning("clipped %d normalized values outside [-1, 1]", outside)
                z = np.clip(z, -1.0, 1.0)
        return z

    def denormalize(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) + 1.0) * 0.5 * self._span + self.lo


@dataclass
class Dataset:
    env_id: str
    trajectories: list[Trajectory]
    state_norm: Normalizer
    action_norm: Normalizer
    stride: int
    horizon: int
    gamma: float
    n_train: int           # the first n_train trajectories are the training split
    seed: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return len(self.state_norm.lo)

    @property
    def action_dim(self) -> int:
        return len(self.action_norm.lo)

    def split(self, name: str) -> list[Trajectory]:
        if name == "train":
            return self.trajectories[: self.n_train]
        if name == "holdout":
            return self.trajectories[self.n_train:]
        if name == "all":
            return self.trajectories
        raise ContractError(f"unknown split {name!r}")

    def meta(self) -> dict:
        return {"env_id": self.env_id, "state_dim": self.state_dim, "action_dim": self.action_dim,
                "stride": self.stride, "horizon": self.horizon, "gamma": self.gamma,
                "n_trajectories": len(self.trajectories), "n_train": self.n_train, "seed": self.seed,
                "stats": self.stats}


def _fit_normalizers(trajs: list[Trajectory], d_s: int, d_a: int) -> tuple[Normalizer, Normalizer]:
    if not trajs:
        zs, za = np.zeros(d_s), np.zeros(d_a)
        return Normalizer(zs - 1.0, zs + 1.0), Normalizer(za - 1.0, za + 1.0)
    states = np.concatenate([t.states for t in trajs])
    actions = np.concatenate([t.actions for t in trajs])
    return Normalizer.fit(states), Normalizer.fit(actions)


def collect_dataset(spec: EnvSpec | str, policy: str = "mixture", n_episodes: int = 400, seed: int = 0,
                    stride: int = 2, horizon: int = 8, gamma: float = 0.99, holdout_frac: float = 0.1,
                    expert_frac: float = 0.5, noise: float = 0.3) -> Dataset:
    """Roll out a scripted policy; ``mixture`` draws expert or random per episode.

    Episode ``i`` uses the generator seeded by ``(seed, i)`` so collection is
    reproducible and order independent.
    """
    spec = make_env(spec) if isinstance(spec, str) else spec
    if policy not in ("expert", "random", "mixture"):
        raise ContractError(f"unknown policy kind {policy!r}")
    trajs = []
    kinds = []
    for i in range(n_episodes):
        rng = np.random.default_rng([seed, i])
        kind = policy
        if policy == "mixture":
            kind = "expert" if rng.random() < expert_frac else "random"
        s, a, r, term = run_episode(spec, ScriptedPolicy(spec, kind, noise, rng), rng)
        trajs.append(Trajectory(s, a, r, term))
        kinds.append(kind)
    n_train = n_episodes - int(round(n_episodes * holdout_frac)) if n_episodes > 1 else n_episodes
    s_norm, a_norm = _fit_normalizers(trajs[:n_train], spec.state_dim, spec.action_dim)
    stats = {}
    for kind in ("expert", "random"):
        picked = [t for t, k in zip(trajs, kinds) if k == kind]
        if picked:
            stats[f"{kind}_episodes"] = len(picked)
            stats[f"{kind}_success_rate"] = float(np.mean([t.terminal for t in picked]))
            stats[f"{kind}_mean_return"] = float(np.mean([t.rewards.sum() for t in picked]))
    return Dataset(spec.env_id, trajs, s_norm, a_norm, stride, horizon, gamma, n_train, seed, stats)


@dataclass
class WindowSet:
    windows: np.ndarray      # (N, H, d_s) normalized
    returns: np.ndarray      # (N,) discounted return-to-go at the window start
    starts: np.ndarray       # (N, 2) episode index, start step
    s: np.ndarray            # (P, d_s) normalized s_k for inverse dynamics
    s_next: np.ndarray       # (P, d_s) normalized s_{k+M}
    actions: np.ndarray      # (P, d_a) normalized a_k
    skipped_pairs: int = 0


def make_windows(dataset: Dataset, horizon: int | None = None, stride: int | None = None,
                 split: str = "train") -> WindowSet:
    """Cut every full window ``(s_k, s_{k+M}, ..., s_{k+(H-1)M})`` inside an episode.

    Windows that would cross the episode end are dropped. Inverse-dynamics pairs
    use every ``k`` with ``k + M`` inside the episode.
    """
    h = horizon or dataset.horizon
    m = stride or dataset.stride
    if h < 1 or m < 1:
        raise ContractError("horizon and stride must be positive")
    trajs = dataset.split(split)
    clip = split != "train"
    wins, rets, starts, s0, s1, acts = [], [], [], [], [], []
    skipped = 0
    offset = 0 if split != "holdout" else dataset.n_train
    for ei, traj in enumerate(trajs):
        t_len = len(traj)
        returns = compute_returns(traj.rewards, dataset.gamma)
        states = dataset.state_norm.normalize(traj.states, clip=clip)
        n_win = t_len - (h - 1) * m
        for k in range(max(n_win, 0)):
            wins.append(states[k: k + (h - 1) * m + 1: m])
            rets.append(returns[k])
            starts.append((ei + offset, k))
        if t_len <= m:
            skipped += 1
            continue
        s0.append(states[: t_len - m])
        s1.append(states[m:])
        acts.append(dataset.action_norm.normalize(traj.actions[: t_len - m], clip=clip))
    if skipped:
        log.warning("%d trajectories shorter than the stride contributed no action pairs", skipped)
    if not wins:
        raise ContractError(f"no valid windows for H={h}, M={m}")
    d_s, d_a = dataset.state_dim, dataset.action_dim
    cat = lambda xs, d: np.concatenate(xs) if xs else np.zeros((0, d))  # noqa: E731
    return WindowSet(np.array(wins), np.array(rets), np.array(starts, dtype=np.int64),
                     cat(s0, d_s), cat(s1, d_s), cat(acts, d_a), skipped)


# -- persistence --------------------------------------------------------------------

def save_dataset(path, ds: Dataset) -> Path:
    path = Path(path)
    meta = json.dumps(ds.meta(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
        fh.write(meta)
        for arr in (ds.state_norm.lo, ds.state_norm.hi, ds.action_norm.lo, ds.action_norm.hi):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())
        for t in ds.trajectories:
            fh.write(struct.pack("<II", len(t), int(t.terminal)))
            for arr in (t.states, t.actions, t.rewards):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(ds.meta(), indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"dataset not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path} is not a dataset file")
    version, mlen = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported dataset version {version}")
    meta = json.loads(raw[16:16 + mlen])
    off = 16 + mlen
    d_s, d_a = meta["state_dim"], meta["action_dim"]

    def take(n):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr

    s_lo, s_hi, a_lo, a_hi = take(d_s), take(d_s), take(d_a), take(d_a)
    trajs = []
    for _ in range(meta["n_trajectories"]):
        t_len, term = struct.unpack_from("<II", raw, off)
        off += 8
        trajs.append(Trajectory(take(t_len * d_s).reshape(t_len, d_s), take(t_len * d_a).reshape(t_len, d_a),
                                take(t_len), bool(term)))
    if off != len(raw):
        raise ContractError(f"{path}: trailing bytes in dataset file")
    return Dataset(meta["env_id"], trajs, Normalizer(s_lo, s_hi), Normalizer(a_lo, a_hi), meta["stride"],
                   meta["horizon"], meta["gamma"], meta["n_train"], meta["seed"], meta.get("stats", {}))
