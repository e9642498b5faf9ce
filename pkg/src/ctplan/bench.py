"""Training pipeline stages, evaluation against harness anchors, and the steps sweep."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .ctm import DistillConfig, distill, load_student, save_discriminator, save_student
from .data import collect_dataset, load_dataset, make_windows, save_dataset
from .dynamics import AuxConfig, load_critic, load_invdyn, save_critic, save_invdyn, train_critic, train_invdyn
from .envs import EnvSpec, ScriptedPolicy, make_env, reset, run_episode
from .errors import ContractError, MissingArtifact, TrainingDivergence
from .planner import EpisodeConfig, ModelBundle, PlanRequest, plan_step, rollout, write_traces
from .schedule import NoiseSchedule
from .teacher import SolverSpec, TeacherConfig, load_teacher, save_teacher, train_teacher

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
STAGES = ("teacher", "distill", "aux")

ARTIFACTS = {
    "dataset": "dataset.bin",
    "teacher": "teacher.ckpt",
    "student": "student.ckpt",
    "target": "target.ckpt",
    "disc": "discriminator.ckpt",
    "invdyn": "invdyn.ckpt",
    "critic": "critic.ckpt",
}


def artifact(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / ARTIFACTS[name]


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not artifact(cfg, name).exists():
            raise MissingArtifact(f"missing {name} artifact {artifact(cfg, name)}; run the earlier stage first")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version"] + header)
        for row in rows:
            w.writerow([CSV_SCHEMA_VERSION] + [repr(v) if isinstance(v, float) else v for v in row])


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(cfg.eps, cfg.t_max, cfg.rho, cfg.n_train)


# -- stages -----------------------------------------------------------------------

def stage_data(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = collect_dataset(make_env(cfg.env), "mixture", cfg.n_episodes, cfg.seed, cfg.stride, cfg.horizon,
                         cfg.gamma, cfg.holdout_frac, cfg.expert_frac, cfg.policy_noise)
    log.info("collected %d episodes: %s", len(ds.trajectories), ds.stats)
    return save_dataset(artifact(cfg, "dataset"), ds)


def _train_windows(cfg: RunConfig):
    _require(cfg, "dataset")
    ds = load_dataset(artifact(cfg, "dataset"))
    return ds, make_windows(ds, cfg.horizon, cfg.stride, "train")


def stage_teacher(cfg: RunConfig) -> Path:
    _, ws = _train_windows(cfg)
    res = train_teacher(ws.windows, TeacherConfig(
        hidden=cfg.teacher_hidden, depth=cfg.teacher_depth, lr=cfg.teacher_lr, batch_size=cfg.batch_size,
        lr_schedule=cfg.teacher_lr_schedule, steps=cfg.teacher_steps, seed=cfg.seed,
        sigma_data=cfg.sigma_data, schedule=_schedule(cfg)))
    _write_csv(Path(cfg.out_dir) / "teacher_losses.csv", ["step", "loss", "wallclock_ms"], res.trace)
    return save_teacher(artifact(cfg, "teacher"), res.model)


def stage_distill(cfg: RunConfig) -> Path:
    _require(cfg, "teacher")
    teacher = load_teacher(artifact(cfg, "teacher"))
    _, ws = _train_windows(cfg)
    res = distill(teacher, ws.windows, DistillConfig(
        lambda_dsm=cfg.lambda_dsm, lambda_gan=cfg.lambda_gan, mu_ema=cfg.mu_ema,
        batch_size=cfg.distill_batch_size, steps=cfg.distill_steps, lr=cfg.distill_lr,
        solver=SolverSpec(substeps=cfg.solver_substeps), seed=cfg.seed))
    _write_csv(Path(cfg.out_dir) / "distill_losses.csv",
               ["step", "ctm", "dsm", "gan", "total", "wallclock_ms"], res.trace)
    save_student(artifact(cfg, "student"), res.student, "student")
    save_discriminator(artifact(cfg, "disc"), res.disc)
    return save_student(artifact(cfg, "target"), res.target, "target")


def stage_aux(cfg: RunConfig) -> tuple[Path, Path]:
    ds, ws = _train_windows(cfg)
    aux = AuxConfig(hidden=cfg.aux_hidden, depth=cfg.aux_depth, lr=cfg.aux_lr, batch_size=cfg.batch_size,
                    steps=cfg.aux_steps, seed=cfg.seed)
    inv, m_inv = train_invdyn(ws.s, ws.s_next, ws.actions, ds.action_norm.lo, ds.action_norm.hi, cfg.stride, aux)
    critic, m_crit = train_critic(ws.windows, ws.returns, cfg.gamma, aux)
    out = Path(cfg.out_dir)
    _write_csv(out / "invdyn_losses.csv", ["step", "loss", "wallclock_ms"], m_inv["trace"])
    _write_csv(out / "critic_losses.csv", ["step", "loss", "wallclock_ms"], m_crit["trace"])
    return save_invdyn(artifact(cfg, "invdyn"), inv), save_critic(artifact(cfg, "critic"), critic)


STAGE_FNS = {"teacher": stage_teacher, "distill": stage_distill, "aux": stage_aux}
STAGE_OUTPUTS = {"teacher": ("teacher",), "distill": ("student", "target", "disc"), "aux": ("invdyn", "critic")}


def run_train(cfg: RunConfig, stage: str | None = None, force: bool = False) -> list[str]:
    """Run one stage, or every stage in order skipping those whose outputs exist."""
    if stage is not None and stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    _require(cfg, "dataset")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    ran = []
    for name in STAGES if stage is None else (stage,):
        done = all(artifact(cfg, a).exists() for a in STAGE_OUTPUTS[name])
        if done and stage is None and not force:
            log.info("stage %s already complete, skipping", name)
            continue
        log.info("running stage %s", name)
        try:
            STAGE_FNS[name](cfg)
        except TrainingDivergence as exc:
            raise TrainingDivergence(f"stage {name} failed: {exc}", exc.step, exc.param, exc.trace) from exc
        ran.append(name)
    return ran


def load_bundle(cfg: RunConfig, need_teacher: bool = True) -> ModelBundle:
    _require(cfg, "dataset", "target", "invdyn", "critic", *(("teacher",) if need_teacher else ()))
    ds = load_dataset(artifact(cfg, "dataset"))
    teacher = load_teacher(artifact(cfg, "teacher")) if need_teacher else None
    return ModelBundle(load_student(artifact(cfg, "target")), load_critic(artifact(cfg, "critic")),
                       load_invdyn(artifact(cfg, "invdyn")), ds.state_norm, teacher, cfg.stride,
                       teacher_grid=cfg.teacher_grid)


# -- evaluation -------------------------------------------------------------------

@dataclass
class References:
    random: float
    expert: float

    def normalize(self, ret) -> np.ndarray:
        if self.expert == self.random:
            raise ContractError("expert and random references coincide; normalized score undefined")
        return 100.0 * (np.asarray(ret, dtype=np.float64) - self.random) / (self.expert - self.random)


def policy_returns(spec: EnvSpec, kind: str, seeds, noise: float = 0.3) -> np.ndarray:
    """Returns of a scripted policy from the same start states the planner sees."""
    out = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 0])
        _, _, r, _ = run_episode(spec, ScriptedPolicy(spec, kind, noise, rng), rng)
        out.append(r.sum())
    return np.array(out)


def measure_references(spec: EnvSpec, seeds, noise: float = 0.3) -> References:
    return References(float(policy_returns(spec, "random", seeds, noise).mean()),
                      float(policy_returns(spec, "expert", seeds, noise).mean()))


def evaluate(spec: EnvSpec, bundle: ModelBundle, seeds, refs: References, num_candidates: int = 16,
             denoise_steps: int = 2, sampler: str = "ctm"):
    traces = [rollout(spec, bundle, EpisodeConfig(s, num_candidates, denoise_steps, sampler)) for s in seeds]
    scores = refs.normalize([t.total_return for t in traces])
    return traces, scores


def cmd_plan_run(cfg: RunConfig) -> dict:
    bundle = load_bundle(cfg, need_teacher=False)
    spec = make_env(cfg.env)
    seeds = list(range(cfg.eval_seeds))
    refs = measure_references(spec, seeds, cfg.policy_noise)
    traces, scores = evaluate(spec, bundle, seeds, refs, cfg.num_candidates, cfg.denoise_steps)
    out = Path(cfg.out_dir)
    write_traces(out / "traces.jsonl", traces)
    lat = np.concatenate([t.plan_latencies_ms for t in traces])
    summary = {"env": cfg.env, "seeds": len(seeds), "denoise_steps": cfg.denoise_steps,
               "num_candidates": cfg.num_candidates, "mean_score": float(scores.mean()),
               "score_std": float(scores.std()), "success_rate": float(np.mean([t.success for t in traces])),
               "mean_return": float(np.mean([t.total_return for t in traces])),
               "random_reference": refs.random, "expert_reference": refs.expert,
               "latency_mean_ms": float(lat.mean()), "latency_median_ms": float(np.median(lat))}
    (out / "plan_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- benchmark sweep --------------------------------------------------------------

@dataclass
class BenchRecord:
    sampler: str
    denoise_steps: int
    mean_score: float
    score_std: float
    n_seeds: int
    latency_mean_ms: float
    latency_median_ms: float
    latency_std_ms: float
    network_calls: int

    FIELDS = ("sampler", "denoise_steps", "mean_score", "score_std", "n_seeds", "latency_mean_ms",
              "latency_median_ms", "latency_std_ms", "network_calls")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def warmup(spec: EnvSpec, bundle: ModelBundle, n: int, sampler: str, steps: int, num_candidates: int) -> None:
    for i in range(n):
        s = reset(spec, np.random.default_rng([10_000 + i]))
        plan_step(bundle, PlanRequest(s, num_candidates, steps, seed=i, sampler=sampler))


def bench_point(spec: EnvSpec, bundle: ModelBundle, sampler: str, steps: int, seeds, refs: References,
                num_candidates: int, n_warmup: int = 10) -> BenchRecord:
    warmup(spec, bundle, n_warmup, sampler, steps, num_candidates)
    s = reset(spec, np.random.default_rng([0, 0]))
    calls = plan_step(bundle, PlanRequest(s, num_candidates, steps, 0, sampler)).network_calls
    traces, scores = evaluate(spec, bundle, seeds, refs, num_candidates, steps, sampler)
    lat = np.concatenate([t.plan_latencies_ms for t in traces])
    return BenchRecord(sampler, steps, float(scores.mean()), float(scores.std()), len(seeds),
                       float(lat.mean()), float(np.median(lat)), float(lat.std()), calls)


def run_bench(cfg: RunConfig, steps_list=None, samplers=("ctm", "teacher")) -> list[BenchRecord]:
    bundle = load_bundle(cfg)
    spec = make_env(cfg.env)
    seeds = list(range(cfg.bench_seeds))
    refs = measure_references(spec, seeds, cfg.policy_noise)
    records = [bench_point(spec, bundle, sampler, n, seeds, refs, cfg.num_candidates, cfg.warmup_plans)
               for sampler in samplers for n in (steps_list or cfg.bench_steps)]
    records.sort(key=lambda r: (r.sampler, r.denoise_steps))
    out = Path(cfg.out_dir)
    _write_csv(out / "bench.csv", list(BenchRecord.FIELDS), [r.row() for r in records])
    plot_bench(records, out / "bench.svg")
    return records


def read_bench_csv(path) -> list[BenchRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"benchmark table not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    types = {"sampler": str, "denoise_steps": int, "n_seeds": int, "network_calls": int}
    out = []
    for row in rows:
        if int(row["schema_version"]) != CSV_SCHEMA_VERSION:
            raise ContractError(f"unsupported bench schema {row['schema_version']}")
        out.append(BenchRecord(**{f: types.get(f, float)(row[f]) for f in BenchRecord.FIELDS}))
    return out


def plot_bench(records: list[BenchRecord], path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_s, ax_t) = plt.subplots(1, 2, figsize=(9, 3.5))
    for sampler in sorted({r.sampler for r in records}):
        rs = [r for r in records if r.sampler == sampler]
        n = [r.denoise_steps for r in rs]
        ax_s.errorbar(n, [r.mean_score for r in rs], yerr=[r.score_std for r in rs], marker="o",
                      capsize=3, label=sampler)
        ax_t.plot(n, [r.latency_mean_ms for r in rs], marker="o", label=sampler)
    for ax, ylabel in ((ax_s, "normalized score"), (ax_t, "ms / plan")):
        ax.set_xscale("log")
        ax.set_xlabel("denoising steps")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend()
    ax_t.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)
