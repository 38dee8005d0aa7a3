"""Training and evaluation loops over a run configuration.

Per iteration: rollout, reward assembly and buffer commits, per-model
ready batches, PPO updates, explicit weight sync, metrics row, and
checkpoints/eval on their cadence. Models whose buffers hold fewer than
min_fragments usable fragments skip the update that iteration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import _kernels
from .buffers import ModelBuffer, build_ready_batch
from .config import RunConfig, serialize_config, validate_config
from .controller import (WorkerGroup, assemble_and_commit, format_record,
                         log_header, make_workers, run_rollout)
from .envs import Environment, build_code_environment, build_qa_environment
from .errors import ConfigError
from .policy import load_checkpoint, save_checkpoint, sync
from .rewards import answer_f1
from .trainer import UpdateMetrics, update

ARTIFACT_VERSION = "v1"


def build_environment(cfg: RunConfig) -> Environment:
    roles = cfg.graph.agent_roles()
    if cfg.env_kind == "qa":
        return build_qa_environment(cfg.family, roles, **cfg.env_params)
    if cfg.env_kind == "code":
        return build_code_environment(cfg.family, roles, **cfg.env_params)
    raise ConfigError(f"unknown env kind {cfg.env_kind!r}")


def build_workers(cfg: RunConfig, env: Environment) -> dict[str, WorkerGroup]:
    return make_workers(cfg.mapping, env.vocab, cfg.graph.agent_roles(),
                        cfg.trainer, cfg.model_overrides,
                        model_ids=cfg.model_ids)


@dataclass
class EvalReport:
    metric_name: str  # "f1" or "all_passed"
    value: float
    used_turns_mean: float | None
    n_tasks: int


def evaluate(cfg: RunConfig, env: Environment,
             workers: dict[str, WorkerGroup]) -> EvalReport:
    """Greedy-decoding evaluation on the held-out split; deterministic."""
    records = run_rollout(env.eval_tasks, cfg.graph, cfg.mapping, workers, env,
                          cfg.concurrency, run_seed=cfg.seed, epoch=0,
                          greedy=True)
    metric_name = "all_passed" if cfg.env_kind == "code" else "f1"
    total = 0.0
    used: list[int] = []
    for rec, task in zip(records, env.eval_tasks):
        if rec.failed or not rec.done:
            continue
        if metric_name == "f1":
            pred = rec.candidate_answer or ()
            gold = rec.gold_tokens
            total += answer_f1(env.vocab.decode(pred), env.vocab.decode(gold))
        else:
            passed = bool(rec.verifier_scores) and rec.verifier_scores[-1] == 1.0
            total += 1.0 if passed else 0.0
        if rec.used_turns is not None:
            used.append(rec.used_turns)
    n = len(records)
    return EvalReport(metric_name, total / n if n else 0.0,
                      sum(used) / len(used) if used else None, n)


_METRIC_COLUMNS = ["iteration", "model_id", "n_fragments", "policy_loss",
                   "value_loss", "ratio_mean", "ratio_max",
                   "first_pass_max_ratio_dev", "clip_fraction", "approx_kl",
                   "entropy", "grad_norm"]


def _metrics_header(cfg: RunConfig) -> list[str]:
    roles = list(cfg.graph.agent_roles())
    cols = _METRIC_COLUMNS + [f"reward_{r}" for r in roles]
    metric = "eval_all_passed" if cfg.env_kind == "code" else "eval_f1"
    cols += [metric, "eval_used_turns"]
    return cols


def _metrics_row(cols: list[str], iteration: int, m: UpdateMetrics | None,
                 ev: EvalReport | None, model_id: str = "") -> str:
    vals: dict[str, str] = {c: "" for c in cols}
    vals["iteration"] = str(iteration)
    if m is not None:
        vals["model_id"] = m.model_id
        vals["n_fragments"] = str(m.n_fragments)
        for name in ("policy_loss", "value_loss", "ratio_mean", "ratio_max",
                     "first_pass_max_ratio_dev", "clip_fraction", "approx_kl",
                     "entropy", "grad_norm"):
            vals[name] = repr(getattr(m, name))
        for role, mean in m.reward_mean_by_role.items():
            vals[f"reward_{role}"] = repr(mean)
    else:
        vals["model_id"] = model_id
    if ev is not None:
        vals[f"eval_{ev.metric_name}"] = repr(ev.value)
        if ev.used_turns_mean is not None:
            vals["eval_used_turns"] = repr(ev.used_turns_mean)
    return ",".join(vals[c] for c in cols)


@dataclass
class RunSummary:
    family: str
    metric_name: str
    baseline: float
    best: float
    best_iteration: int
    final: float
    iterations: int
    baseline_used_turns: float | None = None
    best_used_turns: float | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "family", "metric_name", "baseline", "best", "best_iteration",
            "final", "iterations", "baseline_used_turns", "best_used_turns")}


def _save_all(workers: dict[str, WorkerGroup], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for model_id, worker in workers.items():
        save_checkpoint(worker.model, directory / f"{model_id}.ckpt")


def train_loop(cfg: RunConfig, out_dir: str | Path | None = None) -> RunSummary:
    """Run the full optimization; writes logs, metrics, checkpoints, summary."""
    problems = []
    env = None
    try:
        env = build_environment(cfg)
    except (ConfigError, ValueError, TypeError) as exc:
        problems.append(str(exc))
    if env is not None:
        problems += validate_config(cfg, tool_registry=frozenset(env.tools))
    if problems:
        raise ConfigError("; ".join(problems))

    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(serialize_config(cfg), encoding="utf-8")

    workers = build_workers(cfg, env)
    roles = cfg.graph.agent_roles()
    tcfg = cfg.trainer

    log_lines = log_header(cfg.seed, cfg.family, env.vocab, cfg.reward_spec, roles)
    cols = _metrics_header(cfg)
    metric_lines = [
        f"# metrics {ARTIFACT_VERSION} seed={cfg.seed} backend={_kernels.BACKEND_NAME}",
        ",".join(cols)]

    baseline = evaluate(cfg, env, workers)
    metric_lines.append(_metrics_row(cols, 0, None, baseline, model_id="-"))
    best_value, best_iter, best_used = baseline.value, 0, baseline.used_turns_mean
    ckpt_dir, best_dir = out / "ckpt", out / "ckpt_best"
    _save_all(workers, ckpt_dir)
    _save_all(workers, best_dir)

    n_train = len(env.train_tasks)
    final_eval = baseline
    for iteration in range(1, tcfg.iterations + 1):
        tasks = [env.train_tasks[((iteration - 1) * tcfg.rollout_size + j) % n_train]
                 for j in range(tcfg.rollout_size)]
        records = run_rollout(tasks, cfg.graph, cfg.mapping, workers, env,
                              cfg.concurrency, run_seed=cfg.seed, epoch=iteration)
        for rec in records:
            if rec.done and not rec.failed:
                assemble_and_commit(rec, cfg.reward_spec, workers, env)
        for rec in records:
            log_lines.extend(format_record(rec, tcfg.gamma))

        iter_metrics: list[UpdateMetrics] = []
        for model_id, worker in workers.items():
            usable = sum(1 for f in worker.buffer.fragments()
                         if not f.trajectory_failed)
            if usable < worker.trainer_config.min_fragments:
                continue
            batch = build_ready_batch(
                worker.buffer, worker.trainer_config.min_fragments,
                shuffle_seed=(cfg.seed << 20) ^ iteration)
            metrics = update(worker, batch, worker.trainer_config)
            sync(worker.model)
            iter_metrics.append(metrics)

        run_eval = (cfg.eval_every > 0 and iteration % cfg.eval_every == 0)
        ev = None
        if run_eval or iteration == tcfg.iterations:
            ev = evaluate(cfg, env, workers)
            final_eval = ev
            improved = ev.value > best_value
            if improved:
                best_value, best_iter, best_used = ev.value, iteration, ev.used_turns_mean
                _save_all(workers, best_dir)
        for m in iter_metrics:
            metric_lines.append(_metrics_row(cols, iteration, m, ev))
        if not iter_metrics and ev is not None:
            metric_lines.append(_metrics_row(cols, iteration, None, ev, model_id="-"))
        if cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
            _save_all(workers, ckpt_dir)

    _save_all(workers, ckpt_dir)
    (out / "trajectories.log").write_text("\n".join(log_lines) + "\n",
                                          encoding="utf-8")
    (out / "metrics.csv").write_text("\n".join(metric_lines) + "\n",
                                     encoding="utf-8")
    summary = RunSummary(
        family=cfg.family, metric_name=baseline.metric_name,
        baseline=baseline.value, best=best_value, best_iteration=best_iter,
        final=final_eval.value, iterations=tcfg.iterations,
        baseline_used_turns=baseline.used_turns_mean, best_used_turns=best_used)
    (out / "summary.json").write_text(
        json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return summary


def load_workers_from_checkpoints(cfg: RunConfig, env: Environment,
                                  ckpt_dir: str | Path) -> dict[str, WorkerGroup]:
    """Workers with parameters restored from <model_id>.ckpt files."""
    ckpt_dir = Path(ckpt_dir)
    workers: dict[str, WorkerGroup] = {}
    roles = cfg.graph.agent_roles()
    for model_id in cfg.mapping.model_ids():
        path = ckpt_dir / f"{model_id}.ckpt"
        if not path.exists():
            raise ConfigError(f"missing checkpoint for mapped model {model_id!r}: {path}")
        model = load_checkpoint(path, roles)
        if model.vocab_size != env.vocab.size:
            raise ConfigError(
                f"checkpoint vocab size {model.vocab_size} does not match "
                f"environment vocab {env.vocab.size}")
        workers[model_id] = WorkerGroup(model_id, model, ModelBuffer(model_id),
                                        cfg.trainer)
    return workers
