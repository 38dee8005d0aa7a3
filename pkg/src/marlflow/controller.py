"""Central coordinator: schedule trajectories, dispatch invocations to
worker groups, apply transitions and tools, record structured trajectories,
and commit reward-assembled fragments to model-local buffers.

Thin/fat separation: records hold token-level data only; feature vectors
materialize in fragments, which live next to the model that trains on them.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rewards as rewards_mod
from .buffers import Fragment, ModelBuffer
from .envs import Environment
from .errors import DeadlockError, ToolError
from .formats import parse_output
from .policy import ModelInstance, PolicyOutput, base_features, sample
from .rewards import RewardComponents, RewardSpec
from .rng import derive_stream
from .trainer import TrainerConfig
from .workflow import (AgentModelMapping, Invocation, RoleSpec, WorkflowGraph,
                       WorkflowState, frontier, initial_state,
                       observation_digest, render_observation, route,
                       transition)


@dataclass
class WorkerGroup:
    """Model-local unit: one trainable model, its buffer, its trainer config."""
    model_id: str
    model: ModelInstance
    buffer: ModelBuffer
    trainer_config: TrainerConfig = field(default_factory=TrainerConfig)
    script: Callable | None = None  # (task, state, role_spec) -> token tuple

    def generate(self, task, state: WorkflowState, role: RoleSpec,
                 observation, stream, greedy: bool = False) -> PolicyOutput:
        if self.script is not None:
            tokens = tuple(int(t) for t in self.script(task, state, role))
            zeros = np.zeros(len(tokens), dtype=np.float64)
            return PolicyOutput(tokens, zeros, zeros.copy(), truncated=False)
        self.model.begin_rollout()
        try:
            return sample(self.model, observation, role.role_id, stream,
                          role.max_output_tokens, greedy=greedy)
        finally:
            self.model.end_rollout()


def make_workers(mapping: AgentModelMapping, vocab, roles: tuple[str, ...],
                 trainer_config: TrainerConfig = None,
                 overrides: dict[str, dict] | None = None,
                 model_ids: tuple[str, ...] | None = None) -> dict[str, WorkerGroup]:
    """One worker group per registered model (every mapped model included)."""
    base = trainer_config or TrainerConfig()
    overrides = overrides or {}
    ids = list(model_ids) if model_ids is not None else []
    for model_id in mapping.model_ids():
        if model_id not in ids:
            ids.append(model_id)
    workers = {}
    for model_id in ids:
        cfg = base.override(**overrides[model_id]) if model_id in overrides else base
        model = ModelInstance(model_id, vocab.size, roles)
        workers[model_id] = WorkerGroup(model_id, model, ModelBuffer(model_id), cfg)
    return workers


@dataclass
class StepRecord:
    step_index: int
    role_id: str
    model_id: str | None  # None for tool steps
    observation: tuple[int, ...]
    observation_digest: str
    output: tuple[int, ...]
    logprobs: np.ndarray | None
    values: np.ndarray | None
    parents: tuple[int, ...]
    format_valid: bool = True
    end_token_exit: bool = False
    truncated: bool = False
    loop_turn: int | None = None
    reward: RewardComponents | None = None

    @property
    def is_agent(self) -> bool:
        return self.model_id is not None


@dataclass
class TrajectoryRecord:
    trajectory_id: str
    task_id: str
    run_seed: int
    family: str
    steps: list[StepRecord] = field(default_factory=list)
    gold_tokens: tuple[int, ...] | None = None
    candidate_answer: tuple[int, ...] | None = None
    intermediate_answers: tuple[tuple[int, ...], ...] = ()
    verifier_scores: tuple[float, ...] = ()
    final_program: tuple[int, ...] | None = None
    used_turns: int | None = None
    done: bool = False
    failed: bool = False
    failure_reason: str = ""

    def agent_steps(self) -> list[StepRecord]:
        return [s for s in self.steps if s.is_agent]


def trajectory_id(run_seed: int, epoch: int, task_index: int) -> str:
    return f"s{run_seed}-e{epoch}-t{task_index}"


def _max_steps(graph: WorkflowGraph) -> int:
    total = 0
    for r in graph.roles:
        lp = graph.loop_of(r.role_id)
        total += lp.max_turns if lp else 1
    return total + 4


def run_trajectory(task, graph: WorkflowGraph, mapping: AgentModelMapping,
                   workers: dict[str, WorkerGroup], env: Environment,
                   run_seed: int, epoch: int, task_index: int,
                   greedy: bool = False) -> TrajectoryRecord:
    """Execute one workflow on one task; returns the complete record.

    Tool failures mark the record failed without raising; sibling
    trajectories are unaffected.
    """
    traj_id = trajectory_id(run_seed, epoch, task_index)
    record = TrajectoryRecord(traj_id, getattr(task, "task_id", str(task)),
                              run_seed, env.family,
                              gold_tokens=env.gold_tokens(task))
    state = initial_state(graph, env.task_input(task), env.vocab,
                          env.instruction_ids)
    last_step_of_unit: dict[str, int] = {}
    last_step_of_role: dict[str, int] = {}
    t = 0
    budget = _max_steps(graph)
    try:
        while not state.done:
            ready = frontier(graph, state)
            if not ready:
                raise DeadlockError(
                    f"empty frontier with workflow not done (trajectory {traj_id})")
            role_id = next(r.role_id for r in graph.roles if r.role_id in ready)
            role = graph.role(role_id)
            t += 1
            if t > budget:
                raise DeadlockError(f"step budget exceeded (trajectory {traj_id})")

            lp = graph.loop_of(role_id)
            loop_turn = None
            if lp is not None:
                loop_turn, pos = state.loop_state.get(lp.loop_id, (1, 0))
                if pos > 0:
                    parents = (last_step_of_role[lp.body[pos - 1]],)
                elif loop_turn > 1:
                    parents = (last_step_of_role[lp.body[-1]],)
                else:
                    parents = tuple(sorted(
                        last_step_of_unit[e.source]
                        for e in graph.incoming(lp.loop_id)))
            else:
                parents = tuple(sorted(
                    last_step_of_unit[e.source]
                    for e in graph.incoming(role_id)))

            if role.is_agent:
                obs = render_observation(role, state)
                inv = Invocation(traj_id, t, role_id, obs, route(mapping, role_id))
                stream = derive_stream(run_seed, epoch, task_index, t)
                out = workers[inv.model_id].generate(task, state, role,
                                                     inv.observation, stream,
                                                     greedy=greedy)
                parsed = parse_output(role.output_schema, out.tokens,
                                      env.vocab, state.parse_context())
                state = transition(graph, state, role_id, out.tokens)
                record.steps.append(StepRecord(
                    t, role_id, inv.model_id, obs,
                    observation_digest(role_id, obs),
                    out.tokens, out.logprobs, out.values, parents,
                    format_valid=parsed.valid,
                    end_token_exit=parsed.end_token_exit,
                    truncated=out.truncated, loop_turn=loop_turn))
            else:
                tool_name = role.tool_refs[0]
                if tool_name not in env.tools:
                    raise ToolError(f"tool {tool_name!r} is not registered")
                results = env.tools[tool_name](state, dict(role.tool_params), task)
                obs: tuple[int, ...] = ()
                state = transition(graph, state, role_id, (), results)
                record.steps.append(StepRecord(
                    t, role_id, None, obs, observation_digest(role_id, obs),
                    (), None, None, parents, loop_turn=loop_turn))

            unit = graph.unit_of(role_id)
            last_step_of_unit[unit] = t
            last_step_of_role[role_id] = t
    except ToolError as exc:
        record.failed = True
        record.failure_reason = str(exc)
        return record

    record.done = True
    pad = state.scratchpad
    record.candidate_answer = pad["candidate_answer"][0] if pad["candidate_answer"] else None
    record.intermediate_answers = state.answers_log
    record.verifier_scores = state.verifier_scores
    record.final_program = pad["program"][0] if pad["program"] else None
    if graph.loops:
        record.used_turns = state.used_turns.get(graph.loops[0].loop_id)
    return record


@dataclass
class RolloutHooks:
    """Instrumentation for scheduling tests: called as trajectories start/end."""
    on_start: Callable[[int], None] | None = None
    on_end: Callable[[int], None] | None = None


def run_rollout(tasks, graph: WorkflowGraph, mapping: AgentModelMapping,
                workers: dict[str, WorkerGroup], env: Environment,
                concurrency_limit: int, run_seed: int, epoch: int,
                greedy: bool = False,
                hooks: RolloutHooks | None = None) -> list[TrajectoryRecord]:
    """Execute tasks with bounded concurrency; results in task order."""
    if concurrency_limit < 1:
        raise ValueError("concurrency_limit must be >= 1")

    def one(idx_task):
        idx, task = idx_task
        if hooks and hooks.on_start:
            hooks.on_start(idx)
        try:
            return run_trajectory(task, graph, mapping, workers, env,
                                  run_seed, epoch, idx, greedy=greedy)
        finally:
            if hooks and hooks.on_end:
                hooks.on_end(idx)

    if concurrency_limit == 1:
        return [one(pair) for pair in enumerate(tasks)]
    with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
        return list(pool.map(one, enumerate(tasks)))


def assemble_and_commit(record: TrajectoryRecord, reward_spec: RewardSpec,
                        workers: dict[str, WorkerGroup],
                        env: Environment) -> int:
    """Fill reward slots, then commit one fragment per agent step to the
    buffer of the model that produced it. Returns the fragment count."""
    if record.failed or not record.done:
        raise ValueError(
            f"cannot assemble incomplete trajectory {record.trajectory_id}")
    agent_steps = record.agent_steps()
    if any(s.reward is not None for s in agent_steps):
        raise ValueError(f"trajectory {record.trajectory_id} already assembled")

    assignment = rewards_mod.assign(record, reward_spec, record.gold_tokens,
                                    env.vocab)
    count = 0
    for step in agent_steps:
        step.reward = assignment.by_step[step.step_index]
        worker = workers[step.model_id]
        model = worker.model
        feat = base_features(model.vocab_size, len(model.roles),
                             step.observation, model.role_index(step.role_id))
        fragment = Fragment(
            trajectory_id=record.trajectory_id, step_index=step.step_index,
            role_id=step.role_id, model_id=step.model_id, obs_features=feat,
            tokens=np.asarray(step.output, dtype=np.int32),
            logprobs=np.asarray(step.logprobs, dtype=np.float64),
            values=np.asarray(step.values, dtype=np.float64),
            reward=step.reward.total)
        worker.buffer.commit(fragment)
        count += 1
    return count


# ------------------------------------------------------------ trajectory log

def _toks(tokens) -> str:
    return " ".join(str(int(t)) for t in tokens) if tokens else "-"


def log_header(run_seed: int, family: str, vocab, reward_spec: RewardSpec,
               agent_roles) -> list[str]:
    weights = ";".join(
        f"{rid}:{w.node!r},{w.turn!r},{w.traj!r}"
        for rid, w in ((r, reward_spec.weights_for(r)) for r in agent_roles))
    return [
        f"# trajlog v1 seed={run_seed} family={family}",
        "# vocab " + " ".join(vocab.decode(range(vocab.size))),
        f"# weights {weights}",
    ]


def format_record(record: TrajectoryRecord, gamma: float = 1.0) -> list[str]:
    lines = []
    assembled = True
    for s in record.steps:
        if s.reward is None:
            reward = "-"
            assembled = assembled and not s.is_agent
        else:
            reward = ",".join(repr(x) for x in
                              (s.reward.node, s.reward.turn, s.reward.traj,
                               s.reward.total))
        lines.append("\t".join([
            "step", record.trajectory_id, str(s.step_index), s.role_id,
            s.model_id or "-", s.observation_digest, _toks(s.output), reward,
            " ".join(str(p) for p in s.parents) or "-",
        ]))
    if assembled and record.done:
        assignment = rewards_mod.RewardAssignment(
            {s.step_index: s.reward for s in record.steps if s.reward is not None})
        ret = repr(rewards_mod.aggregate_return(assignment, record, gamma))
    else:
        ret = "-"
    scores = ",".join(repr(x) for x in record.verifier_scores) or "-"
    lines.append("\t".join([
        "end", record.trajectory_id,
        f"done={int(record.done)}", f"failed={int(record.failed)}",
        f"used_turns={record.used_turns if record.used_turns is not None else '-'}",
        "answer=" + _toks(record.candidate_answer or ()),
        "scores=" + scores,
        "program=" + _toks(record.final_program or ()),
        f"return={ret}",
    ]))
    return lines
