"""Declarative run configuration.

Line-and-section text format: one `section.key = value` per line, `#`
comments, repeated keys for lists (roles, edges, loops, weights). The
format round-trips: parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .rewards import FAMILIES as REWARD_FAMILIES
from .rewards import FAMILY_OF_WORKFLOW, RewardSpec, RewardWeights
from .trainer import TrainerConfig
from .workflow import (AgentModelMapping, Edge, LoopSpec, RoleSpec,
                       WorkflowGraph, validate)
from . import workflows

_RUN_DEFAULTS = {"iterations": None, "eval_every": 10, "checkpoint_every": 0,
                 "concurrency": 4}

ENV_SCHEMA: dict[str, dict[str, type]] = {
    "qa": {"seed": int, "n_train": int, "n_eval": int, "hop_mix": float,
           "kb_size": int, "n_values": int, "n_qwords": int, "retrieve_k": int},
    "code": {"seed": int, "n_train": int, "n_eval": int, "max_target_len": int,
             "int_min": int, "int_max": int, "base_inputs": tuple,
             "extra_pool": tuple},
}

ENV_DEFAULTS: dict[str, dict] = {
    "qa": {"seed": 7, "n_train": 200, "n_eval": 50, "hop_mix": 0.0,
           "kb_size": 32, "n_values": 16, "n_qwords": 8, "retrieve_k": 4},
    "code": {"seed": 7, "n_train": 200, "n_eval": 50, "max_target_len": 4,
             "int_min": -8, "int_max": 81, "base_inputs": (0, 1, 2, 3),
             "extra_pool": (4, 5, 6, 7, 8, 9)},
}

_TRAINER_FIELDS = {f.name: f.type for f in fields(TrainerConfig)
                   if f.name != "iterations"}


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    family: str
    graph: WorkflowGraph
    mapping: AgentModelMapping
    model_ids: tuple[str, ...]
    reward_spec: RewardSpec
    trainer: TrainerConfig
    env_kind: str
    env_params: dict
    model_overrides: dict[str, dict] = field(default_factory=dict)
    eval_every: int = 10
    checkpoint_every: int = 0
    concurrency: int = 4


def _parse_bool(s: str) -> bool:
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _coerce(value: str, typ):
    if typ is bool:
        return _parse_bool(value)
    if typ is tuple:
        return tuple(int(x) for x in value.split(",") if x != "")
    return typ(value)


def _kv_fields(parts: list[str], subject: str) -> dict[str, str]:
    out = {}
    for part in parts:
        if "=" not in part:
            raise ConfigError(f"{subject}: expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k] = v
    return out


def _parse_role(value: str) -> RoleSpec:
    parts = value.split()
    if not parts:
        raise ConfigError("workflow.role: empty definition")
    role_id = parts[0]
    kv = _kv_fields(parts[1:], f"role {role_id}")
    kind = kv.pop("kind", "agent")
    schema = kv.pop("schema", None)
    obs = tuple(x for x in kv.pop("obs", "").split(",") if x)
    max_tokens = int(kv.pop("max_tokens", "0"))
    tool = kv.pop("tool", "")
    tool_refs = tuple(x for x in tool.split(",") if x)
    params = kv.pop("params", "")
    tool_params = tuple(tuple(p.split(":", 1)) for p in params.split(",") if p)
    stop = kv.pop("stop", "end-token")
    if kv:
        raise ConfigError(f"role {role_id}: unknown fields {sorted(kv)}")
    return RoleSpec(role_id, kind, obs, schema, tool_refs, tool_params,
                    max_tokens, stop)


def _parse_edge(value: str) -> Edge:
    parts = value.split()
    if len(parts) not in (2, 3):
        raise ConfigError(f"workflow.edge: expected 'src dst [condition]', got {value!r}")
    return Edge(parts[0], parts[1], parts[2] if len(parts) == 3 else "always")


def _parse_loop(value: str) -> LoopSpec:
    parts = value.split()
    if not parts:
        raise ConfigError("workflow.loop: empty definition")
    loop_id = parts[0]
    kv = _kv_fields(parts[1:], f"loop {loop_id}")
    body = tuple(x for x in kv.pop("body", "").split(",") if x)
    max_turns = int(kv.pop("max_turns", "1"))
    exit_role = kv.pop("exit_role", None)
    exits = tuple(x for x in kv.pop("exit", "").split(",") if x)
    exhaust = _parse_bool(kv.pop("exhaust_at_exit", "0"))
    if kv:
        raise ConfigError(f"loop {loop_id}: unknown fields {sorted(kv)}")
    return LoopSpec(loop_id, body, max_turns, exit_role, exits, exhaust)


def parse_config(text: str) -> RunConfig:
    """Parse config text; raises ConfigError with every problem found."""
    scalars: dict[str, str] = {}
    roles: list[RoleSpec] = []
    edges: list[Edge] = []
    loops: list[LoopSpec] = []
    mapping: dict[str, str] = {}
    weights: list[tuple[str, RewardWeights]] = []
    model_overrides: dict[str, dict] = {}
    errors: list[str] = []

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'section.key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "workflow.role":
                roles.append(_parse_role(value))
            elif key == "workflow.edge":
                edges.append(_parse_edge(value))
            elif key == "workflow.loop":
                loops.append(_parse_loop(value))
            elif key.startswith("mapping."):
                mapping[key[len("mapping."):]] = value
            elif key.startswith("rewards.weights."):
                role = key[len("rewards.weights."):]
                n, t, tr = (float(x) for x in value.split(","))
                weights.append((role, RewardWeights(n, t, tr)))
            elif key.startswith("models.") and key.count(".") == 2:
                _, model_id, fname = key.split(".")
                if fname not in _TRAINER_FIELDS:
                    raise ConfigError(f"unknown trainer field {fname!r}")
                typ = {"int": int, "float": float, "bool": bool}[_TRAINER_FIELDS[fname]]
                model_overrides.setdefault(model_id, {})[fname] = _coerce(value, typ)
            else:
                scalars[key] = value
        except (ConfigError, ValueError) as exc:
            errors.append(f"line {lineno}: {exc}")

    def need(key: str, typ=str, default=None):
        if key not in scalars:
            if default is not None:
                return default
            errors.append(f"missing required key {key}")
            return None
        try:
            return _coerce(scalars.pop(key), typ)
        except ValueError as exc:
            errors.append(f"key {key}: {exc}")
            return None

    seed = need("run.seed", int)
    out_dir = need("run.out_dir", str, "out")
    iterations = need("run.iterations", int)
    eval_every = need("run.eval_every", int, _RUN_DEFAULTS["eval_every"])
    checkpoint_every = need("run.checkpoint_every", int, 0)
    concurrency = need("run.concurrency", int, _RUN_DEFAULTS["concurrency"])
    family = need("workflow.family", str)
    entry = need("workflow.entry", str)
    terminal = need("workflow.terminal", str)
    reward_family = need("rewards.family", str)
    format_penalty = need("rewards.format_penalty", float, -0.5)
    env_kind = need("env.kind", str)

    trainer_kwargs = {}
    for fname, ftype in _TRAINER_FIELDS.items():
        key = f"trainer.{fname}"
        if key in scalars:
            typ = {"int": int, "float": float, "bool": bool}[ftype]
            try:
                trainer_kwargs[fname] = _coerce(scalars.pop(key), typ)
            except ValueError as exc:
                errors.append(f"key {key}: {exc}")

    env_params: dict = {}
    if env_kind in ENV_SCHEMA:
        env_params = dict(ENV_DEFAULTS[env_kind])
        for pname, ptype in ENV_SCHEMA[env_kind].items():
            key = f"env.{pname}"
            if key in scalars:
                try:
                    env_params[pname] = _coerce(scalars.pop(key), ptype)
                except ValueError as exc:
                    errors.append(f"key {key}: {exc}")
    elif env_kind is not None:
        errors.append(f"unknown env.kind {env_kind!r}")

    model_ids_raw = need("models.ids", str, "")
    model_ids = tuple(x for x in model_ids_raw.split(",") if x)

    reward_kwargs: dict = {}
    for bind in ("plan_role", "answer_role", "planner_role", "coder_role",
                 "reflector_role"):
        if f"rewards.{bind}" in scalars:
            reward_kwargs[bind] = scalars.pop(f"rewards.{bind}")
    if "rewards.loop_roles" in scalars:
        reward_kwargs["loop_roles"] = tuple(
            x for x in scalars.pop("rewards.loop_roles").split(",") if x)

    for key in scalars:
        errors.append(f"unknown key {key}")
    if errors:
        raise ConfigError("config errors: " + "; ".join(errors))

    try:
        reward_spec = RewardSpec(reward_family, tuple(weights), format_penalty,
                                 **reward_kwargs)
        trainer_cfg = TrainerConfig(iterations=iterations, **trainer_kwargs)
        trainer_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    graph = WorkflowGraph(tuple(roles), tuple(edges), tuple(loops), entry, terminal)
    return RunConfig(
        seed=seed, out_dir=out_dir, family=family, graph=graph,
        mapping=AgentModelMapping.of(mapping), model_ids=model_ids,
        reward_spec=reward_spec, trainer=trainer_cfg, env_kind=env_kind,
        env_params=env_params, model_overrides=model_overrides,
        eval_every=eval_every, checkpoint_every=checkpoint_every,
        concurrency=concurrency)


def _role_line(r: RoleSpec) -> str:
    parts = [r.role_id, f"kind={r.kind}"]
    if r.output_schema:
        parts.append(f"schema={r.output_schema}")
    if r.observation_fields:
        parts.append("obs=" + ",".join(r.observation_fields))
    if r.max_output_tokens:
        parts.append(f"max_tokens={r.max_output_tokens}")
    if r.tool_refs:
        parts.append("tool=" + ",".join(r.tool_refs))
    if r.tool_params:
        parts.append("params=" + ",".join(f"{k}:{v}" for k, v in r.tool_params))
    if r.stop_condition != "end-token":
        parts.append(f"stop={r.stop_condition}")
    return " ".join(parts)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; stable field order for diff-friendly output."""
    lines = [
        f"run.seed = {cfg.seed}",
        f"run.iterations = {cfg.trainer.iterations}",
        f"run.out_dir = {cfg.out_dir}",
        f"run.eval_every = {cfg.eval_every}",
        f"run.checkpoint_every = {cfg.checkpoint_every}",
        f"run.concurrency = {cfg.concurrency}",
        f"workflow.family = {cfg.family}",
        f"workflow.entry = {cfg.graph.entry}",
        f"workflow.terminal = {cfg.graph.terminal}",
    ]
    lines += [f"workflow.role = {_role_line(r)}" for r in cfg.graph.roles]
    lines += [f"workflow.edge = {e.source} {e.target} {e.condition}"
              for e in cfg.graph.edges]
    for lp in cfg.graph.loops:
        parts = [lp.loop_id, "body=" + ",".join(lp.body),
                 f"max_turns={lp.max_turns}"]
        if lp.exit_role:
            parts.append(f"exit_role={lp.exit_role}")
        if lp.exit_conditions:
            parts.append("exit=" + ",".join(lp.exit_conditions))
        parts.append(f"exhaust_at_exit={int(lp.exhaust_at_exit)}")
        lines.append("workflow.loop = " + " ".join(parts))
    lines += [f"mapping.{role} = {model}" for role, model in cfg.mapping.assignments]
    lines.append("models.ids = " + ",".join(cfg.model_ids))
    for model_id in sorted(cfg.model_overrides):
        for fname, val in sorted(cfg.model_overrides[model_id].items()):
            out = int(val) if isinstance(val, bool) else val
            lines.append(f"models.{model_id}.{fname} = {out}")
    lines.append(f"rewards.family = {cfg.reward_spec.family}")
    lines.append(f"rewards.format_penalty = {cfg.reward_spec.format_penalty_value}")
    spec = cfg.reward_spec
    defaults = RewardSpec(spec.family)
    for bind in ("plan_role", "answer_role", "planner_role", "coder_role",
                 "reflector_role"):
        if getattr(spec, bind) != getattr(defaults, bind):
            lines.append(f"rewards.{bind} = {getattr(spec, bind)}")
    if spec.loop_roles != defaults.loop_roles:
        lines.append("rewards.loop_roles = " + ",".join(spec.loop_roles))
    for role, w in spec.weights:
        lines.append(f"rewards.weights.{role} = {w.node},{w.turn},{w.traj}")
    defaults_tr = TrainerConfig()
    for fname in _TRAINER_FIELDS:
        val = getattr(cfg.trainer, fname)
        if val != getattr(defaults_tr, fname):
            out = int(val) if isinstance(val, bool) else val
            lines.append(f"trainer.{fname} = {out}")
    lines.append(f"env.kind = {cfg.env_kind}")
    for pname in ENV_SCHEMA[cfg.env_kind]:
        val = cfg.env_params[pname]
        if val != ENV_DEFAULTS[cfg.env_kind][pname]:
            out = ",".join(str(x) for x in val) if isinstance(val, tuple) else val
            lines.append(f"env.{pname} = {out}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: RunConfig, tool_registry: frozenset[str]) -> list[str]:
    """Cross-section checks; returns a list of problems (empty when valid)."""
    problems: list[str] = []
    if cfg.family not in workflows.FAMILIES:
        problems.append(f"unknown workflow family {cfg.family!r}")
    else:
        expected = FAMILY_OF_WORKFLOW[cfg.family]
        if cfg.reward_spec.family != expected:
            problems.append(
                f"rewards.family {cfg.reward_spec.family!r} does not match "
                f"workflow family {cfg.family!r} (expected {expected!r})")
        expected_env = "code" if cfg.family == "D" else "qa"
        if cfg.env_kind != expected_env:
            problems.append(
                f"env.kind {cfg.env_kind!r} does not match workflow family "
                f"{cfg.family!r} (expected {expected_env!r})")
    if cfg.reward_spec.family not in REWARD_FAMILIES:
        problems.append(f"unknown reward family {cfg.reward_spec.family!r}")
    report = validate(cfg.graph, cfg.mapping, model_ids=cfg.model_ids,
                      tool_registry=tool_registry)
    problems += [f"{v.code}[{v.subject}]: {v.message}" for v in report.violations]
    for model_id in cfg.model_overrides:
        if model_id not in cfg.model_ids:
            problems.append(f"override for undeclared model {model_id!r}")
    for model_id in cfg.mapping.model_ids():
        if model_id not in cfg.model_ids:
            problems.append(f"mapped model {model_id!r} not declared in models.ids")
    return problems


def default_config(family: str, seed: int = 42, iterations: int = 50,
                   out_dir: str = "out", **env_over) -> RunConfig:
    """A complete, valid RunConfig for one of the built-in families."""
    graph = workflows.build_graph(family)
    mapping = workflows.default_mapping(family)
    env_kind = "code" if family == "D" else "qa"
    env_params = dict(ENV_DEFAULTS[env_kind])
    env_params.update(env_over)
    return RunConfig(
        seed=seed, out_dir=out_dir, family=family, graph=graph,
        mapping=mapping, model_ids=mapping.model_ids(),
        reward_spec=workflows.default_reward_spec(family),
        trainer=TrainerConfig(iterations=iterations),
        env_kind=env_kind, env_params=env_params,
        eval_every=10, checkpoint_every=0, concurrency=4)


def with_overrides(cfg: RunConfig, seed: int | None = None,
                   iterations: int | None = None,
                   out_dir: str | None = None) -> RunConfig:
    """Command-line overrides beat file values."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if iterations is not None:
        cfg = replace(cfg, trainer=cfg.trainer.override(iterations=iterations))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg
