"""Workflow graphs, role specs, agent-model mapping, and state transitions.

A graph is a set of roles wired by condition-tagged edges plus bounded
loops whose bodies are ordered role chains. Loops may exit early at a
designated checkpoint role (end-token or verifier-pass) and always exit
once max_turns is exhausted. The workflow is done when the unit owning
the terminal role completes (the role runs, or its loop exits).
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .formats import SCHEMAS, ParseContext, parse_output
from .vocab import SEP, Vocabulary

CONDITION_TAGS = ("always", "on-end-token", "on-verifier-pass", "on-loop-exhausted")
EXIT_TAGS = ("on-end-token", "on-verifier-pass")

STATE_FIELDS = (
    "queries",
    "retrieved",
    "evidence",
    "knowledge",
    "candidate_answer",
    "program",
    "verifier_feedback",
    "plan",
    "reflection",
)

_TAG_OF_CONDITION = {
    "on-end-token": "end-token",
    "on-verifier-pass": "verifier-pass",
    "on-loop-exhausted": "exhausted",
}


class SharingRegime(enum.Enum):
    FULL_SHARED = "FullShared"
    PARTIAL_SHARED = "PartialShared"
    FULL_SEPARATE = "FullSeparate"


@dataclass(frozen=True)
class RoleSpec:
    role_id: str
    kind: str  # "agent" | "tool"
    observation_fields: tuple[str, ...] = ()
    output_schema: str | None = None
    tool_refs: tuple[str, ...] = ()
    tool_params: tuple[tuple[str, str], ...] = ()
    max_output_tokens: int = 0
    stop_condition: str = "end-token"

    @property
    def is_agent(self) -> bool:
        return self.kind == "agent"


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    condition: str = "always"


@dataclass(frozen=True)
class LoopSpec:
    loop_id: str
    body: tuple[str, ...]
    max_turns: int
    exit_role: str | None = None
    exit_conditions: tuple[str, ...] = ()
    exhaust_at_exit: bool = False


@dataclass(frozen=True)
class WorkflowGraph:
    roles: tuple[RoleSpec, ...]
    edges: tuple[Edge, ...]
    loops: tuple[LoopSpec, ...]
    entry: str
    terminal: str

    def role(self, role_id: str) -> RoleSpec:
        for r in self.roles:
            if r.role_id == role_id:
                return r
        raise ValueError(f"unknown role {role_id!r}")

    def has_role(self, role_id: str) -> bool:
        return any(r.role_id == role_id for r in self.roles)

    def loop(self, loop_id: str) -> LoopSpec:
        for lp in self.loops:
            if lp.loop_id == loop_id:
                return lp
        raise ValueError(f"unknown loop {loop_id!r}")

    def loop_of(self, role_id: str) -> LoopSpec | None:
        for lp in self.loops:
            if role_id in lp.body:
                return lp
        return None

    def unit_of(self, role_id: str) -> str:
        lp = self.loop_of(role_id)
        return lp.loop_id if lp else role_id

    def unit_ids(self) -> tuple[str, ...]:
        units = [r.role_id for r in self.roles if self.loop_of(r.role_id) is None]
        units += [lp.loop_id for lp in self.loops]
        return tuple(units)

    def incoming(self, unit_id: str) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.target == unit_id)

    def agent_roles(self) -> tuple[str, ...]:
        return tuple(r.role_id for r in self.roles if r.is_agent)


@dataclass(frozen=True)
class AgentModelMapping:
    assignments: tuple[tuple[str, str], ...]

    @classmethod
    def of(cls, mapping: dict[str, str]) -> "AgentModelMapping":
        return cls(tuple(sorted(mapping.items())))

    def as_dict(self) -> dict[str, str]:
        return dict(self.assignments)

    def model_ids(self) -> tuple[str, ...]:
        seen: list[str] = []
        for _, m in self.assignments:
            if m not in seen:
                seen.append(m)
        return tuple(seen)


@dataclass(frozen=True)
class Invocation:
    """Dispatch descriptor for one agent-role generation request."""
    trajectory_id: str
    step_index: int
    role_id: str
    observation: tuple[int, ...]
    model_id: str


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, subject: str, message: str) -> None:
        self.violations.append(Violation(code, subject, message))

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def raise_if_failed(self) -> None:
        if not self.ok:
            detail = "; ".join(f"{v.code}[{v.subject}]: {v.message}"
                               for v in self.violations)
            raise ConfigError(f"invalid workflow configuration: {detail}")


@dataclass
class WorkflowState:
    task_input: tuple[int, ...]
    vocab: Vocabulary
    scratchpad: dict[str, tuple[tuple[int, ...], ...]]
    completed: dict[str, str] = field(default_factory=dict)
    loop_state: dict[str, tuple[int, int]] = field(default_factory=dict)
    used_turns: dict[str, int] = field(default_factory=dict)
    answers_log: tuple[tuple[int, ...], ...] = ()
    verifier_scores: tuple[float, ...] = ()
    done: bool = False
    instruction_ids: frozenset[int] = frozenset()

    def copy(self) -> "WorkflowState":
        return replace(
            self,
            scratchpad=dict(self.scratchpad),
            completed=dict(self.completed),
            loop_state=dict(self.loop_state),
            used_turns=dict(self.used_turns),
        )

    def parse_context(self) -> ParseContext:
        retrieved = frozenset(e[0] for e in self.scratchpad.get("retrieved", ()))
        return ParseContext(retrieved_ids=retrieved,
                            instruction_ids=self.instruction_ids)


def initial_state(graph: WorkflowGraph, task_input, vocab: Vocabulary,
                  instruction_ids: frozenset[int] = frozenset()) -> WorkflowState:
    scratchpad = {f: () for f in STATE_FIELDS}
    return WorkflowState(tuple(int(t) for t in task_input), vocab, scratchpad,
                         instruction_ids=instruction_ids)


def validate(graph: WorkflowGraph, mapping: AgentModelMapping,
             model_ids: tuple[str, ...] | None = None,
             tool_registry: frozenset[str] | None = None) -> ValidationReport:
    """Check every structural invariant; violations are data, not failures."""
    report = ValidationReport()
    role_ids = [r.role_id for r in graph.roles]
    if len(set(role_ids)) != len(role_ids):
        report.add("duplicate-role", "roles", "role ids must be unique")

    loop_ids = [lp.loop_id for lp in graph.loops]
    if len(set(loop_ids)) != len(loop_ids):
        report.add("duplicate-loop", "loops", "loop ids must be unique")
    if set(loop_ids) & set(role_ids):
        report.add("loop-role-clash", "loops", "loop ids must not collide with role ids")

    for r in graph.roles:
        if r.kind not in ("agent", "tool"):
            report.add("role-kind", r.role_id, f"unknown kind {r.kind!r}")
        if r.is_agent:
            if r.max_output_tokens < 1:
                report.add("max-output-tokens", r.role_id,
                           "agent roles need max_output_tokens >= 1")
            if r.output_schema not in SCHEMAS:
                report.add("unknown-schema", r.role_id,
                           f"no registered validator for {r.output_schema!r}")
        else:
            if r.output_schema is not None:
                report.add("tool-output-schema", r.role_id,
                           "tool roles have no trainable output")
            if not r.tool_refs:
                report.add("unregistered-tool", r.role_id,
                           "tool role names no tool")
        if tool_registry is not None:
            for ref in r.tool_refs:
                if ref not in tool_registry:
                    report.add("unregistered-tool", r.role_id,
                               f"tool {ref!r} is not registered")
        for f in r.observation_fields:
            if f != "task_input" and f not in STATE_FIELDS:
                report.add("obs-field", r.role_id, f"unknown state field {f!r}")

    seen_in_loop: set[str] = set()
    for lp in graph.loops:
        if lp.max_turns < 1:
            report.add("loop-turn-bound", lp.loop_id, "loop needs max_turns >= 1")
        if not lp.body:
            report.add("loop-empty", lp.loop_id, "loop body is empty")
        for rid in lp.body:
            if rid not in role_ids:
                report.add("loop-unknown-role", lp.loop_id,
                           f"body role {rid!r} does not exist")
            if rid in seen_in_loop:
                report.add("loop-overlap", lp.loop_id,
                           f"role {rid!r} belongs to multiple loops")
            seen_in_loop.add(rid)
        if lp.exit_role is not None and lp.exit_role not in lp.body:
            report.add("loop-exit-role", lp.loop_id,
                       f"exit role {lp.exit_role!r} not in body")
        for cond in lp.exit_conditions:
            if cond not in EXIT_TAGS:
                report.add("loop-exit-condition", lp.loop_id,
                           f"unknown exit condition {cond!r}")

    unit_ids = set(graph.unit_ids())
    for e in graph.edges:
        for endpoint in (e.source, e.target):
            if endpoint not in unit_ids:
                in_body = endpoint in seen_in_loop
                report.add("edge-into-loop-body" if in_body else "edge-unknown-endpoint",
                           f"{e.source}->{e.target}",
                           "edges must connect top-level roles or loops")
        if e.condition not in CONDITION_TAGS:
            report.add("edge-condition", f"{e.source}->{e.target}",
                       f"unknown condition tag {e.condition!r}")

    if not graph.has_role(graph.entry):
        report.add("entry-missing", graph.entry, "entry role does not exist")
    else:
        entry_unit = graph.unit_of(graph.entry)
        if graph.incoming(entry_unit):
            report.add("entry-incoming", graph.entry,
                       "entry unit must have no incoming edge")
        lp = graph.loop_of(graph.entry)
        if lp is not None and lp.body[0] != graph.entry:
            report.add("entry-loop-position", graph.entry,
                       "entry inside a loop must be the first body role")
    if not graph.has_role(graph.terminal):
        report.add("terminal-missing", graph.terminal, "terminal role does not exist")

    if report.ok:
        reachable = _reachable_units(graph)
        for unit in unit_ids:
            if unit not in reachable:
                report.add("unreachable", unit, "unit not reachable from entry")
        if _unit_graph_has_cycle(graph):
            report.add("cycle", "edges",
                       "graph is cyclic after unrolling bounded loops")

    agent_roles = set(graph.agent_roles())
    assigned = mapping.as_dict()
    for rid in sorted(agent_roles - set(assigned)):
        report.add("unmapped-agent-role", rid, "agent role has no model assignment")
    for rid in sorted(set(assigned) - agent_roles):
        kind = "tool role" if graph.has_role(rid) else "unknown role"
        report.add("mapped-non-agent", rid, f"{kind} must not be mapped")
    if model_ids is not None:
        for rid, mid in mapping.assignments:
            if mid not in model_ids:
                report.add("unknown-model", rid,
                           f"model {mid!r} is not in the model registry")
    return report


def _reachable_units(graph: WorkflowGraph) -> set[str]:
    start = graph.unit_of(graph.entry)
    seen = {start}
    frontier_units = [start]
    while frontier_units:
        unit = frontier_units.pop()
        for e in graph.edges:
            if e.source == unit and e.target not in seen:
                seen.add(e.target)
                frontier_units.append(e.target)
    return seen


def _unit_graph_has_cycle(graph: WorkflowGraph) -> bool:
    units = graph.unit_ids()
    out: dict[str, list[str]] = {u: [] for u in units}
    indeg = {u: 0 for u in units}
    for e in graph.edges:
        out[e.source].append(e.target)
        indeg[e.target] += 1
    queue = [u for u in units if indeg[u] == 0]
    seen = 0
    while queue:
        u = queue.pop()
        seen += 1
        for t in out[u]:
            indeg[t] -= 1
            if indeg[t] == 0:
                queue.append(t)
    return seen != len(units)


def unrolled_topological_order(graph: WorkflowGraph) -> list[tuple[str, int]]:
    """Topological order of the max_turns-unrolled graph as (role, turn) nodes.

    Raises ValueError when no ordering exists (cyclic configuration).
    """
    nodes: list[tuple[str, int]] = []
    for r in graph.roles:
        lp = graph.loop_of(r.role_id)
        if lp is None:
            nodes.append((r.role_id, 0))
        else:
            nodes.extend((r.role_id, k) for k in range(1, lp.max_turns + 1))
    edges: list[tuple[tuple[str, int], tuple[str, int]]] = []
    for lp in graph.loops:
        for k in range(1, lp.max_turns + 1):
            for a, b in zip(lp.body, lp.body[1:]):
                edges.append(((a, k), (b, k)))
            if k < lp.max_turns:
                edges.append(((lp.body[-1], k), (lp.body[0], k + 1)))

    def unit_entries(unit: str) -> list[tuple[str, int]]:
        lp = next((l for l in graph.loops if l.loop_id == unit), None)
        return [(lp.body[0], 1)] if lp else [(unit, 0)]

    def unit_exits(unit: str) -> list[tuple[str, int]]:
        lp = next((l for l in graph.loops if l.loop_id == unit), None)
        if lp is None:
            return [(unit, 0)]
        exits = [(lp.body[-1], k) for k in range(1, lp.max_turns + 1)]
        if lp.exit_role is not None:
            exits += [(lp.exit_role, k) for k in range(1, lp.max_turns + 1)]
        return exits

    for e in graph.edges:
        for src in unit_exits(e.source):
            for dst in unit_entries(e.target):
                edges.append((src, dst))

    out: dict[tuple[str, int], list[tuple[str, int]]] = {n: [] for n in nodes}
    indeg = {n: 0 for n in nodes}
    for a, b in edges:
        out[a].append(b)
        indeg[b] += 1
    order = [n for n in nodes if indeg[n] == 0]
    pos = 0
    while pos < len(order):
        for t in out[order[pos]]:
            indeg[t] -= 1
            if indeg[t] == 0:
                order.append(t)
        pos += 1
    if len(order) != len(nodes):
        raise ValueError("unrolled graph has no topological order")
    return order


def _edge_satisfied(edge: Edge, completed: dict[str, str]) -> bool:
    if edge.source not in completed:
        return False
    if edge.condition == "always":
        return True
    return completed[edge.source] == _TAG_OF_CONDITION[edge.condition]


def _preds_satisfied(graph: WorkflowGraph, unit: str, state: WorkflowState) -> bool:
    edges = graph.incoming(unit)
    if not edges:
        return unit == graph.unit_of(graph.entry)
    return all(_edge_satisfied(e, state.completed) for e in edges)


def frontier(graph: WorkflowGraph, state: WorkflowState) -> set[str]:
    """Roles whose predecessor completions are all recorded in the state."""
    if state.done:
        raise ValueError("frontier of a finished workflow")
    ready: set[str] = set()
    for lp in graph.loops:
        if lp.loop_id in state.completed:
            continue
        if lp.loop_id in state.loop_state:
            _, pos = state.loop_state[lp.loop_id]
            ready.add(lp.body[pos])
        elif _preds_satisfied(graph, lp.loop_id, state):
            ready.add(lp.body[0])
    for r in graph.roles:
        if graph.loop_of(r.role_id) is not None:
            continue
        if r.role_id in state.completed:
            continue
        if _preds_satisfied(graph, r.role_id, state):
            ready.add(r.role_id)
    return ready


def _apply_agent_output(state: WorkflowState, role: RoleSpec, parsed) -> None:
    pad = state.scratchpad
    schema = role.output_schema
    if schema == "query-list":
        pad["queries"] = pad["queries"] + parsed.queries
    elif schema == "answer-span":
        pad["candidate_answer"] = (parsed.span,)
        state.answers_log = state.answers_log + (parsed.span,)
    elif schema == "knowledge-update":
        pad["knowledge"] = (parsed.span,)
    elif schema == "program":
        pad["program"] = (parsed.span,)
    elif schema == "plan-text":
        pad["plan"] = (parsed.span,)
    elif schema == "reflection-text":
        pad["reflection"] = (parsed.span,)
    elif schema == "evidence-subset":
        cited = set(parsed.cited)
        pad["evidence"] = tuple(e for e in pad["retrieved"] if e[0] in cited)


def transition(graph: WorkflowGraph, state: WorkflowState, role_id: str,
               output, tool_results: dict | None = None) -> WorkflowState:
    """Apply one role execution; returns the successor state."""
    role = graph.role(role_id)
    if role_id not in frontier(graph, state):
        raise ValueError(f"role {role_id!r} is not on the frontier")
    output = tuple(int(t) for t in output)
    tool_results = tool_results or {}
    if not role.is_agent and output:
        raise ValueError(f"tool role {role_id!r} produces tool_results, not output")

    new = state.copy()
    end_token_fired = False
    if role.is_agent:
        parsed = parse_output(role.output_schema, output, new.vocab,
                              new.parse_context())
        _apply_agent_output(new, role, parsed)
        end_token_fired = parsed.end_token_exit

    verifier_passed = False
    if "retrieved" in tool_results:
        entries = tuple(tuple(int(t) for t in e) for e in tool_results["retrieved"])
        new.scratchpad["retrieved"] = new.scratchpad["retrieved"] + entries
    if "verifier_score" in tool_results:
        score = float(tool_results["verifier_score"])
        new.verifier_scores = new.verifier_scores + (score,)
        feedback = tuple(int(t) for t in tool_results.get("verifier_feedback", ()))
        new.scratchpad["verifier_feedback"] = (feedback,)
        verifier_passed = score == 1.0

    lp = graph.loop_of(role_id)
    if lp is None:
        new.completed[role_id] = "done"
    else:
        turn, pos = new.loop_state.get(lp.loop_id, (1, 0))
        if lp.body[pos] != role_id:
            raise ValueError(f"role {role_id!r} executed out of loop order")
        exit_reason = None
        if role_id == lp.exit_role:
            if "on-end-token" in lp.exit_conditions and end_token_fired:
                exit_reason = "end-token"
            elif "on-verifier-pass" in lp.exit_conditions and verifier_passed:
                exit_reason = "verifier-pass"
            elif lp.exhaust_at_exit and turn == lp.max_turns:
                exit_reason = "exhausted"
        if exit_reason is None:
            pos += 1
            if pos == len(lp.body):
                if turn == lp.max_turns:
                    exit_reason = "exhausted"
                else:
                    new.loop_state[lp.loop_id] = (turn + 1, 0)
            else:
                new.loop_state[lp.loop_id] = (turn, pos)
        if exit_reason is not None:
            new.loop_state.pop(lp.loop_id, None)
            new.completed[lp.loop_id] = exit_reason
            new.used_turns[lp.loop_id] = turn

    if graph.unit_of(graph.terminal) in new.completed:
        new.done = True
    return new


def regime(mapping: AgentModelMapping) -> SharingRegime:
    """Sharing regime induced by the multiset partition of the assignments."""
    models = [m for _, m in mapping.assignments]
    if not models:
        raise ValueError("empty mapping has no sharing regime")
    n_models = len(set(models))
    if n_models == 1:
        return SharingRegime.FULL_SHARED
    if n_models == len(models) and len(models) >= 2:
        return SharingRegime.FULL_SEPARATE
    return SharingRegime.PARTIAL_SHARED


def route(mapping: AgentModelMapping, role: str) -> str:
    """phi(role): the physical model serving an agent role."""
    assigned = mapping.as_dict()
    if role not in assigned:
        raise ValueError(f"role {role!r} is not a mapped agent role")
    return assigned[role]


def render_observation(role: RoleSpec, state: WorkflowState) -> tuple[int, ...]:
    """Role-identity token, then each field entry prefixed by <sep>."""
    vocab = state.vocab
    tokens: list[int] = [vocab.role_token(role.role_id)]
    for fld in role.observation_fields:
        entries = ((state.task_input,) if fld == "task_input"
                   else state.scratchpad[fld])
        for entry in entries:
            tokens.append(SEP)
            tokens.extend(entry)
    return tuple(tokens)


def observation_digest(role_id: str, observation) -> str:
    payload = role_id + ":" + ",".join(str(int(t)) for t in observation)
    return hashlib.sha256(payload.encode("ascii")).hexdigest()[:12]
