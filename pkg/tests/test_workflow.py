import itertools

import pytest

from marlflow.envs import build_code_environment, build_qa_environment
from marlflow.vocab import END, SEP, Vocabulary
from marlflow.workflow import (AgentModelMapping, Edge, LoopSpec, RoleSpec,
                               SharingRegime, WorkflowGraph, frontier,
                               initial_state, regime, render_observation,
                               route, transition, unrolled_topological_order,
                               validate)
from marlflow.workflows import build_graph, default_mapping


def agent(role_id, schema="answer-span", obs=("task_input",), max_tokens=3):
    return RoleSpec(role_id, "agent", tuple(obs), schema,
                    max_output_tokens=max_tokens)


def chain_graph():
    return WorkflowGraph(
        roles=(agent("decompose", "query-list"), agent("answer")),
        edges=(Edge("decompose", "answer"),),
        loops=(), entry="decompose", terminal="answer")


def small_vocab(roles=("decompose", "answer")):
    return Vocabulary(roles, ("w0", "w1", "w2", "w3"))


# ----------------------------------------------------------------- validate

def test_validate_minimal_chain_is_valid():
    graph = chain_graph()
    mapping = AgentModelMapping.of({"decompose": "m1", "answer": "m2"})
    report = validate(graph, mapping, model_ids=("m1", "m2"))
    assert report.ok, report.violations


def test_validate_rejects_zero_turn_loop():
    graph = WorkflowGraph(
        roles=(agent("a"), agent("b")),
        edges=(Edge("a", "body"),),
        loops=(LoopSpec("body", ("b",), max_turns=0),),
        entry="a", terminal="b")
    report = validate(graph, AgentModelMapping.of({"a": "m1", "b": "m1"}))
    assert "loop-turn-bound" in report.codes()


def test_validate_rejects_unmapped_agent_role():
    graph = chain_graph()
    report = validate(graph, AgentModelMapping.of({"decompose": "m1"}))
    assert "unmapped-agent-role" in report.codes()
    assert any(v.subject == "answer" for v in report.violations)


def test_validate_rejects_tool_role_with_schema_and_mapped_tool():
    graph = WorkflowGraph(
        roles=(agent("a"),
               RoleSpec("t", "tool", (), "answer-span", tool_refs=("retrieve",)),
               agent("b")),
        edges=(Edge("a", "t"), Edge("t", "b")),
        loops=(), entry="a", terminal="b")
    mapping = AgentModelMapping.of({"a": "m1", "b": "m1", "t": "m1"})
    report = validate(graph, mapping, tool_registry=frozenset({"retrieve"}))
    assert "tool-output-schema" in report.codes()
    assert "mapped-non-agent" in report.codes()


def test_validate_rejects_cycle_and_unknown_model():
    graph = WorkflowGraph(
        roles=(agent("a"), agent("b")),
        edges=(Edge("a", "b"), Edge("b", "a")),
        loops=(), entry="a", terminal="b")
    report = validate(graph, AgentModelMapping.of({"a": "m1", "b": "zz"}),
                      model_ids=("m1",))
    assert "cycle" in report.codes() or "entry-incoming" in report.codes()
    assert "unknown-model" in report.codes()


def test_validate_accepts_all_builtin_families():
    for family in "ABCD":
        graph = build_graph(family)
        mapping = default_mapping(family)
        report = validate(graph, mapping, model_ids=mapping.model_ids())
        assert report.ok, (family, report.violations)


def test_unrolled_topological_order_exists_for_families():
    for family in "ABCD":
        order = unrolled_topological_order(build_graph(family))
        assert len(order) == len(set(order))
        # loop members appear once per turn
        graph = build_graph(family)
        for lp in graph.loops:
            for rid in lp.body:
                turns = [k for r, k in order if r == rid]
                assert sorted(turns) == list(range(1, lp.max_turns + 1))


# ----------------------------------------------------------------- frontier

def test_frontier_fresh_chain_is_entry_only():
    graph = chain_graph()
    state = initial_state(graph, (3,), small_vocab())
    assert frontier(graph, state) == {"decompose"}


def test_frontier_fork_returns_both_branches():
    graph = WorkflowGraph(
        roles=(agent("entry"), agent("q1"), agent("q2"), agent("join")),
        edges=(Edge("entry", "q1"), Edge("entry", "q2"),
               Edge("q1", "join"), Edge("q2", "join")),
        loops=(), entry="entry", terminal="join")
    vocab = Vocabulary(("entry", "q1", "q2", "join"), ("w",))
    state = initial_state(graph, (), vocab)
    state = transition(graph, state, "entry", (END,))
    assert frontier(graph, state) == {"q1", "q2"}


def test_frontier_after_loop_exhaustion_is_exit_role_only():
    graph = WorkflowGraph(
        roles=(agent("a"), agent("b"), agent("c")),
        edges=(Edge("a", "lp"), Edge("lp", "c")),
        loops=(LoopSpec("lp", ("b",), max_turns=2),),
        entry="a", terminal="c")
    vocab = Vocabulary(("a", "b", "c"), ("w",))
    state = initial_state(graph, (), vocab)
    state = transition(graph, state, "a", (END,))
    assert frontier(graph, state) == {"b"}
    state = transition(graph, state, "b", (END,))
    assert frontier(graph, state) == {"b"}  # turn 2
    state = transition(graph, state, "b", (END,))
    assert state.used_turns["lp"] == 2
    assert frontier(graph, state) == {"c"}


def test_frontier_on_done_state_is_an_error():
    graph = chain_graph()
    state = initial_state(graph, (), small_vocab())
    state = transition(graph, state, "decompose", (END,))
    state = transition(graph, state, "answer", (3, END))
    assert state.done
    with pytest.raises(ValueError):
        frontier(graph, state)


def test_frontier_soundness_exhaustive_on_small_dags():
    # every execution prefix of every <=6-node DAG shape below must satisfy:
    # frontier == {roles with all predecessors executed} - executed
    shapes = [
        [("a", "b"), ("b", "c")],
        [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
        [("a", "b"), ("a", "c"), ("b", "d"), ("c", "e"), ("d", "f"), ("e", "f")],
        [("a", "b"), ("a", "c"), ("a", "d"), ("b", "e"), ("c", "e"), ("d", "e")],
    ]
    for edges in shapes:
        names = sorted({x for e in edges for x in e})
        graph = WorkflowGraph(
            roles=tuple(agent(n) for n in names),
            edges=tuple(Edge(s, t) for s, t in edges),
            loops=(), entry="a", terminal=names[-1])
        vocab = Vocabulary(tuple(names), ("w",))
        preds = {n: {s for s, t in edges if t == n} for n in names}

        def explore(state, executed):
            if state.done:
                return
            ready = frontier(graph, state)
            oracle = {n for n in names
                      if n not in executed and preds[n] <= executed}
            assert ready == oracle, (edges, executed, ready, oracle)
            for role in ready:
                explore(transition(graph, state, role, (END,)),
                        executed | {role})

        explore(initial_state(graph, (), vocab), set())


# --------------------------------------------------------------- transition

def test_transition_answer_sets_candidate_and_done():
    graph = chain_graph()
    vocab = small_vocab()
    state = initial_state(graph, (3,), vocab)
    state = transition(graph, state, "decompose", (vocab.id_of("w0"), END))
    state = transition(graph, state, "answer", (vocab.id_of("w1"), END))
    assert state.scratchpad["candidate_answer"] == ((vocab.id_of("w1"),),)
    assert state.done


def test_transition_end_token_exits_loop_early():
    graph = build_graph("C")
    env = build_qa_environment("C", graph.agent_roles(), seed=1, n_train=2, n_eval=1)
    state = initial_state(graph, (5,), env.vocab)
    w = env.vocab.id_of("v00")
    state = transition(graph, state, "plan", (w, END))
    assert frontier(graph, state) == {"search"}
    state = transition(graph, state, "search", (END,))
    assert state.done
    assert state.completed["refine"] == "end-token"
    assert state.used_turns["refine"] == 1


def test_transition_verifier_pass_finishes_round_one():
    graph = build_graph("D")
    env = build_code_environment("D", graph.agent_roles(), seed=2, n_train=2,
                                 n_eval=1)
    task = env.train_tasks[0]
    codec = env.codec
    state = initial_state(graph, env.task_input(task), env.vocab,
                          env.instruction_ids)
    state = transition(graph, state, "planner", (END,))
    state = transition(graph, state, "coder", task.target + (END,))
    results = env.tools["verify"](state, {}, task)
    assert results["verifier_score"] == 1.0
    state = transition(graph, state, "verify", (), results)
    assert state.done
    assert state.completed["rounds"] == "verifier-pass"
    assert state.used_turns["rounds"] == 1


def test_transition_rejects_unknown_role_and_tool_output():
    graph = build_graph("A")
    env = build_qa_environment("A", graph.agent_roles(), seed=1, n_train=2,
                               n_eval=1)
    state = initial_state(graph, (5,), env.vocab)
    with pytest.raises(ValueError):
        transition(graph, state, "nope", ())
    state = transition(graph, state, "decompose", (END,))
    with pytest.raises(ValueError):
        transition(graph, state, "retrieve0", (7,))


def test_transition_merges_retrieved_entries_and_evidence_selection():
    graph = build_graph("B")
    env = build_qa_environment("B", graph.agent_roles(), seed=3, n_train=4,
                               n_eval=1)
    task = env.train_tasks[0]
    key = task.chain[0]
    state = initial_state(graph, task.question, env.vocab)
    state = transition(graph, state, "decompose", (key, END))
    results = env.tools["retrieve"](state, {"query_index": 0, "k": 3}, task)
    state = transition(graph, state, "retrieve", (), results)
    assert len(state.scratchpad["retrieved"]) == 3
    assert state.scratchpad["retrieved"][0][0] == key  # matched fact first
    state = transition(graph, state, "evidence", (key, END))
    assert state.scratchpad["evidence"] == (state.scratchpad["retrieved"][0],)


# ------------------------------------------------------------ regime, route

def test_regime_image_size_one_is_full_shared():
    mapping = AgentModelMapping.of({"a": "m1", "b": "m1", "c": "m1"})
    assert regime(mapping) is SharingRegime.FULL_SHARED


def test_regime_injective_is_full_separate():
    mapping = AgentModelMapping.of({"a": "m1", "b": "m2", "c": "m3"})
    assert regime(mapping) is SharingRegime.FULL_SEPARATE


def test_regime_grouped_is_partial_shared():
    mapping = AgentModelMapping.of(
        {"a": "m1", "b": "m1", "c": "m2", "d": "m3", "e": "m3"})
    assert regime(mapping) is SharingRegime.PARTIAL_SHARED


def test_regime_invariant_under_model_relabeling():
    names = ["a", "b", "c", "d"]
    for assignment in itertools.product(range(3), repeat=4):
        mapping = AgentModelMapping.of(
            {n: f"m{i}" for n, i in zip(names, assignment)})
        relabeled = AgentModelMapping.of(
            {n: f"x{9 - i}" for n, i in zip(names, assignment)})
        assert regime(mapping) == regime(relabeled)


def test_route_constant_under_full_sharing():
    mapping = AgentModelMapping.of({"a": "m1", "b": "m1"})
    assert route(mapping, "a") == route(mapping, "b") == "m1"


def test_route_family_c_partial_mapping():
    mapping = default_mapping("C")
    assert route(mapping, "plan") == route(mapping, "answer") == "m_reason"
    assert route(mapping, "search") == "m_search"


def test_route_unknown_role_is_an_error():
    mapping = AgentModelMapping.of({"a": "m1"})
    with pytest.raises(ValueError):
        route(mapping, "b")


def test_route_matches_assignments_for_all_agent_roles():
    for family in "ABCD":
        mapping = default_mapping(family)
        for role, model in mapping.assignments:
            assert route(mapping, role) == model


# ------------------------------------------------------- observation render

def test_render_observation_prefixes_role_and_separates_fields():
    graph = chain_graph()
    vocab = small_vocab()
    state = initial_state(graph, (vocab.id_of("w0"),), vocab)
    role = graph.role("decompose")
    obs = render_observation(role, state)
    assert obs == (vocab.role_token("decompose"), SEP, vocab.id_of("w0"))
