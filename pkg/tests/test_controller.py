import threading

import numpy as np
import pytest

from marlflow.buffers import audit_routing, build_ready_batch
from marlflow.controller import (RolloutHooks, WorkerGroup, assemble_and_commit,
                                 format_record, make_workers, run_rollout,
                                 run_trajectory)
from marlflow.envs import build_code_environment, build_qa_environment
from marlflow.errors import ToolError
from marlflow.trainer import TrainerConfig, update
from marlflow.policy import sync
from marlflow.vocab import END
from marlflow.workflow import AgentModelMapping, regime
from marlflow.workflows import build_graph, default_mapping, default_reward_spec


def qa_setup(family="A", seed=3, n_train=12, n_eval=4, mapping=None):
    graph = build_graph(family)
    mapping = mapping or default_mapping(family)
    env = build_qa_environment(family, graph.agent_roles(), seed=seed,
                               n_train=n_train, n_eval=n_eval)
    workers = make_workers(mapping, env.vocab, graph.agent_roles())
    return graph, mapping, env, workers


def code_setup(seed=5, n_train=10, n_eval=4):
    graph = build_graph("D")
    mapping = default_mapping("D")
    env = build_code_environment("D", graph.agent_roles(), seed=seed,
                                 n_train=n_train, n_eval=n_eval)
    workers = make_workers(mapping, env.vocab, graph.agent_roles())
    return graph, mapping, env, workers


def test_run_trajectory_walks_chain_with_tools_between():
    graph, mapping, env, workers = qa_setup("B")
    rec = run_trajectory(env.train_tasks[0], graph, mapping, workers, env,
                         run_seed=1, epoch=1, task_index=0)
    assert rec.done and not rec.failed
    roles = [s.role_id for s in rec.steps]
    assert roles == ["decompose", "retrieve", "evidence", "answer"]
    agent_flags = [s.is_agent for s in rec.steps]
    assert agent_flags == [True, False, True, True]
    assert [s.step_index for s in rec.steps] == [1, 2, 3, 4]
    for s in rec.steps:
        assert all(p < s.step_index for p in s.parents)


def test_run_trajectory_is_reproducible():
    graph, mapping, env, workers = qa_setup("A")
    a = run_trajectory(env.train_tasks[1], graph, mapping, workers, env,
                       run_seed=9, epoch=2, task_index=1)
    b = run_trajectory(env.train_tasks[1], graph, mapping, workers, env,
                       run_seed=9, epoch=2, task_index=1)
    assert format_record(a) == format_record(b)
    for sa, sb in zip(a.steps, b.steps):
        assert sa.output == sb.output
        if sa.is_agent:
            assert np.array_equal(sa.logprobs, sb.logprobs)


def test_scripted_always_correct_coder_uses_one_round():
    graph, mapping, env, workers = code_setup()
    workers["m_coder"].script = lambda task, state, role: task.target + (END,)
    for idx, task in enumerate(env.train_tasks):
        rec = run_trajectory(task, graph, mapping, workers, env,
                             run_seed=1, epoch=1, task_index=idx)
        assert rec.done
        assert rec.used_turns == 1
        assert rec.verifier_scores[-1] == 1.0
        assert [s.role_id for s in rec.steps] == ["planner", "coder", "verify"]


def test_scripted_always_failing_coder_uses_all_rounds():
    graph, mapping, env, workers = code_setup()
    workers["m_coder"].script = lambda task, state, role: (END,)
    for idx, task in enumerate(env.train_tasks[:4]):
        rec = run_trajectory(task, graph, mapping, workers, env,
                             run_seed=1, epoch=1, task_index=idx)
        assert rec.used_turns == 3
        assert all(s != 1.0 for s in rec.verifier_scores)
        roles = [s.role_id for s in rec.steps]
        assert roles == ["planner", "coder", "verify", "reflector"] * 2 + [
            "planner", "coder", "verify"]


def test_used_turns_in_bounds_for_code_family():
    graph, mapping, env, workers = code_setup()
    recs = run_rollout(env.train_tasks, graph, mapping, workers, env, 4,
                       run_seed=3, epoch=1)
    for rec in recs:
        n_verify = sum(1 for s in rec.steps if s.role_id == "verify")
        assert rec.used_turns == n_verify
        assert 1 <= rec.used_turns <= 3


def test_run_rollout_schedule_invariance():
    graph, mapping, env, _ = qa_setup("A")
    outputs = []
    for limit in (1, 8):
        workers = make_workers(mapping, env.vocab, graph.agent_roles())
        recs = run_rollout(env.train_tasks[:8], graph, mapping, workers, env,
                           limit, run_seed=7, epoch=1)
        outputs.append([line for r in recs for line in format_record(r)])
    assert outputs[0] == outputs[1]


def test_run_rollout_respects_concurrency_limit():
    graph, mapping, env, workers = qa_setup("A", n_train=30)
    in_flight = 0
    seen_max = 0
    lock = threading.Lock()

    def on_start(idx):
        nonlocal in_flight, seen_max
        with lock:
            in_flight += 1
            seen_max = max(seen_max, in_flight)

    def on_end(idx):
        nonlocal in_flight
        with lock:
            in_flight -= 1

    run_rollout(env.train_tasks, graph, mapping, workers, env, 3,
                run_seed=1, epoch=1, hooks=RolloutHooks(on_start, on_end))
    assert seen_max <= 3


def test_run_rollout_isolates_tool_failures():
    graph, mapping, env, workers = qa_setup("A", n_train=10)
    original = env.tools["retrieve"]
    poison = env.train_tasks[4].task_id

    def flaky(state, params, task):
        if task.task_id == poison:
            raise ToolError("injected retrieval outage")
        return original(state, params, task)

    env.tools["retrieve"] = flaky
    recs = run_rollout(env.train_tasks, graph, mapping, workers, env, 4,
                       run_seed=2, epoch=1)
    assert len(recs) == 10
    failed = [r for r in recs if r.failed]
    assert len(failed) == 1
    assert failed[0].task_id == poison
    assert "outage" in failed[0].failure_reason
    assert all(r.done for r in recs if not r.failed)


def test_assemble_commits_one_fragment_per_agent_step():
    graph, mapping, env, workers = qa_setup("A")
    spec = default_reward_spec("A")
    rec = run_trajectory(env.train_tasks[0], graph, mapping, workers, env,
                         run_seed=1, epoch=1, task_index=0)
    count = assemble_and_commit(rec, spec, workers, env)
    assert count == 2
    assert len(workers["m_decompose"].buffer) == 1
    assert len(workers["m_answer"].buffer) == 1
    assert all(s.reward is not None for s in rec.agent_steps())


def test_assemble_full_shared_preserves_role_ids():
    mapping = AgentModelMapping.of({"decompose": "m1", "answer": "m1"})
    graph, mapping, env, workers = qa_setup("A", mapping=mapping)
    spec = default_reward_spec("A")
    recs = run_rollout(env.train_tasks[:3], graph, mapping, workers, env, 2,
                       run_seed=4, epoch=1)
    total = sum(assemble_and_commit(r, spec, workers, env) for r in recs)
    assert total == 6
    frags = workers["m1"].buffer.fragments()
    assert len(frags) == 6
    assert {f.role_id for f in frags} == {"decompose", "answer"}


def test_assemble_rejects_failed_and_double_assembly():
    graph, mapping, env, workers = qa_setup("A")
    spec = default_reward_spec("A")
    rec = run_trajectory(env.train_tasks[0], graph, mapping, workers, env,
                         run_seed=1, epoch=1, task_index=0)
    assemble_and_commit(rec, spec, workers, env)
    with pytest.raises(ValueError):
        assemble_and_commit(rec, spec, workers, env)
    bad = run_trajectory(env.train_tasks[1], graph, mapping, workers, env,
                         run_seed=1, epoch=1, task_index=1)
    bad.failed = True
    with pytest.raises(ValueError):
        assemble_and_commit(bad, spec, workers, env)


def test_routing_soundness_audit_over_rollout():
    for family in ("A", "B"):
        graph, mapping, env, workers = qa_setup(family, n_train=20)
        spec = default_reward_spec(family)
        recs = run_rollout(env.train_tasks, graph, mapping, workers, env, 4,
                           run_seed=8, epoch=1)
        for r in recs:
            assemble_and_commit(r, spec, workers, env)
        audit = audit_routing(recs, mapping,
                              {m: w.buffer for m, w in workers.items()})
        assert audit.ok, audit.defects
        for s in (s for r in recs for r_steps in [r.steps] for s in r_steps):
            if s.is_agent:
                assert s.model_id == mapping.as_dict()[s.role_id]


def test_records_carry_no_feature_tensors():
    # thin records / fat fragments: feature vectors only exist model-locally
    graph, mapping, env, workers = qa_setup("A")
    rec = run_trajectory(env.train_tasks[0], graph, mapping, workers, env,
                         run_seed=1, epoch=1, task_index=0)
    assert not hasattr(rec.steps[0], "obs_features")
    spec = default_reward_spec("A")
    assemble_and_commit(rec, spec, workers, env)
    frag = workers["m_answer"].buffer.fragments()[0]
    assert frag.obs_features.shape == (env.vocab.feature_dim,)
    # log size tracks tokens, not parameters
    line_lengths = [len(l) for l in format_record(rec)]
    assert max(line_lengths) < 400


def test_stale_snapshot_between_update_and_sync():
    graph, mapping, env, workers = qa_setup("A")
    spec = default_reward_spec("A")
    recs = run_rollout(env.train_tasks[:6], graph, mapping, workers, env, 2,
                       run_seed=5, epoch=1)
    for r in recs:
        assemble_and_commit(r, spec, workers, env)
    worker = workers["m_answer"]
    task = env.train_tasks[0]
    before = run_trajectory(task, graph, mapping, workers, env,
                            run_seed=77, epoch=9, task_index=0)
    batch = build_ready_batch(worker.buffer, shuffle_seed=1)
    update(worker, batch, TrainerConfig())
    stale = run_trajectory(task, graph, mapping, workers, env,
                           run_seed=77, epoch=9, task_index=0)
    assert format_record(stale) == format_record(before)  # snapshot unchanged
    for sa, sb in zip(stale.steps, before.steps):
        if sa.is_agent:
            assert np.array_equal(sa.logprobs, sb.logprobs)
    sync(worker.model)
    fresh = run_trajectory(task, graph, mapping, workers, env,
                           run_seed=77, epoch=9, task_index=0)
    assert worker.model.snapshot.version == 1

    def answer_lp(rec):
        return [s.logprobs for s in rec.steps if s.role_id == "answer"][0]

    def decompose_lp(rec):
        return [s.logprobs for s in rec.steps if s.role_id == "decompose"][0]

    assert not np.array_equal(answer_lp(fresh), answer_lp(before))
    assert np.array_equal(decompose_lp(fresh), decompose_lp(before))


def test_regime_fixture_coverage():
    assert regime(default_mapping("C")).value == "PartialShared"
    assert regime(default_mapping("D")).value == "FullSeparate"


def test_models_without_fragments_skip_updates():
    # an always-correct coder means the reflector never fires, so the
    # reflector-serving model accumulates nothing and must skip its update
    graph, mapping, env, workers = code_setup()
    workers["m_coder"].script = lambda task, state, role: task.target + (END,)
    spec = default_reward_spec("D")
    recs = run_rollout(env.train_tasks[:6], graph, mapping, workers, env, 2,
                       run_seed=2, epoch=1)
    for rec in recs:
        assemble_and_commit(rec, spec, workers, env)
    assert len(workers["m_reflector"].buffer) == 0
    assert len(workers["m_planner"].buffer) == 6
    eligible = [m for m, w in workers.items()
                if len(w.buffer) >= w.trainer_config.min_fragments]
    assert "m_reflector" not in eligible
    assert set(eligible) == {"m_planner", "m_coder"}


def test_fragment_conservation_across_buffers():
    # N complete records x k agent steps = total fragments over all buffers;
    # failed trajectories contribute nothing
    graph, mapping, env, workers = qa_setup("B", n_train=20)
    spec = default_reward_spec("B")
    original = env.tools["retrieve"]
    poisoned = {env.train_tasks[3].task_id, env.train_tasks[11].task_id}

    def flaky(state, params, task):
        if task.task_id in poisoned:
            raise ToolError("down")
        return original(state, params, task)

    env.tools["retrieve"] = flaky
    recs = run_rollout(env.train_tasks, graph, mapping, workers, env, 4,
                       run_seed=6, epoch=1)
    committed = sum(assemble_and_commit(r, spec, workers, env)
                    for r in recs if r.done and not r.failed)
    total_buffered = sum(len(w.buffer) for w in workers.values())
    n_ok = sum(1 for r in recs if not r.failed)
    assert n_ok == 18
    assert committed == total_buffered == n_ok * 3  # 3 agent steps per record
    audit = audit_routing(recs, mapping, {m: w.buffer for m, w in workers.items()})
    assert audit.ok


def test_two_hop_tasks_execute_and_assemble():
    graph = build_graph("B")
    mapping = default_mapping("B")
    env = build_qa_environment("B", graph.agent_roles(), seed=9, n_train=12,
                               n_eval=4, hop_mix=1.0)
    workers = make_workers(mapping, env.vocab, graph.agent_roles())
    spec = default_reward_spec("B")
    recs = run_rollout(env.train_tasks, graph, mapping, workers, env, 4,
                       run_seed=3, epoch=1)
    assert all(r.done and not r.failed for r in recs)
    for r in recs:
        assemble_and_commit(r, spec, workers, env)
    assert sum(len(w.buffer) for w in workers.values()) == len(recs) * 3


def test_end_line_carries_discounted_return():
    graph, mapping, env, workers = qa_setup("A")
    spec = default_reward_spec("A")
    rec = run_trajectory(env.train_tasks[0], graph, mapping, workers, env,
                         run_seed=1, epoch=1, task_index=0)
    assert format_record(rec)[-1].endswith("return=-")  # not yet assembled
    assemble_and_commit(rec, spec, workers, env)
    end = format_record(rec, gamma=0.9)[-1]
    field = [f for f in end.split("\t") if f.startswith("return=")][0]
    got = float(field.split("=", 1)[1])
    expected = sum(0.9 ** (s.step_index - 1) * s.reward.total
                   for s in rec.agent_steps())
    assert got == expected
