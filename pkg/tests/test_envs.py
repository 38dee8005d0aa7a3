import random

import pytest

from marlflow.envs import (CodeCodec, CodeTask, INSTRUCTIONS, code_vocabulary,
                           make_code_dataset, make_qa_dataset, qa_vocabulary,
                           retrieve, run_program, verify)


def test_qa_dataset_is_seed_deterministic():
    a = make_qa_dataset(7, 20, 5, 0.25)
    b = make_qa_dataset(7, 20, 5, 0.25)
    assert a == b
    c = make_qa_dataset(8, 20, 5, 0.25)
    assert c != a


def test_qa_hop_mix_zero_yields_single_hop_only():
    _, train, evals = make_qa_dataset(3, 30, 10, 0.0)
    assert all(t.hop_count == 1 for t in train + evals)


def test_qa_hop_mix_one_yields_two_hop_only():
    kb, train, _ = make_qa_dataset(3, 20, 0, 1.0)
    assert all(t.hop_count == 2 for t in train)
    for t in train:
        link_value = kb.value_of(t.chain[0])
        assert link_value == (t.chain[1],)  # first fact's value holds the next key


def test_qa_gold_recoverable_from_fact_chain():
    kb, train, evals = make_qa_dataset(11, 40, 10, 0.4)
    for task in train + evals:
        assert kb.value_of(task.chain[-1]) == task.gold


def test_qa_train_eval_disjoint_by_task():
    _, train, evals = make_qa_dataset(5, 120, 40, 0.3)
    questions_train = {t.question for t in train}
    questions_eval = {t.question for t in evals}
    assert len(questions_train) == 120
    assert len(questions_eval) == 40
    assert not (questions_train & questions_eval)


def test_qa_rejects_impossible_request():
    with pytest.raises(ValueError):
        make_qa_dataset(1, 5000, 1000, 0.0, kb_size=8, n_qwords=2)


def test_retrieve_ranks_matching_key_first():
    kb, train, _ = make_qa_dataset(9, 10, 0, 0.0)
    task = train[0]
    key = task.chain[0]
    results = retrieve(kb, (key,), 3)
    assert len(results) == 3
    assert results[0][0] == key
    assert results[0][1] == (key, *task.gold)


def test_retrieve_no_match_returns_k_distractors():
    kb, _, _ = make_qa_dataset(9, 4, 0, 0.0)
    vocab = qa_vocabulary((), 32, 16, 8)
    query = (vocab.id_of("qw0"),)
    results = retrieve(kb, query, 4)
    assert len(results) == 4
    keys = {r[0] for r in results}
    assert len(keys) == 4


def test_retrieve_is_deterministic_and_validates_k():
    kb, _, _ = make_qa_dataset(2, 4, 0, 0.0)
    q = (5, 6)
    assert retrieve(kb, q, 4) == retrieve(kb, q, 4)
    with pytest.raises(ValueError):
        retrieve(kb, q, len(kb.facts) + 1)


def test_qa_answerability_every_task_rank_one():
    kb, train, evals = make_qa_dataset(13, 50, 20, 0.5)
    for task in train + evals:
        for hop, key in enumerate(task.chain):
            results = retrieve(kb, (key,), 4)
            assert results[0][0] == key
        final = retrieve(kb, (task.chain[-1],), 4)
        assert final[0][1][1:] == task.gold


# ------------------------------------------------------------- stack machine

def test_run_program_increment_semantics():
    assert run_program(("PUSH_INPUT", "PUSH_1", "ADD", "RETURN"), 3) == 4


def test_run_program_crash_modes():
    assert run_program((), 1) is None                        # empty
    assert run_program(("ADD", "RETURN"), 1) is None         # underflow
    assert run_program(("PUSH_1",), 1) is None               # no RETURN
    assert run_program(("RETURN",), 1) is None               # empty stack
    assert run_program(("PUSH_1",) * 9, 1) is None           # too long


def test_run_program_is_total_on_random_sequences():
    rng = random.Random(0)
    for _ in range(2000):
        prog = tuple(rng.choice(INSTRUCTIONS)
                     for _ in range(rng.randint(0, 10)))
        run_program(prog, rng.randint(-5, 9))  # must not raise


def test_code_dataset_seed_deterministic_and_self_consistent():
    codec = CodeCodec(code_vocabulary(()), -8, 81)
    a_train, a_eval = make_code_dataset(4, 30, 10, codec=codec)
    b_train, b_eval = make_code_dataset(4, 30, 10, codec=codec)
    assert a_train == b_train and a_eval == b_eval
    for task in a_train + a_eval:
        assert len(task.tests) >= 4
        assert verify(task, task.target, codec).score == 1.0


def test_code_dataset_splits_are_distinct_tasks():
    codec = CodeCodec(code_vocabulary(()), -8, 81)
    train, evals = make_code_dataset(6, 60, 20, codec=codec)
    sigs = {task.tests for task in train + evals}
    assert len(sigs) == 80


def test_verify_score_is_pass_fraction():
    codec = CodeCodec(code_vocabulary(()), -8, 81)
    ins = codec.instruction_id
    # target: x + 1
    target = (ins("PUSH_INPUT"), ins("PUSH_1"), ins("ADD"), ins("RETURN"))
    task = CodeTask("t", target, ((0, 1), (1, 2), (2, 3), (3, 4)))
    assert verify(task, target, codec).score == 1.0
    # constant 1 passes only the input-0 test
    const1 = (ins("PUSH_1"), ins("RETURN"))
    res = verify(task, const1, codec)
    assert res.score == 0.25
    assert res.flags == (True, False, False, False)
    assert res.feedback == (codec.int_token(1), codec.int_token(2),
                            codec.int_token(1))


def test_verify_empty_program_scores_zero_with_feedback():
    codec = CodeCodec(code_vocabulary(()), -8, 81)
    ins = codec.instruction_id
    task = CodeTask("t", (ins("PUSH_1"), ins("RETURN")),
                    ((0, 1), (5, 1), (7, 1), (9, 1)))
    res = verify(task, (), codec)
    assert res.score == 0.0
    assert res.feedback == (codec.int_token(0), codec.int_token(1),
                            codec.err_token)


def test_verify_soundness_score_one_iff_all_match():
    codec = CodeCodec(code_vocabulary(()), -8, 81)
    train, _ = make_code_dataset(14, 40, 0, codec=codec)
    rng = random.Random(3)
    ids = sorted(codec.instruction_ids)
    for task in train:
        prog = tuple(rng.choice(ids) for _ in range(rng.randint(0, 6)))
        res = verify(task, prog, codec)
        names = tuple(codec.instruction_name(t) for t in prog)
        expected_all = all(run_program(names, x) == y for x, y in task.tests)
        assert (res.score == 1.0) == expected_all
        assert res.score == sum(res.flags) / len(res.flags)


def test_verify_rejects_non_instruction_tokens():
    codec = CodeCodec(code_vocabulary(()), -8, 81)
    task = CodeTask("t", (codec.instruction_id("PUSH_1"),
                          codec.instruction_id("RETURN")),
                    ((0, 1), (1, 1), (2, 1), (3, 1)))
    res = verify(task, (codec.int_token(0), codec.instruction_id("RETURN")), codec)
    assert res.score == 0.0
