"""Reward interface: answer F1, format penalties, and the workflow families.

Three families cover the built-in workflows:
  shared-final: every trainable step shares the final answer F1 (A, B)
  turn-delta:   loop roles earn the marginal F1 improvement per turn (C)
  verify-delta: round pairs earn verifier-score deltas (D)

Totals always combine node/turn/trajectory components with per-role weights:
total = w_node * node + w_turn * turn + w_traj * traj.
"""
from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field

from .vocab import Vocabulary

FAMILY_SHARED_FINAL = "shared-final"
FAMILY_TURN_DELTA = "turn-delta"
FAMILY_VERIFY_DELTA = "verify-delta"
FAMILIES = (FAMILY_SHARED_FINAL, FAMILY_TURN_DELTA, FAMILY_VERIFY_DELTA)

FAMILY_OF_WORKFLOW = {"A": FAMILY_SHARED_FINAL, "B": FAMILY_SHARED_FINAL,
                      "C": FAMILY_TURN_DELTA, "D": FAMILY_VERIFY_DELTA}

_ARTICLES = frozenset({"a", "an", "the"})
_PUNCT = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class RewardWeights:
    node: float = 1.0
    turn: float = 1.0
    traj: float = 1.0


@dataclass(frozen=True)
class RewardComponents:
    node: float
    turn: float
    traj: float
    total: float


@dataclass(frozen=True)
class RewardSpec:
    family: str
    weights: tuple[tuple[str, RewardWeights], ...] = ()
    format_penalty_value: float = -0.5
    # role bindings used by the looped families
    plan_role: str = "plan"
    answer_role: str = "answer"
    loop_roles: tuple[str, ...] = ("search", "summary", "update")
    planner_role: str = "planner"
    coder_role: str = "coder"
    reflector_role: str = "reflector"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown reward family {self.family!r}")
        if not self.format_penalty_value <= 0:
            raise ValueError("format_penalty_value must be <= 0")
        for _, w in self.weights:
            if not all(math.isfinite(x) for x in (w.node, w.turn, w.traj)):
                raise ValueError("reward weights must be finite")

    def weights_for(self, role_id: str) -> RewardWeights:
        for rid, w in self.weights:
            if rid == role_id:
                return w
        return RewardWeights()


@dataclass
class RewardAssignment:
    by_step: dict[int, RewardComponents] = field(default_factory=dict)

    def total(self, step_index: int) -> float:
        return self.by_step[step_index].total


def normalize_answer_tokens(tokens) -> list[str]:
    """Lowercase, strip punctuation, drop articles and emptied tokens."""
    out = []
    for tok in tokens:
        t = tok.lower().translate(_PUNCT)
        if t and t not in _ARTICLES:
            out.append(t)
    return out


def answer_f1(pred, gold) -> float:
    """Token-multiset F1 between normalized prediction and gold surfaces."""
    gold_n = normalize_answer_tokens(gold)
    if not gold_n:
        raise ValueError("gold answer is empty after normalization")
    pred_n = normalize_answer_tokens(pred)
    if not pred_n:
        return 0.0
    overlap = sum((Counter(pred_n) & Counter(gold_n)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_n)
    recall = overlap / len(gold_n)
    return 2.0 * precision * recall / (precision + recall)


def combine(node: float, turn: float, traj: float, weights: RewardWeights) -> float:
    return weights.node * node + weights.turn * turn + weights.traj * traj


def format_penalty(valid: bool, penalty_value: float = -0.5) -> float:
    return 0.0 if valid else penalty_value


def _components(spec: RewardSpec, role_id: str, node: float, turn: float,
                traj: float) -> RewardComponents:
    total = combine(node, turn, traj, spec.weights_for(role_id))
    return RewardComponents(node, turn, traj, total)


def _agent_steps(record):
    return [s for s in record.steps if s.is_agent]


def _decoded_f1(pred_tokens, gold_tokens, vocab: Vocabulary) -> float:
    return answer_f1(vocab.decode(pred_tokens), vocab.decode(gold_tokens))


def assign_shared_final(record, spec: RewardSpec, gold_tokens,
                        vocab: Vocabulary) -> RewardAssignment:
    """Workflows A/B: final answer F1 shared by every trainable step."""
    if record.candidate_answer is None:
        raise ValueError("record has no candidate answer")
    f1 = _decoded_f1(record.candidate_answer, gold_tokens, vocab)
    out = RewardAssignment()
    for step in _agent_steps(record):
        node = format_penalty(step.format_valid, spec.format_penalty_value)
        out.by_step[step.step_index] = _components(spec, step.role_id, node, 0.0, f1)
    return out


def assign_turn_delta(record, spec: RewardSpec, gold_tokens,
                      vocab: Vocabulary) -> RewardAssignment:
    """Workflow C: plan gets F1(a_0); the answer step of turn t gets F1(a_t);
    loop roles share the marginal improvement F1(a_t) - F1(a_{t-1}); a
    loop-exit stop token earns task reward 0."""
    answers = record.intermediate_answers
    if not answers:
        raise ValueError("record has no intermediate answers")
    f1s = [_decoded_f1(a, gold_tokens, vocab) for a in answers]
    out = RewardAssignment()
    answer_seen = 0
    for step in _agent_steps(record):
        node = format_penalty(step.format_valid, spec.format_penalty_value)
        if step.role_id == spec.plan_role:
            turn = f1s[0]
        elif step.role_id == spec.answer_role:
            answer_seen += 1
            turn = f1s[answer_seen]
        elif step.role_id in spec.loop_roles:
            if step.end_token_exit:
                turn = 0.0
            else:
                k = step.loop_turn
                turn = f1s[k] - f1s[k - 1]
        else:
            raise ValueError(
                f"role {step.role_id!r} has no turn-delta reward rule")
        out.by_step[step.step_index] = _components(spec, step.role_id, node, turn, 0.0)
    return out


def assign_verify_delta(record, spec: RewardSpec) -> RewardAssignment:
    """Workflow D: the round-0 planner/coder pair earns s_0; each reflector
    and the following planner/coder pair earn the score delta of the round
    they set up."""
    scores = record.verifier_scores
    if not scores:
        raise ValueError("record has no verifier score")
    out = RewardAssignment()
    for step in _agent_steps(record):
        node = format_penalty(step.format_valid, spec.format_penalty_value)
        k = step.loop_turn
        if step.role_id in (spec.planner_role, spec.coder_role):
            turn = scores[0] if k == 1 else scores[k - 1] - scores[k - 2]
        elif step.role_id == spec.reflector_role:
            turn = scores[k] - scores[k - 1]
        else:
            raise ValueError(
                f"role {step.role_id!r} has no verify-delta reward rule")
        out.by_step[step.step_index] = _components(spec, step.role_id, node, turn, 0.0)
    return out


def assign(record, spec: RewardSpec, gold_tokens,
           vocab: Vocabulary) -> RewardAssignment:
    """Dispatch on family; checks the family matches the workflow tag."""
    expected = FAMILY_OF_WORKFLOW.get(record.family)
    if expected is not None and expected != spec.family:
        raise ValueError(
            f"reward family {spec.family!r} does not match workflow "
            f"family {record.family!r}")
    if spec.family == FAMILY_SHARED_FINAL:
        return assign_shared_final(record, spec, gold_tokens, vocab)
    if spec.family == FAMILY_TURN_DELTA:
        return assign_turn_delta(record, spec, gold_tokens, vocab)
    return assign_verify_delta(record, spec)


def aggregate_return(assignment: RewardAssignment, record, gamma: float) -> float:
    """Discounted sum of step totals over agent steps (run-level reporting)."""
    out = 0.0
    for step in _agent_steps(record):
        out += gamma ** (step.step_index - 1) * assignment.total(step.step_index)
    return out
