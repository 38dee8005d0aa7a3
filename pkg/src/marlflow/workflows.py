"""Built-in workflow families.

A: parallel retrieval   decompose -> {retrieve0, retrieve1} -> answer
B: retrieve-extract     decompose -> retrieve -> evidence -> answer
C: iterative search     plan -> loop[search -> retrieve -> summary
                                     -> update -> answer]
D: reflective codegen   loop[planner -> coder -> verify -> reflector],
                        early exit once the verifier passes, three rounds max
"""
from __future__ import annotations

from .rewards import (FAMILY_OF_WORKFLOW, RewardSpec)
from .workflow import AgentModelMapping, Edge, LoopSpec, RoleSpec, WorkflowGraph

FAMILIES = ("A", "B", "C", "D")


def build_graph(family: str) -> WorkflowGraph:
    if family == "A":
        return WorkflowGraph(
            roles=(
                RoleSpec("decompose", "agent", ("task_input",), "query-list",
                         max_output_tokens=4),
                RoleSpec("retrieve0", "tool", (), tool_refs=("retrieve",),
                         tool_params=(("query_index", "0"),)),
                RoleSpec("retrieve1", "tool", (), tool_refs=("retrieve",),
                         tool_params=(("query_index", "1"),)),
                RoleSpec("answer", "agent", ("task_input", "retrieved"),
                         "answer-span", max_output_tokens=3),
            ),
            edges=(
                Edge("decompose", "retrieve0"),
                Edge("decompose", "retrieve1"),
                Edge("retrieve0", "answer"),
                Edge("retrieve1", "answer"),
            ),
            loops=(), entry="decompose", terminal="answer")
    if family == "B":
        return WorkflowGraph(
            roles=(
                RoleSpec("decompose", "agent", ("task_input",), "query-list",
                         max_output_tokens=4),
                RoleSpec("retrieve", "tool", (), tool_refs=("retrieve",),
                         tool_params=(("query_index", "0"),)),
                RoleSpec("evidence", "agent", ("task_input", "retrieved"),
                         "evidence-subset", max_output_tokens=3),
                RoleSpec("answer", "agent", ("task_input", "evidence"),
                         "answer-span", max_output_tokens=3),
            ),
            edges=(
                Edge("decompose", "retrieve"),
                Edge("retrieve", "evidence"),
                Edge("evidence", "answer"),
            ),
            loops=(), entry="decompose", terminal="answer")
    if family == "C":
        return WorkflowGraph(
            roles=(
                RoleSpec("plan", "agent", ("task_input",), "answer-span",
                         max_output_tokens=3),
                RoleSpec("search", "agent", ("task_input", "knowledge"),
                         "query-list", max_output_tokens=4),
                RoleSpec("retrieve", "tool", (), tool_refs=("retrieve",),
                         tool_params=(("query_index", "-1"),)),
                RoleSpec("summary", "agent", ("task_input", "retrieved"),
                         "evidence-subset", max_output_tokens=3),
                RoleSpec("update", "agent", ("task_input", "evidence", "knowledge"),
                         "knowledge-update", max_output_tokens=4),
                RoleSpec("answer", "agent", ("task_input", "knowledge"),
                         "answer-span", max_output_tokens=3),
            ),
            edges=(Edge("plan", "refine"),),
            loops=(LoopSpec("refine",
                            ("search", "retrieve", "summary", "update", "answer"),
                            max_turns=3, exit_role="search",
                            exit_conditions=("on-end-token",)),),
            entry="plan", terminal="answer")
    if family == "D":
        return WorkflowGraph(
            roles=(
                RoleSpec("planner", "agent",
                         ("task_input", "verifier_feedback", "reflection"),
                         "plan-text", max_output_tokens=3),
                RoleSpec("coder", "agent",
                         ("task_input", "plan", "verifier_feedback"),
                         "program", max_output_tokens=5),
                RoleSpec("verify", "tool", (), tool_refs=("verify",)),
                RoleSpec("reflector", "agent",
                         ("task_input", "verifier_feedback"),
                         "reflection-text", max_output_tokens=3),
            ),
            edges=(),
            loops=(LoopSpec("rounds",
                            ("planner", "coder", "verify", "reflector"),
                            max_turns=3, exit_role="verify",
                            exit_conditions=("on-verifier-pass",),
                            exhaust_at_exit=True),),
            entry="planner", terminal="coder")
    raise ValueError(f"unknown workflow family {family!r}")


def default_mapping(family: str) -> AgentModelMapping:
    if family == "A":
        return AgentModelMapping.of(
            {"decompose": "m_decompose", "answer": "m_answer"})
    if family == "B":
        return AgentModelMapping.of(
            {"decompose": "m_decompose", "evidence": "m_evidence",
             "answer": "m_answer"})
    if family == "C":
        # planning and answering share one reasoning model
        return AgentModelMapping.of(
            {"plan": "m_reason", "answer": "m_reason", "search": "m_search",
             "summary": "m_summary", "update": "m_update"})
    if family == "D":
        return AgentModelMapping.of(
            {"planner": "m_planner", "coder": "m_coder",
             "reflector": "m_reflector"})
    raise ValueError(f"unknown workflow family {family!r}")


def default_reward_spec(family: str, format_penalty_value: float = -0.5) -> RewardSpec:
    return RewardSpec(family=FAMILY_OF_WORKFLOW[family],
                      format_penalty_value=format_penalty_value)
