"""marlflow: trainable graph-structured multi-agent workflows.

Logical agent roles execute inside user-defined workflow graphs; an
explicit role-to-model mapping routes every invocation, reward, and
gradient to the physical model that produced it, under full, partial,
or separate parameter sharing. Training is per-model PPO with GAE over
model-local buffers.
"""
from ._kernels import backend_name
from .buffers import Fragment, ModelBuffer, ReadyBatch, audit_routing, build_ready_batch
from .config import RunConfig, default_config, parse_config, serialize_config
from .controller import (StepRecord, TrajectoryRecord, WorkerGroup,
                         assemble_and_commit, make_workers, run_rollout,
                         run_trajectory)
from .envs import Environment, build_code_environment, build_qa_environment
from .loop import EvalReport, RunSummary, evaluate, train_loop
from .policy import (ModelInstance, PolicyOutput, ReferenceSnapshot,
                     load_checkpoint, logprobs, sample, save_checkpoint, sync,
                     value, values)
from .rewards import (RewardAssignment, RewardSpec, RewardWeights, answer_f1,
                      assign, combine)
from .trainer import TrainerConfig, UpdateMetrics, gae, update
from .vocab import Vocabulary
from .workflow import (AgentModelMapping, Edge, LoopSpec, RoleSpec,
                       SharingRegime, ValidationReport, WorkflowGraph,
                       WorkflowState, frontier, regime, route, transition,
                       validate)

__version__ = "0.1.0"

__all__ = [
    "AgentModelMapping", "Edge", "Environment", "EvalReport", "Fragment",
    "LoopSpec", "ModelBuffer", "ModelInstance", "PolicyOutput", "ReadyBatch",
    "ReferenceSnapshot", "RewardAssignment", "RewardSpec", "RewardWeights",
    "RoleSpec", "RunConfig", "RunSummary", "SharingRegime", "StepRecord",
    "TrainerConfig", "TrajectoryRecord", "UpdateMetrics", "ValidationReport",
    "Vocabulary", "WorkerGroup", "WorkflowGraph", "WorkflowState",
    "answer_f1", "assemble_and_commit", "assign", "audit_routing",
    "backend_name", "build_code_environment", "build_qa_environment",
    "build_ready_batch", "combine", "default_config", "evaluate", "frontier",
    "gae", "load_checkpoint", "logprobs", "make_workers", "parse_config",
    "regime", "route", "run_rollout", "run_trajectory", "sample",
    "save_checkpoint", "serialize_config", "sync", "train_loop", "transition",
    "update", "validate", "value", "values",
]
