"""Model-local fragment buffers and update-ready batch construction.

Every agent invocation becomes one Fragment committed to the buffer of the
model that produced it; routing mismatches are hard failures. Batches pad
to the longest fragment, place each scalar reward on the fragment's last
real token, and shuffle rows with a seeded permutation.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import BufferCapacityError, RoutingMismatchError
from .rng import derive_stream
from .workflow import AgentModelMapping, route

DEFAULT_CAPACITY = 65536


@dataclass
class Fragment:
    trajectory_id: str
    step_index: int
    role_id: str
    model_id: str
    obs_features: np.ndarray
    tokens: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    reward: float
    done: bool = True
    trajectory_failed: bool = False

    def __post_init__(self):
        if not (len(self.tokens) == len(self.logprobs) == len(self.values)):
            raise ValueError("token/log-prob/value lengths differ")
        if not np.isfinite(self.reward):
            raise ValueError("fragment reward must be finite")


class ModelBuffer:
    def __init__(self, model_id: str, capacity: int = DEFAULT_CAPACITY):
        self.model_id = model_id
        self.capacity = capacity
        self._fragments: list[Fragment] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._fragments)

    def fragments(self) -> tuple[Fragment, ...]:
        return tuple(self._fragments)

    def commit(self, fragment: Fragment) -> int:
        """Append one fragment; returns the new size."""
        if fragment.model_id != self.model_id:
            raise RoutingMismatchError(
                f"fragment for model {fragment.model_id!r} "
                f"(role {fragment.role_id!r}, trajectory "
                f"{fragment.trajectory_id}) offered to buffer {self.model_id!r}")
        with self._lock:
            if len(self._fragments) >= self.capacity:
                raise BufferCapacityError(
                    f"buffer {self.model_id!r} is at capacity {self.capacity}")
            self._fragments.append(fragment)
            return len(self._fragments)


@dataclass
class ReadyBatch:
    model_id: str
    tokens: np.ndarray          # (R, T) int32, padded with 0
    mask: np.ndarray            # (R, T) float64
    lengths: np.ndarray         # (R,) int32
    old_logprobs: np.ndarray    # (R, T)
    values: np.ndarray          # (R, T) behavior value estimates
    rewards: np.ndarray         # (R, T): scalar reward on the last real token
    obs_features: np.ndarray    # (R, F)
    role_ids: tuple[str, ...]
    trajectory_ids: tuple[str, ...]
    step_indices: tuple[int, ...]
    permutation: tuple[int, ...]
    shuffle_seed: int
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[0]


def build_ready_batch(buffer: ModelBuffer, min_fragments: int = 1,
                      shuffle_seed: int = 0) -> ReadyBatch:
    """Drain the buffer into a padded, reward-aligned, shuffled batch."""
    with buffer._lock:
        pending = list(buffer._fragments)
        usable = [f for f in pending if not f.trajectory_failed]
        if len(usable) < min_fragments:
            raise ValueError(
                f"buffer {buffer.model_id!r} holds {len(usable)} usable "
                f"fragments; {min_fragments} required")
        buffer._fragments.clear()

    order = list(range(len(usable)))
    derive_stream(shuffle_seed, buffer.model_id, "batch-shuffle").shuffle(order)
    rows = [usable[i] for i in order]

    width = max(len(f.tokens) for f in rows)
    n = len(rows)
    feat_dim = rows[0].obs_features.shape[0]
    tokens = np.zeros((n, width), dtype=np.int32)
    mask = np.zeros((n, width), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int32)
    old_lp = np.zeros((n, width), dtype=np.float64)
    values = np.zeros((n, width), dtype=np.float64)
    rewards = np.zeros((n, width), dtype=np.float64)
    feats = np.zeros((n, feat_dim), dtype=np.float64)
    for i, f in enumerate(rows):
        k = len(f.tokens)
        tokens[i, :k] = f.tokens
        mask[i, :k] = 1.0
        lengths[i] = k
        old_lp[i, :k] = f.logprobs
        values[i, :k] = f.values
        rewards[i, k - 1] = f.reward
        feats[i] = f.obs_features
    return ReadyBatch(
        model_id=buffer.model_id, tokens=tokens, mask=mask, lengths=lengths,
        old_logprobs=old_lp, values=values, rewards=rewards, obs_features=feats,
        role_ids=tuple(f.role_id for f in rows),
        trajectory_ids=tuple(f.trajectory_id for f in rows),
        step_indices=tuple(f.step_index for f in rows),
        permutation=tuple(order), shuffle_seed=shuffle_seed)


@dataclass
class RoutingAudit:
    misrouted: int = 0
    missing: int = 0
    duplicates: int = 0
    fragments_by_model: dict[str, int] = field(default_factory=dict)
    defects: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.misrouted == 0 and self.missing == 0 and self.duplicates == 0


def audit_routing(records, mapping: AgentModelMapping,
                  buffers: dict[str, ModelBuffer]) -> RoutingAudit:
    """End-to-end routing check: every assembled agent step must sit exactly
    once in the buffer of its mapped model, and nowhere else."""
    audit = RoutingAudit()
    located: dict[tuple[str, int], list[str]] = {}
    for model_id, buf in buffers.items():
        audit.fragments_by_model[model_id] = len(buf)
        for frag in buf.fragments():
            located.setdefault((frag.trajectory_id, frag.step_index), []).append(model_id)

    for rec in records:
        if rec.failed or not rec.done:
            continue
        for step in rec.steps:
            if not step.is_agent:
                continue
            key = (rec.trajectory_id, step.step_index)
            expected = route(mapping, step.role_id)
            homes = located.get(key, [])
            if not homes:
                audit.missing += 1
                audit.defects.append(f"missing {key} expected in {expected}")
                continue
            if len(homes) > 1:
                audit.duplicates += len(homes) - 1
                audit.defects.append(f"duplicate {key} in {sorted(homes)}")
            for home in homes:
                if home != expected:
                    audit.misrouted += 1
                    audit.defects.append(
                        f"misrouted {key}: in {home}, expected {expected}")
    return audit
