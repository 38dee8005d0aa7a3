"""Trainable token policies: linear softmax over bag-of-token features.

A model scores the next token from counts of the tokens seen so far in the
invocation (observation plus already-emitted output) concatenated with a
one-hot identifying the acting role. Sampling always reads the frozen
rollout snapshot; the trainer mutates the live parameters and publishes
them with sync().
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .rng import Stream
from .vocab import END


@dataclass
class PolicyOutput:
    tokens: tuple[int, ...]
    logprobs: np.ndarray
    values: np.ndarray
    truncated: bool


@dataclass
class ReferenceSnapshot:
    policy_params: np.ndarray
    value_params: np.ndarray
    version: int


@dataclass
class AdamState:
    m_policy: np.ndarray
    v_policy: np.ndarray
    m_value: np.ndarray
    v_value: np.ndarray
    step: int = 0


@dataclass
class ModelInstance:
    model_id: str
    vocab_size: int
    roles: tuple[str, ...]
    policy_params: np.ndarray = field(repr=False, default=None)  # (F, V)
    value_params: np.ndarray = field(repr=False, default=None)   # (F,)
    optimizer: AdamState = field(repr=False, default=None)
    snapshot: ReferenceSnapshot = field(repr=False, default=None)

    def __post_init__(self):
        f, v = self.feature_dim, self.vocab_size
        if self.policy_params is None:
            self.policy_params = np.zeros((f, v), dtype=np.float64)
        if self.value_params is None:
            self.value_params = np.zeros(f, dtype=np.float64)
        if self.policy_params.shape != (f, v) or self.value_params.shape != (f,):
            raise ValueError("parameter shapes inconsistent with feature spec")
        if self.optimizer is None:
            self.optimizer = AdamState(
                np.zeros((f, v)), np.zeros((f, v)), np.zeros(f), np.zeros(f))
        if self.snapshot is None:
            self.snapshot = ReferenceSnapshot(
                self.policy_params.copy(), self.value_params.copy(), 0)
        self._lock = threading.Lock()
        self._active_rollouts = 0

    @property
    def feature_dim(self) -> int:
        return self.vocab_size + len(self.roles)

    @property
    def n_parameters(self) -> int:
        return self.policy_params.size + self.value_params.size

    def role_index(self, role_id: str) -> int:
        try:
            return self.roles.index(role_id)
        except ValueError:
            raise KeyError(f"model {self.model_id} has no role {role_id!r}") from None

    def begin_rollout(self) -> None:
        with self._lock:
            self._active_rollouts += 1

    def end_rollout(self) -> None:
        with self._lock:
            self._active_rollouts -= 1


def base_features(vocab_size: int, n_roles: int, observation, role_index: int) -> np.ndarray:
    """Token counts over the observation plus a role one-hot block."""
    feat = np.zeros(vocab_size + n_roles, dtype=np.float64)
    obs = np.asarray(observation, dtype=np.int64)
    if obs.size:
        np.add.at(feat, obs, 1.0)
    feat[vocab_size + role_index] = 1.0
    return feat


def _params(model: ModelInstance, use_snapshot: bool):
    src = model.snapshot if use_snapshot else model
    return (np.ascontiguousarray(src.policy_params),
            np.ascontiguousarray(src.value_params))


def sample(model: ModelInstance, observation, role: str, rng: Stream | None,
           max_len: int, *, greedy: bool = False,
           use_snapshot: bool = True) -> PolicyOutput:
    """Sample up to max_len tokens; stops at <end> or truncates.

    rng is the per-invocation stream; ignored under greedy decoding.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    feat = base_features(model.vocab_size, len(model.roles), observation,
                         model.role_index(role))
    if greedy:
        uniforms = np.zeros(max_len, dtype=np.float64)
    else:
        uniforms = rng.doubles(max_len)
    pol, val = _params(model, use_snapshot)
    tokens, logprobs, values, truncated = _kernels.sample_tokens(
        pol, val, feat, uniforms, END, greedy)
    return PolicyOutput(tuple(int(t) for t in tokens), logprobs, values, truncated)


def logprobs(model: ModelInstance, observation, role: str, tokens,
             *, use_snapshot: bool = False) -> np.ndarray:
    """Teacher-forced log-probs of the given tokens (current params by default)."""
    toks = np.asarray(tokens, dtype=np.int32)
    if toks.size == 0:
        raise ValueError("tokens must be non-empty")
    if toks.min() < 0 or toks.max() >= model.vocab_size:
        raise ValueError("token out of vocabulary")
    feat = base_features(model.vocab_size, len(model.roles), observation,
                         model.role_index(role))
    pol, val = _params(model, use_snapshot)
    lp, _ = _kernels.score_tokens(pol, val, feat, toks)
    return lp


def values(model: ModelInstance, observation, role: str, tokens,
           *, use_snapshot: bool = False) -> np.ndarray:
    """Per-position value estimates along a token sequence."""
    toks = np.asarray(tokens, dtype=np.int32)
    feat = base_features(model.vocab_size, len(model.roles), observation,
                         model.role_index(role))
    pol, val = _params(model, use_snapshot)
    _, vals = _kernels.score_tokens(pol, val, feat, toks)
    return vals


def value(model: ModelInstance, observation, role: str,
          *, use_snapshot: bool = False) -> float:
    """State value of an observation for a role under the value head."""
    feat = base_features(model.vocab_size, len(model.roles), observation,
                         model.role_index(role))
    src = model.snapshot if use_snapshot else model
    return float(feat @ src.value_params)


def sync(model: ModelInstance) -> ReferenceSnapshot:
    """Publish current parameters as the new rollout snapshot."""
    with model._lock:
        if model._active_rollouts > 0:
            raise RuntimeError(
                f"sync({model.model_id}) during an active rollout")
        model.snapshot = ReferenceSnapshot(
            model.policy_params.copy(), model.value_params.copy(),
            model.snapshot.version + 1)
        return model.snapshot


def _fmt(x: float) -> str:
    return format(x, ".17g")


def save_checkpoint(model: ModelInstance, path) -> None:
    """Textual checkpoint; decimal values round-trip bit-exactly."""
    lines = [f"policy-ckpt v1 {model.model_id} {model.feature_dim} {model.vocab_size}"]
    for row in model.policy_params:
        lines.append(" ".join(_fmt(x) for x in row))
    lines.append(" ".join(_fmt(x) for x in model.value_params))
    opt = model.optimizer
    lines.append(f"adam {opt.step}")
    for arr in (opt.m_policy, opt.v_policy):
        for row in arr:
            lines.append(" ".join(_fmt(x) for x in row))
    lines.append(" ".join(_fmt(x) for x in opt.m_value))
    lines.append(" ".join(_fmt(x) for x in opt.v_value))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path, roles: tuple[str, ...]) -> ModelInstance:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    head = lines[0].split()
    if len(head) != 5 or head[0] != "policy-ckpt" or head[1] != "v1":
        raise ValueError(f"not a checkpoint file: {path}")
    model_id, feat_dim, vocab_size = head[2], int(head[3]), int(head[4])
    if vocab_size + len(roles) != feat_dim:
        raise ValueError(
            f"checkpoint feature dim {feat_dim} does not match vocab "
            f"{vocab_size} plus {len(roles)} roles")

    def rows(start, count):
        return np.array(
            [[float(x) for x in lines[start + i].split()] for i in range(count)],
            dtype=np.float64)

    pos = 1
    pol = rows(pos, feat_dim); pos += feat_dim
    val = rows(pos, 1)[0]; pos += 1
    tag, step = lines[pos].split(); pos += 1
    if tag != "adam":
        raise ValueError("malformed checkpoint: missing optimizer state")
    m_pol = rows(pos, feat_dim); pos += feat_dim
    v_pol = rows(pos, feat_dim); pos += feat_dim
    m_val = rows(pos, 1)[0]; pos += 1
    v_val = rows(pos, 1)[0]; pos += 1
    opt = AdamState(m_pol, v_pol, m_val, v_val, int(step))
    return ModelInstance(model_id, vocab_size, tuple(roles),
                         policy_params=pol, value_params=val, optimizer=opt)
