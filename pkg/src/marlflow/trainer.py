"""Per-model PPO-style optimization: GAE, clipped losses, Adam updates.

update() runs minibatched epochs over one ready batch and leaves the
rollout snapshot untouched; publishing the new weights is the caller's
explicit sync step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .buffers import ReadyBatch
from .errors import DivergenceError
from .policy import ModelInstance

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADV_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 1.0
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-3
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 1.0
    iterations: int = 100
    rollout_size: int = 8
    min_fragments: int = 1
    normalize_advantages: bool = True

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        for name in ("learning_rate", "value_coef", "max_grad_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs_per_batch", "minibatch_size", "rollout_size",
                     "min_fragments"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0 or self.entropy_coef < 0:
            raise ValueError("iterations and entropy_coef must be >= 0")

    def override(self, **kwargs) -> "TrainerConfig":
        cfg = replace(self, **kwargs)
        cfg.validate()
        return cfg


@dataclass
class UpdateMetrics:
    model_id: str
    n_fragments: int
    n_minibatch_steps: int
    policy_loss: float
    value_loss: float
    ratio_mean: float
    ratio_max: float
    first_pass_max_ratio_dev: float
    clip_fraction: float
    approx_kl: float
    entropy: float
    grad_norm: float
    reward_mean_by_role: dict[str, float] = field(default_factory=dict)


def gae(rewards, values, terminal_value: float = 0.0, gamma: float = 1.0,
        lam: float = 0.95):
    """GAE advantages and returns for one sequence.

    advantages[t] = sum_l (gamma*lam)^l * delta[t+l] with
    delta[t] = r[t] + gamma * V[t+1] - V[t]; returns = advantages + values.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1 or r.size < 1:
        raise ValueError("rewards and values must be equal-length 1-D arrays")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))
            and np.isfinite(terminal_value)):
        raise ValueError("non-finite inputs to gae")
    adv, ret = _kernels.gae_batch(
        r[None, :].copy(), v[None, :].copy(),
        np.array([r.size], dtype=np.int32),
        np.array([terminal_value], dtype=np.float64), gamma, lam)
    return adv[0], ret[0]


def fill_advantages(batch: ReadyBatch, config: TrainerConfig) -> None:
    """Compute per-row GAE on behavior values and optionally normalize."""
    terminal = np.zeros(batch.n_rows, dtype=np.float64)
    adv, ret = _kernels.gae_batch(batch.rewards, batch.values, batch.lengths,
                                  terminal, config.gamma, config.gae_lambda)
    if config.normalize_advantages:
        live = batch.mask > 0
        vals = adv[live]
        mean = vals.mean()
        std = vals.std()
        adv = np.where(live, (adv - mean) / (std + ADV_STD_FLOOR), 0.0)
    batch.advantages = adv
    batch.returns = ret


def ppo_policy_loss(model: ModelInstance, batch: ReadyBatch, rows,
                    clip_epsilon: float, entropy_coef: float = 0.0):
    """Clipped-surrogate loss and exact parameter gradient over given rows."""
    if batch.advantages is None:
        raise ValueError("batch advantages not filled")
    idx = np.asarray(rows, dtype=np.int64)
    loss, grad, stats = _kernels.policy_loss_grad(
        np.ascontiguousarray(model.policy_params),
        np.ascontiguousarray(batch.obs_features[idx]),
        np.ascontiguousarray(batch.tokens[idx]),
        np.ascontiguousarray(batch.lengths[idx]),
        np.ascontiguousarray(batch.old_logprobs[idx]),
        np.ascontiguousarray(batch.advantages[idx]),
        clip_epsilon, entropy_coef)
    return loss, grad, stats


def value_loss(model: ModelInstance, batch: ReadyBatch, rows,
               value_coef: float):
    """Masked MSE toward returns and exact value-head gradient."""
    if batch.returns is None:
        raise ValueError("batch returns not filled")
    idx = np.asarray(rows, dtype=np.int64)
    loss, grad, _ = _kernels.value_loss_grad(
        np.ascontiguousarray(model.value_params),
        np.ascontiguousarray(batch.obs_features[idx]),
        np.ascontiguousarray(batch.tokens[idx]),
        np.ascontiguousarray(batch.lengths[idx]),
        np.ascontiguousarray(batch.returns[idx]),
        value_coef)
    return loss, grad


def _adam_step(model: ModelInstance, grad_policy, grad_value, lr: float,
               max_grad_norm: float) -> float:
    norm = float(np.sqrt((grad_policy * grad_policy).sum()
                         + (grad_value * grad_value).sum()))
    if max_grad_norm > 0 and norm > max_grad_norm:
        scale = max_grad_norm / norm
        grad_policy = grad_policy * scale
        grad_value = grad_value * scale
    opt = model.optimizer
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for params, g, m, v in (
            (model.policy_params, grad_policy, opt.m_policy, opt.v_policy),
            (model.value_params, grad_value, opt.m_value, opt.v_value)):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        params -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return norm


def update(worker, batch: ReadyBatch, config: TrainerConfig) -> UpdateMetrics:
    """Minibatched PPO epochs on one model; does not sync the snapshot.

    On divergence the parameters and optimizer state are rolled back to
    their pre-update values and DivergenceError is raised.
    """
    model: ModelInstance = worker.model
    if batch.model_id != model.model_id:
        raise ValueError(
            f"batch for {batch.model_id!r} offered to model {model.model_id!r}")
    fill_advantages(batch, config)

    checkpoint = (model.policy_params.copy(), model.value_params.copy(),
                  model.optimizer.m_policy.copy(), model.optimizer.v_policy.copy(),
                  model.optimizer.m_value.copy(), model.optimizer.v_value.copy(),
                  model.optimizer.step)
    chunks = [list(range(i, min(i + config.minibatch_size, batch.n_rows)))
              for i in range(0, batch.n_rows, config.minibatch_size)]

    totals = {"policy_loss": 0.0, "value_loss": 0.0, "ratio_sum": 0.0,
              "n_tokens": 0.0, "clip_count": 0.0, "kl_sum": 0.0,
              "entropy_sum": 0.0, "grad_norm": 0.0}
    ratio_max = 0.0
    first_dev = 0.0
    steps = 0
    try:
        for epoch in range(config.epochs_per_batch):
            for rows in chunks:
                p_loss, p_grad, stats = ppo_policy_loss(
                    model, batch, rows, config.clip_epsilon, config.entropy_coef)
                v_loss, v_grad = value_loss(model, batch, rows, config.value_coef)
                if not (np.isfinite(p_loss) and np.isfinite(v_loss)
                        and np.all(np.isfinite(p_grad))
                        and np.all(np.isfinite(v_grad))):
                    raise DivergenceError(
                        f"non-finite loss/gradient for model {model.model_id!r}")
                if steps == 0:
                    first_dev = stats["max_ratio_dev"]
                norm = _adam_step(model, p_grad, v_grad, config.learning_rate,
                                  config.max_grad_norm)
                steps += 1
                totals["policy_loss"] += p_loss
                totals["value_loss"] += v_loss
                totals["ratio_sum"] += stats["ratio_sum"]
                totals["n_tokens"] += stats["n_tokens"]
                totals["clip_count"] += stats["clip_count"]
                totals["kl_sum"] += stats["approx_kl_sum"]
                totals["entropy_sum"] += stats["entropy_sum"]
                totals["grad_norm"] += norm
                ratio_max = max(ratio_max, stats["ratio_max"])
    except DivergenceError:
        (model.policy_params[...], model.value_params[...]) = checkpoint[0], checkpoint[1]
        model.optimizer.m_policy[...] = checkpoint[2]
        model.optimizer.v_policy[...] = checkpoint[3]
        model.optimizer.m_value[...] = checkpoint[4]
        model.optimizer.v_value[...] = checkpoint[5]
        model.optimizer.step = checkpoint[6]
        raise

    by_role: dict[str, list[float]] = {}
    reward_per_row = batch.rewards.sum(axis=1)
    for role_id, reward in zip(batch.role_ids, reward_per_row):
        by_role.setdefault(role_id, []).append(float(reward))
    n_tok = totals["n_tokens"]
    return UpdateMetrics(
        model_id=model.model_id,
        n_fragments=batch.n_rows,
        n_minibatch_steps=steps,
        policy_loss=totals["policy_loss"] / steps,
        value_loss=totals["value_loss"] / steps,
        ratio_mean=totals["ratio_sum"] / n_tok,
        ratio_max=ratio_max,
        first_pass_max_ratio_dev=first_dev,
        clip_fraction=totals["clip_count"] / n_tok,
        approx_kl=totals["kl_sum"] / n_tok,
        entropy=totals["entropy_sum"] / n_tok,
        grad_norm=totals["grad_norm"] / steps,
        reward_mean_by_role={r: sum(v) / len(v) for r, v in sorted(by_role.items())})
