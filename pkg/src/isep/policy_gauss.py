"""Diagonal-Gaussian policy trained by advantage-weighted likelihood.

Two update rules share the same branch losses:

* ``gated_awr_loss`` -- a Bernoulli gate B picks the dataset branch (B=0) or the
  self-sample expansion branch (B=1) for the whole step (or per element);
* ``deterministic_interp_loss`` -- both branches blended with weights (1-p, p).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .critic import CriticSet, HyperParams, q_cropped, value, weight_from_advantage
from .envs_data import Batch
from .rng import SplitMix64
from .tensor_nn import AdamVector, MlpGrads, MlpParams, adam_step, init_mlp, mlp_apply, mlp_backward, mlp_forward

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = np.log(2.0 * np.pi)

PER_STEP = "per_step"
PER_ELEMENT = "per_element"


@dataclass
class GaussianPolicyParams:
    mean_net: MlpParams
    log_std: AdamVector

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.value)

    def copy(self) -> "GaussianPolicyParams":
        return GaussianPolicyParams(self.mean_net.copy(), self.log_std.copy())


@dataclass
class PolicyGrads:
    mean_net: MlpGrads
    log_std: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.flat(), self.log_std])


@dataclass
class GateRealization:
    mode: str
    draws: np.ndarray  # shape (1,) for per-step, (batch,) for per-element

    def __post_init__(self):
        self.draws = np.atleast_1d(np.asarray(self.draws, dtype=np.int64))
        if self.mode == PER_STEP and self.draws.size != 1:
            raise ValueError("per-step gate carries exactly one draw")

    @classmethod
    def draw(cls, p: float, mode: str, batch_size: int, rng: SplitMix64) -> "GateRealization":
        n = 1 if mode == PER_STEP else batch_size
        return cls(mode, rng.bernoulli(p, n))

    def per_element(self, n: int) -> np.ndarray:
        if self.mode == PER_STEP:
            return np.full(n, float(self.draws[0]))
        if self.draws.size != n:
            raise ValueError(f"per-element gate has {self.draws.size} draws for batch of {n}")
        return self.draws.astype(np.float64)

    @property
    def value(self) -> float:
        return float(self.draws.mean())


def init_gaussian_policy(state_dim: int, action_dim: int, hidden: list[int], rng: SplitMix64,
                         activation: str = "relu", log_std_init: float = 0.0) -> GaussianPolicyParams:
    net = init_mlp([state_dim, *hidden, action_dim], rng.spawn("mean"), activation)
    return GaussianPolicyParams(net, AdamVector(np.full(action_dim, log_std_init)))


def policy_mean(policy: GaussianPolicyParams, states: np.ndarray) -> np.ndarray:
    return mlp_apply(policy.mean_net, states)


def gaussian_log_prob(policy: GaussianPolicyParams, s, a):
    """Exact diagonal-Gaussian log density, batched over rows or for a single (s, a)."""
    single = np.ndim(a) == 1
    mu = policy_mean(policy, np.atleast_2d(s))
    log_std = policy.log_std.value
    z = (np.atleast_2d(a) - mu) / np.exp(log_std)
    lp = -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * mu.shape[1] * LOG_2PI
    return float(lp[0]) if single else lp


def sample_gaussian_action(policy: GaussianPolicyParams, s, rng: SplitMix64) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterised draw mu(s) + std * eps; returns (action, eps)."""
    single = np.ndim(s) == 1
    mu = policy_mean(policy, np.atleast_2d(s))
    eps = rng.normal(mu.shape)
    a = mu + policy.std * eps
    return (a[0], eps[0]) if single else (a, eps)


def _weighted_nll(policy: GaussianPolicyParams, states: np.ndarray, targets: np.ndarray,
                  coef: np.ndarray) -> tuple[float, PolicyGrads]:
    """loss = -sum_i coef_i * log pi(target_i | s_i) and its exact gradient."""
    mu, tape = mlp_forward(policy.mean_net, states)
    log_std = policy.log_std.value
    inv_var = np.exp(-2.0 * log_std)
    diff = targets - mu
    lp = -0.5 * np.sum(diff * diff * inv_var, axis=1) - np.sum(log_std) - 0.5 * mu.shape[1] * LOG_2PI
    loss = -float(np.sum(coef * lp))
    d_mu = -(coef[:, None] * diff * inv_var)
    g_log_std = -np.sum(coef[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    return loss, PolicyGrads(mlp_backward(policy.mean_net, tape, d_mu), g_log_std)


def branch_inputs(batch: Batch, policy_actions: np.ndarray | None, critics: CriticSet,
                  hp: HyperParams, q_data: np.ndarray | None = None, q_policy: np.ndarray | None = None
                  ) -> tuple[np.ndarray, np.ndarray | None]:
    """Detached advantage weights for the dataset and expansion branches."""
    v = value(critics, batch.states)
    if q_data is None:
        q_data = q_cropped(critics, batch.states, batch.actions)
    w_data = weight_from_advantage(q_data - v, hp.beta, hp.omega_max)
    w_pol = None
    if policy_actions is not None:
        if q_policy is None:
            q_policy = q_cropped(critics, batch.states, policy_actions)
        w_pol = weight_from_advantage(q_policy - v, hp.beta, hp.omega_max)
    return np.atleast_1d(w_data), None if w_pol is None else np.atleast_1d(w_pol)


def gated_awr_loss(batch: Batch, policy: GaussianPolicyParams, critics: CriticSet, hp: HyperParams,
                   gate: GateRealization, policy_actions: np.ndarray | None = None,
                   weights: tuple[np.ndarray, np.ndarray | None] | None = None) -> tuple[float, PolicyGrads]:
    """-[(1-B) mean w(s,a) log pi(a|s) + B mean w(s,a_hat) log pi(a_hat|s)].

    ``policy_actions`` are detached self-samples (required whenever some B=1);
    ``weights`` lets callers reuse precomputed (w_data, w_pol).
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    b = gate.per_element(n)
    if np.any(b > 0) and policy_actions is None:
        raise ValueError("expansion branch selected but no policy samples given")
    w_data, w_pol = weights if weights is not None else branch_inputs(batch, policy_actions, critics, hp)
    if gate.mode == PER_STEP:
        # exactly one branch is evaluated, so the realised gradient is that branch's gradient
        if b[0] == 0:
            return _weighted_nll(policy, batch.states, batch.actions, w_data / n)
        return _weighted_nll(policy, batch.states, policy_actions, w_pol / n)
    targets = np.where(b[:, None] > 0, policy_actions if policy_actions is not None else batch.actions,
                       batch.actions)
    coef = np.where(b > 0, w_pol if w_pol is not None else 0.0, w_data) / n
    return _weighted_nll(policy, batch.states, targets, coef)


def deterministic_interp_loss(batch: Batch, policy: GaussianPolicyParams, critics: CriticSet, hp: HyperParams,
                              policy_actions: np.ndarray | None = None,
                              weights: tuple[np.ndarray, np.ndarray | None] | None = None
                              ) -> tuple[float, PolicyGrads]:
    """-[(1-p) mean w(s,a) log pi(a|s) + p mean w(s,a_hat) log pi(a_hat|s)] at every step."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if hp.p > 0.0 and policy_actions is None:
        raise ValueError("policy_actions required when p > 0")
    w_data, w_pol = weights if weights is not None else branch_inputs(batch, policy_actions, critics, hp)
    if hp.p == 0.0:
        return _weighted_nll(policy, batch.states, batch.actions, w_data / n)
    states = np.concatenate([batch.states, batch.states])
    targets = np.concatenate([batch.actions, policy_actions])
    coef = np.concatenate([(1.0 - hp.p) * w_data, hp.p * w_pol]) / n
    return _weighted_nll(policy, states, targets, coef)


def apply_policy_grads(policy: GaussianPolicyParams, grads: PolicyGrads, lr: float) -> None:
    adam_step(policy.mean_net, grads.mean_net, lr)
    policy.log_std.update(grads.log_std, lr)
    np.clip(policy.log_std.value, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std.value)
