"""Value / twin-Q learning: expectile regression mixed with policy-sample regression."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .envs_data import Batch
from .rng import SplitMix64
from .tensor_nn import MlpGrads, MlpParams, init_mlp, mlp_apply, mlp_backward, mlp_forward, polyak_blend


@dataclass
class HyperParams:
    p: float = 0.5
    tau: float = 0.7
    beta: float = 3.0
    w: float = 1.0
    gamma: float = 0.99
    rho: float = 0.995
    lr_v: float = 3e-4
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    batch_size: int = 256
    omega_max: float = 100.0
    flow_steps: int = 10
    token_dropout: float = 0.10
    expand_token: int = 1
    gate_mode: str = "per_step"

    def validate(self) -> None:
        checks = [
            ("p", 0.0 <= self.p <= 1.0, "[0, 1]"),
            ("tau", 0.0 < self.tau < 1.0, "(0, 1)"),
            ("beta", self.beta >= 0.0, "[0, inf)"),
            ("w", self.w >= 0.0, "[0, inf)"),
            ("gamma", 0.0 <= self.gamma < 1.0, "[0, 1)"),
            ("rho", 0.0 < self.rho < 1.0, "(0, 1)"),
            ("lr_v", self.lr_v >= 0.0, "[0, inf)"),
            ("lr_q", self.lr_q >= 0.0, "[0, inf)"),
            ("lr_pi", self.lr_pi >= 0.0, "[0, inf)"),
            ("batch_size", self.batch_size >= 1, "[1, inf)"),
            ("omega_max", self.omega_max > 0.0, "(0, inf)"),
            ("flow_steps", self.flow_steps >= 1, "[1, inf)"),
            ("token_dropout", 0.0 <= self.token_dropout <= 1.0, "[0, 1]"),
            ("expand_token", self.expand_token in (0, 1, 2), "{0, 1, 2}"),
            ("gate_mode", self.gate_mode in ("per_step", "per_element"), "{per_step, per_element}"),
        ]
        for name, ok, rng in checks:
            if not ok:
                raise ValueError(f"{name}={getattr(self, name)!r} out of range: must be in {rng}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class CriticSet:
    v_net: MlpParams
    q_nets: list[MlpParams]
    target_q_nets: list[MlpParams]
    v_max: float

    def copy(self) -> "CriticSet":
        return CriticSet(self.v_net.copy(), [q.copy() for q in self.q_nets],
                         [q.copy() for q in self.target_q_nets], self.v_max)


def v_max_for(r_max: float, gamma: float) -> float:
    return 2.0 * r_max / (1.0 - gamma)


def init_critics(state_dim: int, action_dim: int, hidden: list[int], rng: SplitMix64,
                 v_max: float, activation: str = "relu") -> CriticSet:
    v_net = init_mlp([state_dim, *hidden, 1], rng.spawn("v"), activation)
    q_nets = [init_mlp([state_dim + action_dim, *hidden, 1], rng.spawn(f"q{i}"), activation) for i in range(2)]
    return CriticSet(v_net, q_nets, [q.copy() for q in q_nets], v_max)


def expectile_loss(u, tau: float):
    """|tau - 1[u < 0]| * u^2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    out = np.abs(tau - (u < 0.0)) * u * u
    return float(out) if out.ndim == 0 else out


def value(critics: CriticSet, states: np.ndarray) -> np.ndarray:
    return mlp_apply(critics.v_net, states)[..., 0]


def q_twins(critics: CriticSet, states: np.ndarray, actions: np.ndarray, use_target: bool = True) -> np.ndarray:
    nets = critics.target_q_nets if use_target else critics.q_nets
    sa = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
    return np.stack([mlp_apply(q, sa)[:, 0] for q in nets])


def q_cropped(critics: CriticSet, s, a, use_target: bool = True):
    """min over the twins, clamped into [-v_max, v_max]. Batched or single (s, a)."""
    single = np.ndim(a) == 1
    q = np.clip(q_twins(critics, s, a, use_target).min(axis=0), -critics.v_max, critics.v_max)
    return float(q[0]) if single else q


def advantage(critics: CriticSet, s, a):
    single = np.ndim(a) == 1
    adv = q_cropped(critics, np.atleast_2d(s), np.atleast_2d(a)) - value(critics, np.atleast_2d(s))
    return float(adv[0]) if single else adv


def advantage_weight(critics: CriticSet, s, a, beta: float, omega_max: float):
    """min(exp(beta * (Q_target - V)), omega_max); the clip is applied in log space."""
    adv = np.asarray(advantage(critics, s, a))
    return weight_from_advantage(adv, beta, omega_max)


def weight_from_advantage(adv, beta: float, omega_max: float):
    out = np.exp(np.minimum(beta * np.asarray(adv, dtype=np.float64), np.log(omega_max)))
    return float(out) if out.ndim == 0 else out


def interpolated_value_loss(batch: Batch, policy_actions: np.ndarray | None, critics: CriticSet,
                            hp: HyperParams, q_data: np.ndarray | None = None,
                            q_policy: np.ndarray | None = None) -> tuple[float, MlpGrads]:
    """(1-p) * mean L2^tau(Q(s,a) - V(s)) + p * mean (Q(s,a_hat) - V(s))^2.

    Q comes from the cropped target twins; only the value net receives gradients.
    ``policy_actions`` may be None when p == 0; ``q_data`` and ``q_policy``
    reuse already computed cropped Q values for the batch.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    v, tape = mlp_forward(critics.v_net, batch.states)
    v = v[:, 0]
    if q_data is None:
        q_data = q_cropped(critics, batch.states, batch.actions)
    u = q_data - v
    w_asym = np.abs(hp.tau - (u < 0.0))
    loss = (1.0 - hp.p) * np.mean(w_asym * u * u)
    dv = (1.0 - hp.p) * (-2.0 * w_asym * u) / n
    if hp.p > 0.0:
        if q_policy is None:
            if policy_actions is None:
                raise ValueError("policy_actions required when p > 0")
            q_policy = q_cropped(critics, batch.states, policy_actions)
        up = q_policy - v
        loss += hp.p * np.mean(up * up)
        dv += hp.p * (-2.0 * up) / n
    grads = mlp_backward(critics.v_net, tape, dv[:, None])
    return float(loss), grads


def bellman_targets(batch: Batch, critics: CriticSet, gamma: float) -> np.ndarray:
    boot = gamma * (1.0 - batch.dones)
    if not np.any(boot):
        return batch.rewards + boot  # nothing bootstraps; skip the V(s') pass
    return batch.rewards + boot * value(critics, batch.next_states)


def bellman_q_loss(batch: Batch, critics: CriticSet, hp: HyperParams) -> tuple[float, list[MlpGrads]]:
    """Mean over the batch and over both live twins of (r + gamma (1-d) V(s') - Q(s,a))^2."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    target = bellman_targets(batch, critics, hp.gamma)
    sa = np.concatenate([batch.states, batch.actions], axis=1)
    loss, grads = 0.0, []
    for q_net in critics.q_nets:
        q, tape = mlp_forward(q_net, sa)
        diff = q[:, 0] - target
        loss += 0.5 * np.mean(diff * diff)
        grads.append(mlp_backward(q_net, tape, (diff / n)[:, None]))
    return float(loss), grads


def polyak_update(critics: CriticSet, rho: float) -> CriticSet:
    for tgt, live in zip(critics.target_q_nets, critics.q_nets):
        polyak_blend(tgt, live, rho)
    return critics


def scalar_value_fixed_point(q_data, tau: float, q_policy=None, p: float = 0.0,
                             max_iter: int = 1000) -> float:
    """Exact minimiser over a scalar V of the interpolated value loss.

    Iterates the reweighted-mean step V <- sum(w q) / sum(w) with expectile
    weights |tau - 1[q < V]| on the data term and weight 1 on the policy term.
    The loss is piecewise quadratic, so the iteration stops once the active set
    is stable.
    """
    q = np.asarray(q_data, dtype=np.float64)
    qp = np.zeros(0) if q_policy is None else np.asarray(q_policy, dtype=np.float64)
    if p > 0.0 and qp.size == 0:
        raise ValueError("q_policy required when p > 0")
    pol_num = p * qp.mean() if p > 0.0 else 0.0
    v = float(q.mean())
    if tau == 0.5 and p == 0.0:
        return v  # symmetric weights: the minimiser is the sample mean
    for _ in range(max_iter):
        w = np.abs(tau - (q < v)) * (1.0 - p) / q.size
        new = float((np.sum(w * q) + pol_num) / (np.sum(w) + p))
        # same active set => new is the minimiser of the quadratic piece it lies in
        if new == v or np.array_equal(q < new, q < v):
            return new
        v = new
    return v
