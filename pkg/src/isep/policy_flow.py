"""Flow-matching policy with optimality tokens and classifier-free guidance.

The velocity network sees ``state | a_t | (t, sin 2 pi t, cos 2 pi t) | one_hot(o)``
with token index 0 (negative advantage), 1 (non-negative advantage) and
2 (unconditioned, the dropout token).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .critic import CriticSet, HyperParams, advantage
from .envs_data import Batch
from .policy_gauss import PER_STEP, GateRealization
from .rng import SplitMix64
from .tensor_nn import MlpGrads, MlpParams, init_mlp, mlp_apply, mlp_backward, mlp_forward

TOKEN_NEG = 0
TOKEN_POS = 1
TOKEN_NULL = 2
N_TOKENS = 3
TIME_FEATURES = 3


@dataclass
class FlowPolicyParams:
    velocity_net: MlpParams
    state_dim: int
    action_dim: int

    def copy(self) -> "FlowPolicyParams":
        return FlowPolicyParams(self.velocity_net.copy(), self.state_dim, self.action_dim)


def init_flow_policy(state_dim: int, action_dim: int, hidden: list[int], rng: SplitMix64,
                     activation: str = "mish") -> FlowPolicyParams:
    n_in = state_dim + action_dim + TIME_FEATURES + N_TOKENS
    net = init_mlp([n_in, *hidden, action_dim], rng.spawn("velocity"), activation, zero_last=True)
    return FlowPolicyParams(net, state_dim, action_dim)


def _as_rng(seed) -> SplitMix64:
    return seed if isinstance(seed, SplitMix64) else SplitMix64(int(seed))


def flow_inputs(states: np.ndarray, a_t: np.ndarray, t: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    n = a_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    tokens = np.broadcast_to(np.asarray(tokens, dtype=np.int64), (n,))
    one_hot = np.zeros((n, N_TOKENS))
    one_hot[np.arange(n), tokens] = 1.0
    time_emb = np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)], axis=1)
    return np.concatenate([np.broadcast_to(states, (n, states.shape[-1])), a_t, time_emb, one_hot], axis=1)


def velocity(flow: FlowPolicyParams, a_t, t, s, token) -> np.ndarray:
    single = np.ndim(a_t) == 1
    out = mlp_apply(flow.velocity_net, flow_inputs(np.atleast_2d(s), np.atleast_2d(a_t), t, token))
    return out[0] if single else out


def fm_pair(a, a0, t):
    """Linear path point a_t = (1-t) a0 + t a and its velocity target a - a0."""
    a = np.asarray(a, dtype=np.float64)
    a0 = np.asarray(a0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if a.ndim == 2 and t.ndim == 1:
        t = t[:, None]
    return (1.0 - t) * a0 + t * a, a - a0


def assign_token(critics: CriticSet, s, a, rng, token_dropout: float):
    """Null token with probability ``token_dropout``, else 1 if Q - V >= 0 else 0."""
    rng = _as_rng(rng)
    single = np.ndim(a) == 1
    adv = np.atleast_1d(advantage(critics, np.atleast_2d(s), np.atleast_2d(a)))
    drop = rng.uniform(adv.shape[0]) < token_dropout
    tokens = np.where(drop, TOKEN_NULL, np.where(adv >= 0.0, TOKEN_POS, TOKEN_NEG)).astype(np.int64)
    return int(tokens[0]) if single else tokens


def cfg_guided_velocity(flow: FlowPolicyParams, a_t, t, s, w: float, cond_token: int = TOKEN_POS) -> np.ndarray:
    """(1 - w) v(., null) + w v(., cond); both branches in a single forward pass."""
    single = np.ndim(a_t) == 1
    a2 = np.atleast_2d(a_t)
    n = a2.shape[0]
    s2 = np.broadcast_to(np.atleast_2d(s), (n, flow.state_dim))
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    tokens = np.concatenate([np.full(n, TOKEN_NULL), np.full(n, cond_token)])
    x = flow_inputs(np.concatenate([s2, s2]), np.concatenate([a2, a2]), np.concatenate([t_arr, t_arr]), tokens)
    v = mlp_apply(flow.velocity_net, x)
    out = (1.0 - w) * v[:n] + w * v[n:]
    return out[0] if single else out


def integrate_flow(flow: FlowPolicyParams, s, a0: np.ndarray, w: float, flow_steps: int,
                   cond_token: int = TOKEN_POS) -> np.ndarray:
    """Euler integration of the guided field from t=0 to t=1."""
    if flow_steps < 1:
        raise ValueError("flow_steps must be >= 1")
    a = np.array(a0, dtype=np.float64)
    dt = 1.0 / flow_steps
    for k in range(flow_steps):
        a = a + dt * cfg_guided_velocity(flow, a, k * dt, s, w, cond_token)
    return a


def sample_flow_action(flow: FlowPolicyParams, s, w: float, flow_steps: int, seed,
                       cond_token: int = TOKEN_POS, box: tuple[float, float] | None = None) -> np.ndarray:
    """Draw a0 ~ N(0, I) under ``seed`` and integrate; ``box`` clamps (evaluation only)."""
    rng = _as_rng(seed)
    single = np.ndim(s) == 1
    s2 = np.atleast_2d(s)
    a0 = rng.normal((s2.shape[0], flow.action_dim))
    a = integrate_flow(flow, s2, a0, w, flow_steps, cond_token)
    if box is not None:
        a = np.clip(a, box[0], box[1])
    return a[0] if single else a


def fm_regression_loss(flow: FlowPolicyParams, states: np.ndarray, actions: np.ndarray, a0: np.ndarray,
                       t: np.ndarray, tokens: np.ndarray, coef: np.ndarray | None = None
                       ) -> tuple[float, MlpGrads]:
    """sum_i coef_i ||v(a_t, t, s, o) - (a - a0)||^2 (coef defaults to 1/n) and its gradient."""
    n = actions.shape[0]
    coef = np.full(n, 1.0 / n) if coef is None else coef
    a_t, target = fm_pair(actions, a0, t)
    v, tape = mlp_forward(flow.velocity_net, flow_inputs(states, a_t, t, tokens))
    resid = v - target
    loss = float(np.sum(coef * np.sum(resid * resid, axis=1)))
    return loss, mlp_backward(flow.velocity_net, tape, 2.0 * coef[:, None] * resid)


@dataclass
class FmBranch:
    """Everything random about one branch of the gated loss, drawn up front."""

    actions: np.ndarray
    a0: np.ndarray
    t: np.ndarray
    tokens: np.ndarray


def draw_branch(critics: CriticSet, states: np.ndarray, actions: np.ndarray, hp: HyperParams,
                rng: SplitMix64) -> FmBranch:
    n, d = actions.shape
    tokens = assign_token(critics, states, actions, rng, hp.token_dropout)
    return FmBranch(actions, rng.normal((n, d)), rng.uniform(n), np.atleast_1d(tokens))


def gated_fm_loss(batch: Batch, flow: FlowPolicyParams, critics: CriticSet, hp: HyperParams,
                  gate: GateRealization, seed, policy_actions: np.ndarray | None = None
                  ) -> tuple[float, MlpGrads]:
    """(1-B) mean ||v - (a - a0)||^2 on the data + B mean ||v - (a_hat - a_hat0)||^2 on self-samples.

    Self-samples a_hat are drawn with the guided sampler unless given; they are
    plain arrays, so nothing is differentiated through the sampler.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    rng = _as_rng(seed)
    b = gate.per_element(n)
    need_data = np.any(b == 0)
    need_pol = np.any(b > 0)
    data = draw_branch(critics, batch.states, batch.actions, hp, rng) if need_data else None
    pol = None
    if need_pol:
        if policy_actions is None:
            policy_actions = sample_flow_action(flow, batch.states, hp.w, hp.flow_steps, rng,
                                                hp.expand_token)
        pol = draw_branch(critics, batch.states, policy_actions, hp, rng)
    if gate.mode == PER_STEP:
        br = pol if need_pol else data
        return fm_regression_loss(flow, batch.states, br.actions, br.a0, br.t, br.tokens)
    pick = b > 0
    if data is None:
        br = pol
    elif pol is None:
        br = data
    else:
        br = FmBranch(*(np.where(pick[:, None] if x.ndim == 2 else pick, y, x)
                        for x, y in zip((data.actions, data.a0, data.t, data.tokens),
                                        (pol.actions, pol.a0, pol.t, pol.tokens))))
    return fm_regression_loss(flow, batch.states, br.actions, br.a0, br.t, br.tokens)
