"""Executable checks of the value-safety bound and the gated-gradient identities.

The bound is exercised on small tabular MDPs where everything is exact:
value iteration gives V*/Q*, the expectile is found by bisection on its
first-order condition, and the policy term is replaced by an adversarial probe
that queries unsupported actions whose (over-estimated) Q is cropped at V_max.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .critic import HyperParams
from .envs_data import Batch
from .policy_gauss import GateRealization, GaussianPolicyParams, deterministic_interp_loss, gated_awr_loss
from .rng import SplitMix64
from .tensor_nn import AdamVector, MlpParams


@dataclass
class TabularMDP:
    rewards: np.ndarray  # (S, A)
    transitions: np.ndarray  # (S, A, S)
    gamma: float
    support: np.ndarray  # (S, A) bool, actions present in the dataset

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.support = np.asarray(self.support, dtype=bool)
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if not self.support.any(axis=1).all():
            raise ValueError("every state needs at least one supported action")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.rewards)))

    @property
    def v_max(self) -> float:
        return 2.0 * self.r_max / (1.0 - self.gamma)


@dataclass
class TheoryParams:
    delta_tau: float
    delta_sub: float
    eta: float
    v_max: float
    v_star: np.ndarray


def bellman_q(mdp: TabularMDP, v: np.ndarray) -> np.ndarray:
    return mdp.rewards + mdp.gamma * mdp.transitions @ v


def optimal_values(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Value iteration until the sup-norm change drops below ``tol``."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = bellman_q(mdp, v)
        new = q.max(axis=1)
        done = np.max(np.abs(new - v)) < tol
        v = new
        if done:
            break
    return v, bellman_q(mdp, v)


def expectile_bruteforce(values, tau: float, weights=None) -> float:
    """tau-expectile of a finite weighted sample, solved exactly.

    The first-order condition tau * E[(q - v)+] = (1 - tau) * E[(v - q)+] is
    linear in v between consecutive sorted sample points, so every interval is
    solved in closed form and the one containing its own root is kept.
    """
    q = np.asarray(values, dtype=np.float64).ravel()
    w = np.ones_like(q) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    order = np.argsort(q, kind="stable")
    q, w = q[order], w[order]
    if q[0] == q[-1]:
        return float(q[0])
    wl = np.cumsum(w)[:-1]  # weight strictly below the interval (q_k, q_{k+1})
    sl = np.cumsum(w * q)[:-1]
    wu = w.sum() - wl
    su = np.sum(w * q) - sl
    roots = ((1.0 - tau) * sl + tau * su) / ((1.0 - tau) * wl + tau * wu)
    inside = (roots >= q[:-1]) & (roots <= q[1:])
    return float(roots[np.argmax(inside)])


def measure_gaps(mdp: TabularMDP, q_star: np.ndarray, tau: float, v_star: np.ndarray | None = None) -> TheoryParams:
    """delta_tau: min over states of (supported max - supported expectile) of Q*;
    delta_sub: min over states of (overall max - supported max). Both floored at 0."""
    gap_tau, gap_sub = [], []
    for s in range(mdp.n_states):
        sup = q_star[s, mdp.support[s]]
        gap_tau.append(sup.max() - expectile_bruteforce(sup, tau))
        gap_sub.append(q_star[s].max() - sup.max())
    v_star = q_star.max(axis=1) if v_star is None else v_star
    return TheoryParams(float(max(min(gap_tau), 0.0)), float(max(min(gap_sub), 0.0)), 1.0, mdp.v_max,
                        np.asarray(v_star))


def p_bound(tp: TheoryParams, state: int) -> float:
    """(d_tau + d_sub) / (V_max - V*(s) + d_tau + d_sub), clamped to [0, 1]."""
    num = tp.delta_tau + tp.delta_sub
    den = tp.v_max - tp.v_star[state] + num
    if den <= 0.0:
        return 1.0
    return float(min(max(num / den, 0.0), 1.0))


def p_bound_min(tp: TheoryParams) -> float:
    return min(p_bound(tp, s) for s in range(len(tp.v_star)))


def adversarial_probe(mdp: TabularMDP) -> np.ndarray:
    """All mass on one unsupported action per state (a supported one if none is hidden)."""
    probe = np.zeros((mdp.n_states, mdp.n_actions))
    for s in range(mdp.n_states):
        hidden = np.flatnonzero(~mdp.support[s])
        probe[s, hidden[0] if hidden.size else 0] = 1.0
    return probe


def tabular_isep_vi(mdp: TabularMDP, tau: float, p: float, pi_probe: np.ndarray, iters: int,
                    v0: np.ndarray | float = 0.0, ood_q: float = np.inf) -> np.ndarray:
    """Trace of V_{k+1}(s) = (1-p) E^tau_{a in D(s)}[Q_k] + p E_{a~probe}[Q_k], k = 0..iters-1.

    Q_k is the Bellman backup of V_k cropped to [-V_max, V_max]. Queries at
    unsupported actions return ``ood_q`` before cropping (default: an unbounded
    over-estimate, i.e. exactly V_max after the crop).
    Returns an array of shape (iters + 1, S) whose first row is V_0.
    """
    v = np.broadcast_to(np.asarray(v0, dtype=np.float64), (mdp.n_states,)).copy()
    trace = [v.copy()]
    vm = mdp.v_max
    for _ in range(iters):
        q = np.clip(bellman_q(mdp, v), -vm, vm)
        q_probe = np.clip(np.where(mdp.support, q, ood_q), -vm, vm)
        new = np.empty_like(v)
        for s in range(mdp.n_states):
            in_sample = expectile_bruteforce(q[s, mdp.support[s]], tau)
            new[s] = (1.0 - p) * in_sample + p * float(pi_probe[s] @ q_probe[s])
        v = new
        trace.append(v.copy())
    return np.array(trace)


def random_mdp(seed: int, hide_prob: float = 0.5, gamma: float = 0.9) -> TabularMDP:
    """4-8 states, 3-6 actions, rewards U[-1, 1]; the Q*-argmax action is hidden
    from the dataset support with probability ``hide_prob`` at each state."""
    rng = SplitMix64(seed).spawn("tabular-mdp")
    n_s = 4 + int(rng.integers(5, 1)[0])
    n_a = 3 + int(rng.integers(4, 1)[0])
    rewards = rng.uniform_range(-1.0, 1.0, (n_s, n_a))
    raw = rng.uniform((n_s, n_a, n_s)) ** 2 + 1e-3
    transitions = raw / raw.sum(axis=2, keepdims=True)
    support = np.ones((n_s, n_a), dtype=bool)
    _, q_star = optimal_values(TabularMDP(rewards, transitions, gamma, support))
    hide = rng.uniform(n_s) < hide_prob
    drop = rng.uniform((n_s, n_a)) < 0.3
    for s in range(n_s):
        if hide[s]:
            support[s, int(np.argmax(q_star[s]))] = False
        for a in range(n_a):
            if drop[s, a] and support[s].sum() > 2:
                support[s, a] = False
    return TabularMDP(rewards, transitions, gamma, support)


@dataclass
class InstanceResult:
    instance: int
    seed: int
    delta_tau: float
    delta_sub: float
    p_bound_min: float
    violations: int
    max_excess: float
    probe_p: float | None = None
    probe_violations: int | None = None


@dataclass
class TheoremReport:
    tau: float
    results: list[InstanceResult] = field(default_factory=list)
    rejected_seeds: int = 0

    @property
    def total_violations(self) -> int:
        return sum(r.violations for r in self.results)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["instance", "seed", "delta_tau", "delta_sub", "p_bound_min", "violations"])
        for r in self.results:
            wr.writerow([r.instance, r.seed, repr(float(r.delta_tau)), repr(float(r.delta_sub)), repr(float(r.p_bound_min)),
                         r.violations])
        return buf.getvalue()


def check_instance(mdp: TabularMDP, tau: float, p: float, iters: int, atol: float = 1e-9
                   ) -> tuple[int, float]:
    """Count (iteration, state) pairs with V_k(s) > V*(s) + atol under the adversarial probe."""
    v_star, _ = optimal_values(mdp)
    v0 = min(0.0, float(v_star.min()))  # base case of the induction needs V_0 <= V*
    trace = tabular_isep_vi(mdp, tau, p, adversarial_probe(mdp), iters, v0=v0)
    excess = trace - v_star[None, :]
    return int(np.sum(excess > atol)), float(excess.max())


def theorem_sweep(n_instances: int = 50, base_seed: int = 0, tau: float = 0.7, iters: int = 300,
                  hide_prob: float = 0.5, probe_margin: float | None = 0.2, max_tries: int = 100_000
                  ) -> TheoremReport:
    """Draw random MDPs until ``n_instances`` have measured delta_tau, delta_sub > 0,
    run the tabular iteration at p = min_s p_bound(s), and count violations.

    With ``probe_margin`` set, also runs p = bound + margin and records how many
    (iteration, state) pairs exceed V* there (descriptive only)."""
    report = TheoremReport(tau)
    seed = base_seed
    tries = 0
    while len(report.results) < n_instances:
        if tries >= max_tries:
            raise RuntimeError(f"only {len(report.results)} qualifying instances in {max_tries} draws")
        tries += 1
        mdp = random_mdp(seed, hide_prob)
        v_star, q_star = optimal_values(mdp)
        tp = measure_gaps(mdp, q_star, tau, v_star)
        if tp.delta_tau <= 0.0 or tp.delta_sub <= 0.0:
            report.rejected_seeds += 1
            seed += 1
            continue
        p = p_bound_min(tp)
        viol, excess = check_instance(mdp, tau, p, iters)
        res = InstanceResult(len(report.results), seed, tp.delta_tau, tp.delta_sub, p, viol, excess)
        if probe_margin is not None:
            res.probe_p = min(p + probe_margin, 1.0)
            res.probe_violations = check_instance(mdp, tau, res.probe_p, iters)[0]
        report.results.append(res)
        seed += 1
    return report


def _branch_grads(batch: Batch, policy: GaussianPolicyParams, hp: HyperParams, policy_actions: np.ndarray,
                  weights) -> tuple[np.ndarray, np.ndarray]:
    g = []
    for b in (0, 1):
        _, grads = gated_awr_loss(batch, policy, None, hp, GateRealization("per_step", [b]), policy_actions, weights)
        g.append(grads.flat())
    return g[0], g[1]


def expectation_consistency_check(policy: GaussianPolicyParams, batch: Batch, hp: HyperParams,
                                  policy_actions: np.ndarray, weights, n_draws: int = 10_000, seed: int = 0
                                  ) -> tuple[np.ndarray, np.ndarray, float]:
    """Mean per-step-gated gradient over ``n_draws`` gates vs the blended gradient.

    Returns (mean_gated, deterministic, relative error)."""
    rng = SplitMix64(seed).spawn("gate-draws")
    total = None
    for _ in range(n_draws):
        gate = GateRealization.draw(hp.p, "per_step", len(batch), rng)
        g = gated_awr_loss(batch, policy, None, hp, gate, policy_actions, weights)[1].flat()
        total = g if total is None else total + g
    mean = total / n_draws
    det = deterministic_interp_loss(batch, policy, None, hp, policy_actions, weights)[1].flat()
    return mean, det, float(np.linalg.norm(mean - det) / np.linalg.norm(det))


def variance_decomposition_check(policy: GaussianPolicyParams, batch: Batch, hp: HyperParams,
                                 policy_actions: np.ndarray, weights, n_draws: int = 100_000, seed: int = 0
                                 ) -> tuple[float, float, float]:
    """Monte-Carlo trace-variance of the gated gradient vs p(1-p) ||g_data - g_expand||^2.

    The blended gradient has no gate randomness, so its variance term is zero.
    Returns (lhs, rhs, relative error); relative error is 0 when both sides are 0.
    """
    if n_draws < 10_000:
        raise ValueError("n_draws must be >= 10000")
    g_data, g_exp = _branch_grads(batch, policy, hp, policy_actions, weights)
    rng = SplitMix64(seed).spawn("gate-draws")
    # sums shifted by the first draw avoid cancellation when every draw is the same
    s1 = np.zeros_like(g_data)
    s2 = 0.0
    ref = None
    for _ in range(n_draws):
        gate = GateRealization.draw(hp.p, "per_step", len(batch), rng)
        g = gated_awr_loss(batch, policy, None, hp, gate, policy_actions, weights)[1].flat()
        ref = g if ref is None else ref
        d = g - ref
        s1 += d
        s2 += float(d @ d)
    mean = s1 / n_draws
    lhs = s2 / n_draws - float(mean @ mean)
    lhs = max(lhs, 0.0)
    diff = g_data - g_exp
    rhs = hp.p * (1.0 - hp.p) * float(diff @ diff)
    if rhs == 0.0:
        return lhs, rhs, 0.0 if lhs <= 1e-12 * max(1.0, float(g_data @ g_data)) else float("inf")
    return lhs, rhs, abs(lhs - rhs) / rhs


def per_step_branch_check(policy: GaussianPolicyParams, batch: Batch, hp: HyperParams,
                          policy_actions: np.ndarray, weights, n_draws: int = 1_000, seed: int = 0) -> bool:
    """Every realised per-step gradient is bitwise one of the two branch gradients."""
    g_data, g_exp = _branch_grads(batch, policy, hp, policy_actions, weights)
    rng = SplitMix64(seed).spawn("gate-draws")
    for _ in range(n_draws):
        gate = GateRealization.draw(hp.p, "per_step", len(batch), rng)
        g = gated_awr_loss(batch, policy, None, hp, gate, policy_actions, weights)[1].flat()
        if not (np.array_equal(g, g_data) or np.array_equal(g, g_exp)):
            return False
    return True


def gated_sgd_fixed_point(a_data: float, pol_center: float, pol_std: float, p: float, steps: int = 50_000,
                          lr: float = 1e-2, seed: int = 0) -> float:
    """Plain SGD on the mean of a 1-D unit-variance Gaussian with the per-step gated loss.

    Unit weights; the data branch regresses onto ``a_data``, the expansion branch
    onto a fresh draw from N(pol_center, pol_std^2). Returns the average of the
    second half of the iterates, an estimate of the point where the expected
    gated gradient vanishes.
    """
    net = MlpParams([1, 1], [np.zeros((1, 1))], [np.zeros(1)])
    policy = GaussianPolicyParams(net, AdamVector(np.zeros(1)))
    batch = Batch(np.zeros((1, 1)), np.array([[a_data]]), np.zeros(1), np.zeros((1, 1)), np.ones(1))
    ones = (np.ones(1), np.ones(1))
    rng = SplitMix64(seed).spawn("gated-sgd")
    acc = 0.0
    for k in range(steps):
        gate = GateRealization.draw(p, "per_step", 1, rng)
        a_hat = pol_center + pol_std * rng.normal((1, 1))
        _, g = gated_awr_loss(batch, policy, None, HyperParams(p=p), gate, a_hat, ones)
        net.theta -= lr * g.mean_net.flat()
        net.version += 1
        if k >= steps // 2:
            acc += float(net.biases[0][0])
    return acc / (steps - steps // 2)
