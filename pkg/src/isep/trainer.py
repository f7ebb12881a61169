"""Training loop: value, Q, policy and target updates in that order, plus evaluation and sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import envs_data as E
from .critic import (CriticSet, HyperParams, bellman_q_loss, init_critics, interpolated_value_loss,
                     polyak_update, q_cropped, v_max_for)
from .policy_flow import FlowPolicyParams, gated_fm_loss, init_flow_policy, sample_flow_action
from .policy_gauss import (GateRealization, GaussianPolicyParams, apply_policy_grads, branch_inputs,
                           deterministic_interp_loss, gated_awr_loss, init_gaussian_policy,
                           sample_gaussian_action)
from .rng import SplitMix64
from .tensor_nn import NonFiniteError, adam_step, save_mlp

log = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
FLOW = "flow"
DET_INTERP = "det_interp"
POLICY_KINDS = (GAUSSIAN, FLOW, DET_INTERP)

METRICS_HEADER = ("step", "v_loss", "q_loss", "pi_loss", "gate", "eval_reward_mean", "eval_danger_rate",
                  "eval_opt_island_rate", "eval_subopt_island_rate", "eval_dist_to_opt")

# Published per-task settings for the D4RL tasks: (p, tau, beta) for the Gaussian
# variant and (p, tau, w) for the flow variant.
BENCHMARK_GAUSSIAN_HP = {
    "halfcheetah-medium-v2": (0.5, 0.8, 5.0),
    "hopper-medium-v2": (0.5, 0.8, 3.0),
    "walker2d-medium-v2": (0.3, 0.8, 5.0),
    "halfcheetah-medium-replay-v2": (0.5, 0.8, 5.0),
    "hopper-medium-replay-v2": (0.3, 0.8, 3.0),
    "walker2d-medium-replay-v2": (0.5, 0.8, 5.0),
    "halfcheetah-medium-expert-v2": (0.3, 0.8, 3.0),
    "hopper-medium-expert-v2": (0.3, 0.8, 3.0),
    "walker2d-medium-expert-v2": (0.3, 0.8, 3.0),
    "pen-human-v1": (0.2, 0.7, 0.5),
    "pen-cloned-v1": (0.5, 0.7, 0.5),
    "kitchen-complete-v0": (0.5, 0.7, 0.05),
    "kitchen-partial-v0": (0.2, 0.8, 0.1),
    "kitchen-mixed-v0": (0.3, 0.8, 0.1),
}
BENCHMARK_FLOW_HP = {
    "halfcheetah-medium-v2": (0.3, 0.7, 2.0),
    "hopper-medium-v2": (0.2, 0.7, 1.0),
    "walker2d-medium-v2": (0.3, 0.8, 2.0),
    "halfcheetah-medium-replay-v2": (0.3, 0.8, 2.0),
    "hopper-medium-replay-v2": (0.5, 0.8, 3.0),
    "walker2d-medium-replay-v2": (0.3, 0.8, 3.0),
    "halfcheetah-medium-expert-v2": (0.3, 0.8, 3.0),
    "hopper-medium-expert-v2": (0.2, 0.7, 3.0),
    "walker2d-medium-expert-v2": (0.3, 0.7, 2.0),
    "pen-human-v1": (0.2, 0.7, 3.0),
    "pen-cloned-v1": (0.2, 0.7, 1.0),
    "kitchen-complete-v0": (0.2, 0.8, 0.5),
    "kitchen-partial-v0": (0.2, 0.8, 1.0),
    "kitchen-mixed-v0": (0.2, 0.8, 0.2),
}


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: str):
        super().__init__(f"non-finite value at step {step}: {cause}")
        self.step = step


@dataclass
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    env_id: str = E.DANGER
    policy_kind: str = GAUSSIAN
    total_steps: int = 30_000
    eval_every: int = 1_000
    eval_rollouts: int = 1_000
    seed: int = 0
    dataset_path: str | None = None
    dataset_size: int = 10_000
    critic_hidden: tuple[int, ...] = (64, 64)
    policy_hidden: tuple[int, ...] = (64, 64)

    def validate(self) -> None:
        self.hp.validate()
        if self.env_id not in (E.DANGER, E.MULTIMODAL):
            raise ValueError(f"env_id={self.env_id!r}: trainer supports {E.DANGER}, {E.MULTIMODAL}")
        if self.policy_kind not in POLICY_KINDS:
            raise ValueError(f"policy_kind={self.policy_kind!r} must be one of {POLICY_KINDS}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.eval_every < 1 or self.eval_rollouts < 1:
            raise ValueError("eval_every and eval_rollouts must be >= 1")
        if self.dataset_size < 10:
            raise ValueError("dataset_size must be >= 10")


# Bandit presets. gamma=0 because every bandit transition is terminal; it also
# makes the Q crop 2 * R_max. The bandit state is constant, so the value net is
# effectively its output bias and moves about lr_v per Adam step; the multimodal
# presets raise lr_v so V can track the expansion targets within the budget.
_BANDIT_HP = dict(p=0.5, tau=0.7, beta=0.05, w=1.0, gamma=0.0, rho=0.995)
_SMALL_NETS = dict(critic_hidden=(32, 32), policy_hidden=(32, 32))
PRESETS: dict[str, dict] = {
    "danger_bandit": dict(env_id=E.DANGER, policy_kind=GAUSSIAN, total_steps=30_000,
                          hp=dict(_BANDIT_HP, lr_pi=1e-3), **_SMALL_NETS),
    "multimodal_flow": dict(env_id=E.MULTIMODAL, policy_kind=FLOW, total_steps=10_000,
                            hp=dict(_BANDIT_HP, lr_v=3e-3), **_SMALL_NETS),
    "multimodal_gaussian": dict(env_id=E.MULTIMODAL, policy_kind=GAUSSIAN, total_steps=10_000,
                                hp=dict(_BANDIT_HP, lr_v=3e-3), **_SMALL_NETS),
    "multimodal_det_interp": dict(env_id=E.MULTIMODAL, policy_kind=DET_INTERP, total_steps=10_000,
                                  hp=dict(_BANDIT_HP, lr_v=3e-3), **_SMALL_NETS),
}


def preset_config(name: str, **overrides) -> TrainConfig:
    spec = dict(PRESETS[name])
    hp_over = {k: overrides.pop(k) for k in list(overrides) if k in HyperParams.field_names()}
    hp = HyperParams(**{**spec.pop("hp"), **hp_over})
    cfg = TrainConfig(hp=hp, **{**spec, **overrides})
    cfg.validate()
    return cfg


@dataclass
class TrainState:
    critics: CriticSet
    policy: GaussianPolicyParams | FlowPolicyParams
    dataset: E.OfflineDataset
    streams: dict[str, SplitMix64]
    step: int = 0


@dataclass
class TrainStepRecord:
    step: int
    v_loss: float
    q_loss: float
    pi_loss: float
    gate: float
    eval: dict[str, float] | None = None

    def row(self) -> list[str]:
        ev = self.eval or {}
        vals = [self.v_loss, self.q_loss, self.pi_loss, self.gate] + [ev.get(k) for k in METRICS_HEADER[5:]]
        return [str(self.step)] + ["" if v is None else repr(float(v)) for v in vals]


@dataclass
class MetricsTable:
    records: list[TrainStepRecord] = field(default_factory=list)
    diverged_at: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(METRICS_HEADER)
        for rec in self.records:
            wr.writerow(rec.row())
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def evals(self) -> list[tuple[int, dict]]:
        return [(r.step, r.eval) for r in self.records if r.eval]

    @property
    def final_eval(self) -> dict | None:
        ev = self.evals()
        return ev[-1][1] if ev else None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)


def load_or_generate_dataset(config: TrainConfig) -> E.OfflineDataset:
    if config.dataset_path:
        ds = E.load_dataset(config.dataset_path)
        if ds.env_id != config.env_id:
            raise ValueError(f"dataset env {ds.env_id!r} does not match config env {config.env_id!r}")
        return ds
    return E.generate_dataset(config.env_id, config.dataset_size, config.seed)


def init_state(config: TrainConfig, dataset: E.OfflineDataset | None = None) -> TrainState:
    config.validate()
    ds = dataset if dataset is not None else load_or_generate_dataset(config)
    root = SplitMix64(config.seed)
    init = root.spawn("init")
    state_dim, action_dim = ds.states.shape[1], ds.actions.shape[1]
    field_ = E.REWARD_FIELDS[config.env_id]
    critics = init_critics(state_dim, action_dim, list(config.critic_hidden), init.spawn("critic"),
                           v_max_for(field_.r_max, config.hp.gamma))
    if config.policy_kind == FLOW:
        policy = init_flow_policy(state_dim, action_dim, list(config.policy_hidden), init.spawn("flow"))
    else:
        policy = init_gaussian_policy(state_dim, action_dim, list(config.policy_hidden), init.spawn("gauss"))
    streams = {name: root.spawn(name) for name in ("batch", "gate", "value-samples", "policy-samples", "eval")}
    return TrainState(critics, policy, ds, streams)


def sample_policy_actions(policy, states: np.ndarray, hp: HyperParams, rng: SplitMix64) -> np.ndarray:
    """Detached draws a_hat ~ pi(.|s) used as regression targets."""
    if isinstance(policy, FlowPolicyParams):
        return sample_flow_action(policy, states, hp.w, hp.flow_steps, rng, hp.expand_token)
    return sample_gaussian_action(policy, states, rng)[0]


def train_step(state: TrainState, batch: E.Batch, config: TrainConfig,
               hook: Callable[[str], None] | None = None) -> TrainStepRecord:
    """Value update, Q update, policy update, Polyak update; one Adam step per network."""
    hp = config.hp
    critics, policy, streams = state.critics, state.policy, state.streams
    step = state.step + 1
    hook = hook or (lambda _stage: None)

    def guard(x: float, what: str) -> float:
        if not math.isfinite(x):
            raise TrainingAborted(step, what)
        return x

    try:
        # detached draws a_hat ~ pi for the value stage. The flow policy reuses them in
        # its own stage (each flow sample costs a full Euler integration), so they come
        # from the policy stream; the Gaussian policies draw again for the policy stage.
        pol_actions = q_pol = None
        if hp.p > 0:
            if config.policy_kind == FLOW:
                pol_actions = sample_policy_actions(policy, batch.states, hp, streams["policy-samples"])
                q_pol = q_cropped(critics, batch.states, pol_actions)
            else:
                pol_actions = sample_policy_actions(policy, batch.states, hp, streams["value-samples"])
        # target nets do not move until the Polyak step, so cropped Q values are shared by all stages
        if pol_actions is not None and q_pol is None:
            n = len(batch)
            q_both = q_cropped(critics, np.concatenate([batch.states, batch.states]),
                               np.concatenate([batch.actions, pol_actions]))
            q_data, q_pol = q_both[:n], q_both[n:]
        else:
            q_data = q_cropped(critics, batch.states, batch.actions)

        # value
        v_loss, v_grads = interpolated_value_loss(batch, pol_actions, critics, hp, q_data, q_pol)
        guard(v_loss, "value loss")
        adam_step(critics.v_net, v_grads, hp.lr_v)
        hook("v")

        # Q
        q_loss, q_grads = bellman_q_loss(batch, critics, hp)
        guard(q_loss, "q loss")
        for q_net, g in zip(critics.q_nets, q_grads):
            adam_step(q_net, g, hp.lr_q)
        hook("q")

        # policy. The Gaussian policies take a fresh draw independent of the value stage.
        if config.policy_kind != FLOW:
            pol_actions = q_pol = None
        if config.policy_kind == DET_INTERP:
            if hp.p > 0:
                pol_actions = sample_policy_actions(policy, batch.states, hp, streams["policy-samples"])
                q_pol = q_cropped(critics, batch.states, pol_actions)
            pi_loss, pi_grads = deterministic_interp_loss(batch, policy, critics, hp, pol_actions,
                                                          branch_inputs(batch, pol_actions, critics, hp, q_data, q_pol))
            gate_value = hp.p
            apply_policy_grads(policy, pi_grads, hp.lr_pi)
        else:
            gate = GateRealization.draw(hp.p, hp.gate_mode, len(batch), streams["gate"])
            gate_value = gate.value
            if config.policy_kind == FLOW:
                pi_loss, pi_grads = gated_fm_loss(batch, policy, critics, hp, gate, streams["policy-samples"],
                                                  pol_actions)
                guard(pi_loss, "policy loss")
                adam_step(policy.velocity_net, pi_grads, hp.lr_pi)
            else:
                if gate.draws.any():
                    pol_actions = sample_policy_actions(policy, batch.states, hp, streams["policy-samples"])
                    q_pol = q_cropped(critics, batch.states, pol_actions)
                pi_loss, pi_grads = gated_awr_loss(batch, policy, critics, hp, gate, pol_actions,
                                                   branch_inputs(batch, pol_actions, critics, hp, q_data, q_pol))
                guard(pi_loss, "policy loss")
                apply_policy_grads(policy, pi_grads, hp.lr_pi)
        guard(pi_loss, "policy loss")
        hook("pi")

        polyak_update(critics, hp.rho)
        hook("target")
    except NonFiniteError as exc:
        raise TrainingAborted(step, str(exc)) from exc
    state.step = step
    return TrainStepRecord(step, v_loss, q_loss, float(pi_loss), float(gate_value))


def sample_eval_actions(policy, config: TrainConfig, n: int, rng: SplitMix64, state_dim: int = 1) -> np.ndarray:
    """``n`` policy draws at the (constant) bandit state, clamped to the action box."""
    box = E.REWARD_FIELDS[config.env_id].action_box
    states = np.zeros((n, state_dim))
    if isinstance(policy, FlowPolicyParams):
        return sample_flow_action(policy, states, config.hp.w, config.hp.flow_steps, rng,
                                  config.hp.expand_token, box=box)
    return np.clip(sample_gaussian_action(policy, states, rng)[0], box[0], box[1])


def draw_eval_actions(state: TrainState, config: TrainConfig, n: int, rng: SplitMix64) -> np.ndarray:
    return sample_eval_actions(state.policy, config, n, rng, state.dataset.states.shape[1])


def score_actions(env_id: str, actions: np.ndarray) -> dict[str, float]:
    rewards = E.reward_fn(env_id)(actions)
    out = {
        "eval_reward_mean": float(np.mean(rewards)),
        "eval_danger_rate": float(np.mean(E.in_danger(actions))) if env_id == E.DANGER else None,
        "eval_opt_island_rate": float(np.mean(E.in_opt_island(actions))),
        "eval_subopt_island_rate": float(np.mean(E.in_subopt_island(actions))) if env_id == E.MULTIMODAL else None,
        "eval_dist_to_opt": float(np.mean(np.linalg.norm(actions - E.OPTIMUM, axis=1))),
    }
    return out


def evaluate(state: TrainState, config: TrainConfig) -> tuple[dict[str, float], np.ndarray]:
    actions = draw_eval_actions(state, config, config.eval_rollouts, state.streams["eval"])
    return score_actions(config.env_id, actions), actions


def save_checkpoints(state: TrainState, out_dir: str | Path, suffix: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = state.critics
    save_mlp(c.v_net, out / f"v{suffix}.bin")
    for i, (q, tq) in enumerate(zip(c.q_nets, c.target_q_nets)):
        save_mlp(q, out / f"q{i}{suffix}.bin")
        save_mlp(tq, out / f"q{i}_target{suffix}.bin")
    if isinstance(state.policy, FlowPolicyParams):
        save_mlp(state.policy.velocity_net, out / f"flow{suffix}.bin")
    else:
        save_mlp(state.policy.mean_net, out / f"pi_mean{suffix}.bin")
        (out / f"pi_log_std{suffix}.txt").write_text(" ".join(repr(float(x)) for x in state.policy.log_std.value))


def run_training(config: TrainConfig, out_dir: str | Path | None = None,
                 dataset: E.OfflineDataset | None = None, abort_on_divergence: bool = False,
                 state: TrainState | None = None) -> tuple[MetricsTable, TrainState]:
    """Run ``total_steps`` updates, evaluating every ``eval_every`` steps and at the end.

    A non-finite loss stops the run; the table records ``diverged_at`` unless
    ``abort_on_divergence`` asks for the exception to propagate.
    """
    state = state or init_state(config, dataset)
    table = MetricsTable()
    if out_dir is not None:
        save_checkpoints(state, out_dir, "_init")
    n = len(state.dataset)
    bs = config.hp.batch_size
    for _ in range(config.total_steps):
        idx = state.streams["batch"].integers(n, bs)
        try:
            rec = train_step(state, state.dataset.batch(idx), config)
        except TrainingAborted as exc:
            log.warning("run seed=%d p=%.3f aborted: %s", config.seed, config.hp.p, exc)
            if abort_on_divergence:
                raise
            table.diverged_at = exc.step
            break
        if rec.step % config.eval_every == 0 or rec.step == config.total_steps:
            rec.eval = evaluate(state, config)[0]
        table.records.append(rec)
    if out_dir is not None:
        if state.step > 0:
            save_checkpoints(state, out_dir)
        table.write(Path(out_dir) / "metrics.csv")
    return table, state


SWEEP_METRICS = ("eval_reward_mean", "eval_danger_rate", "eval_opt_island_rate", "eval_subopt_island_rate",
                 "eval_dist_to_opt")


@dataclass
class SweepRow:
    p: float
    n_runs: int
    n_diverged: int
    mean: dict[str, float]
    sem: dict[str, float]
    per_run: list[dict] = field(default_factory=list)


def aggregate(p: float, finals: list[dict | None]) -> SweepRow:
    ok = [f for f in finals if f is not None]
    mean, sem = {}, {}
    for k in SWEEP_METRICS:
        vals = np.array([f[k] for f in ok if f.get(k) is not None], dtype=np.float64)
        mean[k] = float(vals.mean()) if vals.size else float("nan")
        sem[k] = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return SweepRow(p, len(finals), len(finals) - len(ok), mean, sem, list(finals))


def child_configs(base: TrainConfig, p_grid: list[float], seeds: list[int]) -> list[TrainConfig]:
    """One config per (p, seed), identical to ``base`` otherwise."""
    out = []
    for p in p_grid:
        for seed in seeds:
            cfg = replace(base, hp=replace(base.hp, p=p), seed=seed)
            cfg.validate()
            out.append(cfg)
    return out


def p_sweep(base: TrainConfig, p_grid: list[float], seeds: list[int],
            out_dir: str | Path | None = None) -> list[SweepRow]:
    """One run per (p, seed); final evaluation aggregated as mean and SEM per p.

    A diverged run contributes ``None`` to ``per_run`` and counts in ``n_diverged``.
    """
    rows = []
    for p in p_grid:
        finals = []
        for cfg in child_configs(base, [p], seeds):
            run_dir = None if out_dir is None else Path(out_dir) / f"p{p:g}_seed{cfg.seed}"
            table, _ = run_training(cfg, run_dir)
            finals.append(None if table.diverged_at is not None else table.final_eval)
        rows.append(aggregate(p, finals))
    if out_dir is not None:
        write_sweep_csv(rows, Path(out_dir) / "sweep.csv")
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    header = ["p", "n_runs", "n_diverged"]
    for k in SWEEP_METRICS:
        header += [f"{k}_mean", f"{k}_sem"]
    wr.writerow(header)
    for r in rows:
        line = [repr(r.p), r.n_runs, r.n_diverged]
        for k in SWEEP_METRICS:
            line += [repr(r.mean[k]), repr(r.sem[k])]
        wr.writerow(line)
    return buf.getvalue()


def write_sweep_csv(rows: list[SweepRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(sweep_csv(rows))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    hp = d.pop("hp")
    return {**hp, **d}
