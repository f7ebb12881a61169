"""2-D bandit reward fields, offline dataset generation and the dataset file format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix64

DANGER = "danger_bandit"
MULTIMODAL = "multimodal_bandit"
TABULAR = "tabular_chain"
ENV_IDS = (DANGER, MULTIMODAL, TABULAR)

OPTIMUM = np.array([2.0, 2.0])
DANGER_CENTER = np.array([4.0, 4.0])
DANGER_RADIUS = 1.0
DANGER_REWARD = -1000.0

SUBOPT_CENTER = np.array([-2.0, -2.0])
ISLAND_RADIUS = 1.0
OPT_PEAK = 100.0
SUBOPT_PEAK = 40.0
BACKGROUND_REWARD = -5.0


@dataclass(frozen=True)
class RewardField:
    env_id: str
    r_max: float  # max |reward| over the plane
    action_box: tuple[float, float]  # evaluation-time clamp, both coordinates


REWARD_FIELDS = {
    DANGER: RewardField(DANGER, r_max=abs(DANGER_REWARD), action_box=(-5.0, 5.0)),
    MULTIMODAL: RewardField(MULTIMODAL, r_max=OPT_PEAK, action_box=(-4.0, 4.0)),
}


def danger_bandit_reward(action) -> np.ndarray | float:
    """Quadratic bowl peaked at (2, 2); hard -1000 inside the danger disk at (4, 4)."""
    a = np.asarray(action, dtype=np.float64)
    d2_opt = np.sum((a - OPTIMUM) ** 2, axis=-1)
    in_danger = np.sum((a - DANGER_CENTER) ** 2, axis=-1) <= DANGER_RADIUS**2
    r = np.where(in_danger, DANGER_REWARD, -10.0 * d2_opt + 100.0)
    return float(r) if r.ndim == 0 else r


def multimodal_bandit_reward(action) -> np.ndarray | float:
    a = np.asarray(action, dtype=np.float64)
    d2_opt = np.sum((a - OPTIMUM) ** 2, axis=-1)
    d2_sub = np.sum((a - SUBOPT_CENTER) ** 2, axis=-1)
    r = np.full(d2_opt.shape, BACKGROUND_REWARD)
    r = np.where(d2_sub <= ISLAND_RADIUS**2, SUBOPT_PEAK * (1.0 - d2_sub), r)
    r = np.where(d2_opt <= ISLAND_RADIUS**2, OPT_PEAK * (1.0 - d2_opt), r)
    return float(r) if r.ndim == 0 else r


def reward_fn(env_id: str):
    if env_id == DANGER:
        return danger_bandit_reward
    if env_id == MULTIMODAL:
        return multimodal_bandit_reward
    raise ValueError(f"no continuous reward field for env {env_id!r}")


def in_danger(actions: np.ndarray) -> np.ndarray:
    return np.sum((actions - DANGER_CENTER) ** 2, axis=-1) <= DANGER_RADIUS**2


def in_opt_island(actions: np.ndarray) -> np.ndarray:
    return np.sum((actions - OPTIMUM) ** 2, axis=-1) <= ISLAND_RADIUS**2


def in_subopt_island(actions: np.ndarray) -> np.ndarray:
    return np.sum((actions - SUBOPT_CENTER) ** 2, axis=-1) <= ISLAND_RADIUS**2


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class OfflineDataset:
    """Column-stored transitions; ``transitions()`` gives the row view."""

    env_id: str
    rng_seed: int
    states: np.ndarray  # (n, state_dim)
    actions: np.ndarray  # (n, action_dim)
    rewards: np.ndarray  # (n,)
    next_states: np.ndarray
    dones: np.ndarray  # (n,) float 0/1

    def __post_init__(self):
        if len(self.rewards) == 0:
            raise ValueError("dataset must be non-empty")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite reward in dataset")

    def __len__(self) -> int:
        return len(self.rewards)

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i], bool(self.dones[i]))
            for i in range(len(self))
        ]

    def batch(self, idx: np.ndarray) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx])

    def full_batch(self) -> "Batch":
        return Batch(self.states, self.actions, self.rewards, self.next_states, self.dones)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


def _bandit_dataset(env_id: str, actions: np.ndarray, seed: int) -> OfflineDataset:
    n = len(actions)
    states = np.zeros((n, 1))
    rewards = np.asarray(reward_fn(env_id)(actions), dtype=np.float64).reshape(n)
    return OfflineDataset(env_id, seed, states, actions, rewards, states.copy(), np.ones(n))


def generate_danger_dataset(n: int, seed: int) -> OfflineDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = SplitMix64(seed).spawn("danger-dataset")
    actions = rng.uniform_range(-2.0, 2.0, (n, 2))
    return _bandit_dataset(DANGER, actions, seed)


def _uniform_disk(rng: SplitMix64, n: int, center: np.ndarray, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(n))
    theta = 2.0 * np.pi * rng.uniform(n)
    return center + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def generate_multimodal_dataset(n: int, seed: int) -> OfflineDataset:
    """floor(0.9 n) actions in the suboptimal disk, the rest in the optimal disk."""
    if n < 10:
        raise ValueError("n must be >= 10")
    rng = SplitMix64(seed).spawn("multimodal-dataset")
    n_sub = (9 * n) // 10
    actions = np.concatenate([
        _uniform_disk(rng, n_sub, SUBOPT_CENTER, ISLAND_RADIUS),
        _uniform_disk(rng, n - n_sub, OPTIMUM, ISLAND_RADIUS),
    ])
    return _bandit_dataset(MULTIMODAL, actions, seed)


def generate_dataset(env_id: str, n: int, seed: int) -> OfflineDataset:
    if env_id == DANGER:
        return generate_danger_dataset(n, seed)
    if env_id == MULTIMODAL:
        return generate_multimodal_dataset(n, seed)
    raise ValueError(f"cannot generate a continuous dataset for env {env_id!r}")


def save_dataset(ds: OfflineDataset, path: str | Path) -> None:
    """Header ``isep-dataset v1 <env_id> <n> <seed>`` then ``s0,a0,a1,r,done`` rows."""
    lines = [f"isep-dataset v1 {ds.env_id} {len(ds)} {ds.rng_seed}"]
    for s, a, r, d in zip(ds.states, ds.actions, ds.rewards, ds.dones):
        lines.append(f"{float(s[0])!r},{float(a[0])!r},{float(a[1])!r},{float(r)!r},{int(d)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> OfflineDataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty dataset file")
    head = text[0].split()
    if len(head) != 5 or head[:2] != ["isep-dataset", "v1"]:
        raise ValueError(f"{path}: bad header {text[0]!r}")
    env_id, n, seed = head[2], int(head[3]), int(head[4])
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if len(rows) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(rows)}")
    arr = np.array(rows, dtype=np.float64)
    states = arr[:, :1].copy()
    return OfflineDataset(env_id, seed, states, arr[:, 1:3].copy(), arr[:, 3].copy(), states.copy(), arr[:, 4].copy())
