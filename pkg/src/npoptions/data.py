"""Trajectories, generators, and the JSON Lines dataset format.

File layout: the first line is a header object
``{"format_version": 1, "state_dim": D, "n_actions": A, "T": T}`` and each
following line holds one trajectory ``{"states": [[...], ...], "actions": [...]}``.
A zero-byte file reads as an empty dataset.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, record: int | None = None):
        self.line = line
        self.record = record
        where = []
        if record is not None:
            where.append(f"record {record}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, state_dim)
    actions: np.ndarray  # (T,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.states.ndim != 2 or self.actions.ndim != 1:
            raise ValueError("states must be 2-D and actions 1-D")
        if len(self.states) != len(self.actions) + 1:
            raise ValueError(f"need len(states) == len(actions) + 1, got "
                             f"{len(self.states)} and {len(self.actions)}")
        if np.any(self.actions < 0):
            raise ValueError("action indices must be non-negative")

    @property
    def T(self) -> int:
        return len(self.actions)

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions))


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    state_dim: int
    n_actions: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def T(self) -> int | None:
        lengths = {t.T for t in self.trajectories}
        return lengths.pop() if len(lengths) == 1 else None

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack into ``(N, T+1, D)`` states and ``(N, T)`` actions."""
        if self.T is None:
            raise ValueError("trajectories have differing lengths; cannot stack")
        states = np.stack([t.states for t in self.trajectories])
        actions = np.stack([t.actions for t in self.trajectories])
        return states, actions


@dataclass
class LatentAssignment:
    """Per-step terminations ``b`` (T,) and options ``h`` (T, K); discrete or relaxed."""

    b: np.ndarray
    h: np.ndarray

    @property
    def option_indices(self) -> np.ndarray:
        return np.argmax(self.h, axis=-1)


@dataclass
class HierarchicalPolicy:
    """State-independent option weights plus per-option policies and terminations.

    ``policies[k](s)`` returns a distribution over actions; ``terminations[k](s)``
    returns a probability.
    """

    eta: np.ndarray
    policies: Sequence[Callable[[np.ndarray], np.ndarray]]
    terminations: Sequence[Callable[[np.ndarray], float]]

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if len(self.policies) != len(self.eta) or len(self.terminations) != len(self.eta):
            raise ValueError("eta, policies and terminations must have equal length")

    @property
    def K(self) -> int:
        return len(self.eta)


class Env:
    """Minimal environment protocol used by the samplers."""

    state_dim: int
    n_actions: int

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class RandomWalkEnv(Env):
    """Synthetic continuous-state env: a drift per action plus Gaussian noise."""

    def __init__(self, state_dim: int = 2, n_actions: int = 3, noise: float = 0.1, seed: int = 0):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.noise = noise
        self.drifts = np.random.default_rng(seed).normal(size=(n_actions, state_dim))

    def reset(self, rng):
        return rng.normal(size=self.state_dim)

    def step(self, state, action, rng):
        nxt = 0.8 * state + 0.5 * self.drifts[action] + self.noise * rng.normal(size=self.state_dim)
        return nxt


def sample_options_trajectory(policy: HierarchicalPolicy, env: Env, T: int,
                              rng: np.random.Generator) -> tuple[Trajectory, LatentAssignment]:
    """Generate one trajectory from a two-level option hierarchy.

    A new option is drawn from ``policy.eta`` whenever the previous one
    terminated (always at t=0); otherwise the option carries over.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    K = policy.K
    s = env.reset(rng)
    states = [s]
    actions = []
    b = np.zeros(T)
    h = np.zeros(T, dtype=np.int64)
    b_t = 1
    for t in range(T):
        b[t] = b_t
        if b_t == 1:
            h[t] = rng.choice(K, p=policy.eta)
        else:
            h[t] = h[t - 1]
        probs = np.asarray(policy.policies[h[t]](s), dtype=float)
        a = int(rng.choice(len(probs), p=probs))
        s = env.step(s, a, rng)
        actions.append(a)
        states.append(s)
        b_t = int(rng.uniform() < policy.terminations[h[t]](s))
    onehot = np.eye(K)[h]
    return Trajectory(np.array(states), np.array(actions)), LatentAssignment(b, onehot)


def sample_compile_trajectory(skills: Sequence[Callable[[np.ndarray], np.ndarray]], rate: float,
                              K: int, T: int, rng: np.random.Generator, env: Env | None = None,
                              eta: np.ndarray | None = None, with_draws: bool = False):
    """Generate a trajectory from Poisson-length skill segments.

    Returns ``(trajectory, boundaries, segment_skills)``; ``boundaries[j]`` is the
    cumulative end of segment j. Skills are uniform unless ``eta`` is given.
    Zero-length draws are consumed by the inner loop without producing a
    segment, so recorded boundaries are strictly increasing. With
    ``with_draws`` the raw Poisson draws are returned as a fourth item.
    """
    if rate <= 0:
        raise ValueError("Poisson rate must be > 0")
    if T < 1:
        raise ValueError("T must be >= 1")
    if env is None:
        env = RandomWalkEnv(state_dim=2, n_actions=len(skills[0](np.zeros(2))))
    weights = np.full(K, 1.0 / K) if eta is None else np.asarray(eta, dtype=float)
    s = env.reset(rng)
    states, actions = [s], []
    boundaries: list[int] = []
    seg_skills: list[int] = []
    draws: list[int] = []
    end = 0
    cur = -1
    for t in range(T):
        while t == end:
            cur = int(rng.choice(K, p=weights))
            draws.append(int(rng.poisson(rate)))
            end = end + draws[-1]
            if end > t:
                boundaries.append(end)
                seg_skills.append(cur)
        probs = np.asarray(skills[cur](s), dtype=float)
        a = int(rng.choice(len(probs), p=probs))
        s = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
    out = (Trajectory(np.array(states), np.array(actions)), np.array(boundaries), np.array(seg_skills))
    return out + (np.array(draws),) if with_draws else out


def random_linear_policies(K: int, env: Env, rng: np.random.Generator, scale: float = 2.0):
    """K softmax-linear action distributions over the env's state features."""
    W = rng.normal(scale=scale, size=(K, env.state_dim, env.n_actions))
    bias = rng.normal(scale=scale, size=(K, env.n_actions))

    def make(k):
        def policy(s):
            z = np.asarray(s) @ W[k] + bias[k]
            z = np.exp(z - z.max())
            return z / z.sum()
        return policy
    return [make(k) for k in range(K)]


def synthetic_options_dataset(n_trajectories: int, T: int, K: int, rng: np.random.Generator,
                              n_actions: int = 3, state_dim: int = 2) -> Dataset:
    """Trajectories from a random K-option hierarchy on a random-walk env."""
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    env = RandomWalkEnv(state_dim, n_actions, seed=int(rng.integers(2**31)))
    stop = rng.uniform(0.05, 0.4, size=K)
    policy = HierarchicalPolicy(rng.dirichlet(np.ones(K)), random_linear_policies(K, env, rng),
                                [lambda s, p=p: p for p in stop])
    trajs = [sample_options_trajectory(policy, env, T, rng)[0] for _ in range(n_trajectories)]
    return Dataset(trajs, state_dim, n_actions, meta={"env": "options-synthetic", "K": K})


def synthetic_compile_dataset(n_trajectories: int, T: int, K: int, rng: np.random.Generator,
                              rate: float = 3.0, n_actions: int = 3,
                              state_dim: int = 2) -> Dataset:
    """Trajectories from Poisson-length segments of K random skills."""
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    env = RandomWalkEnv(state_dim, n_actions, seed=int(rng.integers(2**31)))
    skills = random_linear_policies(K, env, rng)
    trajs = [sample_compile_trajectory(skills, rate, K, T, rng, env=env)[0]
             for _ in range(n_trajectories)]
    return Dataset(trajs, state_dim, n_actions,
                   meta={"env": "compile-synthetic", "K": K, "rate": rate})


# -- proof-of-concept message environment -------------------------------------

MESSAGE_T = 5


@dataclass(frozen=True)
class MessageEnvConfig:
    """Recall-a-message task: see m at t=0, emit it at t=4.

    ``filler`` selects the expert's actions before the final step: "constant"
    emits action 0, "repeat" emits m at every step.
    """

    n_vocab: int
    filler: str = "repeat"

    def __post_init__(self):
        if self.n_vocab < 2:
            raise ValueError("n_vocab must be >= 2")
        if self.filler not in ("constant", "repeat"):
            raise ValueError(f"unknown filler {self.filler!r}")

    @property
    def horizon(self) -> int:
        return MESSAGE_T


def message_states(m: int) -> np.ndarray:
    return np.array([[0.0, float(m)]] + [[float(t), -1.0] for t in range(1, MESSAGE_T)])


def message_expert_actions(m: int, config: MessageEnvConfig) -> np.ndarray:
    fill = m if config.filler == "repeat" else 0
    return np.array([fill] * (MESSAGE_T - 1) + [m], dtype=np.int64)


def message_env_expert(config: MessageEnvConfig, n_trajectories: int,
                       rng: np.random.Generator) -> Dataset:
    """Expert demonstrations for the message task.

    Each trajectory has 5 observations (t=0..4) and 5 actions; the final
    action a_4 equals the message. The trailing state slot required by the
    trajectory layout repeats the t=4 observation with t=5.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    msgs = rng.integers(0, config.n_vocab, size=n_trajectories)
    trajs = []
    for m in msgs:
        obs = message_states(int(m))
        states = np.vstack([obs, [[float(MESSAGE_T), -1.0]]])
        trajs.append(Trajectory(states, message_expert_actions(int(m), config)))
    return Dataset(trajs, state_dim=2, n_actions=config.n_vocab,
                   meta={"env": "message", "n_vocab": config.n_vocab, "filler": config.filler})


def message_success(actions: np.ndarray, m: int) -> bool:
    return int(actions[MESSAGE_T - 1]) == int(m)


# -- JSON Lines IO ---------------------------------------------------------------

def dataset_write(dataset: Dataset, path) -> None:
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, "state_dim": dataset.state_dim,
              "n_actions": dataset.n_actions, "T": dataset.T}
    header.update({k: v for k, v in dataset.meta.items() if k not in header})
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for traj in dataset:
            # repr-based floats round-trip exactly through json
            rec = {"states": traj.states.tolist(), "actions": traj.actions.tolist()}
            fh.write(json.dumps(rec) + "\n")


def iter_records(path) -> Iterable[tuple[int, dict]]:
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"malformed JSON: {exc.msg}", line=lineno,
                                         record=lineno - 2) from None


def dataset_read(path) -> Dataset:
    """Read a dataset written by :func:`dataset_write`; streams one record at a time."""
    path = Path(path)
    if path.stat().st_size == 0:
        return Dataset([], state_dim=0, n_actions=0)
    records = iter_records(path)
    try:
        lineno, header = next(records)
    except StopIteration:
        return Dataset([], state_dim=0, n_actions=0)
    if header.get("format_version") != FORMAT_VERSION or "state_dim" not in header:
        raise DatasetFormatError("missing or unsupported header", line=lineno)
    state_dim, n_actions = int(header["state_dim"]), int(header["n_actions"])
    trajs = []
    for lineno, rec in records:
        idx = len(trajs)
        try:
            traj = Trajectory(rec["states"], rec["actions"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"invalid trajectory: {exc}", line=lineno, record=idx) from None
        if traj.states.shape[1] != state_dim or np.any(traj.actions >= n_actions):
            raise DatasetFormatError("trajectory inconsistent with header", line=lineno, record=idx)
        trajs.append(traj)
    meta = {k: v for k, v in header.items()
            if k not in ("format_version", "state_dim", "n_actions", "T")}
    return Dataset(trajs, state_dim=state_dim, n_actions=n_actions, meta=meta)
