"""Tabular environments augmented with skills, executed as semi-Markov actions.

An augmented action is either a primitive action (one base step, duration 1)
or a skill that runs until its termination fires, the episode ends, or the
duration cap is hit. Learning targets discount the bootstrap by ``gamma**tau``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class Skill:
    """Tabular skill: action distribution per state plus per-state stop probability.

    ``policy`` is ``(S,)`` integer actions (deterministic) or ``(S, A)`` rows of
    probabilities. ``termination`` is ``(S,)``, evaluated at the state reached
    after each step.
    """

    policy: np.ndarray
    termination: np.ndarray
    name: str = "skill"

    def action_probs(self, n_actions: int) -> np.ndarray:
        pol = np.asarray(self.policy)
        if pol.ndim == 1:
            return np.eye(n_actions)[pol.astype(np.int64)]
        return pol.astype(float)


@dataclass
class AugmentedEnv:
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A), expected reward of taking a in s
    gamma: float
    skills: list[Skill] = field(default_factory=list)
    cap: int = 15
    terminal: np.ndarray | None = None  # (S,) bool
    start: int | None = None  # None: uniform over non-terminal states

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        S, A = self.rewards.shape
        if self.transitions.shape != (S, A, S):
            raise ValueError(f"transitions must have shape {(S, A, S)}, got {self.transitions.shape}")
        if np.any(self.transitions < 0) or not np.allclose(self.transitions.sum(-1), 1.0):
            raise ValueError("transition rows must be probability vectors")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.cap < 1:
            raise ValueError("duration cap must be >= 1")
        self.terminal = (np.zeros(S, dtype=bool) if self.terminal is None
                         else np.asarray(self.terminal, dtype=bool))
        for sk in self.skills:
            sk.termination = np.broadcast_to(np.asarray(sk.termination, dtype=float), (S,)).copy()
            probs = sk.action_probs(A)
            if probs.shape != (S, A) or not np.allclose(probs.sum(-1), 1.0):
                raise ValueError(f"skill {sk.name!r} policy does not match the base MDP")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_primitive(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_actions(self) -> int:
        return self.n_primitive + len(self.skills)

    def without_skills(self) -> "AugmentedEnv":
        return AugmentedEnv(self.transitions, self.rewards, self.gamma, [], self.cap,
                            self.terminal, self.start)

    def reset(self, rng: np.random.Generator) -> int:
        if self.start is not None:
            return int(self.start)
        return int(rng.choice(np.flatnonzero(~self.terminal)))


@dataclass(frozen=True)
class ReplayEntry:
    state: int
    action: int
    next_state: int
    reward: float  # sum of gamma**k * r_k over k = 0..tau-1
    tau: int
    done: bool = False


def _base_step(env: AugmentedEnv, s: int, a: int, rng) -> tuple[int, float]:
    s2 = int(rng.choice(env.n_states, p=env.transitions[s, a]))
    return s2, float(env.rewards[s, a])


def augmented_step(env: AugmentedEnv, state: int, aug_action: int, rng: np.random.Generator,
                   reward_log: list | None = None) -> tuple[int, float, int]:
    """Execute one augmented action; returns ``(next_state, discounted_reward, tau)``.

    Per-step raw rewards are appended to ``reward_log`` when given.
    """
    if not 0 <= aug_action < env.n_actions:
        raise ValueError(f"action {aug_action} out of range for {env.n_actions} actions")
    if aug_action < env.n_primitive:
        s2, r = _base_step(env, state, aug_action, rng)
        if reward_log is not None:
            reward_log.append(r)
        return s2, r, 1
    skill = env.skills[aug_action - env.n_primitive]
    probs = skill.action_probs(env.n_primitive)
    s, total, tau = state, 0.0, 0
    while True:
        a = int(rng.choice(env.n_primitive, p=probs[s]))
        s, r = _base_step(env, s, a, rng)
        if reward_log is not None:
            reward_log.append(r)
        total += env.gamma ** tau * r
        tau += 1
        if env.terminal[s] or tau >= env.cap:
            break
        stop = skill.termination[s]
        if stop >= 1.0 or (stop > 0.0 and rng.uniform() < stop):
            break
    return s, total, tau


def q_update(Q: np.ndarray, entry: ReplayEntry, gamma: float, lr: float,
             naive: bool = False) -> np.ndarray:
    """In-place SMDP Q-learning step. ``naive`` uses ``gamma`` instead of ``gamma**tau``."""
    if not 0.0 < lr <= 1.0:
        raise ValueError("learning rate must lie in (0, 1]")
    boot = 0.0 if entry.done else float(np.max(Q[entry.next_state]))
    disc = gamma if naive else gamma ** entry.tau
    target = entry.reward + disc * boot
    Q[entry.state, entry.action] += lr * (target - Q[entry.state, entry.action])
    return Q


def skill_kernels(env: AugmentedEnv, skill: Skill,
                  naive: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Expected discounted reward ``(S,)`` and discounted end-state kernel ``(S, S)``.

    ``M[s, s'] = sum_tau gamma**tau P(skill started in s ends in s' after tau steps)``,
    by enumerating durations up to the cap. ``naive`` weights every duration by
    a single ``gamma`` instead.
    """
    S, A = env.n_states, env.n_primitive
    probs = skill.action_probs(A)
    step = np.einsum("xa,xay->xy", probs, env.transitions)  # one skill step
    r_step = (probs * env.rewards).sum(-1)
    running = np.eye(S)  # start -> current state, mass still executing
    rbar = np.zeros(S)
    M = np.zeros((S, S))
    stop = np.where(env.terminal, 1.0, skill.termination)
    for k in range(env.cap):
        rbar += env.gamma ** k * running @ r_step
        nxt = running @ step
        halt = np.ones(S) if k == env.cap - 1 else stop
        M += (env.gamma if naive else env.gamma ** (k + 1)) * nxt * halt
        running = nxt * (1.0 - halt)
        if not running.any():
            break
    return rbar, M


def _bellman(env: AugmentedEnv, Q: np.ndarray, kernels) -> np.ndarray:
    A = env.n_primitive
    live = ~env.terminal
    V = np.where(live, Q.max(axis=1), 0.0)
    new = np.empty_like(Q)
    new[:, :A] = env.rewards + env.gamma * env.transitions @ V
    for j, (rbar, M) in enumerate(kernels):
        new[:, A + j] = rbar + M @ V
    new[~live] = 0.0
    return new


def smdp_value_iteration(env: AugmentedEnv, tol: float = 1e-10, max_iter: int = 100_000,
                         naive: bool = False) -> np.ndarray:
    """Optimal augmented Q-table by iterating the SMDP Bellman operator.

    With ``naive`` every skill bootstrap is discounted by one ``gamma``,
    which is the fixed point uncorrected Q-learning converges to.
    """
    kernels = [skill_kernels(env, sk, naive) for sk in env.skills]
    Q = np.zeros((env.n_states, env.n_actions))
    for _ in range(max_iter):
        new = _bellman(env, Q, kernels)
        if np.max(np.abs(new - Q)) < tol:
            return new
        Q = new
    raise RuntimeError("value iteration did not converge")


def bellman_residual(env: AugmentedEnv, Q: np.ndarray) -> float:
    kernels = [skill_kernels(env, sk) for sk in env.skills]
    return float(np.max(np.abs(_bellman(env, Q, kernels) - Q)))


def q_gap(Q: np.ndarray, Q_star: np.ndarray, env: AugmentedEnv) -> float:
    live = ~env.terminal
    return float(np.max(np.abs(Q[live] - Q_star[live])))


@dataclass
class LearnerConfig:
    steps: int = 50_000
    lr: float = 0.5
    epsilon: float = 0.1
    epsilon_final: float = 0.0
    log_every: int = 1000
    max_episode_steps: int = 200
    naive: bool = False


def q_learning(env: AugmentedEnv, config: LearnerConfig, rng: np.random.Generator,
               oracle: np.ndarray | None = None):
    """Epsilon-greedy SMDP Q-learning with a linearly decaying epsilon.

    Returns the Q-table and learning-curve rows ``{step, mean_return, q_gap}``;
    ``mean_return`` averages the undiscounted returns of episodes finished
    since the previous row.
    """
    Q = np.zeros((env.n_states, env.n_actions))
    rows: list[dict] = []
    returns: list[float] = []
    s = env.reset(rng)
    ep_return, ep_len = 0.0, 0
    for step in range(1, config.steps + 1):
        frac = (step - 1) / max(1, config.steps - 1)
        eps = config.epsilon + (config.epsilon_final - config.epsilon) * frac
        if rng.uniform() < eps:
            a = int(rng.integers(env.n_actions))
        else:
            best = np.flatnonzero(Q[s] == Q[s].max())
            a = int(rng.choice(best))
        raw: list[float] = []
        s2, R, tau = augmented_step(env, s, a, rng, raw)
        done = bool(env.terminal[s2])
        q_update(Q, ReplayEntry(s, a, s2, R, tau, done), env.gamma, config.lr, config.naive)
        ep_return += sum(raw)
        ep_len += tau
        s = s2
        if done or ep_len >= config.max_episode_steps:
            returns.append(ep_return)
            s = env.reset(rng)
            ep_return, ep_len = 0.0, 0
        if step % config.log_every == 0 or step == config.steps:
            rows.append({"step": step,
                         "mean_return": float(np.mean(returns)) if returns else float("nan"),
                         "q_gap": q_gap(Q, oracle, env) if oracle is not None else float("nan")})
            returns = []
    return Q, rows


def write_curve(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "mean_return", "q_gap"])
        w.writeheader()
        w.writerows(rows)


# -- bundled environment and spec files ----------------------------------------

def chain_env(n_states: int = 6, gamma: float = 0.9) -> AugmentedEnv:
    """Deterministic chain: left/right moves, reward 1 on reaching the right end.

    The last state is terminal. One skill moves right for exactly two steps
    (never terminates on its own; the cap of 2 ends it).
    """
    S = n_states
    P = np.zeros((S, 2, S))
    R = np.zeros((S, 2))
    for s in range(S):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, S - 1)] = 1.0
        if s + 1 == S - 1:
            R[s, 1] = 1.0
    P[S - 1, :, :] = 0.0
    P[S - 1, :, S - 1] = 1.0
    R[S - 1] = 0.0
    terminal = np.zeros(S, dtype=bool)
    terminal[-1] = True
    right = Skill(np.ones(S, dtype=np.int64), np.zeros(S), name="right2")
    return AugmentedEnv(P, R, gamma, [right], cap=2, terminal=terminal)


def skills_from_checkpoint(checkpoint, features: np.ndarray, names: Sequence[str] | None = None):
    """Wrap each option of a trained model as a greedy tabular skill.

    ``features[s]`` is the network input for tabular state ``s``.
    """
    from .training import load_checkpoint

    state = checkpoint if hasattr(checkpoint, "bank") else load_checkpoint(checkpoint)
    bank = state.bank
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != bank.state_dim:
        raise ValueError(f"features must be (S, {bank.state_dim}), got {features.shape}")
    logpi = bank.log_policy(features).data  # (S, K, A)
    psi = bank.termination(features).data  # (S, K)
    return [Skill(np.argmax(logpi[:, k], axis=-1), psi[:, k].copy(),
                  name=names[k] if names else f"option{k}")
            for k in range(bank.K)]


def env_to_spec(env: AugmentedEnv) -> dict:
    return {
        "states": env.n_states,
        "actions": env.n_primitive,
        "transitions": env.transitions.tolist(),
        "rewards": env.rewards.tolist(),
        "gamma": env.gamma,
        "cap": env.cap,
        "terminal": np.flatnonzero(env.terminal).tolist(),
        "start": env.start,
        "skills": [{"name": sk.name, "policy": np.asarray(sk.policy).tolist(),
                    "termination": sk.termination.tolist()} for sk in env.skills],
    }


def env_from_spec(spec: dict | str | Path, base_dir: Path | None = None) -> AugmentedEnv:
    """Build an env from its JSON spec; skills may reference a checkpoint file.

    A checkpoint skill entry looks like ``{"checkpoint": path, "features": [[...]]}``
    and expands to one skill per learned option.
    """
    if not isinstance(spec, dict):
        path = Path(spec)
        base_dir = path.parent
        spec = json.loads(path.read_text())
    S = spec["states"] if isinstance(spec["states"], int) else len(spec["states"])
    A = spec["actions"] if isinstance(spec["actions"], int) else len(spec["actions"])
    P = np.asarray(spec["transitions"], dtype=float).reshape(S, A, S)
    R = np.asarray(spec["rewards"], dtype=float).reshape(S, A)
    terminal = np.zeros(S, dtype=bool)
    terminal[np.asarray(spec.get("terminal", []), dtype=np.int64)] = True
    skills: list[Skill] = []
    for i, sk in enumerate(spec.get("skills", [])):
        if "checkpoint" in sk:
            ref = Path(sk["checkpoint"])
            if base_dir is not None and not ref.is_absolute():
                ref = base_dir / ref
            skills.extend(skills_from_checkpoint(ref, sk["features"]))
            continue
        term = sk.get("termination", 0.0)
        skills.append(Skill(np.asarray(sk["policy"]), np.broadcast_to(np.asarray(term, float), (S,)),
                            name=sk.get("name", f"skill{i}")))
    return AugmentedEnv(P, R, float(spec["gamma"]), skills, int(spec.get("cap", 15)),
                        terminal, spec.get("start"))
