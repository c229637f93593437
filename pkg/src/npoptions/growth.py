"""Usage statistics and the grow-K rule for the truncated stick-breaking posterior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EncoderNet, OptionBank, bank_numpy


@dataclass
class GrowthConfig:
    enabled: bool = True
    interval: int = 10
    unit: str = "epochs"  # or "steps"
    delta: float = 0.5
    max_K: int = 64
    subsample: int | None = None

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("growth interval must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.unit not in ("epochs", "steps"):
            raise ValueError(f"unknown growth unit {self.unit!r}")


def policy_argmax_counts(states: np.ndarray, actions: np.ndarray, bank: OptionBank) -> np.ndarray:
    B, T = actions.shape
    logpi, _ = bank_numpy(bank, states[:, :T].reshape(B * T, -1))
    lp_a = logpi[np.arange(B * T), :, actions.reshape(-1)]  # (BT, K)
    best = np.argmax(lp_a, axis=1)  # first maximum, i.e. lowest index on ties
    return np.bincount(best, minlength=bank.K)


def compute_usage(states: np.ndarray, actions: np.ndarray, bank: OptionBank) -> np.ndarray:
    """Fraction of (trajectory, step) pairs whose action each option explains best."""
    if actions.size == 0:
        raise ValueError("cannot compute usage on an empty dataset")
    counts = policy_argmax_counts(states, actions, bank)
    return counts / counts.sum()


def should_grow(usage, delta: float) -> bool:
    """True iff every option's usage is at least ``delta / K``."""
    usage = np.asarray(usage, dtype=float)
    return bool(np.all(usage >= delta / len(usage)))


def expand(bank: OptionBank, encoder: EncoderNet, sticks, rng: np.random.Generator,
           max_K: int = 64) -> bool:
    """Add one option to every K-indexed structure. Returns False at the cap."""
    if bank.K >= max_K:
        return False
    bank.expand(rng)
    encoder.expand(rng)
    sticks.append(rng)
    return True
