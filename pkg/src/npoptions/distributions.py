"""Reparameterized samplers and log-densities.

Gumbel-Softmax (Concrete) relaxations of categorical / Bernoulli draws,
Kumaraswamy sticks, stick breaking, and the Monte-Carlo KL between
Kumaraswamy sticks and the GEM prior's Beta(1, alpha) sticks.

Every sampler takes its base noise explicitly so that draws are
reproducible and gradients are pathwise.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STICK_EPS = 1e-6


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(log_weights, temperature: float, noise) -> tuple[Tensor, Tensor]:
    """Relaxed one-hot draw ``softmax((noise + log_weights) / temperature)``.

    ``log_weights`` need not be normalized; any trailing-axis offset cancels.
    Returns ``(sample, log_sample)`` where the second is computed stably
    through log-softmax.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    log_weights = _lift(log_weights)
    if not np.all(np.isfinite(log_weights.data)):
        raise ad.NonFiniteError("log_weights must be finite")
    z = (log_weights + np.asarray(noise, dtype=float)) * (1.0 / temperature)
    log_y = ad.log_softmax(z)
    return ad.exp(log_y), log_y


def concrete_log_density(log_weights, log_sample, temperature: float) -> Tensor:
    """Log-density of a Concrete sample on the simplex.

    Density is taken with respect to Lebesgue measure on the first K-1
    coordinates. For K=2 this is the binary Concrete density of the first
    coordinate; for K=1 the sample is a point mass and the result is 0.
    """
    log_weights = _lift(log_weights)
    log_sample = _lift(log_sample)
    k = log_weights.shape[-1]
    if k == 1:
        return Tensor(np.zeros(log_weights.shape[:-1]))
    lp = ad.log_softmax(log_weights)
    t = float(temperature)
    const = math.lgamma(k) + (k - 1) * math.log(t)
    a = (lp - log_sample * (t + 1.0)).sum(axis=-1)
    b = ad.logsumexp(lp - log_sample * t, axis=-1)
    return a - b * float(k) + const


def categorical_log_mass(log_weights, one_hot) -> Tensor:
    lp = ad.log_softmax(_lift(log_weights))
    return (lp * _lift(one_hot)).sum(axis=-1)


def kumaraswamy_sample(a1, a2, u) -> Tensor:
    """Inverse-CDF draw ``(1 - (1 - u)^(1/a2))^(1/a1)``."""
    a1, a2 = _lift(a1), _lift(a2)
    if np.any(a1.data <= 0) or np.any(a2.data <= 0):
        raise ValueError("Kumaraswamy parameters must be > 0")
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform draw must lie in (0, 1)")
    inner = ad.exp(Tensor(np.log1p(-u)) / a2)  # (1-u)^(1/a2)
    base = ad.clamp_min(1.0 - inner, 1e-300)
    return ad.exp(ad.log(base) / a1)


def kumaraswamy_log_density(x, a1, a2) -> Tensor:
    a1, a2 = _lift(a1), _lift(a2)
    x = ad.clamp(_lift(x), STICK_EPS, 1.0 - STICK_EPS)
    logx = ad.log(x)
    xa = ad.exp(logx * a1)
    return (ad.log(a1) + ad.log(a2) + (a1 - 1.0) * logx
            + (a2 - 1.0) * ad.log(ad.clamp_min(1.0 - xa, 1e-300)))


def kumaraswamy_density(x, a1: float, a2: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return a1 * a2 * x ** (a1 - 1.0) * (1.0 - x ** a1) ** (a2 - 1.0)


def beta1_log_density(x, alpha) -> Tensor:
    """log Beta(x | 1, alpha) = log alpha + (alpha - 1) log(1 - x)."""
    alpha = _lift(alpha)
    x = ad.clamp(_lift(x), STICK_EPS, 1.0 - STICK_EPS)
    return ad.log(alpha) + (alpha - 1.0) * ad.log(1.0 - x)


def stick_break(fractions) -> Tensor:
    """Map K-1 stick fractions to a length-K probability vector.

    The last coordinate is the remaining stick, so the output always sums
    to one.
    """
    fractions = _lift(fractions)
    f = fractions.data
    if np.any(f <= 0) or np.any(f >= 1):
        raise ValueError("stick fractions must lie strictly in (0, 1)")
    n = fractions.shape[-1]
    if n == 0:
        return Tensor(np.ones(fractions.shape[:-1] + (1,)))
    pieces = []
    remaining = None
    for k in range(n):
        frac = fractions[..., k:k + 1]
        pieces.append(frac if remaining is None else frac * remaining)
        rest = 1.0 - frac
        remaining = rest if remaining is None else remaining * rest
    pieces.append(remaining)
    return ad.concat(pieces, axis=-1)


class StickParams:
    """Unconstrained parameters of K-1 Kumaraswamy sticks (softplus-mapped)."""

    def __init__(self, raw_a1: np.ndarray, raw_a2: np.ndarray):
        self.raw_a1 = Tensor(np.asarray(raw_a1, dtype=float), requires_grad=True, name="stick_a1")
        self.raw_a2 = Tensor(np.asarray(raw_a2, dtype=float), requires_grad=True, name="stick_a2")

    @classmethod
    def init(cls, n_sticks: int, rng: np.random.Generator | None = None) -> "StickParams":
        # softplus^-1(1) ~ 0.5413 so the sticks start near Kumaraswamy(1, 1)
        base = math.log(math.e - 1.0)
        jitter = (rng.uniform(-0.1, 0.1, size=(2, n_sticks)) if rng is not None
                  else np.zeros((2, n_sticks)))
        return cls(base + jitter[0], base + jitter[1])

    @classmethod
    def from_positive(cls, a1, a2) -> "StickParams":
        a1, a2 = np.asarray(a1, dtype=float), np.asarray(a2, dtype=float)
        return cls(np.log(np.expm1(a1)), np.log(np.expm1(a2)))

    @property
    def n_sticks(self) -> int:
        return self.raw_a1.shape[0]

    def a1(self) -> Tensor:
        return ad.softplus(self.raw_a1)

    def a2(self) -> Tensor:
        return ad.softplus(self.raw_a2)

    def parameters(self) -> dict[str, Tensor]:
        return {"stick_a1": self.raw_a1, "stick_a2": self.raw_a2}

    def append(self, rng: np.random.Generator) -> None:
        new = StickParams.init(1, rng)
        self.raw_a1.data = np.concatenate([self.raw_a1.data, new.raw_a1.data])
        self.raw_a2.data = np.concatenate([self.raw_a2.data, new.raw_a2.data])
        self.raw_a1.zero_grad()
        self.raw_a2.zero_grad()

    def sample(self, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """Draw stick fractions and the resulting probability vector."""
        u = rng.uniform(1e-12, 1.0 - 1e-12, size=self.n_sticks)
        v = kumaraswamy_sample(self.a1(), self.a2(), u)
        v = ad.clamp(v, STICK_EPS, 1.0 - STICK_EPS)
        return v, stick_break(v)

    def point_estimate(self) -> np.ndarray:
        """Probability vector from each stick's mode (median when no interior mode)."""
        a1 = self.a1().data
        a2 = self.a2().data
        med = (1.0 - 0.5 ** (1.0 / a2)) ** (1.0 / a1)
        with np.errstate(divide="ignore", invalid="ignore"):
            mode = ((a1 - 1.0) / (a1 * a2 - 1.0)) ** (1.0 / a1)
        frac = np.where((a1 > 1.0) & (a2 > 1.0), mode, med)
        return stick_break(np.clip(frac, STICK_EPS, 1.0 - STICK_EPS)).data


class GemPrior:
    """GEM(alpha) prior with alpha = softplus(raw); optionally frozen."""

    def __init__(self, alpha: float = 1.0, learnable: bool = True):
        self.raw = Tensor(np.array(math.log(math.expm1(alpha))), requires_grad=learnable,
                          name="gem_alpha")
        self.learnable = learnable

    def alpha(self) -> Tensor:
        return ad.softplus(self.raw)

    @property
    def value(self) -> float:
        return float(np.logaddexp(0.0, self.raw.data))

    def parameters(self) -> dict[str, Tensor]:
        return {"gem_alpha": self.raw} if self.learnable else {}


def kl_sticks_terms(fractions, a1, a2, alpha) -> Tensor:
    """Per-sample ``sum_k log q(v_k) - log Beta(v_k | 1, alpha)``."""
    lq = kumaraswamy_log_density(fractions, a1, a2)
    lp = beta1_log_density(fractions, alpha)
    return (lq - lp).sum(axis=-1)


def kl_sticks_mc(q: StickParams, prior: GemPrior, n_samples: int,
                 rng: np.random.Generator) -> tuple[Tensor, float]:
    """Monte-Carlo KL(q(sticks) || Beta(1, alpha) sticks).

    Returns the differentiable estimate and its Monte-Carlo standard error.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    k = q.n_sticks
    if k == 0:
        return Tensor(0.0), 0.0
    a1 = q.a1().reshape(1, k)
    a2 = q.a2().reshape(1, k)
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=(n_samples, k))
    inner = Tensor(np.log1p(-u))
    v = ad.exp(ad.log(ad.clamp_min(1.0 - ad.exp(inner / a2), 1e-300)) / a1)
    per = kl_sticks_terms(v, a1, a2, prior.alpha())
    se = float(per.data.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("nan")
    return per.mean(), se
