"""Option model, amortized encoder, relaxed ELBO, and the exact forward oracle.

Batched conventions: ``states`` is ``(B, T+1, D)``, ``actions`` is ``(B, T)``,
sampled terminations ``b`` are ``(B, T)`` and options ``h`` are ``(B, T, K)``.
``eta`` is a length-K probability vector shared by the whole batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import autodiff as ad
from . import distributions as dist
from .autodiff import NonFiniteError, ShapeError, Tensor

LOG_FLOOR = 1e-10


def _param(rng, fan_in, shape, name):
    return Tensor(ad.uniform_init(rng, fan_in, shape), requires_grad=True, name=name)


def _zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _append_cols(p: Tensor, cols: np.ndarray) -> None:
    p.data = np.concatenate([p.data, cols], axis=-1)
    p.zero_grad()


def _append_rows(p: Tensor, rows: np.ndarray) -> None:
    p.data = np.concatenate([p.data, rows], axis=0)
    p.zero_grad()


class Module:
    """Named-parameter container; subclasses fill ``self.params``."""

    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = np.asarray(v, dtype=float).copy()
            self.params[k].zero_grad()


def _mlp_trunk(x: Tensor, layers) -> Tensor:
    for w, b in layers:
        x = ad.relu(ad.matmul(x, w) + b)
    return x


class OptionBank(Module):
    """K low-level policies and a termination network.

    Policies share their hidden layers; each option owns an output block of
    the last layer. The termination network is a separate MLP with one
    sigmoid output per option.
    """

    def __init__(self, state_dim: int, n_actions: int, K: int, rng: np.random.Generator,
                 hidden: tuple[int, int] = (16, 16)):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.state_dim, self.n_actions, self.K = state_dim, n_actions, K
        self.hidden = tuple(hidden)
        h1, h2 = self.hidden
        p = {}
        for pre in ("pol", "term"):
            p[f"{pre}_w1"] = _param(rng, state_dim, (state_dim, h1), f"{pre}_w1")
            p[f"{pre}_b1"] = _zeros((h1,), f"{pre}_b1")
            p[f"{pre}_w2"] = _param(rng, h1, (h1, h2), f"{pre}_w2")
            p[f"{pre}_b2"] = _zeros((h2,), f"{pre}_b2")
        p["pol_wout"] = _param(rng, h2, (h2, K * n_actions), "pol_wout")
        p["pol_bout"] = _zeros((K * n_actions,), "pol_bout")
        p["term_wout"] = _param(rng, h2, (h2, K), "term_wout")
        p["term_bout"] = _zeros((K,), "term_bout")
        self.params = p

    def _trunk(self, states: np.ndarray | Tensor, pre: str) -> Tensor:
        x = states if isinstance(states, Tensor) else Tensor(states)
        if x.ndim != 2 or x.shape[1] != self.state_dim:
            raise ShapeError("OptionBank input", x.shape, (None, self.state_dim))
        p = self.params
        return _mlp_trunk(x, [(p[f"{pre}_w1"], p[f"{pre}_b1"]), (p[f"{pre}_w2"], p[f"{pre}_b2"])])

    def log_policy(self, states) -> Tensor:
        """Log action probabilities, shape ``(M, K, A)``."""
        z = self._trunk(states, "pol")
        logits = ad.matmul(z, self.params["pol_wout"]) + self.params["pol_bout"]
        return ad.log_softmax(logits.reshape(z.shape[0], self.K, self.n_actions))

    def termination(self, states) -> Tensor:
        """Termination probabilities, shape ``(M, K)``."""
        z = self._trunk(states, "term")
        return ad.sigmoid(ad.matmul(z, self.params["term_wout"]) + self.params["term_bout"])

    def expand(self, rng: np.random.Generator) -> None:
        h2 = self.hidden[1]
        A = self.n_actions
        _append_cols(self.params["pol_wout"], ad.uniform_init(rng, h2, (h2, A)))
        _append_cols(self.params["pol_bout"], np.zeros(A))
        _append_cols(self.params["term_wout"], ad.uniform_init(rng, h2, (h2, 1)))
        _append_cols(self.params["term_bout"], np.zeros(1))
        self.K += 1


class EncoderNet(Module):
    """Reverse LSTM over (state, action) pairs plus two sampling heads.

    The heads share two ReLU layers; their first layer consumes the LSTM
    state at t, the previous termination, eta, and the previous option.
    The eta and previous-option blocks are kept as separate weight matrices
    so growing K appends rows without touching existing weights.
    """

    def __init__(self, state_dim: int, n_actions: int, K: int, rng: np.random.Generator,
                 lstm_hidden: int = 32, mlp_hidden: int = 32):
        self.state_dim, self.n_actions, self.K = state_dim, n_actions, K
        self.lstm_hidden, self.mlp_hidden = lstm_hidden, mlp_hidden
        H, M = lstm_hidden, mlp_hidden
        d_in = state_dim + n_actions
        fan1 = H + 1 + 2 * K
        self.params = {
            "lstm_wx": _param(rng, d_in, (d_in, 4 * H), "lstm_wx"),
            "lstm_wh": _param(rng, H, (H, 4 * H), "lstm_wh"),
            "lstm_b": _zeros((4 * H,), "lstm_b"),
            "head_w1_lstm": _param(rng, fan1, (H, M), "head_w1_lstm"),
            "head_w1_b": _param(rng, fan1, (1, M), "head_w1_b"),
            "head_w1_eta": _param(rng, fan1, (K, M), "head_w1_eta"),
            "head_w1_h": _param(rng, fan1, (K, M), "head_w1_h"),
            "head_b1": _zeros((M,), "head_b1"),
            "head_w2": _param(rng, M, (M, M), "head_w2"),
            "head_b2": _zeros((M,), "head_b2"),
            "bhead_w": _param(rng, M, (M, 2), "bhead_w"),
            "bhead_b": _zeros((2,), "bhead_b"),
            "hhead_w": _param(rng, M, (M, K), "hhead_w"),
            "hhead_b": _zeros((K,), "hhead_b"),
        }

    def lstm_states(self, states: np.ndarray, actions: np.ndarray) -> list[Tensor]:
        """Hidden state at each t after reading steps T-1 down to t."""
        B, T = actions.shape
        onehot = np.eye(self.n_actions)[actions]
        x = np.concatenate([states[:, :T], onehot], axis=-1)
        p = self.params
        h = Tensor(np.zeros((B, self.lstm_hidden)))
        c = Tensor(np.zeros((B, self.lstm_hidden)))
        out: list[Tensor] = [None] * T
        for t in range(T - 1, -1, -1):
            h, c = ad.lstm_cell(Tensor(x[:, t]), h, c, p["lstm_wx"], p["lstm_wh"], p["lstm_b"])
            out[t] = h
        return out

    def head_logits(self, lstm_t: Tensor, eta: Tensor, b_prev, h_prev) -> tuple[Tensor, Tensor]:
        p = self.params
        pre = (ad.matmul(lstm_t, p["head_w1_lstm"]) + ad.matmul(_as2d(b_prev), p["head_w1_b"])
               + ad.matmul(eta.reshape(1, -1), p["head_w1_eta"]) + ad.matmul(h_prev, p["head_w1_h"])
               + p["head_b1"])
        z = ad.relu(pre)
        z = ad.relu(ad.matmul(z, p["head_w2"]) + p["head_b2"])
        return (ad.matmul(z, p["bhead_w"]) + p["bhead_b"],
                ad.matmul(z, p["hhead_w"]) + p["hhead_b"])

    def expand(self, rng: np.random.Generator) -> None:
        M = self.mlp_hidden
        fan1 = self.lstm_hidden + 1 + 2 * (self.K + 1)
        _append_rows(self.params["head_w1_eta"], ad.uniform_init(rng, fan1, (1, M)))
        _append_rows(self.params["head_w1_h"], ad.uniform_init(rng, fan1, (1, M)))
        _append_cols(self.params["hhead_w"], ad.uniform_init(rng, M, (M, 1)))
        _append_cols(self.params["hhead_b"], np.zeros(1))
        self.K += 1


def _as2d(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x.reshape(x.shape[0], 1) if x.ndim == 1 else x


@dataclass
class EncoderSample:
    b: Tensor  # (B, T)
    h: Tensor  # (B, T, K)
    log_q: Tensor  # (B,)
    b_logits: list  # per t >= 1, (B, 2)
    h_logits: list  # per t, (B, K)


def draw_encoder_noise(rng: np.random.Generator, B: int, T: int, K: int, mode: str = "relaxed"):
    if mode == "relaxed":
        return {"b": dist.gumbel_noise(rng, (B, T, 2)), "h": dist.gumbel_noise(rng, (B, T, K))}
    return {"b": rng.uniform(size=(B, T)), "h": rng.uniform(size=(B, T))}


def encoder_sample(states: np.ndarray, actions: np.ndarray, eta, encoder: EncoderNet,
                   temperature: float, rng: np.random.Generator | None = None,
                   mode: str = "relaxed", noise: dict | None = None,
                   logq_mode: str = "density") -> EncoderSample:
    """Sample terminations and options autoregressively, t = 0..T-1.

    b_0 is fixed to 1. In relaxed mode draws are Gumbel-Softmax samples and
    ``log_q`` is their Concrete log-density (``logq_mode="density"``) or the
    relaxed log-mass ``sum_k y_k log q_k`` (``logq_mode="mass"``). In discrete
    mode draws are exact Bernoulli / categorical samples and ``log_q`` is
    their log-mass.
    """
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    eta = eta if isinstance(eta, Tensor) else Tensor(eta)
    B, T = actions.shape
    K = encoder.K
    if eta.shape != (K,):
        raise ShapeError("encoder eta", eta.shape, (K,))
    if noise is None:
        noise = draw_encoder_noise(rng, B, T, K, mode)
    lstm = encoder.lstm_states(states, actions)
    b_prev = Tensor(np.zeros((B, 1)))
    h_prev = Tensor(np.zeros((B, K)))
    bs, hs, logqs, blog, hlog = [], [], [], [], []
    for t in range(T):
        b_logit, h_logit = encoder.head_logits(lstm[t], eta, b_prev, h_prev)
        if t == 0:
            b_t = Tensor(np.ones((B, 1)))
        else:
            blog.append(b_logit)
            if mode == "relaxed":
                y, log_y = dist.gumbel_softmax_sample(b_logit, temperature, noise["b"][:, t])
                logqs.append(_relaxed_logq(b_logit, y, log_y, temperature, logq_mode))
                b_t = y[:, 0:1]
            else:
                p1 = _np_softmax(b_logit.data)[:, 0]
                bit = (noise["b"][:, t] < p1).astype(float)
                onehot = np.stack([bit, 1.0 - bit], axis=-1)
                logqs.append(dist.categorical_log_mass(b_logit, onehot))
                b_t = Tensor(bit[:, None])
        hlog.append(h_logit)
        if mode == "relaxed":
            y, log_y = dist.gumbel_softmax_sample(h_logit, temperature, noise["h"][:, t])
            if K > 1:
                logqs.append(_relaxed_logq(h_logit, y, log_y, temperature, logq_mode))
            h_t = y
        else:
            cdf = np.cumsum(_np_softmax(h_logit.data), axis=-1)
            idx = np.minimum((noise["h"][:, t][:, None] > cdf).sum(axis=-1), K - 1)
            onehot = np.eye(K)[idx]
            logqs.append(dist.categorical_log_mass(h_logit, onehot))
            h_t = Tensor(onehot)
        bs.append(b_t)
        hs.append(h_t)
        b_prev, h_prev = b_t, h_t
    b = ad.concat(bs, axis=1)
    h = ad.stack(hs, axis=1)
    log_q = sum(logqs[1:], logqs[0]) if logqs else Tensor(np.zeros(B))
    return EncoderSample(b, h, log_q, blog, hlog)


def _relaxed_logq(logits, y, log_y, temperature, logq_mode):
    if logq_mode == "density":
        return dist.concrete_log_density(logits, log_y, temperature)
    if logq_mode == "mass":
        return (ad.log_softmax(logits) * y).sum(axis=-1)
    raise ValueError(f"unknown logq_mode {logq_mode!r}")


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def encoder_log_density(states, actions, eta, encoder: EncoderNet, temperature: float,
                        b: np.ndarray, h: np.ndarray, logq_mode: str = "density") -> np.ndarray:
    """Re-evaluate the relaxed log q of a given sample (teacher forcing)."""
    eta = eta if isinstance(eta, Tensor) else Tensor(eta)
    B, T = actions.shape
    K = encoder.K
    lstm = encoder.lstm_states(states, actions)
    b_prev = np.zeros((B, 1))
    h_prev = np.zeros((B, K))
    total = np.zeros(B)
    for t in range(T):
        b_logit, h_logit = encoder.head_logits(lstm[t], eta, Tensor(b_prev), Tensor(h_prev))
        if t > 0:
            yb = np.stack([b[:, t], 1.0 - b[:, t]], axis=-1)
            total += _relaxed_logq(b_logit, Tensor(yb), Tensor(np.log(yb)), temperature,
                                   logq_mode).data
        if K > 1:
            total += _relaxed_logq(h_logit, Tensor(h[:, t]), Tensor(np.log(h[:, t])),
                                   temperature, logq_mode).data
        b_prev = (np.ones(B) if t == 0 else b[:, t])[:, None]
        h_prev = h[:, t]
    return total


def _policy_terms(states: np.ndarray, actions: np.ndarray, bank: OptionBank):
    B, T = actions.shape
    D = states.shape[-1]
    lp = bank.log_policy(states[:, :T].reshape(B * T, D))  # (BT, K, A)
    onehot = np.eye(bank.n_actions)[actions.reshape(-1)][:, None, :]
    lp_a = (lp * onehot).sum(axis=-1).reshape(B, T, bank.K)
    psi = None
    if T > 1:
        psi = bank.termination(states[:, 1:T].reshape(B * (T - 1), D)).reshape(B, T - 1, bank.K)
    return lp_a, psi


def relaxed_joint_logprob(b, h, states: np.ndarray, actions: np.ndarray, eta,
                          bank: OptionBank, policy_relax: str = "expected") -> Tensor:
    """Relaxed ``log p(zeta, xi | eta)`` per trajectory, environment terms dropped.

    At binary ``b`` / one-hot ``h`` this equals the discrete joint; the
    option-carry delta becomes ``1 - |h_t - h_{t-1}|_1 / 2``, ``eta(h)``
    becomes ``eta . h``, and option-indexed quantities (policy log-probs,
    terminations) are weighted by the relaxed option vector.
    """
    b = b if isinstance(b, Tensor) else Tensor(b)
    h = h if isinstance(h, Tensor) else Tensor(h)
    eta = eta if isinstance(eta, Tensor) else Tensor(eta)
    B, T = actions.shape
    K = bank.K
    if h.shape != (B, T, K) or b.shape != (B, T) or eta.shape != (K,):
        raise ShapeError("relaxed_joint_logprob", b.shape, h.shape, eta.shape)
    lp_a, psi = _policy_terms(states, actions, bank)
    if policy_relax == "expected":
        total = (h * lp_a).sum(axis=(1, 2))
    elif policy_relax == "mixture":
        mix = (h * ad.exp(lp_a)).sum(axis=-1)
        total = ad.log(ad.clamp_min(mix, LOG_FLOOR)).sum(axis=1)
    else:
        raise ValueError(f"unknown policy_relax {policy_relax!r}")
    total = total + ad.log(ad.clamp_min(b[:, 0], LOG_FLOOR))
    total = total + ad.log(ad.clamp_min((h[:, 0] * eta).sum(axis=-1), LOG_FLOOR))
    if T > 1:
        hp, hc = h[:, :-1], h[:, 1:]
        bt = b[:, 1:]
        psi_rel = (psi * hp).sum(axis=-1)
        eta_h = (hc * eta).sum(axis=-1)
        same = 1.0 - ad.abs_(hc - hp).sum(axis=-1) * 0.5
        trans = bt * psi_rel * eta_h + (1.0 - bt) * (1.0 - psi_rel) * same
        total = total + ad.log(ad.clamp_min(trans, LOG_FLOOR)).sum(axis=1)
    if not np.all(np.isfinite(total.data)):
        raise NonFiniteError("relaxed joint log-probability is not finite")
    return total


def entropy_regularizer(h) -> Tensor:
    """Per-trajectory entropy of the time-averaged option vector, ``(B,)``."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    hbar = h.mean(axis=1)
    return -(hbar * ad.log(ad.clamp_min(hbar, LOG_FLOOR))).sum(axis=-1)


def batch_entropy_regularizer(h) -> Tensor:
    """Entropy of the option vector averaged over both trajectories and steps."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    hbar = h.mean(axis=(0, 1))
    return -(hbar * ad.log(ad.clamp_min(hbar, LOG_FLOOR))).sum()


# -- exact marginal likelihood ---------------------------------------------------

def bank_numpy(bank: OptionBank, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Untracked ``(log pi (M,K,A), psi (M,K))`` for a stack of states."""
    return bank.log_policy(states).data, bank.termination(states).data


def forward_log_likelihood(states: np.ndarray, actions: np.ndarray, eta: np.ndarray,
                           bank: OptionBank) -> np.ndarray:
    """Exact ``log p(actions | states, eta)`` by the forward recursion in log space.

    Accepts a single trajectory (``(T+1, D)``, ``(T,)``) or a batch; returns a
    scalar or ``(B,)`` array.
    """
    single = actions.ndim == 1
    if single:
        states, actions = states[None], actions[None]
    B, T = actions.shape
    D = states.shape[-1]
    eta = np.asarray(eta, dtype=float)
    K = bank.K
    logpi, psi = bank_numpy(bank, states[:, :T].reshape(B * T, D))
    logpi = logpi.reshape(B, T, K, -1)
    psi = psi.reshape(B, T, K)
    lp_a = np.take_along_axis(logpi, actions[:, :, None, None].repeat(K, axis=2), axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        log_eta = np.log(eta)
        eye = np.eye(K)
        alpha = log_eta[None] + lp_a[:, 0]
        for t in range(1, T):
            # trans[b, h', h] = psi_{h'}(s_t) eta(h) + (1 - psi_{h'}(s_t)) [h == h']
            trans = psi[:, t, :, None] * eta[None, None, :] + (1.0 - psi[:, t, :, None]) * eye
            alpha = np_logsumexp(alpha[:, :, None] + np.log(trans), axis=1) + lp_a[:, t]
    out = np_logsumexp(alpha, axis=-1)
    return out[0] if single else out


def discrete_joint_logprob(b: np.ndarray, h_idx: np.ndarray, states: np.ndarray,
                           actions: np.ndarray, eta: np.ndarray, bank: OptionBank) -> float:
    """Unrelaxed joint for one trajectory with integer options; -inf when infeasible."""
    T = len(actions)
    logpi, psi = bank_numpy(bank, states[:T])
    if b[0] != 1:
        return -math.inf
    total = math.log(eta[h_idx[0]]) if eta[h_idx[0]] > 0 else -math.inf
    for t in range(T):
        total += logpi[t, h_idx[t], actions[t]]
    for t in range(1, T):
        p = psi[t, h_idx[t - 1]]
        if b[t] == 1:
            val = p * eta[h_idx[t]]
        else:
            val = (1.0 - p) * (h_idx[t] == h_idx[t - 1])
        total += math.log(val) if val > 0 else -math.inf
    return total


# -- ELBO ------------------------------------------------------------------------

@dataclass
class ElboTerms:
    objective: Tensor
    elbo: Tensor
    joint: Tensor
    log_q: Tensor
    kl: Tensor
    ent: Tensor
    sample: EncoderSample
    eta: Tensor

    def scalars(self) -> dict[str, float]:
        return {"objective": self.objective.item(), "elbo": self.elbo.item(),
                "joint": self.joint.item(), "logq": self.log_q.item(),
                "kl": self.kl.item(), "ent_reg": self.ent.item()}


def elbo_batch(states: np.ndarray, actions: np.ndarray, bank: OptionBank, encoder: EncoderNet,
               sticks: dist.StickParams, prior: dist.GemPrior, temperature: float,
               rng: np.random.Generator, n_total: int | None = None, lambda_ent: float = 0.0,
               eta_sample: tuple[Tensor, Tensor] | None = None, noise: dict | None = None,
               logq_mode: str = "density", entropy_scope: str = "trajectory",
               policy_relax: str = "expected") -> ElboTerms:
    """Single-sample relaxed ELBO per trajectory for one minibatch.

    One eta is drawn for the whole batch. The KL term is divided by the
    dataset size so that ``elbo * N`` estimates the full-data bound.
    ``objective`` adds ``lambda_ent`` times the mean entropy regularizer.
    """
    B, T = actions.shape
    if B == 0:
        raise ValueError("empty batch")
    n_total = n_total or B
    if eta_sample is None:
        fractions, eta = sticks.sample(rng)
    else:
        fractions, eta = eta_sample
    smp = encoder_sample(states, actions, eta, encoder, temperature, rng, noise=noise,
                         logq_mode=logq_mode)
    joint = relaxed_joint_logprob(smp.b, smp.h, states, actions, eta, bank, policy_relax).mean()
    log_q = smp.log_q.mean()
    if sticks.n_sticks:
        kl = dist.kl_sticks_terms(fractions, sticks.a1(), sticks.a2(), prior.alpha())
    else:
        kl = Tensor(0.0)
    if entropy_scope == "trajectory":
        ent = entropy_regularizer(smp.h).mean()
    elif entropy_scope == "batch":
        ent = batch_entropy_regularizer(smp.h)
    else:
        raise ValueError(f"unknown entropy_scope {entropy_scope!r}")
    for name, val in (("joint", joint), ("entropy", log_q), ("KL", kl), ("ent_reg", ent)):
        if not np.all(np.isfinite(val.data)):
            raise NonFiniteError(f"non-finite {name} term in ELBO")
    elbo = joint - log_q - kl * (1.0 / n_total)
    objective = elbo + ent * lambda_ent
    return ElboTerms(objective, elbo, joint, log_q, kl, ent, smp, eta)


def discrete_elbo_samples(states: np.ndarray, actions: np.ndarray, eta: np.ndarray,
                          bank: OptionBank, encoder: EncoderNet, n_samples: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Samples of ``log p(zeta, xi | eta) - log q(zeta | eta, xi)`` with discrete zeta.

    For one trajectory; returns ``(n_samples,)``.
    """
    S = np.repeat(states[None], n_samples, axis=0)
    A = np.repeat(actions[None], n_samples, axis=0)
    smp = encoder_sample(S, A, eta, encoder, 1.0, rng, mode="discrete")
    joint = relaxed_joint_logprob(smp.b, smp.h, S, A, eta, bank).data
    return joint - smp.log_q.data
