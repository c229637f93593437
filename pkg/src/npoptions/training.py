"""Minibatch training with annealed temperature / entropy weight and K growth.

Checkpoints are single JSON objects; metrics are CSV rows appended once per
epoch plus one row per growth event.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .data import Dataset
from .growth import GrowthConfig, compute_usage, expand, should_grow
from .model import EncoderNet, OptionBank, elbo_batch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ["epoch", "elbo", "joint", "logq", "kl", "ent_reg", "K"]


@dataclass
class Schedule:
    """Multiplicative per-epoch decay towards a floor."""

    initial: float
    decay: float = 1.0
    floor: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.floor < 0:
            raise ValueError("floor must be >= 0")

    def value(self, epoch: int) -> float:
        return max(self.floor, self.initial * self.decay ** epoch)


@dataclass
class TrainConfig:
    seed: int = 0
    K_init: int = 1
    epochs: int = 500
    batch_size: int = 128
    lr: float = 0.005
    grad_clip: float = 10.0
    policy_hidden: tuple = (16, 16)
    lstm_hidden: int = 32
    mlp_hidden: int = 32
    temperature: Schedule = field(default_factory=lambda: Schedule(1.0, 1.0, 0.1))
    lambda_ent: Schedule = field(default_factory=lambda: Schedule(5.0, 0.995, 0.0))
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    alpha_init: float = 1.0
    learn_alpha: bool = True
    logq_mode: str = "mass"
    entropy_scope: str = "trajectory"
    policy_relax: str = "mixture"
    steps_per_epoch: int | None = None  # None: one shuffled pass over the data

    def __post_init__(self):
        if self.K_init < 1 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid training configuration")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        self.policy_hidden = tuple(self.policy_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy_hidden"] = list(self.policy_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("temperature", "lambda_ent"):
            if key in d and isinstance(d[key], dict):
                d[key] = Schedule(**d[key])
        if "growth" in d and isinstance(d["growth"], dict):
            d["growth"] = GrowthConfig(**d["growth"])
        return cls(**d)


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, checkpoint: dict | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainState:
    bank: OptionBank
    encoder: EncoderNet
    sticks: dist.StickParams
    prior: dist.GemPrior
    optimizer: ad.Adam
    config: TrainConfig
    epoch: int = 0
    step: int = 0

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {f"bank.{k}": v for k, v in self.bank.params.items()}
        params.update({f"encoder.{k}": v for k, v in self.encoder.params.items()})
        params.update(self.sticks.parameters())
        params.update(self.prior.parameters())
        return params

    @property
    def K(self) -> int:
        return self.bank.K


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]
    events: list[dict]


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _epoch_batches(N: int, batch_size: int, steps: int | None, rng: np.random.Generator):
    """Minibatch indices for one epoch; with ``steps`` set, passes are chained."""
    if steps is None:
        perm = rng.permutation(N)
        for start in range(0, N, batch_size):
            yield perm[start:start + batch_size]
        return
    perm = rng.permutation(N)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > N:
            perm = np.concatenate([perm[pos:], rng.permutation(N)])
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def init_state(config: TrainConfig, state_dim: int, n_actions: int) -> tuple[TrainState, list]:
    init_rng, shuffle_rng, noise_rng, grow_rng = _streams(config.seed)
    K = config.K_init
    bank = OptionBank(state_dim, n_actions, K, init_rng, hidden=config.policy_hidden)
    encoder = EncoderNet(state_dim, n_actions, K, init_rng, config.lstm_hidden, config.mlp_hidden)
    sticks = dist.StickParams.init(K - 1, init_rng)
    prior = dist.GemPrior(config.alpha_init, learnable=config.learn_alpha)
    state = TrainState(bank, encoder, sticks, prior, ad.Adam(lr=config.lr), config)
    return state, [shuffle_rng, noise_rng, grow_rng]


def train(dataset: Dataset, config: TrainConfig, metrics_path=None,
          callback=None) -> TrainResult:
    """Maximize ELBO + lambda_ent * entropy regularizer over the dataset."""
    states, actions = dataset.arrays()
    N = len(states)
    if N == 0:
        raise ValueError("cannot train on an empty dataset")
    state, (shuffle_rng, noise_rng, grow_rng) = init_state(config, dataset.state_dim,
                                                           dataset.n_actions)
    gcfg = config.growth
    max_K = gcfg.max_K if gcfg.enabled else config.K_init
    writer = MetricsWriter(metrics_path, max_K) if metrics_path else None
    history: list[dict] = []
    events: list[dict] = []
    last_good = checkpoint_dict(state)

    def maybe_grow(epoch):
        if not gcfg.enabled:
            return
        if gcfg.subsample and gcfg.subsample < N:
            idx = grow_rng.choice(N, size=gcfg.subsample, replace=False)
            usage = compute_usage(states[idx], actions[idx], state.bank)
        else:
            usage = compute_usage(states, actions, state.bank)
        if not should_grow(usage, gcfg.delta):
            return
        if expand(state.bank, state.encoder, state.sticks, grow_rng, gcfg.max_K):
            ev = {"epoch": epoch, "step": state.step, "event": "grow", "K": state.K,
                  "usage": usage.tolist()}
        else:
            ev = {"epoch": epoch, "step": state.step, "event": "grow_capped", "K": state.K,
                  "usage": usage.tolist()}
        events.append(ev)
        if writer:
            writer.event(ev)
        log.info("epoch %d: %s to K=%d", epoch, ev["event"], state.K)

    try:
        for epoch in range(config.epochs):
            tau = config.temperature.value(epoch)
            lam = config.lambda_ent.value(epoch)
            sums: dict[str, float] = {}
            n_steps = 0
            for idx in _epoch_batches(N, config.batch_size, config.steps_per_epoch, shuffle_rng):
                params = state.parameters()
                for p in params.values():
                    p.zero_grad()
                try:
                    terms = elbo_batch(states[idx], actions[idx], state.bank, state.encoder,
                                       state.sticks, state.prior, tau, noise_rng, n_total=N,
                                       lambda_ent=lam, logq_mode=config.logq_mode,
                                       entropy_scope=config.entropy_scope,
                                       policy_relax=config.policy_relax)
                    loss = -terms.objective
                    if not math.isfinite(loss.item()):
                        raise ad.NonFiniteError("non-finite objective")
                    loss.backward()
                    ad.clip_grad_norm(params.values(), config.grad_clip)
                    state.optimizer.step(params)
                except (ad.NonFiniteError, FloatingPointError) as exc:
                    raise NumericalAbort(f"epoch {epoch} step {state.step}: {exc}", last_good)
                state.step += 1
                n_steps += 1
                for k, v in terms.scalars().items():
                    sums[k] = sums.get(k, 0.0) + v
                if gcfg.enabled and gcfg.unit == "steps" and state.step % gcfg.interval == 0:
                    maybe_grow(epoch)
            state.epoch = epoch + 1
            row = {k: v / n_steps for k, v in sums.items()}
            row.update(epoch=epoch, K=state.K, temperature=tau, lambda_ent=lam,
                       usage=compute_usage(states, actions, state.bank).tolist())
            history.append(row)
            if writer:
                writer.row(row)
            if gcfg.enabled and gcfg.unit == "epochs" and (epoch + 1) % gcfg.interval == 0:
                maybe_grow(epoch)
            last_good = checkpoint_dict(state)
            if callback:
                callback(state, row)
    finally:
        if writer:
            writer.close()
    return TrainResult(state, history, events)


# -- metrics -----------------------------------------------------------------

class MetricsWriter:
    """Append-only metrics CSV; usage columns sized for the largest allowed K."""

    def __init__(self, path, max_K: int):
        self.max_K = max_K
        self.fh = Path(path).open("w", newline="")
        self.header = METRIC_FIELDS + [f"usage_{k}" for k in range(max_K)] + ["event"]
        self.writer = csv.writer(self.fh)
        self.writer.writerow(self.header)

    def _write(self, vals: list, usage: list, event: str):
        usage = [repr(float(u)) for u in usage] + [""] * (self.max_K - len(usage))
        self.writer.writerow(vals + usage + [event])
        self.fh.flush()

    def row(self, row: dict):
        vals = [row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:-1]] + [row["K"]]
        self._write(vals, row["usage"], "")

    def event(self, ev: dict):
        self._write([ev["epoch"]] + [""] * 5 + [ev["K"]], ev["usage"], ev["event"])

    def close(self):
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints ---------------------------------------------------------------

def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def _decode(obj: dict) -> np.ndarray:
    return np.asarray(obj["values"], dtype=float).reshape(obj["shape"])


def checkpoint_dict(state: TrainState) -> dict:
    cfg = state.config
    nets = {f"bank.{k}": _encode(v.data) for k, v in state.bank.params.items()}
    nets.update({f"encoder.{k}": _encode(v.data) for k, v in state.encoder.params.items()})
    a1, a2 = state.sticks.a1().data, state.sticks.a2().data
    return {
        "format_version": CHECKPOINT_VERSION,
        "K": state.K,
        "alpha": state.prior.value,
        "alpha_raw": float(state.prior.raw.data),
        "stick_params": [[float(x), float(y)] for x, y in zip(a1, a2)],
        "stick_raw": [[float(x), float(y)] for x, y in
                      zip(state.sticks.raw_a1.data, state.sticks.raw_a2.data)],
        "state_dim": state.bank.state_dim,
        "n_actions": state.bank.n_actions,
        "networks": nets,
        "schedules": {"epoch": state.epoch, "step": state.step,
                      "temperature": cfg.temperature.value(state.epoch),
                      "lambda_ent": cfg.lambda_ent.value(state.epoch)},
        "config": cfg.to_dict(),
    }


def save_checkpoint(state_or_dict, path) -> None:
    ckpt = state_or_dict if isinstance(state_or_dict, dict) else checkpoint_dict(state_or_dict)
    Path(path).write_text(json.dumps(ckpt))


def load_checkpoint(path_or_dict) -> TrainState:
    if isinstance(path_or_dict, dict):
        ckpt = path_or_dict
    else:
        ckpt = json.loads(Path(path_or_dict).read_text())
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint format")
    cfg = TrainConfig.from_dict(ckpt["config"])
    K = int(ckpt["K"])
    rng = np.random.default_rng(0)
    D, A = int(ckpt["state_dim"]), int(ckpt["n_actions"])
    bank = OptionBank(D, A, K, rng, hidden=cfg.policy_hidden)
    encoder = EncoderNet(D, A, K, rng, cfg.lstm_hidden, cfg.mlp_hidden)
    nets = ckpt["networks"]
    bank.load_arrays({k[5:]: _decode(v) for k, v in nets.items() if k.startswith("bank.")})
    encoder.load_arrays({k[8:]: _decode(v) for k, v in nets.items() if k.startswith("encoder.")})
    raw = np.asarray(ckpt.get("stick_raw", []), dtype=float).reshape(-1, 2)
    sticks = dist.StickParams(raw[:, 0], raw[:, 1])
    prior = dist.GemPrior(1.0, learnable=cfg.learn_alpha)
    prior.raw.data = np.asarray(ckpt["alpha_raw"], dtype=float)
    sch = ckpt.get("schedules", {})
    return TrainState(bank, encoder, sticks, prior, ad.Adam(lr=cfg.lr), cfg,
                      epoch=int(sch.get("epoch", 0)), step=int(sch.get("step", 0)))
