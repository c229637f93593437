"""Proof-of-concept protocol: message-task datasets, evaluation, and seed sweeps."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import Dataset, MESSAGE_T, MessageEnvConfig, message_env_expert
from .growth import compute_usage
from .model import forward_log_likelihood
from .training import Schedule, TrainConfig, TrainState, train

SUCCESS_PROB = 0.95

PROFILES = {
    "full": {"n_trajectories": 1000, "epochs": 500},
    "reduced": {"n_trajectories": 200, "epochs": 300},
}


def message_report(state: TrainState, dataset: Dataset, n_vocab: int | None = None,
                   threshold: float = SUCCESS_PROB) -> dict:
    """Per-message success at the final step, usage, K, and exact log-likelihood."""
    n_vocab = n_vocab or dataset.n_actions
    final_obs = np.array([[float(MESSAGE_T - 1), -1.0]])
    probs = np.exp(state.bank.log_policy(final_obs).data[0])  # (K, A)
    best_option = probs.argmax(axis=0)
    per_message = [bool(probs[:, m].max() >= threshold) for m in range(n_vocab)]
    states, actions = dataset.arrays()
    eta = state.sticks.point_estimate()
    ll = float(np.sum(forward_log_likelihood(states, actions, eta, state.bank)))
    return {
        "K": state.K,
        "usage": compute_usage(states, actions, state.bank).tolist(),
        "message_success": per_message,
        "message_best_option": [int(best_option[m]) for m in range(n_vocab)],
        "message_best_prob": [float(probs[:, m].max()) for m in range(n_vocab)],
        "success": all(per_message),
        "eta_point": eta.tolist(),
        "log_likelihood": ll,
        "n_trajectories": len(dataset),
    }


def message_config(seed: int, epochs: int, lambda_ent: float | None = None,
                   base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    cfg = replace(cfg, seed=seed, epochs=epochs)
    if lambda_ent is not None:
        cfg = replace(cfg, lambda_ent=Schedule(lambda_ent, cfg.lambda_ent.decay, cfg.lambda_ent.floor))
    return cfg


def run_cell(n_vocab: int, seed: int, profile: str = "reduced", lambda_ent: float | None = None,
             filler: str = "repeat", overrides: dict | None = None,
             epochs: int | None = None) -> dict:
    """Generate data, train, and evaluate one (vocabulary size, seed) cell."""
    prof = dict(PROFILES[profile])
    if epochs is not None:
        prof["epochs"] = epochs
    data_rng = np.random.default_rng([seed, n_vocab, 7919])
    dataset = message_env_expert(MessageEnvConfig(n_vocab, filler), prof["n_trajectories"], data_rng)
    base = TrainConfig.from_dict({**TrainConfig().to_dict(), **(overrides or {})})
    cfg = message_config(seed, prof["epochs"], lambda_ent, base)
    row = {"n_vocab": n_vocab, "seed": seed, "lambda_ent": cfg.lambda_ent.initial,
           "profile": profile}
    try:
        result = train(dataset, cfg)
        rep = message_report(result.state, dataset, n_vocab)
        row.update(K=rep["K"], success=rep["success"], error="",
                   log_likelihood=rep["log_likelihood"])
    except Exception as exc:  # recorded per cell; the sweep continues
        row.update(K="", success=False, error=f"{type(exc).__name__}: {exc}", log_likelihood="")
    return row


def _run_cell_kwargs(kw):
    return run_cell(**kw)


def run_sweep(n_vocabs, seeds, profile: str = "reduced", lambda_ents=(None,),
              filler: str = "repeat", workers: int | None = None,
              overrides: dict | None = None, epochs: int | None = None) -> list[dict]:
    jobs = [dict(n_vocab=v, seed=s, profile=profile, lambda_ent=l, filler=filler,
                 overrides=overrides, epochs=epochs)
            for l in lambda_ents for v in n_vocabs for s in seeds]
    workers = workers or 1
    if workers <= 1:
        return [run_cell(**j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell_kwargs, jobs))


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean recovered K (over successful seeds) and success rate per cell group."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["lambda_ent"], r["n_vocab"]), []).append(r)
    out = []
    for (lam, nv), rs in sorted(groups.items()):
        ok = [r for r in rs if r["success"]]
        ks = [int(r["K"]) for r in ok]
        out.append({"lambda_ent": lam, "n_vocab": nv, "n_seeds": len(rs),
                    "n_success": len(ok), "success_rate": len(ok) / len(rs),
                    "mean_K": float(np.mean(ks)) if ks else math.nan,
                    "target_K": nv + 1})
    return out


def regression_slope(agg: list[dict]) -> float:
    pts = [(a["n_vocab"], a["mean_K"]) for a in agg if not math.isnan(a["mean_K"])]
    if len(pts) < 2:
        return math.nan
    x, y = np.array(pts, dtype=float).T
    return float(np.polyfit(x, y, 1)[0])


def summarize(rows: list[dict], agg: list[dict] | None = None, min_success: int = 7) -> dict:
    """Pass/fail view of a sweep: per-size success, K range, slope, ablation.

    Rows with ``lambda_ent == 0`` form the no-regularizer ablation group.
    """
    agg = agg if agg is not None else aggregate(rows)
    main = [a for a in agg if a["lambda_ent"] != 0.0]
    ablation = [a for a in agg if a["lambda_ent"] == 0.0]
    k_ok = all(int(r["K"]) in range(r["n_vocab"], r["n_vocab"] + 3)
               for r in rows if r["success"] and r["lambda_ent"] != 0.0)
    out = {
        "per_vocab": {a["n_vocab"]: {"n_success": a["n_success"], "n_seeds": a["n_seeds"],
                                     "mean_K": a["mean_K"]} for a in main},
        "success_ok": all(a["n_success"] >= min_success * a["n_seeds"] / 10 for a in main),
        "K_range_ok": k_ok,
        "slope": regression_slope(main),
    }
    out["slope_ok"] = bool(0.8 <= out["slope"] <= 1.2) if not math.isnan(out["slope"]) else False
    if ablation:
        by_nv = {a["n_vocab"]: a for a in main}
        out["ablation"] = {a["n_vocab"]: {"with_reg": by_nv[a["n_vocab"]]["success_rate"]
                                          if a["n_vocab"] in by_nv else math.nan,
                                          "without_reg": a["success_rate"]} for a in ablation}
        out["ablation_direction_ok"] = all(v["with_reg"] >= v["without_reg"]
                                           for v in out["ablation"].values())
    return out


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0].keys())
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
