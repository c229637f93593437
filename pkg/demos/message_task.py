"""Train on the recall-a-message task and inspect what the options learned.

    python3 demos/message_task.py [n_vocab] [seed]

The expert sees a message at t=0 and must emit it at t=4; the observation at
t=4 no longer shows the message, so a flat Markov policy cannot solve the task.
Options can: an option chosen at t=0 carries the message forward.
"""
import sys

import numpy as np

from npoptions import data as D
from npoptions.experiments import PROFILES, message_report
from npoptions.training import TrainConfig, train


def main(n_vocab=3, seed=0):
    prof = PROFILES["reduced"]
    ds = D.message_env_expert(D.MessageEnvConfig(n_vocab), prof["n_trajectories"],
                              np.random.default_rng(seed))
    print(f"{len(ds)} expert trajectories, vocabulary {n_vocab}")

    def progress(state, row):
        if state.epoch % 50 == 0:
            print(f"  epoch {state.epoch:4d}  elbo {row['elbo']:8.3f}  K={state.K}")

    result = train(ds, TrainConfig(seed=seed, epochs=prof["epochs"]), callback=progress)
    for ev in result.events:
        if ev["event"] == "grow":
            print(f"  grew to K={ev['K']} at epoch {ev['epoch']}")

    rep = message_report(result.state, ds, n_vocab)
    print(f"\nfinal K = {rep['K']}, usage = {np.round(rep['usage'], 3).tolist()}")
    for m in range(n_vocab):
        print(f"  message {m}: option {rep['message_best_option'][m]} emits it at t=4 "
              f"with p={rep['message_best_prob'][m]:.3f}")
    print("success" if rep["success"] else "not solved at the 0.95 threshold")


if __name__ == "__main__":
    main(*map(int, sys.argv[1:3]))
