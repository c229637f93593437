"""Why a skill's bootstrap must be discounted by gamma**tau.

    python3 demos/skills_in_rl.py

On a 6-state chain with a two-step "move right" skill, SMDP Q-learning with
the duration-aware target converges to the value-iteration oracle, while the
one-step discount over-values the skill.
"""
import numpy as np

from npoptions import smdp


def run(env, naive, label):
    oracle = smdp.smdp_value_iteration(env)
    Q, rows = smdp.q_learning(env, smdp.LearnerConfig(steps=50_000, naive=naive, log_every=10_000),
                              np.random.default_rng(0), oracle)
    curve = "  ".join(f"{r['step']}:{r['q_gap']:.3f}" for r in rows)
    print(f"{label:<22} gap by step  {curve}")
    return Q, oracle


def main():
    env = smdp.chain_env()
    Q, oracle = run(env, False, "gamma**tau target")
    Qn, _ = run(env, True, "naive gamma target")
    run(env.without_skills(), False, "primitives only")
    print("\nQ(s, right2) learned vs oracle:")
    for s in range(env.n_states - 1):
        print(f"  s={s}: correct {Q[s, 2]:.3f}  naive {Qn[s, 2]:.3f}  oracle {oracle[s, 2]:.3f}")


if __name__ == "__main__":
    main()
