import json

import numpy as np
import pytest

from npoptions import data as D


def _uniform(n):
    return lambda s: np.full(n, 1.0 / n)


def _policy(eta, stop, n_actions=3, policies=None):
    K = len(eta)
    policies = policies or [_uniform(n_actions)] * K
    return D.HierarchicalPolicy(np.asarray(eta), policies, [lambda s, p=stop: p] * K)


def test_never_terminating_keeps_first_option():
    env = D.RandomWalkEnv()
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, lat = D.sample_options_trajectory(_policy([0.3, 0.3, 0.4], 0.0), env, 12, rng)
        idx = lat.option_indices
        assert np.all(idx == idx[0])
        np.testing.assert_array_equal(lat.b, [1] + [0] * 11)


def test_always_terminating_draws_fresh_options_from_eta():
    eta = np.array([0.5, 0.2, 0.2, 0.1])
    env = D.RandomWalkEnv()
    rng = np.random.default_rng(1)
    counts = np.zeros(4)
    for _ in range(1000):
        _, lat = D.sample_options_trajectory(_policy(eta, 1.0), env, 100, rng)
        assert np.all(lat.b == 1)
        counts += np.bincount(lat.option_indices, minlength=4)
    assert 0.5 * np.abs(counts / counts.sum() - eta).sum() < 0.01


def test_single_option_actions_follow_its_policy():
    env = D.RandomWalkEnv(n_actions=3)
    pi = np.array([0.6, 0.3, 0.1])
    rng = np.random.default_rng(2)
    acts = []
    for _ in range(500):
        traj, lat = D.sample_options_trajectory(_policy([1.0], 0.3, policies=[lambda s: pi]),
                                                env, 20, rng)
        assert np.all(lat.option_indices == 0)
        acts.append(traj.actions)
    freq = np.bincount(np.concatenate(acts), minlength=3) / (500 * 20)
    np.testing.assert_allclose(freq, pi, atol=0.01)


def test_sampler_respects_state_conditioned_policy():
    env = D.RandomWalkEnv(n_actions=2)
    # deterministic in the sign of the first coordinate
    pol = lambda s: np.array([1.0, 0.0]) if s[0] > 0 else np.array([0.0, 1.0])
    traj, _ = D.sample_options_trajectory(_policy([1.0], 0.5, 2, [pol]), env, 30,
                                          np.random.default_rng(3))
    expect = np.where(traj.states[:-1, 0] > 0, 0, 1)
    np.testing.assert_array_equal(traj.actions, expect)


def test_options_sampler_rejects_empty_horizon():
    with pytest.raises(ValueError):
        D.sample_options_trajectory(_policy([1.0], 0.5), D.RandomWalkEnv(), 0,
                                    np.random.default_rng(0))


# -- compile-style generator -------------------------------------------------------

def _skills(K=2):
    return [_uniform(3)] * K


def test_huge_rate_gives_single_segment():
    for seed in range(20):
        _, bounds, _ = D.sample_compile_trajectory(_skills(), 200.0, 2, 10,
                                                   np.random.default_rng(seed))
        assert len(bounds) == 1 and bounds[0] >= 10


@pytest.mark.parametrize("rate", [0.3, 1.0, 3.0])
def test_boundaries_increase_and_cover_horizon(rate):
    rng = np.random.default_rng(4)
    for _ in range(200):
        _, bounds, segs = D.sample_compile_trajectory(_skills(3), rate, 3, 15, rng)
        assert np.all(np.diff(bounds) > 0)
        assert bounds[0] > 0 and bounds[-1] >= 15
        assert len(segs) == len(bounds)


def test_segment_lengths_have_poisson_mean():
    rng = np.random.default_rng(5)
    draws = []
    while len(draws) < 100_000:
        *_, d = D.sample_compile_trajectory(_skills(), 5.0, 2, 200, rng, with_draws=True)
        draws.extend(d.tolist())
    assert np.mean(draws) == pytest.approx(5.0, rel=0.01)


def test_compile_rejects_bad_rate():
    with pytest.raises(ValueError):
        D.sample_compile_trajectory(_skills(), 0.0, 2, 5, np.random.default_rng(0))


@pytest.mark.parametrize("maker", [D.synthetic_options_dataset, D.synthetic_compile_dataset])
def test_synthetic_datasets_have_requested_shape(maker):
    ds = maker(7, 9, 3, np.random.default_rng(0))
    states, actions = ds.arrays()
    assert states.shape == (7, 10, 2) and actions.shape == (7, 9)
    assert actions.max() < ds.n_actions


# -- message task ------------------------------------------------------------------

def test_message_states_example():
    np.testing.assert_array_equal(D.message_states(2),
                                  [[0, 2], [1, -1], [2, -1], [3, -1], [4, -1]])
    acts = D.message_expert_actions(2, D.MessageEnvConfig(3))
    assert acts[4] == 2 and len(acts) == 5


def test_message_constant_filler():
    acts = D.message_expert_actions(3, D.MessageEnvConfig(4, "constant"))
    np.testing.assert_array_equal(acts, [0, 0, 0, 0, 3])


def test_message_marginal_is_uniform():
    ds = D.message_env_expert(D.MessageEnvConfig(6), 10_000, np.random.default_rng(0))
    msgs = np.array([int(t.states[0, 1]) for t in ds])
    freq = np.bincount(msgs, minlength=6) / len(msgs)
    assert 0.5 * np.abs(freq - 1 / 6).sum() < 0.05


@pytest.mark.parametrize("filler", ["repeat", "constant"])
def test_every_expert_trajectory_succeeds(filler):
    ds = D.message_env_expert(D.MessageEnvConfig(4, filler), 500, np.random.default_rng(1))
    for t in ds:
        assert D.message_success(t.actions, int(t.states[0, 1]))
        # the message is only visible at t=0
        assert np.all(t.states[1:, 1] == -1)


def test_message_task_is_not_markov_in_the_final_observation():
    ds = D.message_env_expert(D.MessageEnvConfig(3), 300, np.random.default_rng(2))
    finals = {tuple(t.states[4]) for t in ds}
    assert len(finals) == 1
    assert len({int(t.actions[4]) for t in ds}) == 3


@pytest.mark.parametrize("n", [0, 1])
def test_message_config_rejects_tiny_vocab(n):
    with pytest.raises(ValueError):
        D.MessageEnvConfig(n)


# -- JSON Lines IO -----------------------------------------------------------------

def _random_dataset(rng, n=100):
    trajs = [D.Trajectory(rng.normal(size=(6, 3)), rng.integers(0, 4, size=5)) for _ in range(n)]
    return D.Dataset(trajs, state_dim=3, n_actions=4, meta={"env": "test"})


def test_round_trip(tmp_path):
    ds = _random_dataset(np.random.default_rng(0))
    D.dataset_write(ds, tmp_path / "d.jsonl")
    back = D.dataset_read(tmp_path / "d.jsonl")
    assert back.trajectories == ds.trajectories
    assert (back.state_dim, back.n_actions, back.meta) == (3, 4, {"env": "test"})


def test_empty_file_reads_as_empty_dataset(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert len(D.dataset_read(p)) == 0


def test_truncated_record_names_index(tmp_path):
    ds = _random_dataset(np.random.default_rng(1), n=5)
    p = tmp_path / "t.jsonl"
    D.dataset_write(ds, p)
    lines = p.read_text().splitlines()
    lines[4] = lines[4][: len(lines[4]) // 2]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(D.DatasetFormatError) as info:
        D.dataset_read(p)
    assert info.value.record == 3
    assert "record 3" in str(info.value)


def test_record_inconsistent_with_header(tmp_path):
    p = tmp_path / "bad.jsonl"
    header = {"format_version": 1, "state_dim": 2, "n_actions": 2, "T": 1}
    rec = {"states": [[0, 0], [1, 1]], "actions": [5]}
    p.write_text(json.dumps(header) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(D.DatasetFormatError):
        D.dataset_read(p)


def test_missing_header_is_rejected(tmp_path):
    p = tmp_path / "nohdr.jsonl"
    p.write_text(json.dumps({"states": [[0.0], [1.0]], "actions": [0]}) + "\n")
    with pytest.raises(D.DatasetFormatError):
        D.dataset_read(p)


def test_trajectory_length_mismatch():
    with pytest.raises(ValueError):
        D.Trajectory(np.zeros((3, 2)), np.zeros(3))
