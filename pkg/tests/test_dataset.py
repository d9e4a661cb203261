import numpy as np
import pytest

from adload.dataset import (
    BehaviorPolicy,
    DatasetError,
    OfflineDataset,
    PartialCollectionError,
    collect,
    record_dtype,
    sample_batch,
    sample_indices,
    split_by_time,
    split_random,
)
from adload.envs import CartPoleEnv, CartPolePhysics, SessionEnv, SessionEnvConfig


@pytest.fixture(scope="module")
def session_ds():
    return collect(SessionEnv(SessionEnvConfig(drift_amplitude=1.0)), BehaviorPolicy(), 5000, np.random.default_rng(0))


def synthetic(n, buckets=None, episodes=None, d=2):
    rec = np.zeros(n, dtype=record_dtype(d))
    rec["episode_id"] = np.arange(n) if episodes is None else episodes
    rec["state"] = np.arange(n * d, dtype=float).reshape(n, d)
    rec["next_state"] = rec["state"] + 1
    rec["action"] = np.arange(n) % 2
    rec["done"] = 1
    rec["time_bucket"] = 0 if buckets is None else buckets
    return OfflineDataset(rec, 2)


def test_uniform_policy_action_frequencies():
    ds = collect(CartPoleEnv(), BehaviorPolicy(), 10_000, np.random.default_rng(1))
    frac = ds.actions.mean()
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 10_000)


def test_epsilon_mixture_follows_base_policy():
    base = lambda s: np.ones(len(s), dtype=int)
    ds = collect(CartPoleEnv(), BehaviorPolicy(base, 0.3), 20_000, np.random.default_rng(2))
    # P(action = 1) = 0.7 + 0.3 / 2
    assert abs(ds.actions.mean() - 0.85) < 3 * np.sqrt(0.85 * 0.15 / 20_000)


def test_collect_is_deterministic_and_exact_size():
    a = collect(CartPoleEnv(), BehaviorPolicy(), 777, np.random.default_rng(3))
    b = collect(CartPoleEnv(), BehaviorPolicy(), 777, np.random.default_rng(3))
    assert len(a) == 777
    assert a.to_bytes() == b.to_bytes()


def test_episodes_contiguous_and_done_is_last(session_ds):
    ep = session_ds.episode_ids.astype(np.int64)
    assert np.all(np.diff(ep) >= 0)
    steps = session_ds.records["step_index"]
    for e in np.unique(ep)[:200]:
        idx = np.flatnonzero(ep == e)
        np.testing.assert_array_equal(steps[idx], np.arange(len(idx)))
        done = session_ds.records["done"][idx]
        assert done[:-1].sum() == 0
    # consecutive records of an episode chain state -> next_state
    same = ep[1:] == ep[:-1]
    np.testing.assert_array_equal(session_ds.next_states[:-1][same], session_ds.states[1:][same])


def test_cartpole_truncation_stored_as_not_done():
    ds = collect(CartPoleEnv(CartPolePhysics(max_steps=5)), BehaviorPolicy(lambda s: (s[:, 2] > 0).astype(int), 0.0),
                 50, np.random.default_rng(0))
    assert ds.records["done"].sum() == 0


def test_partial_collection_error():
    class Broken(CartPoleEnv):
        def step(self, state, action, rng):
            if state.steps >= 3:
                raise RuntimeError("sensor fault")
            return super().step(state, action, rng)

    with pytest.raises(PartialCollectionError) as info:
        collect(Broken(CartPolePhysics()), BehaviorPolicy(), 100, np.random.default_rng(0))
    assert info.value.n_collected == 3


def test_serialization_round_trip(tmp_path, session_ds):
    path = tmp_path / "d.orld"
    session_ds.save(path)
    back = OfflineDataset.load(path)
    assert back.records.tobytes() == session_ds.records.tobytes()
    assert back.n_actions == 2 and back.state_dim == session_ds.state_dim
    t = back[10]
    assert t.state.shape == (session_ds.state_dim,)


def test_load_rejects_corruption(tmp_path, session_ds):
    raw = session_ds.to_bytes()
    (tmp_path / "bad.orld").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetError):
        OfflineDataset.load(tmp_path / "bad.orld")
    (tmp_path / "short.orld").write_bytes(raw[:-3])
    with pytest.raises(DatasetError):
        OfflineDataset.load(tmp_path / "short.orld")


def test_csv_mirror(tmp_path):
    ds = synthetic(3)
    ds.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].split(",") == ["episode_id", "step_index", "s0", "s1", "action", "reward_rev", "reward_eng",
                                   "ns0", "ns1", "done", "time_bucket"]
    assert len(lines) == 4


def test_dataset_is_immutable(session_ds):
    with pytest.raises(ValueError):
        session_ds.records["action"][0] = 1


def test_action_range_checked():
    rec = np.zeros(2, dtype=record_dtype(1))
    rec["action"] = [0, 3]
    with pytest.raises(DatasetError):
        OfflineDataset(rec, 2)


def test_standardization_statistics(session_ds):
    train, _ = split_random(session_ds, 0.7, np.random.default_rng(0))
    z = train.normalize(train.states)
    varying = train.states.std(axis=0) > 0
    assert np.all(np.abs(z.mean(axis=0)) < 1e-6)
    np.testing.assert_allclose(z.std(axis=0)[varying], 1.0, atol=1e-6)


def test_constant_feature_uses_std_floor():
    rec = np.zeros(4, dtype=record_dtype(1))
    rec["state"] = 5.0
    ds = OfflineDataset(rec, 2)
    assert ds.norm_std[0] == 1e-8
    assert np.all(ds.normalize(ds.states) == 0)


def test_split_by_time_definition():
    ds = synthetic(48, buckets=np.repeat(np.arange(24), 2))
    train, test = split_by_time(ds, 12)
    assert set(train.time_buckets) == set(range(12))
    assert set(test.time_buckets) == set(range(12, 24))
    np.testing.assert_array_equal(train.norm_mean, test.norm_mean)
    np.testing.assert_allclose(train.norm_mean, train.states.mean(axis=0))


def test_split_by_time_empty_side():
    with pytest.raises(DatasetError):
        split_by_time(synthetic(10), 1)


def test_drift_changes_engagement_between_time_splits(session_ds):
    train, test = split_by_time(session_ds, 12)
    # same action, comparable users: morning vs afternoon engagement reward
    lo_tr = train.records["reward_eng"][train.actions == 1].mean()
    lo_te = test.records["reward_eng"][test.actions == 1].mean()
    assert abs(lo_tr - lo_te) > 0.05


def test_split_random_floor_rule_and_partition():
    ds = synthetic(1000, episodes=np.arange(1000))
    train, test = split_random(ds, 0.7, np.random.default_rng(0))
    assert len(np.unique(train.episode_ids)) == 700
    union = np.union1d(train.episode_ids, test.episode_ids)
    np.testing.assert_array_equal(union, np.arange(1000))
    again, _ = split_random(ds, 0.7, np.random.default_rng(0))
    np.testing.assert_array_equal(again.episode_ids, train.episode_ids)


def test_split_random_keeps_episodes_whole(session_ds):
    train, test = split_random(session_ds, 0.5, np.random.default_rng(1))
    assert not set(train.episode_ids.tolist()) & set(test.episode_ids.tolist())


def test_sample_indices_uniform():
    rng = np.random.default_rng(0)
    idx = np.concatenate([sample_indices(10, 10, rng) for _ in range(100_000)])
    counts = np.bincount(idx, minlength=10)
    expected = len(idx) / 10
    sigma = np.sqrt(len(idx) * 0.1 * 0.9)
    assert np.all(np.abs(counts - expected) < 3 * sigma)


def test_sample_batch_single_record_and_determinism():
    ds = synthetic(1)
    b = sample_batch(ds, 1, np.random.default_rng(0), normalized=False)
    np.testing.assert_array_equal(b.states, ds.states)
    with pytest.raises(ValueError):
        sample_batch(ds, 2, np.random.default_rng(0))
    big = synthetic(50)
    x = sample_batch(big, 8, np.random.default_rng(4)).states
    y = sample_batch(big, 8, np.random.default_rng(4)).states
    np.testing.assert_array_equal(x, y)


def test_batch_reward_scalarization():
    ds = synthetic(4)
    b = ds.batch(np.arange(4))
    assert np.allclose(b.rewards(2.0), b.reward_rev + 2.0 * b.reward_eng)
    with pytest.raises(ValueError):
        b.rewards(1.0, "profit")


def test_drop_features():
    ds = synthetic(5, d=3)
    dropped = ds.drop_features([2])
    assert dropped.state_dim == 2
    np.testing.assert_array_equal(dropped.states, ds.states[:, :2])


def test_behavior_policy_validation():
    with pytest.raises(ValueError):
        BehaviorPolicy(epsilon=0.5)
    with pytest.raises(ValueError):
        BehaviorPolicy(lambda s: s, epsilon=1.5)
