"""Offline transition corpora: collection, splits, replay sampling and file I/O."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

ORLD_MAGIC = b"ORLD"
ORLD_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
STD_FLOOR = 1e-8


class DatasetError(ValueError):
    pass


class PartialCollectionError(RuntimeError):
    """The environment failed mid-collection; carries the records gathered so far."""

    def __init__(self, message, n_collected):
        super().__init__(message)
        self.n_collected = n_collected


@dataclass(frozen=True)
class Transition:
    episode_id: int
    step_index: int
    state: np.ndarray
    action: int
    reward_rev: float
    reward_eng: float
    next_state: np.ndarray
    done: bool
    time_bucket: int


def record_dtype(state_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("episode_id", "<u8"),
            ("step_index", "<u4"),
            ("state", "<f8", (state_dim,)),
            ("action", "u1"),
            ("reward_rev", "<f8"),
            ("reward_eng", "<f8"),
            ("next_state", "<f8", (state_dim,)),
            ("done", "u1"),
            ("time_bucket", "<u4"),
        ]
    )


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    reward_rev: np.ndarray
    reward_eng: np.ndarray
    next_states: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.actions)

    def rewards(self, alpha: float = 1.0, objective: str = "scalarized") -> np.ndarray:
        if objective == "scalarized":
            return self.reward_rev + alpha * self.reward_eng
        if objective == "rev":
            return self.reward_rev
        if objective == "eng":
            return self.reward_eng
        raise ValueError(f"unknown objective {objective!r}")


class OfflineDataset:
    """Immutable table of transitions plus standardization statistics.

    ``records`` is a packed structured array (see ``record_dtype``). Unless
    given explicitly, ``norm_mean``/``norm_std`` are fitted on ``records``.
    """

    def __init__(self, records: np.ndarray, n_actions: int, norm_mean=None, norm_std=None):
        records = np.array(records, dtype=records.dtype, copy=True)
        state_dim = records.dtype["state"].shape[0]
        if len(records) and int(records["action"].max()) >= n_actions:
            raise DatasetError("action index out of range for n_actions")
        records.flags.writeable = False
        self.records = records
        self.state_dim = int(state_dim)
        self.n_actions = int(n_actions)
        if norm_mean is None:
            norm_mean, norm_std = fit_normalization(records["state"])
        self.norm_mean = np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(norm_std, dtype=np.float64)
        self.norm_mean.flags.writeable = False
        self.norm_std.flags.writeable = False

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> Transition:
        r = self.records[i]
        return Transition(
            int(r["episode_id"]), int(r["step_index"]), r["state"].copy(), int(r["action"]),
            float(r["reward_rev"]), float(r["reward_eng"]), r["next_state"].copy(),
            bool(r["done"]), int(r["time_bucket"]),
        )

    # column accessors
    @property
    def states(self):
        return self.records["state"]

    @property
    def next_states(self):
        return self.records["next_state"]

    @property
    def actions(self):
        return self.records["action"].astype(np.int64)

    @property
    def episode_ids(self):
        return self.records["episode_id"]

    @property
    def time_buckets(self):
        return self.records["time_bucket"]

    def normalize(self, states) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.norm_mean) / self.norm_std

    def with_normalization(self, mean, std) -> "OfflineDataset":
        return OfflineDataset(self.records, self.n_actions, mean, std)

    def subset(self, mask_or_index, norm_mean=None, norm_std=None) -> "OfflineDataset":
        return OfflineDataset(self.records[mask_or_index], self.n_actions, norm_mean, norm_std)

    def batch(self, index, normalized=True) -> Batch:
        r = self.records[index]
        s, s2 = r["state"], r["next_state"]
        if normalized:
            s, s2 = self.normalize(s), self.normalize(s2)
        return Batch(s, r["action"].astype(np.int64), r["reward_rev"], r["reward_eng"], s2, r["done"].astype(bool))

    def drop_features(self, columns) -> "OfflineDataset":
        """Dataset with some state columns removed (feature ablation)."""
        keep = np.setdiff1d(np.arange(self.state_dim), np.asarray(columns))
        dt = record_dtype(len(keep))
        out = np.empty(len(self.records), dtype=dt)
        for name in dt.names:
            if name in ("state", "next_state"):
                out[name] = self.records[name][:, keep]
            else:
                out[name] = self.records[name]
        return OfflineDataset(out, self.n_actions, self.norm_mean[keep], self.norm_std[keep])

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(ORLD_MAGIC, ORLD_VERSION, self.state_dim, self.n_actions, len(self.records))
        return header + self.records.tobytes()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < _HEADER.size:
            raise DatasetError("file too short for an ORLD header")
        magic, version, state_dim, n_actions, n = _HEADER.unpack_from(data)
        if magic != ORLD_MAGIC:
            raise DatasetError(f"bad magic {magic!r}")
        if version != ORLD_VERSION:
            raise DatasetError(f"unsupported ORLD version {version}")
        dt = record_dtype(state_dim)
        expected = _HEADER.size + n * dt.itemsize
        if len(data) != expected:
            raise DatasetError(f"expected {expected} bytes, found {len(data)}")
        records = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
        return cls(records, n_actions)

    def to_csv(self, path) -> None:
        d = self.state_dim
        cols = (["episode_id", "step_index"] + [f"s{i}" for i in range(d)] + ["action", "reward_rev", "reward_eng"]
                + [f"ns{i}" for i in range(d)] + ["done", "time_bucket"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow(
                    [int(r["episode_id"]), int(r["step_index"])] + [repr(float(v)) for v in r["state"]]
                    + [int(r["action"]), repr(float(r["reward_rev"])), repr(float(r["reward_eng"]))]
                    + [repr(float(v)) for v in r["next_state"]] + [int(r["done"]), int(r["time_bucket"])]
                )


def fit_normalization(states):
    states = np.asarray(states, dtype=np.float64)
    if len(states) == 0:
        raise DatasetError("cannot fit normalization on an empty dataset")
    mean = states.mean(axis=0)
    std = np.maximum(states.std(axis=0), STD_FLOOR)
    return mean, std


# ---------------------------------------------------------------------------
# collection


class BehaviorPolicy:
    """Epsilon-mixture of a greedy base policy and the uniform policy.

    ``base`` maps a ``(k, d)`` state array to ``k`` actions; ``None`` means
    uniform. Each decision draws one uniform to choose the branch.
    """

    def __init__(self, base=None, epsilon: float = 1.0, n_actions: int = 2):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if base is None and epsilon != 1.0:
            raise ValueError("a uniform behavior policy requires epsilon = 1")
        self.base = base
        self.epsilon = float(epsilon)
        self.n_actions = n_actions

    def act(self, features, rng) -> int:
        explore = rng.random() < self.epsilon
        if explore:
            return int(rng.integers(self.n_actions))
        return int(np.asarray(self.base(features[None, :]))[0])


def collect(env, policy: BehaviorPolicy, n_samples: int, rng) -> OfflineDataset:
    """Roll ``policy`` in ``env`` until exactly ``n_samples`` transitions exist.

    ``done`` in the stored records marks true terminations only; an episode
    cut by a step limit (or by reaching ``n_samples``) ends with ``done=0``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    dt = record_dtype(env.state_dim)
    out = np.zeros(n_samples, dtype=dt)
    i = 0
    episode = 0
    while i < n_samples:
        state = env.reset(rng)
        step = 0
        while i < n_samples:
            action = policy.act(state.features, rng)
            try:
                outcome = env.step(state, action, rng)
            except Exception as exc:  # noqa: BLE001 - re-raised with context
                raise PartialCollectionError(f"environment failed after {i} transitions: {exc}", i) from exc
            rec = out[i]
            rec["episode_id"] = episode
            rec["step_index"] = step
            rec["state"] = state.features
            rec["action"] = action
            rec["reward_rev"] = outcome.reward_rev
            rec["reward_eng"] = outcome.reward_eng
            rec["next_state"] = outcome.next_state.features
            rec["done"] = outcome.done and not outcome.truncated
            rec["time_bucket"] = state.time_bucket
            i += 1
            step += 1
            if outcome.done:
                break
            state = outcome.next_state
        episode += 1
    return OfflineDataset(out, env.n_actions)


# ---------------------------------------------------------------------------
# splits and sampling


def split_by_time(ds: OfflineDataset, cut_bucket: int):
    """Records before ``cut_bucket`` train, the rest test; normalization fitted on train."""
    buckets = ds.time_buckets
    train_mask = buckets < cut_bucket
    if train_mask.all() or not train_mask.any():
        side = "test" if train_mask.all() else "train"
        raise DatasetError(f"time split at bucket {cut_bucket} leaves the {side} side empty")
    mean, std = fit_normalization(ds.states[train_mask])
    return ds.subset(train_mask, mean, std), ds.subset(~train_mask, mean, std)


def split_random(ds: OfflineDataset, train_fraction: float, rng):
    """Episode-level random split; ``floor(fraction * n_episodes)`` episodes train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    episodes = np.unique(ds.episode_ids)
    n_train = int(np.floor(train_fraction * len(episodes)))
    chosen = rng.permutation(episodes)[:n_train]
    train_mask = np.isin(ds.episode_ids, chosen)
    if not train_mask.any() or train_mask.all():
        raise DatasetError("random split produced an empty side")
    mean, std = fit_normalization(ds.states[train_mask])
    return ds.subset(train_mask, mean, std), ds.subset(~train_mask, mean, std)


def sample_indices(n: int, batch_size: int, rng) -> np.ndarray:
    if batch_size > n:
        raise ValueError("batch_size exceeds dataset size")
    return rng.integers(0, n, size=batch_size)


def sample_batch(ds: OfflineDataset, batch_size: int, rng, normalized=True) -> Batch:
    """Uniform minibatch drawn with replacement."""
    return ds.batch(sample_indices(len(ds), batch_size, rng), normalized=normalized)
