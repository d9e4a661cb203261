"""CART regression trees and teacher-student distillation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TREE_HEADER = "# adload regression tree v1"


@dataclass
class RegressionTree:
    """Array-backed binary tree. ``feature[i] == -1`` marks a leaf.

    Samples with ``x[feature] <= threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    n_features: int
    max_depth: int
    min_samples_leaf: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"tree expects {self.n_features} features, got {X.shape[1]}")
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return node
            r, n, f = rows[internal], node[internal], feat[internal]
            go_left = X[r, f] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    # -- text format ---------------------------------------------------------
    def to_text(self) -> str:
        lines = [TREE_HEADER,
                 f"# n_features={self.n_features} max_depth={self.max_depth} min_samples_leaf={self.min_samples_leaf}",
                 "# id split feature threshold left right | id leaf prediction count"]
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                lines.append(f"{i} split {self.feature[i]} {float(self.threshold[i])!r} {self.left[i]} {self.right[i]}")
            else:
                lines.append(f"{i} leaf {float(self.value[i])!r} {self.count[i]}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RegressionTree":
        lines = text.splitlines()
        if not lines or lines[0].strip() != TREE_HEADER:
            raise ValueError("not an adload regression tree file")
        meta = dict(kv.split("=") for kv in lines[1].lstrip("# ").split())
        body = [ln.split() for ln in lines[2:] if ln.strip() and not ln.startswith("#")]
        n = len(body)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)
        count = np.zeros(n, dtype=np.int64)
        for parts in body:
            i = int(parts[0])
            if parts[1] == "split":
                feature[i], threshold[i] = int(parts[2]), float(parts[3])
                left[i], right[i] = int(parts[4]), int(parts[5])
            elif parts[1] == "leaf":
                value[i], count[i] = float(parts[2]), int(parts[3])
            else:
                raise ValueError(f"unknown node kind {parts[1]!r}")
        return cls(feature, threshold, left, right, value, count,
                   int(meta["n_features"]), int(meta["max_depth"]), int(meta["min_samples_leaf"]))

    @classmethod
    def load(cls, path) -> "RegressionTree":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _best_split(X, y, min_leaf):
    """Exhaustive variance-reduction search. Returns ``(gain, feature, threshold)``."""
    n = len(y)
    total, total_sq = y.sum(), (y * y).sum()
    parent_sse = total_sq - total * total / n
    best = (0.0, -1, 0.0)
    k = np.arange(1, n)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys = X[order, j], y[order]
        cs = np.cumsum(ys)[:-1]
        cs2 = np.cumsum(ys * ys)[:-1]
        sse_left = cs2 - cs * cs / k
        sse_right = (total_sq - cs2) - (total - cs) ** 2 / (n - k)
        gain = parent_sse - sse_left - sse_right
        valid = (xs[1:] > xs[:-1]) & (k >= min_leaf) & (n - k >= min_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > best[0]:
            best = (float(gain[pos]), j, 0.5 * (xs[pos] + xs[pos + 1]))
    tol = 1e-12 * max(1.0, abs(parent_sse))
    return best if best[0] > tol else (0.0, -1, 0.0)


def tree_fit(X, y, max_depth=8, min_samples_leaf=50) -> RegressionTree:
    """Greedy CART regression: split while it lowers the sum of squared errors.

    Candidate thresholds are midpoints between consecutive distinct values.
    Growth stops at ``max_depth``, when a child would hold fewer than
    ``min_samples_leaf`` samples, or when no split has positive gain.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 1:
        raise ValueError("need at least one sample")
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    min_samples_leaf = max(1, int(min_samples_leaf))
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        count.append(len(idx))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or len(idx) < 2 * min_samples_leaf:
            continue
        gain, j, thr = _best_split(X[idx], y[idx], min_samples_leaf)
        if j < 0:
            continue
        mask = X[idx, j] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = j, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return RegressionTree(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(value), np.array(count, dtype=np.int64),
        X.shape[1], int(max_depth), min_samples_leaf,
    )


def tree_predict(tree: RegressionTree, X) -> np.ndarray:
    return tree.predict(X)


def make_teacher_labels(teacher, states, mode="combined", alpha=1.0) -> np.ndarray:
    """Teacher ranking scores used as regression targets for the student."""
    from .uplift import score_units

    d_rev, d_eng = teacher.deltas(states)
    labels = score_units(d_rev, d_eng, mode, alpha)
    if not np.all(np.isfinite(labels)):
        raise ValueError("teacher produced non-finite labels; use combined mode or clip sensitivity scores")
    return labels


@dataclass
class DistillReport:
    teacher_aucc: float
    student_aucc: float
    baseline_aucc: float
    student: RegressionTree

    def rows(self):
        return [
            ("teacher", self.teacher_aucc),
            ("student_with_teacher", self.student_aucc),
            ("student_without_teacher", self.baseline_aucc),
        ]


def distill_ablation(teacher, train, test, mode="combined", alpha=1.0, max_depth=8, min_samples_leaf=50,
                     n_buckets=100, baseline=None) -> DistillReport:
    """Test AUCC of teacher, tree student of the teacher, and a T-learner without teacher.

    ``train``/``test`` are ``OfflineDataset`` objects collected under
    randomized treatment; ``teacher`` exposes ``deltas(states)``.
    """
    from .uplift import TLearner, cost_curve, score_units, units_from_dataset

    labels = make_teacher_labels(teacher, train.states, mode, alpha)
    student = tree_fit(train.states, labels, max_depth, min_samples_leaf)
    baseline = baseline or TLearner(max_depth=max_depth, min_samples_leaf=min_samples_leaf).fit(train)

    def aucc(scores):
        return cost_curve(units_from_dataset(test, scores), n_buckets).aucc

    teacher_scores = score_units(*teacher.deltas(test.states), mode, alpha)
    baseline_scores = score_units(*baseline.deltas(test.states), mode, alpha)
    return DistillReport(aucc(teacher_scores), aucc(student.predict(test.states)), aucc(baseline_scores), student)
