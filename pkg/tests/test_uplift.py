import logging

import numpy as np
import pytest

from adload.dataset import OfflineDataset, record_dtype
from adload.uplift import (
    FeatureMask,
    NormalizationUndefinedError,
    RankedUnit,
    TLearner,
    Units,
    cost_curve,
    default_grid,
    perturb_sweep,
    score_units,
)


def population(n, rng, informative=True):
    """Units with heterogeneous effects; returns (units, true combined effect)."""
    x = rng.uniform(-1, 1, n)
    tau_rev = 1.0 + x
    tau_eng = -(1.0 - 0.8 * x)
    treated = rng.random(n) < 0.5
    rev = 0.5 + treated * tau_rev + rng.normal(0, 0.5, n)
    eng = 2.0 + treated * tau_eng + rng.normal(0, 0.5, n)
    score = tau_rev + tau_eng if informative else rng.normal(size=n)
    return Units(score, treated, rev, eng), tau_rev + tau_eng


def brute_force_curve(units, n_buckets):
    """Direct transcription: sort, take prefixes, difference of arm means."""
    n = len(units)
    order = sorted(range(n), key=lambda i: (-units.score[i], units.unit_id[i]))

    def effect(m):
        top = order[:m]
        t = [i for i in top if units.treated[i]]
        c = [i for i in top if not units.treated[i]]
        if not t or not c:
            return None
        g = (np.mean(units.rev[t]) - np.mean(units.rev[c])) * m / n
        l = (np.mean(units.eng[c]) - np.mean(units.eng[t])) * m / n
        return g, l

    g1, l1 = effect(n)
    xs, ys = [0.0], [0.0]
    for k in range(1, n_buckets + 1):
        e = effect(int(np.ceil(k * n / n_buckets)))
        if e is not None:
            xs.append(e[1] / l1)
            ys.append(e[0] / g1)
    xs[-1], ys[-1] = 1.0, 1.0
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return np.array(xs), np.array(ys), float(trapezoid(ys, xs))


def test_combined_and_sensitivity_scores():
    np.testing.assert_allclose(score_units([2.0, 1.0], [-1.0, -0.5], "combined", alpha=2.0), [0.0, 0.0])
    assert score_units([0.3], [-0.1])[0] == pytest.approx(0.2)
    s = score_units([2.0, 1.0, 1.0, -1.0], [-1.0, -4.0, 0.0, 1e-12], "sensitivity")
    assert s[0] == 2.0 and s[1] == 0.25
    assert s[2] == np.inf and s[3] == -np.inf
    with pytest.raises(ValueError):
        score_units([1.0], [1.0], "ratio")


def test_cost_curve_matches_brute_force():
    rng = np.random.default_rng(0)
    units, _ = population(400, rng)
    for nb in (1, 7, 50, 400):
        curve = cost_curve(units, nb)
        x, y, area = brute_force_curve(units, nb)
        np.testing.assert_allclose(curve.x, x, atol=1e-12)
        np.testing.assert_allclose(curve.y, y, atol=1e-12)
        assert curve.aucc == pytest.approx(area, abs=1e-12)


def test_curve_endpoints():
    units, _ = population(2000, np.random.default_rng(1))
    c = cost_curve(units, 20)
    assert c.points[0] == (0.0, 0.0) and c.points[-1] == (1.0, 1.0)
    assert c.fractions[-1] == 1.0


def test_single_bucket_is_exactly_half():
    units, _ = population(1000, np.random.default_rng(2))
    assert cost_curve(units, 1).aucc == 0.5


def test_monotone_transform_invariance_is_exact():
    units, _ = population(3000, np.random.default_rng(3))
    base = cost_curve(units, 100)
    for f in (lambda s: np.exp(s), lambda s: 3.0 * s - 7.0, lambda s: s**3):
        moved = Units(f(units.score), units.treated, units.rev, units.eng, units.unit_id)
        c = cost_curve(moved, 100)
        assert c.aucc == base.aucc
        np.testing.assert_array_equal(c.x, base.x)


def test_random_ranking_is_near_diagonal():
    rng = np.random.default_rng(4)
    auccs = [cost_curve(population(20_000, rng, informative=False)[0], 100).aucc for _ in range(20)]
    assert abs(np.mean(auccs) - 0.5) < 0.03


def test_true_effect_ranking_beats_random():
    units, _ = population(20_000, np.random.default_rng(5))
    assert cost_curve(units, 100).aucc > 0.6


def test_ties_broken_by_unit_id_independent_of_input_order():
    rng = np.random.default_rng(6)
    units, _ = population(500, rng)
    tied = Units(np.round(units.score, 1), units.treated, units.rev, units.eng)
    perm = rng.permutation(500)
    shuffled = Units(tied.score[perm], tied.treated[perm], tied.rev[perm], tied.eng[perm], tied.unit_id[perm])
    assert cost_curve(tied, 50).aucc == cost_curve(shuffled, 50).aucc


def test_ranked_unit_records_give_same_curve():
    units, _ = population(300, np.random.default_rng(7))
    recs = [RankedUnit(int(i), float(s), bool(t), float(r), float(e))
            for i, s, t, r, e in zip(units.unit_id, units.score, units.treated, units.rev, units.eng)]
    assert cost_curve(recs, 30).aucc == cost_curve(units, 30).aucc


def test_normalization_undefined_without_aggregate_effect():
    n = 100
    treated = np.arange(n) % 2 == 0
    with pytest.raises(NormalizationUndefinedError):
        cost_curve(Units(np.arange(n), treated, np.ones(n), np.ones(n)))
    with pytest.raises(NormalizationUndefinedError):
        cost_curve(Units(np.arange(n), np.ones(n, bool), np.ones(n), np.ones(n)))


def test_buckets_missing_an_arm_are_skipped(caplog):
    n = 200
    treated = np.zeros(n, bool)
    treated[::2] = True
    treated[:20] = True  # the top 10% has no control units
    rev = np.where(treated, 1.0, 0.0) + np.linspace(0, 0.1, n)
    eng = np.where(treated, 0.0, 1.0)
    with caplog.at_level(logging.WARNING):
        c = cost_curve(Units(-np.arange(n, dtype=float), treated, rev, eng), 20)
    assert c.skipped == [1, 2]
    assert "skipped" in caplog.text


def test_nan_scores_rejected():
    with pytest.raises(ValueError):
        Units([0.0, np.nan], [True, False], [0, 0], [0, 0])


def arm_dataset(n=2000, single_arm=False):
    rng = np.random.default_rng(0)
    rec = np.zeros(n, dtype=record_dtype(2))
    rec["state"] = rng.normal(size=(n, 2))
    rec["action"] = 1 if single_arm else rng.integers(0, 2, n)
    # revenue effect is 3 when x0 > 0 and 1 otherwise; engagement effect is -2
    hi = rec["state"][:, 0] > 0
    rec["reward_rev"] = rec["action"] * np.where(hi, 3.0, 1.0)
    rec["reward_eng"] = 5.0 - 2.0 * rec["action"]
    rec["done"] = 1
    return OfflineDataset(rec, 2)


def test_t_learner_recovers_piecewise_effects():
    ds = arm_dataset()
    tl = TLearner(max_depth=3, min_samples_leaf=20).fit(ds)
    x = np.array([[1.0, 0.0], [-1.0, 0.5]])
    d_rev, d_eng = tl.deltas(x)
    np.testing.assert_allclose(d_rev, [3.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(d_eng, [-2.0, -2.0], atol=1e-12)


def test_t_learner_needs_both_arms():
    with pytest.raises(ValueError):
        TLearner().fit(arm_dataset(single_arm=True))


def test_feature_mask_passes_leading_columns():
    class Echo:
        def deltas(self, s):
            return s[:, 0], s[:, -1]

    rev, eng = FeatureMask(Echo(), [0, 1]).deltas(np.array([[1.0, 2.0, 9.0]]))
    assert rev[0] == 1.0 and eng[0] == 2.0


def test_default_grids():
    np.testing.assert_allclose(default_grid("force_mag"), [5.0, 7.5, 10.0, 12.5, 15.0])
    np.testing.assert_allclose(default_grid("action_flip_prob"), [0.0, 0.075, 0.15, 0.225, 0.3])


def test_perturb_sweep_inserts_nominal_and_is_reproducible():
    policy = lambda s: (s[:, 2] + 0.5 * s[:, 3] > 0).astype(int)
    a = perturb_sweep(policy, "pole_length", grid=[0.25, 0.75], episodes=3, seeds=2)
    assert a.grid == [0.25, 0.5, 0.75] and a.nominal == 0.5
    assert a.returns.shape == (3, 6)
    b = perturb_sweep(policy, "pole_length", grid=[0.25, 0.75], episodes=3, seeds=2)
    np.testing.assert_array_equal(a.returns, b.returns)
    with pytest.raises(ValueError):
        perturb_sweep(policy, "gravity")
