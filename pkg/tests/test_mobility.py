from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micromeasures.mobility import (
    HomeAssignment, MobilityModel, ModelKind, compare_models, evaluate, fit, infer_homes, load_model,
    predict, sample_destination, sample_destinations, save_model,
)
from micromeasures.synthetic import planted_commuter_model
from micromeasures.trace import MONDAY_EPOCH, DayType, Period, TimeBucket, Trace, generate_trace, split_train_test

NIGHT = 22 * 3600
MORNING = 8 * 3600


def _trace(rows, antennas=10, sp_map=None):
    users = sorted({u for u, _, _ in rows})
    code = {u: k for k, u in enumerate(users)}
    return Trace(np.array(users, dtype=object), [code[u] for u, _, _ in rows],
                 [a for _, a, _ in rows], [t for _, _, t in rows], antennas, sp_map).sorted()


def _night(day):
    return MONDAY_EPOCH + day * 86400 + NIGHT


def test_home_unique_argmax():
    rows = [("u", 3, _night(d)) for d in range(5)] + [("u", 7, _night(d) + 60) for d in range(2)]
    assert infer_homes(_trace(rows))["u"] == 3


def test_home_tie_goes_to_lowest_antenna():
    rows = [("u", 7, _night(d)) for d in range(4)] + [("u", 3, _night(d) + 60) for d in range(4)]
    assert infer_homes(_trace(rows))["u"] == 3


def test_home_ignores_daytime_counts():
    rows = [("u", 2, _night(0))] + [("u", 5, MONDAY_EPOCH + MORNING + k) for k in range(9)]
    assert infer_homes(_trace(rows))["u"] == 2


def test_home_fallback_without_night_records():
    rows = [("u", 4, MONDAY_EPOCH + MORNING + k) for k in range(3)] + [("u", 1, MONDAY_EPOCH + MORNING + 10)]
    assert infer_homes(_trace(rows))["u"] == 4


def test_home_recovery_from_planted_generator():
    planted, _ = planted_commuter_model(50, 5, seed=8, night_home=0.8)
    trace, truth = generate_trace(planted, 1000, 14, 3, 1)
    homes = infer_homes(trace)
    assert (homes.antenna == truth[[int(u) for u in homes.users]]).mean() >= 0.95


def test_homes_are_seen_at_night():
    planted, _ = planted_commuter_model(20, 4, seed=1)
    trace, _ = generate_trace(planted, 200, 7, 1.5, 3)
    homes = infer_homes(trace)
    period, _ = trace.buckets()
    for code, user in enumerate(trace.users):
        mine = trace.user == code
        night = mine & (period == Period.NIGHT)
        pool = trace.antenna[night] if night.any() else trace.antenna[mine]
        assert homes[user] in set(pool.tolist())


def test_fit_closed_form_posterior():
    # one user, home 0, four weekday-morning calls: antenna 0 x3, antenna 1 x1
    rows = [("u", 0, MONDAY_EPOCH + MORNING + k) for k in range(3)] + [("u", 1, MONDAY_EPOCH + MORNING + 9)]
    trace = _trace(rows, antennas=4)
    model = fit(trace, HomeAssignment(np.array(["u"], dtype=object), np.array([0])), ModelKind.HOME_ANTENNA_TIME, 1.0)
    assert np.allclose(model.probs[0, Period.MORNING, DayType.WEEKDAY], [0.5, 0.25, 0.125, 0.125])
    assert np.allclose(model.probs[0, Period.NIGHT, DayType.WEEKEND], 0.25)
    assert np.allclose(model.probs[3, Period.AFTERNOON, DayType.WEEKDAY], 0.25)


def _count_oracle(trace, homes, kind):
    """Independent per-record count, then the smoothing formula."""
    period, daytype = trace.buckets()
    counts = Counter()
    for k, rec in enumerate(trace):
        h = homes[rec.user]
        ctx = {
            ModelKind.HOME_ANTENNA_TIME: (h, period[k], daytype[k]),
            ModelKind.SUBPREF_TIME: (trace.sp_map[h], period[k], daytype[k]),
            ModelKind.TIME_ONLY: (period[k], daytype[k]),
        }[kind]
        counts[ctx + (rec.antenna,)] += 1
    return counts


@pytest.mark.parametrize("kind", [ModelKind.HOME_ANTENNA_TIME, ModelKind.SUBPREF_TIME, ModelKind.TIME_ONLY])
def test_fit_matches_count_oracle(kind):
    planted, sp = planted_commuter_model(10, 2, seed=5)
    trace, _ = generate_trace(planted, 60, 7, 2, 5)
    trace = trace.with_sp_map(sp)
    homes = infer_homes(trace)
    model = fit(trace, homes, kind, alpha=0.5)
    oracle = _count_oracle(trace, homes, kind)
    assert model.counts.sum() == len(trace)
    for key, n in oracle.items():
        assert model.counts[key] == n
    ctx = next(iter(oracle))[:-1]
    row = np.array([oracle[ctx + (a,)] for a in range(10)], dtype=float)
    assert np.allclose(model.probs[ctx], (row + 0.5) / (row.sum() + 5.0))


def test_markov_first_record_contributes_nothing():
    rows = [("a", 1, 0), ("a", 2, 10), ("a", 2, 20), ("b", 3, 5)]
    model = fit(_trace(rows, 4), None, ModelKind.MARKOV, alpha=1.0)
    assert model.counts.sum() == 2
    assert model.counts[1, 2] == 1 and model.counts[2, 2] == 1


def test_markov_prediction_is_smoothed_transition_row():
    planted, _ = planted_commuter_model(10, 2, seed=0)
    trace, _ = generate_trace(planted, 30, 7, 3, 0)
    model = fit(trace, None, ModelKind.MARKOV, alpha=0.5)
    transitions = Counter()
    records = list(trace)
    for prev, cur in zip(records, records[1:]):
        if prev.user == cur.user:
            transitions[prev.antenna, cur.antenna] += 1
    a = 4
    row = np.array([transitions[a, b] for b in range(10)], dtype=float)
    assert np.allclose(predict(model, prev=a), (row + 0.5) / (row.sum() + 5.0))


def test_small_alpha_approaches_empirical_frequencies():
    planted, _ = planted_commuter_model(10, 2, seed=2)
    trace, _ = generate_trace(planted, 80, 7, 3, 2)
    homes = infer_homes(trace)
    model = fit(trace, homes, ModelKind.HOME_ANTENNA_TIME, alpha=1e-12)
    counts = model.counts.astype(float)
    total = counts.sum(-1, keepdims=True)
    observed = total[..., 0] > 0
    assert np.allclose(model.probs[observed], (counts / np.where(total > 0, total, 1))[observed], atol=1e-9)


def test_fit_rejects_unknown_user():
    trace = _trace([("a", 1, 0), ("b", 2, 0)])
    homes = HomeAssignment(np.array(["a"], dtype=object), np.array([1]))
    with pytest.raises(KeyError, match="unknown user"):
        fit(trace, homes, ModelKind.HOME_ANTENNA_TIME)


def test_fit_spm_requires_map():
    trace = _trace([("a", 1, 0)])
    with pytest.raises(ValueError, match="sub-prefecture"):
        fit(trace, infer_homes(trace), ModelKind.SUBPREF_TIME)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(ModelKind)), st.floats(0.01, 5.0))
def test_distributions_normalised_and_positive(seed, kind, alpha):
    planted, sp = planted_commuter_model(10, 2, seed=seed % 7)
    trace, _ = generate_trace(planted, 20, 3, 2, seed)
    trace = trace.with_sp_map(sp)
    model = fit(trace, infer_homes(trace), kind, alpha)
    assert np.allclose(model.probs.sum(-1), 1.0, atol=1e-9)
    assert (model.probs > 0).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_fit_ignores_record_order(seed):
    planted, sp = planted_commuter_model(10, 2, seed=1)
    trace, _ = generate_trace(planted, 25, 5, 3, seed)
    trace = trace.with_sp_map(sp)
    perm = np.random.default_rng(seed).permutation(len(trace))
    shuffled = Trace(trace.users, trace.user[perm], trace.antenna[perm], trace.timestamp[perm], 10, sp)
    homes = infer_homes(trace)
    for kind in (ModelKind.HOME_ANTENNA_TIME, ModelKind.SUBPREF_TIME, ModelKind.TIME_ONLY):
        assert np.array_equal(fit(trace, homes, kind).probs, fit(shuffled, homes, kind).probs)


def test_predict_shapes_and_errors():
    planted, sp = planted_commuter_model(10, 2, seed=0)
    trace, _ = generate_trace(planted, 40, 7, 2, 0)
    homes = infer_homes(trace)
    hat = fit(trace, homes, ModelKind.HOME_ANTENNA_TIME)
    p = predict(hat, home=3, bucket=TimeBucket(Period.MORNING, DayType.WEEKDAY))
    assert p.shape == (10,) and (p > 0).all() and abs(p.sum() - 1) < 1e-12
    with pytest.raises(IndexError):
        predict(hat, home=10, bucket=TimeBucket(0, 0))
    with pytest.raises(IndexError):
        predict(hat, home=0, bucket=(3, 0))
    tm = fit(trace, None, ModelKind.TIME_ONLY)
    b = TimeBucket(Period.AFTERNOON, DayType.WEEKEND)
    assert np.array_equal(predict(tm, home=1, bucket=b), predict(tm, home=7, bucket=b))


def test_evaluate_uniform_model():
    probs = np.full((100, 3, 2, 100), 0.01)
    model = MobilityModel.planted(probs)
    trace = _trace([("a", k, k * 1000) for k in range(50)], antennas=100)
    homes = HomeAssignment(np.array(["a"], dtype=object), np.array([0]))
    assert evaluate(model, trace, homes).avg_loglik == pytest.approx(-np.log(100), abs=1e-12)


def test_evaluate_point_mass_on_own_samples():
    n = 5
    probs = np.zeros((n, 3, 2, n))
    for h in range(n):
        probs[h, :, :, h] = 1.0
    model = MobilityModel.planted(probs)
    trace, truth = generate_trace(model, 30, 7, 2, 0)
    homes = HomeAssignment(trace.users, truth)
    assert evaluate(model, trace, homes).avg_loglik == 0.0


def test_evaluate_markov_uses_training_history():
    train = _trace([("a", 1, 0), ("a", 2, 10)], 4)
    test = _trace([("a", 3, 20), ("b", 0, 5)], 4)
    model = fit(train, None, ModelKind.MARKOV, alpha=1.0)
    report = evaluate(model, test, None, history=train)
    assert report.n_test == 1
    assert report.avg_loglik == pytest.approx(np.log(model.probs[2, 3]))


def test_evaluate_finite_on_disjoint_test():
    planted, sp = planted_commuter_model(20, 4, seed=3)
    trace, _ = generate_trace(planted, 200, 14, 3, 3)
    trace = trace.with_sp_map(sp)
    train, test = split_train_test(trace, 0.1, 0)
    for report in compare_models(train, test).values():
        assert np.isfinite(report.avg_loglik) and report.avg_loglik <= 0


def test_model_ranking_on_planted_data():
    planted, sp = planted_commuter_model(50, 5, seed=0)
    trace, _ = generate_trace(planted, 600, 14, 3, 0)
    train, test = split_train_test(trace.with_sp_map(sp), 0.1, 0)
    r = {k: v.avg_loglik for k, v in compare_models(train, test).items()}
    assert r[ModelKind.HOME_ANTENNA_TIME] > r[ModelKind.SUBPREF_TIME] > r[ModelKind.TIME_ONLY] > r[ModelKind.MARKOV]


def _point_mass(n):
    probs = np.zeros((n, 3, 2, n))
    for h in range(n):
        probs[h, :, :, h] = 1.0
    return MobilityModel.planted(probs)


def test_sample_point_mass_returns_home():
    rng = np.random.default_rng(0)
    model = _point_mass(7)
    assert all(sample_destination(model, h, TimeBucket(0, 0), rng) == h for h in range(7) for _ in range(20))


def test_sample_frequencies_within_three_sigma():
    pr = np.array([0.2, 0.5, 0.3])
    model = MobilityModel.planted(np.broadcast_to(pr, (3, 3, 2, 3)).copy())
    draws = sample_destinations(model, np.zeros(100_000, dtype=int), TimeBucket(1, 0), np.random.default_rng(1))
    freq = np.bincount(draws, minlength=3) / 100_000
    assert np.all(np.abs(freq - pr) <= 3 * np.sqrt(pr * (1 - pr) / 100_000))


def test_sampling_is_deterministic():
    planted, _ = planted_commuter_model(20, 4, seed=0)
    homes = np.arange(20).repeat(50)
    a = sample_destinations(planted, homes, TimeBucket(0, 1), np.random.default_rng(42))
    b = sample_destinations(planted, homes, TimeBucket(0, 1), np.random.default_rng(42))
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40), st.floats(0.05, 5.0))
def test_guide_sampler_equals_searchsorted(seed, k, conc):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(k, conc), size=(k, 3, 2))
    probs[0, 0, 0] = 0.0
    probs[0, 0, 0, k // 2] = 1.0
    model = MobilityModel.planted(probs)
    homes = rng.integers(0, k, 2000)
    u = rng.random(2000)
    got = model.sampler(TimeBucket(0, 0)).draw(homes, u)
    cdf = np.cumsum(probs[:, 0, 0], axis=1)
    cdf[:, -1] = 1.0
    expected = np.array([np.searchsorted(cdf[h], x, side="right") for h, x in zip(homes, u)])
    assert np.array_equal(got, expected)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_model_file_round_trip(tmp_path, kind):
    planted, sp = planted_commuter_model(10, 2, seed=0)
    trace, _ = generate_trace(planted, 40, 7, 2, 0)
    trace = trace.with_sp_map(sp)
    model = fit(trace, infer_homes(trace), kind, 0.7)
    save_model(model, tmp_path / "m.npz")
    loaded = load_model(tmp_path / "m.npz")
    assert loaded.kind is model.kind and loaded.alpha == model.alpha
    assert np.array_equal(loaded.probs, model.probs) and np.array_equal(loaded.counts, model.counts)
    assert (loaded.sp_map is None) == (model.sp_map is None)


def test_planted_model_round_trip(tmp_path):
    planted, _ = planted_commuter_model(10, 2, seed=0)
    save_model(planted, tmp_path / "p.npz")
    loaded = load_model(tmp_path / "p.npz")
    assert loaded.alpha is None and loaded.counts is None
    assert np.array_equal(loaded.probs, planted.probs)
