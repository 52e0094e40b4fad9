import datetime as dt
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micromeasures.mobility import MobilityModel, infer_homes
from micromeasures.synthetic import planted_commuter_model
from micromeasures.trace import (
    MONDAY_EPOCH, DayType, Period, Trace, TraceError, bucket, bucket_of, filter_users,
    generate_trace, parse_trace, read_subpref_map, split_train_test, write_subpref_map, write_trace,
)


def _write(path, text):
    path.write_text(text)
    return path


def test_parse_small_file(tmp_path):
    trace = parse_trace(_write(tmp_path / "t.csv", "u1,5,0\nu1,5,86400\nu2,7,100\n"), 10)
    assert trace.n_users == 2
    assert len(trace) == 3
    assert list(trace) == [("u1", 4, 0), ("u1", 4, 86400), ("u2", 6, 100)]


def test_parse_with_header_and_malformed_lines(tmp_path):
    text = "user_id,antenna_id,timestamp\nu1,5,10\nu1,x,20\nbroken\nu2,3,5\nu3,4,1.5\n"
    trace = parse_trace(_write(tmp_path / "t.csv", text), 10)
    assert len(trace) == 2
    assert trace.malformed == 3


def test_parse_sorts_non_monotone_timestamps(tmp_path):
    trace = parse_trace(_write(tmp_path / "t.csv", "u1,1,50\nu2,2,1\nu1,2,10\n"), 3)
    assert [r.timestamp for r in trace if r.user == "u1"] == [10, 50]


@pytest.mark.parametrize("antenna", ["0", "11", "-2"])
def test_parse_rejects_out_of_range_antenna(tmp_path, antenna):
    with pytest.raises(TraceError, match="antenna id out of range"):
        parse_trace(_write(tmp_path / "t.csv", f"u1,{antenna},0\n"), 10)


def test_parse_missing_file(tmp_path):
    with pytest.raises(TraceError, match="cannot read"):
        parse_trace(tmp_path / "absent.csv", 10)


def test_large_generated_trace_round_trips(tmp_path):
    planted, _ = planted_commuter_model(50, 5, seed=1)
    trace, _ = generate_trace(planted, users=12_000, days=28, calls_per_day=3, rng_seed=4)
    assert len(trace) > 1_000_000
    write_trace(trace, tmp_path / "big.csv")
    assert parse_trace(tmp_path / "big.csv", 50) == trace


def test_subpref_map_round_trip(tmp_path):
    sp = np.array([3, 3, 9, 1, 9])
    write_subpref_map(sp, tmp_path / "sp.csv")
    assert read_subpref_map(tmp_path / "sp.csv", 5).tolist() == [1, 1, 2, 0, 2]


def _oracle_bucket(ts):
    when = dt.datetime(1970, 1, 1) + dt.timedelta(seconds=int(ts))
    if 6 <= when.hour < 13:
        period = Period.MORNING
    elif 13 <= when.hour < 20:
        period = Period.AFTERNOON
    else:
        period = Period.NIGHT
    return period, DayType.WEEKEND if when.weekday() >= 5 else DayType.WEEKDAY


@pytest.mark.parametrize("clock,period", [
    ("05:59:59", Period.NIGHT), ("06:00:00", Period.MORNING),
    ("12:59:59", Period.MORNING), ("13:00:00", Period.AFTERNOON),
    ("19:59:59", Period.AFTERNOON), ("20:00:00", Period.NIGHT),
    ("00:00:00", Period.NIGHT), ("23:59:59", Period.NIGHT),
])
def test_bucket_boundaries(clock, period):
    h, m, s = map(int, clock.split(":"))
    ts = MONDAY_EPOCH + h * 3600 + m * 60 + s
    assert bucket(ts) == (period, DayType.WEEKDAY)


def test_weekend_days():
    saturday = MONDAY_EPOCH + 5 * 86400 + 10 * 3600
    assert bucket(saturday).daytype == DayType.WEEKEND
    assert bucket(saturday + 86400).daytype == DayType.WEEKEND
    assert bucket(saturday + 2 * 86400).daytype == DayType.WEEKDAY


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=4_000_000_000))
def test_bucket_matches_calendar(ts):
    assert tuple(bucket(ts)) == _oracle_bucket(ts)


def test_bucket_of_vectorised_agrees():
    ts = np.random.default_rng(0).integers(0, 10**9, 2000)
    period, daytype = bucket_of(ts)
    assert all((p, d) == _oracle_bucket(t) for p, d, t in zip(period, daytype, ts))


def _trace_from(rows, antennas=10):
    users = sorted({u for u, _, _ in rows})
    code = {u: k for k, u in enumerate(users)}
    return Trace(np.array(users, dtype=object), [code[u] for u, _, _ in rows],
                 [a for _, a, _ in rows], [t for _, _, t in rows], antennas).sorted()


def test_filter_removes_single_antenna_user():
    rows = [("a", 3, t) for t in range(30)]
    assert len(filter_users(_trace_from(rows), 14)) == 0


def test_filter_keeps_boundary_user():
    rows = [("a", 1 + t % 2, t) for t in range(15)]
    assert filter_users(_trace_from(rows), 14).n_users == 1


def test_filter_drops_user_at_exactly_one_call_per_day():
    rows = [("a", 1 + t % 2, t) for t in range(14)]
    assert filter_users(_trace_from(rows), 14).n_users == 0


def test_filter_matches_per_user_recount():
    planted, _ = planted_commuter_model(20, 4, seed=2)
    trace, _ = generate_trace(planted, users=400, days=10, calls_per_day=1.2, rng_seed=9)
    per_user = defaultdict(list)
    for rec in trace:
        per_user[rec.user].append(rec.antenna)
    expected = {u for u, ants in per_user.items() if len(set(ants)) >= 2 and len(ants) > 10}
    kept = filter_users(trace, 10)
    assert set(kept.users) == expected
    assert 0 < len(expected) < len(per_user)
    assert sorted(kept) == sorted(r for r in trace if r.user in expected)


def test_split_ten_records():
    train, test = split_train_test(_trace_from([("a", 1, t) for t in range(10)]), 0.1, 0)
    assert (len(train), len(test)) == (9, 1)


def test_split_single_record_stays_in_training():
    train, test = split_train_test(_trace_from([("a", 1, 0)]), 0.1, 0)
    assert (len(train), len(test)) == (1, 0)


def test_split_is_deterministic():
    planted, _ = planted_commuter_model(10, 2, seed=0)
    trace, _ = generate_trace(planted, 50, 7, 3, 1)
    a = split_train_test(trace, 0.2, 5)
    b = split_train_test(trace, 0.2, 5)
    assert a[0] == b[0] and a[1] == b[1]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=12), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_split_partitions_each_user(sizes, fraction, seed):
    rows = [(f"u{k}", (k + j) % 5, j) for k, n in enumerate(sizes) for j in range(n)]
    trace = _trace_from(rows, antennas=5)
    train, test = split_train_test(trace, fraction, seed)
    assert Counter(train) + Counter(test) == Counter(trace)
    train_counts = np.bincount(train.user, minlength=trace.n_users)
    assert (train_counts >= 1).all()


def test_generate_point_mass_stays_home():
    n = 6
    probs = np.zeros((n, 3, 2, n))
    for h in range(n):
        probs[h, :, :, h] = 1.0
    trace, homes = generate_trace(MobilityModel.planted(probs), 40, 7, 3, 0)
    assert (trace.antenna == homes[trace.user]).all()


def test_generate_bucket_frequencies_within_three_sigma():
    planted, _ = planted_commuter_model(20, 4, seed=3)
    trace, homes = generate_trace(planted, 500, 14, 4, 11)
    period, daytype = trace.buckets()
    home = homes[trace.user]
    for h in range(3):
        for p in Period:
            for d in DayType:
                mask = (home == h) & (period == p) & (daytype == d)
                n = mask.sum()
                freq = np.bincount(trace.antenna[mask], minlength=20) / n
                pr = planted.probs[h, p, d]
                sigma = np.sqrt(pr * (1 - pr) / n)
                # Bonferroni-free 3-sigma per cell, plus a small floor for near-zero cells
                assert np.all(np.abs(freq - pr) <= 3 * sigma + 3 / n), (h, p, d)


def test_generate_record_count_concentration():
    planted, _ = planted_commuter_model(20, 4, seed=0)
    trace, _ = generate_trace(planted, 500, 14, 4, 2)
    mean = np.bincount(trace.user, minlength=500).mean()
    assert 50 <= mean <= 62


def test_generate_then_infer_recovers_homes():
    planted, _ = planted_commuter_model(50, 5, seed=4, night_home=0.6)
    trace, homes = generate_trace(planted, 1000, 14, 2, 6)
    inferred = infer_homes(trace)
    truth = homes[np.array([int(u) for u in inferred.users])]
    assert (inferred.antenna == truth).mean() >= 0.95
