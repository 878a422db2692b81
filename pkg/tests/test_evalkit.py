import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfuse.errors import AlignmentError, ConfigError, ValidationError
from gridfuse.evalkit import (
    ContingencyTable,
    contingency,
    csi,
    diff_map,
    ets,
    events,
    far,
    pearson_r,
    pod,
    pooled_score,
    rmse,
    skill_map,
    summary_rows,
    write_map_csv,
    write_map_pgm,
    write_scalar_csv,
)
from gridfuse.grid import GridField


def brute_counts(p, o):
    h = f = m = c = 0
    for a, b in zip(p, o):
        if a and b:
            h += 1
        elif a:
            f += 1
        elif b:
            m += 1
        else:
            c += 1
    return h, f, m, c


def test_contingency_matches_brute_force():
    rng = np.random.default_rng(0)
    p = rng.integers(0, 2, 10_000)
    o = rng.integers(0, 2, 10_000)
    t = contingency(p, o)
    h, f, m, c = brute_counts(p.tolist(), o.tolist())
    assert (t.hits, t.false_alarms, t.misses, t.correct_negatives) == (h, f, m, c)
    assert csi(t) == h / (h + f + m)
    assert pod(t) == h / (h + m)
    assert far(t) == f / (h + f)
    hr = (h + f) * (h + m) / (h + f + m + c)
    assert ets(t) == (h - hr) / (h + f + m - hr)


def test_ets_worked_example():
    assert ets(ContingencyTable(40, 10, 20, 30)) == pytest.approx(0.25, abs=1e-15)


@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200), st.integers(0, 200))
@settings(max_examples=500)
def test_ets_bounds(h, f, m, c):
    v = ets(ContingencyTable(h, f, m, c))
    if not math.isnan(v):
        assert -1 / 3 - 1e-12 <= v <= 1 + 1e-12


def test_scores_undefined_without_events():
    t = ContingencyTable(0, 0, 0, 10)
    assert math.isnan(csi(t)) and math.isnan(pod(t)) and math.isnan(far(t)) and math.isnan(ets(t))
    assert math.isnan(ets(ContingencyTable(0, 0, 0, 0)))


def test_perfect_forecast():
    t = ContingencyTable(5, 0, 0, 5)
    assert csi(t) == 1.0 and pod(t) == 1.0 and far(t) == 0.0 and ets(t) == 1.0


def test_negative_counts_rejected():
    with pytest.raises(ValidationError):
        ContingencyTable(-1, 0, 0, 0)


def test_non_binary_rejected():
    with pytest.raises(ValidationError):
        contingency([0, 2], [0, 1])


def test_events_threshold_inclusive():
    assert events([0.05, 0.1, np.nan], 0.1)[:2].tolist() == [0.0, 1.0]
    assert np.isnan(events([np.nan], 0.1)[0])


def two_pass_r(x, y):
    mx = sum(x) / len(x)
    my = sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


@given(st.integers(0, 2**31 - 1), st.integers(2, 300))
@settings(max_examples=50, deadline=None)
def test_pearson_rmse_two_pass_oracle(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = 0.5 * x + rng.normal(size=n)
    r = two_pass_r(x.tolist(), y.tolist())
    assert pearson_r(x, y) == pytest.approx(r, rel=1e-12, abs=1e-15)
    e = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)) / n)
    assert rmse(x, y) == pytest.approx(e, rel=1e-12)


def test_pearson_undefined_cases():
    assert math.isnan(pearson_r([1.0], [2.0]))
    assert math.isnan(pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
    assert math.isnan(rmse([], []))


def test_nan_pairs_skipped():
    assert pearson_r([1, 2, np.nan, 3], [2, 4, 7, 6]) == pytest.approx(1.0)
    assert rmse([1, np.nan], [2, 5]) == 1.0


def test_length_mismatch():
    with pytest.raises(AlignmentError):
        rmse([1, 2], [1])


def grid(data, mask=None):
    T, H, W = data.shape
    return GridField(data[..., None], np.arange(T, dtype=float), np.arange(H, dtype=float),
                     np.arange(W, dtype=float), ("precip",), mask)


def test_skill_map_and_pooled():
    rng = np.random.default_rng(3)
    obs = rng.gamma(0.5, 4.0, size=(40, 3, 4))
    mask = np.ones((3, 4), bool)
    mask[0, 0] = False
    o = grid(obs, mask)
    p = grid(obs, mask)
    m = skill_map(p, o, "r")
    assert np.isnan(m.values[0, 0]) and m.defined == 11 and m.average == pytest.approx(1.0)
    assert skill_map(p, o, "rmse").average == 0.0
    assert pooled_score(p, o, "csi", 0.1) == 1.0
    assert pooled_score(p, o, "ets", 1.0) == pytest.approx(1.0)
    noisy = grid(obs + rng.normal(size=obs.shape), mask)
    oracle = np.mean([pearson_r(noisy.data[:, i, j, 0], o.data[:, i, j, 0]) for i, j in zip(*np.nonzero(mask))])
    assert skill_map(noisy, o, "r").average == pytest.approx(oracle, rel=1e-12)


def test_skill_map_needs_threshold():
    g = grid(np.zeros((3, 1, 1)))
    with pytest.raises(ConfigError):
        skill_map(g, g, "csi")
    with pytest.raises(ConfigError):
        skill_map(g, g, "bias")


def test_diff_map():
    rng = np.random.default_rng(4)
    obs = grid(rng.normal(size=(20, 2, 2)))
    a = skill_map(grid(obs.data[..., 0] + rng.normal(size=(20, 2, 2))), obs, "r")
    b = skill_map(obs, obs, "r")
    d = diff_map(a, b)
    assert np.allclose(d.values, a.values - 1.0)


def test_summary_rows_cover_metrics():
    obs = grid(np.random.default_rng(5).gamma(0.5, 4.0, size=(30, 2, 2)))
    rows = summary_rows(obs, obs, [0.1, 10.0])
    names = {(r["metric"], r["threshold"]) for r in rows}
    assert ("r", None) in names and ("ets", 10.0) in names and ("csi_map_mean", 0.1) in names


def test_csv_and_pgm_export(tmp_path):
    values = np.array([[0.5, np.nan], [1.0, -1.0]])
    from gridfuse.evalkit import SkillMap

    m = SkillMap(values, np.array([10.0, 11.0]), np.array([20.0, 21.0]), "r")
    write_map_csv(m, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "lat,lon,value" and lines[2] == "10.0,21.0,NA" and len(lines) == 5
    write_map_pgm(m, tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    head = b"P5\n2 2\n255\n"
    assert raw.startswith(head)
    # north row first: lat 11 -> [254, 0], then lat 10 -> [round(254*0.75), 255]
    assert list(raw[len(head):]) == [254, 0, 190, 255]
    write_scalar_csv([dict(model="m", metric="ets", threshold=0.1, value=float("nan"))], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "m,ets,0.1,NA"


def test_worked_examples():
    assert pearson_r([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
    assert pearson_r([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), rel=1e-15)
    assert csi(ContingencyTable(40, 10, 20, 30)) == pytest.approx(40 / 70)
    t = contingency(np.ones(7), np.ones(7))
    assert (t.hits, t.false_alarms, t.misses, t.correct_negatives) == (7, 0, 0, 0)
    obs = np.random.default_rng(8).integers(0, 2, 50)
    t = contingency(1 - obs, obs)
    assert t.hits == 0 and t.correct_negatives == 0


def test_ets_null_forecast():
    rng = np.random.default_rng(9)
    p = rng.random(100_000) < 0.3
    o = rng.random(100_000) < 0.4
    assert abs(ets(contingency(p, o))) < 0.05


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
@settings(max_examples=300)
def test_score_orderings(h, f, m, c):
    t = ContingencyTable(h, f, m, c)
    if not math.isnan(csi(t)) and not math.isnan(pod(t)):
        assert csi(t) <= pod(t)
    if not math.isnan(csi(t)) and not math.isnan(ets(t)):
        assert ets(t) <= csi(t) + 1e-12


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0), st.floats(-100.0, 100.0))
@settings(max_examples=50, deadline=None)
def test_pearson_affine_invariance_and_rmse_symmetry(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 200))
    y = y + x
    assert pearson_r(a * x + b, y) == pytest.approx(pearson_r(x, y), rel=1e-12, abs=1e-12)
    assert rmse(x, y) == rmse(y, x)


def test_diff_map_antisymmetric_and_zero():
    rng = np.random.default_rng(10)
    obs = grid(rng.normal(size=(20, 3, 3)))
    a = skill_map(grid(obs.data[..., 0] + rng.normal(size=(20, 3, 3))), obs, "rmse")
    b = skill_map(grid(obs.data[..., 0] + rng.normal(size=(20, 3, 3))), obs, "rmse")
    assert np.array_equal(diff_map(a, b).values, -diff_map(b, a).values)
    assert np.all(diff_map(a, a).values == 0)
    assert diff_map(a, b).values[1, 2] == a.values[1, 2] - b.values[1, 2]


def test_skill_map_cell_oracle_events():
    rng = np.random.default_rng(11)
    obs = grid(rng.gamma(0.5, 4.0, size=(50, 3, 3)))
    pred = grid(rng.gamma(0.5, 4.0, size=(50, 3, 3)))
    m = skill_map(pred, obs, "ets", 1.0)
    for i in range(3):
        for j in range(3):
            ref = ets(contingency(events(pred.data[:, i, j, 0], 1.0), events(obs.data[:, i, j, 0], 1.0)))
            assert m.values[i, j] == ref or (math.isnan(ref) and math.isnan(m.values[i, j]))
    assert m.average == pytest.approx(np.nanmean(m.values), abs=1e-12)
