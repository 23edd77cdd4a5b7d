import math

import numpy as np
import pytest
import scipy.stats as ss
from scipy.integrate import quad

from mfexplain import stats
from mfexplain.errors import AllValuesTied, EmptyInput, InsufficientData, InvalidParameter, MalformedRow
from mfexplain.stats import (
    LikertTable,
    analyze_study,
    chi2_sf,
    cliffs_delta,
    dunn_posthoc,
    f_sf,
    kruskal_wallis,
    levene,
    midranks,
    normal_sf,
    parse_responses,
    summarize,
    write_report,
)

from oracles import brute_cliff, brute_dunn_z, brute_kruskal, brute_levene, brute_midranks, f_density


def _random_groups(rng, k=None, tied=True):
    k = k or int(rng.integers(2, 5))
    sizes = rng.integers(2, 12, k)
    if tied:
        return [rng.integers(1, 6, s).tolist() for s in sizes]
    return [rng.normal(0, 1, s).tolist() for s in sizes]


# -- tail probabilities -------------------------------------------------------

def test_normal_sf():
    assert normal_sf(0) == 0.5
    assert normal_sf(1.959963984540054) == pytest.approx(0.025, abs=1e-12)


@pytest.mark.parametrize("x", [1.0, 3.6, 7.2, 10.0])
def test_chi2_df2_identity(x):
    assert chi2_sf(x, 2) == pytest.approx(math.exp(-x / 2), abs=1e-12)


@pytest.mark.parametrize("x, d1, d2", [(0.3 + 0.4 * k, 1 + k % 4, 3 + 7 * (k % 3)) for k in range(20)])
def test_f_sf_quadrature(x, d1, d2):
    tail, _ = quad(f_density, x, np.inf, args=(d1, d2), epsabs=1e-13, epsrel=1e-12, limit=200)
    assert f_sf(x, d1, d2) == pytest.approx(tail, abs=1e-10)


@pytest.mark.parametrize("call", [lambda: chi2_sf(1, 0), lambda: f_sf(1, 0, 3), lambda: normal_sf(math.nan)])
def test_tail_invalid(call):
    with pytest.raises(InvalidParameter):
        call()


# -- fixtures -----------------------------------------------------------------

def test_kruskal_fixture():
    res = kruskal_wallis([(1, 2, 3), (4, 5, 6), (7, 8, 9)])
    assert res.statistic == pytest.approx(7.2, abs=1e-12)
    assert res.p_value == pytest.approx(math.exp(-3.6), abs=1e-12)
    assert res.df == (2,)


def test_kruskal_permuted_groups_zero():
    assert kruskal_wallis([(1, 2, 3, 4), (4, 3, 2, 1)]).statistic == pytest.approx(0, abs=1e-12)


def test_kruskal_all_tied():
    with pytest.raises(AllValuesTied):
        kruskal_wallis([(3, 3), (3, 3, 3)])


def test_kruskal_needs_two_groups():
    with pytest.raises(InsufficientData):
        kruskal_wallis([(1, 2, 3)])


def test_dunn_fixture():
    (pr,) = dunn_posthoc([(1, 2, 3), (4, 5, 6)])
    assert pr.z == pytest.approx(-1.9640, abs=1e-3)
    assert pr.p_adjusted == pytest.approx(0.0495, abs=1e-4)


def test_dunn_identical_groups():
    for pr in dunn_posthoc([(1, 2, 3), (1, 2, 3), (1, 2, 3)]):
        assert pr.z == 0 and pr.p_adjusted == 1.0


def test_dunn_caps_at_one():
    rng = np.random.default_rng(5)
    groups = [rng.integers(1, 6, 40) for _ in range(3)]
    assert all(0 <= pr.p_adjusted <= 1 for pr in dunn_posthoc(groups))
    assert any(pr.p_adjusted == 1.0 for pr in dunn_posthoc([(1, 2, 3, 4), (1, 2, 3, 4), (2, 1, 4, 3)]))


def test_levene_fixtures():
    res = levene([(1, 2, 3), (4, 5, 6)])
    assert res.statistic == 0 and res.p_value == 1
    assert levene([(2, 4, 9), (2, 4, 9)]).statistic == 0
    spread = levene([(1, 5, 1, 5), (3, 3, 3, 3)])
    assert spread.statistic == brute_levene([(1, 5, 1, 5), (3, 3, 3, 3)]) == math.inf
    assert spread.p_value == 0.0
    assert levene([(1, 5, 2, 5), (3, 3, 4, 3)]).statistic == pytest.approx(
        brute_levene([(1, 5, 2, 5), (3, 3, 4, 3)]), abs=1e-12)


@pytest.mark.parametrize("a, b, delta, magnitude", [
    ((1, 2), (1, 3), -0.25, "small"),
    ((1, 2, 3), (1, 2, 3), 0.0, "negligible"),
    ((5, 6), (1, 2, 3), 1.0, "large"),
    ((1, 2, 3, 4), (2, 3, 4, 5), -0.4375, "medium"),
])
def test_cliff_examples(a, b, delta, magnitude):
    es = cliffs_delta(a, b)
    assert es.delta == delta and es.magnitude == magnitude


def test_cliff_empty():
    with pytest.raises(EmptyInput):
        cliffs_delta([], [1])


# -- brute-force oracles ------------------------------------------------------

@pytest.mark.parametrize("tied", [True, False])
def test_midranks_oracle(tied):
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = rng.integers(1, 6, 15) if tied else rng.normal(size=15)
        assert midranks(v).tolist() == brute_midranks(v.tolist())


def test_tests_match_brute_force():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        groups = _random_groups(rng, tied=trial % 2 == 0)
        if len(set(x for g in groups for x in g)) == 1:
            continue
        assert kruskal_wallis(groups).statistic == pytest.approx(brute_kruskal(groups), abs=1e-9)
        res = dunn_posthoc(groups)
        pairs = [(a, b) for a in range(len(groups)) for b in range(a + 1, len(groups))]
        for pr, (a, b) in zip(res, pairs):
            assert pr.z == pytest.approx(brute_dunn_z(groups, a, b), abs=1e-9)
        assert levene(groups).statistic == pytest.approx(brute_levene(groups), abs=1e-9)
        assert cliffs_delta(groups[0], groups[1]).delta == pytest.approx(brute_cliff(groups[0], groups[1]), abs=1e-12)


def test_cross_check_scipy():
    rng = np.random.default_rng(7)
    for _ in range(30):
        groups = _random_groups(rng)
        if len(set(x for g in groups for x in g)) == 1:
            continue
        H, p = ss.kruskal(*groups)
        res = kruskal_wallis(groups)
        assert res.statistic == pytest.approx(H, abs=1e-9)
        assert res.p_value == pytest.approx(p, abs=1e-10)
        W, pw = ss.levene(*groups, center="mean")
        if np.isfinite(W):
            lv = levene(groups)
            assert lv.statistic == pytest.approx(W, abs=1e-9)
            assert lv.p_value == pytest.approx(pw, abs=1e-10)


# -- invariances --------------------------------------------------------------

def test_rank_invariance():
    rng = np.random.default_rng(9)
    for _ in range(20):
        groups = _random_groups(rng, tied=False)
        mapped = [[math.exp(3 * x) + 1 for x in g] for g in groups]
        assert kruskal_wallis(mapped).statistic == pytest.approx(kruskal_wallis(groups).statistic, abs=1e-9)
        for a, b in zip(dunn_posthoc(mapped), dunn_posthoc(groups)):
            assert a.z == pytest.approx(b.z, abs=1e-9)


def test_permutation_invariance():
    rng = np.random.default_rng(10)
    groups = _random_groups(rng, k=3)
    shuffled = [rng.permutation(g).tolist() for g in groups]
    assert kruskal_wallis(shuffled).statistic == pytest.approx(kruskal_wallis(groups).statistic, abs=1e-12)
    assert levene(shuffled).statistic == pytest.approx(levene(groups).statistic, abs=1e-12)
    assert cliffs_delta(shuffled[0], shuffled[1]) == cliffs_delta(groups[0], groups[1])


def test_cliff_antisymmetry():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a, b = rng.integers(1, 6, 7), rng.integers(1, 6, 9)
        assert cliffs_delta(a, b).delta == -cliffs_delta(b, a).delta


def test_cliff_duplication_invariant():
    a, b = [1, 3, 4, 4], [2, 2, 5]
    assert cliffs_delta(a * 3, b * 2).delta == cliffs_delta(a, b).delta


# -- study tables -------------------------------------------------------------

@pytest.mark.parametrize("values, mean, median, prop_low", [
    ((5, 4, 4, 5), 4.5, 4.5, 0.0),
    ((1, 2, 3), 2.0, 2.0, 2 / 3),
    ((4, 4, 4), 4.0, 4.0, 0.0),
])
def test_summarize(values, mean, median, prop_low):
    (row,) = summarize(LikertTable.from_arrays({(1, "T1"): values}))
    assert (row.mean, row.median, row.n) == (mean, median, len(values))
    assert row.prop_low == pytest.approx(prop_low)


def test_table_rejects_group0_non_u2():
    with pytest.raises(ValueError):
        LikertTable.from_arrays({(0, "T1"): [3]})


def _table(rng, per_group=80, shift=None):
    data = {}
    for g in range(4):
        for q in stats.QUESTIONS:
            if g == 0 and q not in stats.ALL_GROUP_QUESTIONS:
                continue
            v = rng.choice([1, 2, 3, 4, 5], per_group, p=[0.05, 0.1, 0.2, 0.4, 0.25])
            if shift and shift == (g, q):
                v = np.maximum(1, v - 2)
            data[(g, q)] = v
    return LikertTable.from_arrays(data)


def test_analyze_detects_shift():
    report = analyze_study(_table(np.random.default_rng(3), shift=(2, "E1")))
    assert "E1" in report.significant_questions()
    flagged = {(r.group_a, r.group_b) for r in report.dunn if r.question == "E1" and r.p_adjusted < 0.05}
    assert flagged == {(1, 2), (2, 3)}
    assert {(r.group_a, r.group_b) for r in report.effects if r.question == "E1"} >= flagged


def test_analyze_u2_includes_group0():
    report = analyze_study(_table(np.random.default_rng(4)))
    (u2,) = [r for r in report.kruskal if r.question == "U2"]
    assert u2.df == 3
    assert all(r.df == 2 for r in report.kruskal if r.question != "U2")


def test_analyze_all_tied_question():
    data = {(g, "T1"): [4, 4, 4] for g in (1, 2, 3)}
    data.update({(g, "T2"): [1, 2, 2 + g] for g in (1, 2, 3)})
    report = analyze_study(LikertTable.from_arrays(data))
    t1 = [r for r in report.kruskal if r.question == "T1"][0]
    assert math.isnan(t1.H) and t1.interpretation == "All values tied"


def test_write_report_schema(tmp_path):
    report = analyze_study(_table(np.random.default_rng(3), shift=(2, "E1")))
    write_report(report, tmp_path)
    heads = {p.name: p.read_text().splitlines()[0] for p in tmp_path.glob("*.csv")}
    assert heads == {
        "kruskal_wallis.csv": "question,H,p,df,interpretation",
        "dunn.csv": "question,groupA,groupB,z,p_adjusted,interpretation",
        "effects.csv": "question,pair,delta,magnitude",
        "levene.csv": "question,W,p",
        "summary.csv": "group,question,mean,median,prop_low,n",
    }


def test_parse_responses_labels_and_errors(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("respondent,group,question,value\na,1,T1,Strongly agree\nb,2,T1,2\n")
    table = parse_responses(p)
    assert table.values(1, "T1").tolist() == [5.0]
    p.write_text("respondent,group,question,value\na,1,T1,4\nb,7,T1,2\n")
    with pytest.raises(MalformedRow) as err:
        parse_responses(p)
    assert err.value.line == 3
