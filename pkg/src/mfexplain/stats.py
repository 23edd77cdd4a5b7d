"""Between-group analysis of Likert responses.

Kruskal-Wallis per question, Dunn's pairwise follow-up on the significant
ones, and Cliff's delta for the significant pairs. Levene's test is reported
alongside as the homoscedasticity check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .data import AGREEMENT_SCALE, RATING_SCALE
from .errors import (
    AllValuesTied,
    EmptyGroup,
    EmptyInput,
    InsufficientData,
    InvalidParameter,
    MalformedRow,
    UnknownLabel,
)

QUESTIONS = ("U2", "T1", "T2", "E1", "E2", "P1", "TR1", "S1")
GROUPS = (0, 1, 2, 3)
# group 0 saw no explanation and only rated the recommendation
ALL_GROUP_QUESTIONS = ("U2",)

# |delta| upper limits for negligible / small / medium; anything above is large
CLIFF_BANDS = ((0.147, "negligible"), (0.33, "small"), (0.474, "medium"))


# ---------------------------------------------------------------------------
# tail probabilities
# ---------------------------------------------------------------------------

def normal_sf(x: float) -> float:
    x = float(x)
    if math.isnan(x):
        raise InvalidParameter("normal_sf of NaN")
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def chi2_sf(x: float, df: float) -> float:
    if not df >= 1:
        raise InvalidParameter(f"chi-square df must be >= 1, got {df}")
    if math.isnan(x):
        raise InvalidParameter("chi2_sf of NaN")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def f_sf(x: float, d1: float, d2: float) -> float:
    if not (d1 >= 1 and d2 >= 1):
        raise InvalidParameter(f"F degrees of freedom must be >= 1, got ({d1}, {d2})")
    if math.isnan(x):
        raise InvalidParameter("f_sf of NaN")
    if x <= 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return float(special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x)))


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df: tuple[int, ...]
    method: str

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class PairwiseResult:
    group_a: int
    group_b: int
    z: float
    p_value: float
    p_adjusted: float


@dataclass(frozen=True)
class EffectSize:
    delta: float
    magnitude: str


def _groups(groups: Sequence[Sequence[float]], min_size: int = 1) -> list[np.ndarray]:
    out = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(out) < 2:
        raise InsufficientData("need at least two groups")
    for k, g in enumerate(out):
        if g.size < min_size:
            raise InsufficientData(f"group {k} has {g.size} values, need {min_size}")
    return out


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=float)
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return (upper - (counts - 1) / 2.0)[inverse]


def _tie_sum(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    counts = counts.astype(float)
    return float(np.sum(counts ** 3 - counts))


def levene(groups: Sequence[Sequence[float]], center: str = "mean") -> TestResult:
    """Levene's W on absolute deviations from each group's mean, F-distributed under the null."""
    if center != "mean":
        raise InvalidParameter("only mean-centred Levene is supported")
    gs = _groups(groups, min_size=2)
    k = len(gs)
    n = np.array([g.size for g in gs], dtype=float)
    N = n.sum()
    Z = [np.abs(g - g.mean()) for g in gs]
    zbar_i = np.array([z.mean() for z in Z])
    zbar = np.concatenate(Z).mean()
    between = float(np.sum(n * (zbar_i - zbar) ** 2))
    within = float(sum(np.sum((z - zm) ** 2) for z, zm in zip(Z, zbar_i)))
    d1, d2 = k - 1, int(N) - k
    if between == 0.0:
        W = 0.0
    elif within == 0.0:
        W = math.inf
    else:
        W = (d2 / d1) * between / within
    return TestResult(float(W), f_sf(W, d1, d2), (d1, d2), "levene-mean")


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """Tie-corrected Kruskal-Wallis H with a chi-square(g - 1) p-value."""
    gs = _groups(groups)
    pooled = np.concatenate(gs)
    N = pooled.size
    if N < 3:
        raise InsufficientData("need at least 3 observations")
    correction = 1.0 - _tie_sum(pooled) / (N ** 3 - N)
    if correction <= 0:
        raise AllValuesTied("every observation has the same value")
    ranks = midranks(pooled)
    bounds = np.cumsum([0] + [g.size for g in gs])
    H = 12.0 / (N * (N + 1)) * sum(
        ranks[a:b].sum() ** 2 / (b - a) for a, b in zip(bounds[:-1], bounds[1:])) - 3.0 * (N + 1)
    H = max(H, 0.0) / correction
    df = len(gs) - 1
    return TestResult(float(H), chi2_sf(H, df), (df,), "kruskal-wallis")


def dunn_posthoc(groups: Sequence[Sequence[float]], adjust: str = "bonferroni",
                 labels: Sequence[int] | None = None) -> list[PairwiseResult]:
    """Dunn's z for every pair of groups over pooled midranks.

    Two-sided p-values are multiplied by the number of pairs and capped at 1.
    ``labels`` names the groups in the output (default: their positions).
    """
    if adjust != "bonferroni":
        raise InvalidParameter(f"unsupported adjustment {adjust!r}")
    gs = _groups(groups)
    labels = list(range(len(gs))) if labels is None else list(labels)
    pooled = np.concatenate(gs)
    N = pooled.size
    if N < 3:
        raise InsufficientData("need at least 3 observations")
    ties = _tie_sum(pooled)
    if ties == N ** 3 - N:
        raise AllValuesTied("every observation has the same value")
    ranks = midranks(pooled)
    bounds = np.cumsum([0] + [g.size for g in gs])
    mean_rank = [ranks[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])]
    sigma2 = N * (N + 1) / 12.0 - ties / (12.0 * (N - 1))
    pairs = list(combinations(range(len(gs)), 2))
    out = []
    for a, b in pairs:
        se = math.sqrt(sigma2 * (1.0 / gs[a].size + 1.0 / gs[b].size))
        z = (mean_rank[a] - mean_rank[b]) / se
        p = min(1.0, 2.0 * normal_sf(abs(z)))
        out.append(PairwiseResult(labels[a], labels[b], float(z), p, min(1.0, p * len(pairs))))
    return out


def cliff_magnitude(delta: float) -> str:
    for limit, name in CLIFF_BANDS:
        if abs(delta) < limit:
            return name
    return "large"


def cliffs_delta(a: Sequence[float], b: Sequence[float]) -> EffectSize:
    """``(#{a_i > b_j} - #{a_i < b_j}) / (|a| |b|)`` with the conventional magnitude label."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptyInput("Cliff's delta needs two non-empty samples")
    greater = np.searchsorted(b, a, side="left").sum()
    less = (b.size - np.searchsorted(b, a, side="right")).sum()
    delta = float(greater - less) / (a.size * b.size)
    return EffectSize(delta, cliff_magnitude(delta))


# ---------------------------------------------------------------------------
# study tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Response:
    respondent: str
    group: int
    question: str
    value: int


class LikertTable:
    def __init__(self, records: Iterable[Response]):
        self.records = list(records)
        for r in self.records:
            if r.question not in QUESTIONS:
                raise ValueError(f"unknown question {r.question!r}")
            if r.group not in GROUPS:
                raise ValueError(f"unknown group {r.group}")
            if r.group == 0 and r.question not in ALL_GROUP_QUESTIONS:
                raise ValueError(f"group 0 does not answer {r.question}")
            if not 1 <= r.value <= 5:
                raise ValueError(f"Likert value {r.value} outside 1..5")

    def __len__(self):
        return len(self.records)

    def values(self, group: int, question: str) -> np.ndarray:
        return np.array([r.value for r in self.records if r.group == group and r.question == question], dtype=float)

    def groups_for(self, question: str) -> list[int]:
        present = {r.group for r in self.records if r.question == question}
        eligible = GROUPS if question in ALL_GROUP_QUESTIONS else GROUPS[1:]
        return [g for g in eligible if g in present]

    @classmethod
    def from_arrays(cls, data: dict[tuple[int, str], Sequence[int]]) -> "LikertTable":
        recs = []
        for (group, question), values in data.items():
            recs += [Response(f"g{group}-{k}", group, question, int(v)) for k, v in enumerate(values)]
        return cls(recs)


def _parse_value(raw: str, question: str) -> int:
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        scale = RATING_SCALE if question in ALL_GROUP_QUESTIONS else AGREEMENT_SCALE
        return scale.score(raw)


def parse_responses(path: str | Path) -> LikertTable:
    """Read ``respondent,group,question,value``; values may be integers or scale labels."""
    recs = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["respondent", "group", "question", "value"]:
            raise MalformedRow(1, "expected header respondent,group,question,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise MalformedRow(lineno, f"expected 4 fields, got {len(row)}")
            try:
                q = row[2].strip()
                rec = Response(row[0].strip(), int(row[1]), q, _parse_value(row[3], q))
                LikertTable([rec])
            except (ValueError, UnknownLabel) as exc:
                raise MalformedRow(lineno, str(exc)) from None
            recs.append(rec)
    if not recs:
        raise MalformedRow(1, "no responses")
    return LikertTable(recs)


@dataclass(frozen=True)
class SummaryRow:
    group: int
    question: str
    mean: float
    median: float
    prop_low: float
    n: int


def summarize(table: LikertTable) -> list[SummaryRow]:
    """Mean, median, share of answers <= 2 and count per (group, question)."""
    if len(table) == 0:
        raise EmptyGroup("empty response table")
    rows = []
    for q in QUESTIONS:
        for g in table.groups_for(q):
            v = table.values(g, q)
            if v.size == 0:
                raise EmptyGroup(f"group {g} has no answers to {q}")
            rows.append(SummaryRow(g, q, float(v.mean()), float(np.median(v)),
                                   float(np.count_nonzero(v <= 2)) / v.size, int(v.size)))
    return rows


@dataclass(frozen=True)
class KruskalRow:
    question: str
    H: float
    p: float
    df: int
    interpretation: str


@dataclass(frozen=True)
class DunnRow:
    question: str
    group_a: int
    group_b: int
    z: float
    p_adjusted: float
    interpretation: str


@dataclass(frozen=True)
class EffectRow:
    question: str
    group_a: int
    group_b: int
    delta: float
    magnitude: str


@dataclass(frozen=True)
class LeveneRow:
    question: str
    W: float
    p: float


@dataclass
class StudyReport:
    alpha: float
    kruskal: list[KruskalRow]
    dunn: list[DunnRow]
    effects: list[EffectRow]
    levene: list[LeveneRow]
    summary: list[SummaryRow]

    def significant_questions(self) -> list[str]:
        return [r.question for r in self.kruskal if r.p < self.alpha]


def _label(p: float, alpha: float) -> str:
    return "Significant" if p < alpha else "Not significant"


def analyze_study(table: LikertTable, alpha: float = 0.05) -> StudyReport:
    """Kruskal-Wallis per question, then Dunn and Cliff's delta where it is significant.

    U2 compares every group present; the other questions compare groups 1-3.
    A question whose answers are all identical is reported with NaN statistics.
    """
    kw_rows, dunn_rows, effect_rows, levene_rows = [], [], [], []
    for q in QUESTIONS:
        groups = table.groups_for(q)
        if len(groups) < 2:
            continue
        samples = [table.values(g, q) for g in groups]
        try:
            kw = kruskal_wallis(samples)
        except AllValuesTied:
            kw_rows.append(KruskalRow(q, math.nan, math.nan, len(groups) - 1, "All values tied"))
            continue
        kw_rows.append(KruskalRow(q, kw.statistic, kw.p_value, kw.df[0], _label(kw.p_value, alpha)))
        if all(s.size >= 2 for s in samples):
            lv = levene(samples)
            levene_rows.append(LeveneRow(q, lv.statistic, lv.p_value))
        if kw.p_value >= alpha:
            continue
        by_group = dict(zip(groups, samples))
        for pr in dunn_posthoc(samples, labels=groups):
            dunn_rows.append(DunnRow(q, pr.group_a, pr.group_b, pr.z, pr.p_adjusted, _label(pr.p_adjusted, alpha)))
            if pr.p_adjusted < alpha:
                es = cliffs_delta(by_group[pr.group_a], by_group[pr.group_b])
                effect_rows.append(EffectRow(q, pr.group_a, pr.group_b, es.delta, es.magnitude))
    return StudyReport(alpha, kw_rows, dunn_rows, effect_rows, levene_rows, summarize(table))


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_report(report: StudyReport, out_dir: str | Path) -> list[Path]:
    """Write the Kruskal-Wallis, Dunn, effect-size, Levene and summary CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        "kruskal_wallis.csv": (["question", "H", "p", "df", "interpretation"],
                               [[r.question, _fmt(r.H), _fmt(r.p), r.df, r.interpretation] for r in report.kruskal]),
        "dunn.csv": (["question", "groupA", "groupB", "z", "p_adjusted", "interpretation"],
                     [[r.question, r.group_a, r.group_b, _fmt(r.z), _fmt(r.p_adjusted), r.interpretation]
                      for r in report.dunn]),
        "effects.csv": (["question", "pair", "delta", "magnitude"],
                        [[r.question, f"{r.group_a}-{r.group_b}", _fmt(r.delta), r.magnitude] for r in report.effects]),
        "levene.csv": (["question", "W", "p"], [[r.question, _fmt(r.W), _fmt(r.p)] for r in report.levene]),
        "summary.csv": (["group", "question", "mean", "median", "prop_low", "n"],
                        [[r.group, r.question, _fmt(r.mean), _fmt(r.median), _fmt(r.prop_low), r.n]
                         for r in report.summary]),
    }
    paths = []
    for name, (header, rows) in tables.items():
        p = out_dir / name
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(p)
    return paths
