"""Wilcoxon rank-sum test (normal approximation), Vargha-Delaney A, and
the rank-sum / significance comparison protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class TestResult:
    statistic: float  # Mann-Whitney U of the first sample
    z: float
    p: float
    n: int
    m: int


@dataclass
class EffectSize:
    A: float
    magnitude: str


def wilcoxon_ranksum(x, y) -> TestResult:
    """Two-sided rank-sum test via the normal approximation.

    Mid-ranks for ties, no continuity correction, no tie correction of the
    variance; identical samples report p = 1 exactly.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError(f"both samples need >= 2 values, got {n} and {m}")
    ranks = rankdata(np.concatenate([x, y]))
    w = ranks[:n].sum()
    u = w - n * (n + 1) / 2.0
    sd = math.sqrt(n * m * (n + m + 1) / 12.0)
    z = (u - n * m / 2.0) / sd
    p = 1.0 if z == 0.0 else math.erfc(abs(z) / math.sqrt(2.0))
    return TestResult(statistic=u, z=z, p=p, n=n, m=m)


# Vargha-Delaney thresholds on the scaled statistic 2*|A - 0.5|
_VD_LEVELS = (0.147, 0.33, 0.474)
_VD_LABELS = ("negligible", "small", "medium", "large")


def vd_magnitude(A: float) -> str:
    scaled = 2.0 * abs(A - 0.5)
    for level, label in zip(_VD_LEVELS, _VD_LABELS):
        if scaled < level:
            return label
    return _VD_LABELS[-1]


def vd_effect_size(x, y) -> EffectSize:
    """A = P(X > Y) + 0.5 * P(X = Y) over all cross pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 1 or len(y) < 1:
        raise ValueError("both samples need >= 1 value")
    gt = (x[:, None] > y[None, :]).sum()
    eq = (x[:, None] == y[None, :]).sum()
    A = (gt + 0.5 * eq) / (len(x) * len(y))
    return EffectSize(A=float(A), magnitude=vd_magnitude(A))


HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"


def competition_rank(values, direction: str) -> list[int]:
    """"1224"-style ranking: ties share the minimal rank."""
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise ValueError("competition_rank needs at least one value")
    if direction == HIGHER_BETTER:
        better = lambda a, b: a > b
    elif direction == LOWER_BETTER:
        better = lambda a, b: a < b
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return [1 + sum(better(other, v) for other in vals) for v in vals]


def rank_sum_table(rows: list[dict]) -> list[dict]:
    """Adds acc_rank, err_rank, rank_sum, and a best flag to each row."""
    if len(rows) < 2:
        raise ValueError("rank_sum_table needs >= 2 rows")
    acc_ranks = competition_rank([r["accuracy"] for r in rows], HIGHER_BETTER)
    err_ranks = competition_rank([r["error"] for r in rows], LOWER_BETTER)
    out = []
    sums = [a + e for a, e in zip(acc_ranks, err_ranks)]
    best = min(sums)
    for row, a, e, s in zip(rows, acc_ranks, err_ranks, sums):
        merged = dict(row)
        merged.update(acc_rank=a, err_rank=e, rank_sum=s, best=(s == best))
        out.append(merged)
    return out


def significance_protocol(method_runs: dict, baseline_runs: dict,
                          alpha: float = 0.05, gate_alpha: float = 0.10) -> dict:
    """Gated tests against the baseline, mirroring the sparse W/VD columns.

    ``method_runs`` maps name -> {"accuracy": [...], "error": [...]};
    ``baseline_runs`` is the orig-ft entry. The error test runs only for
    methods with strictly smaller mean error than the baseline; the
    accuracy test only where the error test's p < gate_alpha.
    """
    base_acc = np.asarray(baseline_runs["accuracy"], dtype=float)
    base_err = np.asarray(baseline_runs["error"], dtype=float)
    results = {}
    for name, runs in method_runs.items():
        acc = np.asarray(runs["accuracy"], dtype=float)
        err = np.asarray(runs["error"], dtype=float)
        if len(acc) != len(base_acc) or len(err) != len(base_err):
            raise ValueError(f"run-count mismatch for {name}")
        entry = {"err_test": None, "acc_test": None,
                 "err_effect": None, "acc_effect": None}
        if err.mean() < base_err.mean():
            entry["err_test"] = wilcoxon_ranksum(err, base_err)
            entry["err_effect"] = vd_effect_size(err, base_err)
            if entry["err_test"].p < gate_alpha:
                entry["acc_test"] = wilcoxon_ranksum(acc, base_acc)
                entry["acc_effect"] = vd_effect_size(acc, base_acc)
        entry["err_significant"] = (entry["err_test"] is not None
                                    and entry["err_test"].p < alpha)
        results[name] = entry
    return results
