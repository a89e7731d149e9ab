"""DTW-based style measurements and the correlation helpers used in reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class DtwResult:
    path: list[tuple[int, int]]
    cost: float
    amplitude_D: float
    timing_offset: float

    @property
    def amplitude_norm(self) -> float:
        return self.amplitude_D / len(self.path)

    @property
    def timing_norm(self) -> float:
        # the timing offset is already a per-pair mean
        return self.timing_offset


def dtw_matrix(a, o) -> np.ndarray:
    """Accumulated-cost matrix with |a_i - o_j| point cost."""
    a = np.asarray(a, dtype=float)
    o = np.asarray(o, dtype=float)
    if a.size == 0 or o.size == 0:
        raise ValueError("DTW needs two nonempty sequences")
    n, m = len(a), len(o)
    cost = np.abs(a[:, None] - o[None, :]).tolist()
    acc = [[0.0] * m for _ in range(n)]
    inf = float("inf")
    for i in range(n):
        row, prev, c = acc[i], acc[i - 1] if i else None, cost[i]
        for j in range(m):
            if i == 0 and j == 0:
                best = 0.0
            else:
                diag = prev[j - 1] if i and j else inf
                up = prev[j] if i else inf
                left = row[j - 1] if j else inf
                best = diag if diag <= up and diag <= left else (up if up <= left else left)
            row[j] = c[j] + best
    return np.array(acc)


def dtw_align(a, o) -> list[tuple[int, int]]:
    """Optimal warp path from (0, 0) to (len(a)-1, len(o)-1).

    On equal accumulated cost the backtrack prefers the diagonal, then the
    move that advances only ``a``.
    """
    return _backtrack(dtw_matrix(a, o))


def _backtrack(acc: np.ndarray) -> list[tuple[int, int]]:
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    return path[::-1]


def signed_distance(a_k: float, o_k: float) -> float:
    """|a_k - o_k|, positive if a overshoots o away from zero, negative if it falls short.

    At o_k == 0 any deviation counts as overshoot.
    """
    d = abs(a_k - o_k)
    if o_k > 0:
        return d if a_k >= o_k else -d
    if o_k < 0:
        return -d if a_k >= o_k else d
    return d


def analyse(a, o) -> DtwResult:
    a = np.asarray(a, dtype=float)
    o = np.asarray(o, dtype=float)
    acc = dtw_matrix(a, o)
    path = _backtrack(acc)
    D = sum(signed_distance(a[i], o[j]) for i, j in path)
    timing = float(np.mean([i - j for i, j in path]))
    return DtwResult(path, float(acc[-1, -1]), float(D), timing)


def amplitude_metric(a, o) -> float:
    return analyse(a, o).amplitude_D


def timing_metric(a, o) -> float:
    """Mean index offset along the warp path; positive when ``a`` lags ``o``."""
    return analyse(a, o).timing_offset


def timing_majority(path) -> int:
    """Sign of the majority vote over path pairs (+1 delayed, -1 anticipatory, 0 tie)."""
    later = sum(1 for i, j in path if j > i)
    earlier = sum(1 for i, j in path if j < i)
    return int(np.sign(earlier - later))


def path_is_valid(path, n: int, m: int) -> bool:
    if path[0] != (0, 0) or path[-1] != (n - 1, m - 1):
        return False
    return all((i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)} for (i0, j0), (i1, j1) in zip(path, path[1:]))


# ---------------------------------------------------------------- correlation


@dataclass
class CorrelationRow:
    construct: str
    coefficient: float
    p_value: float
    test: str


def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xc = x - x.mean()
    yc = y - y.mean()
    r = float((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)))
    r = max(-1.0, min(1.0, r))
    n = len(x)
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


def correlate(x, y, construct: str = "", test: str = "pearson") -> CorrelationRow:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("x and y must have equal length")
    if len(x) < 3:
        raise ValueError("need at least three points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate input")
    if test == "pearson":
        r, p = _pearson(x, y)
    elif test == "spearman":
        r, p = _pearson(stats.rankdata(x), stats.rankdata(y))
    else:
        raise ValueError(f"unknown test {test!r}")
    return CorrelationRow(construct, r, p, test)


def correlate_both(x, y, construct: str = "") -> list[CorrelationRow]:
    return [correlate(x, y, construct, "pearson"), correlate(x, y, construct, "spearman")]


# ---------------------------------------------------------------- reports


STYLE_REPORT_HEADER = ["demonstrator_id", "task_id", "amplitude_D", "timing", "amplitude_norm", "timing_norm"]


def style_report_rows(label_sequences) -> list[dict]:
    rows = []
    for seq in label_sequences:
        res = analyse(seq.a, seq.o)
        rows.append({
            "demonstrator_id": seq.demonstrator_id,
            "task_id": seq.task_id,
            "amplitude_D": res.amplitude_D,
            "timing": res.timing_offset,
            "amplitude_norm": res.amplitude_norm,
            "timing_norm": res.timing_norm,
        })
    return rows


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in header})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
