"""Greedy 1:1 nearest-neighbor caliper matching without replacement, and
the matched-pair treatment effect."""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np
from scipy import stats


class NoMatchesError(RuntimeError):
    pass


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class _Available:
    """Nearest still-available slot to the left/right, via path-compressed jumps."""

    def __init__(self, n: int):
        self.left = list(range(n + 1))   # index shift by one: slot 0 means "none"
        self.right = list(range(n + 1))  # slot n means "none"

    def _find(self, parent, i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def find_left(self, i: int) -> int:
        """Largest available index <= i, or -1."""
        return self._find(self.left, i + 1) - 1

    def find_right(self, i: int) -> int:
        """Smallest available index >= i, or n."""
        return self._find(self.right, i)

    def remove(self, i: int) -> None:
        self.left[i + 1] = i
        self.right[i] = i + 1


def match_pairs(unit_ids, treated, scores, caliper: float, *,
                on_logit: bool = False) -> list[tuple[int, int, float]]:
    """Match each treated unit to the nearest unused control.

    Treated units are visited in ascending score (ties: lowest unit id).
    Each takes the still-unmatched control at the smallest distance, with
    the lowest unit id among equally distant controls, provided the distance
    does not exceed ``caliper``; otherwise the treated unit is dropped.
    With ``on_logit`` distances are measured between logit scores.

    Returns ``(treated_id, control_id, distance)`` triples in visiting order.
    """
    ids = np.asarray(unit_ids)
    t = np.asarray(treated, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if not (ids.shape == t.shape == s.shape):
        raise ValueError("unit_ids, treated and scores must have equal length")
    if not caliper > 0:
        raise ValueError("caliper must be positive")
    if ((s <= 0) | (s >= 1)).any():
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    x = _logit(s) if on_logit else s

    c_idx = np.flatnonzero(~t)
    c_order = sorted(c_idx, key=lambda i: (x[i], ids[i]))
    cx = [float(x[i]) for i in c_order]
    cid = [ids[i] for i in c_order]
    avail = _Available(len(cx))
    t_order = sorted(np.flatnonzero(t), key=lambda i: (x[i], ids[i]))

    pairs = []
    for ti in t_order:
        xt = float(x[ti])
        p = bisect_left(cx, xt)
        lft, rgt = avail.find_left(p - 1), avail.find_right(p)
        cands = []
        if lft >= 0:
            cands.append(abs(xt - cx[lft]))
        if rgt < len(cx):
            cands.append(abs(cx[rgt] - xt))
        if not cands:
            break
        best = min(cands)
        if best > caliper:
            continue
        # gather every available control at exactly the best distance
        tied = []
        j = lft
        while j >= 0 and abs(xt - cx[j]) == best:
            tied.append(j)
            j = avail.find_left(j - 1)
        j = rgt
        while j < len(cx) and abs(cx[j] - xt) == best:
            tied.append(j)
            j = avail.find_right(j + 1)
        pick = min(tied, key=lambda k: cid[k])
        avail.remove(pick)
        pairs.append((ids[ti].item() if hasattr(ids[ti], "item") else ids[ti],
                      cid[pick].item() if hasattr(cid[pick], "item") else cid[pick], best))
    if not pairs:
        dists = [abs(float(x[i]) - c) for i in t_order for c in cx]
        closest = min(dists) if dists else math.inf
        raise NoMatchesError(
            f"no pairs within caliper {caliper:.4g}: {len(t_order)} treated, {len(cx)} controls, "
            f"closest distance {closest:.4g}")
    return pairs


@dataclass(frozen=True)
class AteEstimate:
    ate: float
    standard_error: float
    n_matched: int
    p_value: float


def estimate_ate(y_treated, y_control) -> AteEstimate:
    """Mean matched-pair difference with a paired t-test.

    With a single pair the standard error is infinite and the p-value 1.
    """
    yt = np.asarray(y_treated, dtype=np.float64)
    yc = np.asarray(y_control, dtype=np.float64)
    if yt.shape != yc.shape or yt.ndim != 1:
        raise ValueError("outcome arrays must be 1-D and paired")
    n = yt.size
    if n < 1:
        raise NoMatchesError("no matched pairs")
    diff = yt - yc
    ate = float(diff.mean())
    if n == 1:
        return AteEstimate(ate, math.inf, 1, 1.0)
    se = float(diff.std(ddof=1) / math.sqrt(n))
    if se == 0.0:
        return AteEstimate(ate, 0.0, n, 0.0 if ate != 0 else 1.0)
    tstat = ate / se
    p = float(2.0 * stats.t.sf(abs(tstat), df=n - 1))
    return AteEstimate(ate, se, n, min(1.0, max(0.0, p)))
