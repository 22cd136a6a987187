"""Brute-force reference implementations. Deliberately naive: plain Python
loops, exact integer arithmetic where possible, no shared code with the
package under test."""

from __future__ import annotations

import itertools
import math
from fractions import Fraction


def pcc_two_pass(y, yhat):
    n = len(y)
    my = sum(y) / n
    mp = sum(yhat) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, yhat)) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vp = sum((b - mp) ** 2 for b in yhat) / n
    if vy == 0 or vp == 0:
        return None
    return cov / math.sqrt(vy * vp)


def pcc_column_loop(truth, pred):
    """truth, pred: N x G nested sequences -> list of r or None."""
    g = len(truth[0])
    out = []
    for j in range(g):
        col_t = [float(row[j]) for row in truth]
        col_p = [float(row[j]) for row in pred]
        if max(col_t) == min(col_t) or max(col_p) == min(col_p):
            out.append(None)
        else:
            out.append(pcc_two_pass(col_t, col_p))
    return out


def gpc_triple_loop(r_table, pathways):
    """r_table: list over slides of list over genes (None = undefined);
    pathways: {name: [gene index]} -> {name: score or None}."""
    scores = {}
    for name, genes in pathways.items():
        slide_means = []
        for row in r_table:
            vals = [row[g] for g in genes if row[g] is not None]
            if vals:
                slide_means.append(sum(vals) / len(vals))
        scores[name] = sum(slide_means) / len(slide_means) if slide_means else None
    return scores


def macro_micro_loop(slides, hvg):
    """slides: list of (cancer, split, r list with None); hvg: {cancer: [idx]}.
    Returns {cancer: (macro, micro)} and the overall (macro, micro)."""
    per = {}
    for cancer, split, r in slides:
        vals = [r[g] for g in hvg[cancer] if r[g] is not None]
        if not vals:
            continue
        per.setdefault(cancer, {}).setdefault(split, []).append(sum(vals) / len(vals))
    out = {}
    pooled_all = []
    for cancer in sorted(per):
        split_means = [sum(v) / len(v) for _, v in sorted(per[cancer].items())]
        pooled = [x for _, v in sorted(per[cancer].items()) for x in v]
        pooled_all.extend(pooled)
        out[cancer] = (sum(split_means) / len(split_means), sum(pooled) / len(pooled))
    macros = [m for m, _ in out.values()]
    return out, (sum(macros) / len(macros), sum(pooled_all) / len(pooled_all))


def _table(a, b):
    la, lb = sorted(set(a)), sorted(set(b))
    return [[sum(1 for x, y in zip(a, b) if x == u and y == v) for v in lb] for u in la]


def ari_pairs(a, b):
    """ARI by enumerating all item pairs."""
    n = len(a)
    same_a = same_b = same_both = 0
    for i, j in itertools.combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        same_a += sa
        same_b += sb
        same_both += sa and sb
    pairs = n * (n - 1) // 2
    expected = Fraction(same_a * same_b, pairs)
    max_index = Fraction(same_a + same_b, 2)
    if max_index == expected:
        return 1.0 if _is_relabel(a, b) else 0.0
    return float((same_both - expected) / (max_index - expected))


def _is_relabel(a, b):
    fwd, bwd = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


def _entropy(counts, n):
    return -sum(c / n * math.log(c / n) for c in counts if c)


def expected_mi_direct(row_sums, col_sums, n):
    """E[MI] as an explicit sum over the hypergeometric pmf, using exact
    binomial coefficients."""
    total = 0.0
    for a in row_sums:
        for b in col_sums:
            for nij in range(max(1, a + b - n), min(a, b) + 1):
                p = Fraction(math.comb(a, nij) * math.comb(n - a, b - nij), math.comb(n, b))
                total += float(p) * nij / n * math.log(n * nij / (a * b))
    return total


def ami_direct(a, b):
    if _is_relabel(a, b):
        return 1.0
    t = _table(a, b)
    n = len(a)
    rs = [sum(r) for r in t]
    cs = [sum(c) for c in zip(*t)]
    mi = sum(t[i][j] / n * math.log(n * t[i][j] / (rs[i] * cs[j]))
             for i in range(len(rs)) for j in range(len(cs)) if t[i][j])
    emi = expected_mi_direct(rs, cs, n)
    denom = (_entropy(rs, n) + _entropy(cs, n)) / 2 - emi
    if abs(denom) < 1e-15:
        return 0.0
    return (mi - emi) / denom


def jaccard_sets(a, b):
    return Fraction(len(a & b), len(a | b))


def redundancy_exhaustive(sets, tau):
    """sets: {name: (gene frozenset, file size)}. Re-scans every pair after
    every removal and applies the selection rule literally."""
    alive = dict(sets)
    t = Fraction(str(tau))
    removed = []
    while True:
        violating = []
        for x, y in itertools.combinations(sorted(alive), 2):
            j = jaccard_sets(alive[x][0], alive[y][0])
            if j <= t:
                continue
            # the larger set goes; equal sizes remove the larger name
            victim, keeper = (x, y) if (alive[x][1], x) > (alive[y][1], y) else (y, x)
            violating.append(((j, alive[victim][1], victim), keeper))
        if not violating:
            return sorted(alive), removed
        top = max(key for key, _ in violating)
        keeper = min(k for key, k in violating if key == top)
        j, _, victim = top
        removed.append((victim, keeper, j))
        del alive[victim]


def kmeans_optimum_1d(xs, k):
    """Minimum within-cluster sum of squares over every labelling."""
    best = math.inf
    for labels in itertools.product(range(k), repeat=len(xs)):
        if len(set(labels)) != k:
            continue
        cost = 0.0
        for c in range(k):
            pts = [x for x, l in zip(xs, labels) if l == c]
            m = sum(pts) / len(pts)
            cost += sum((p - m) ** 2 for p in pts)
        best = min(best, cost)
    return best


def decile_levels(values, n_levels):
    """Level of each value by rank among the sorted positive values; zero
    variance is level 1. Equal values share the lowest rank's level."""
    pos = sorted(v for v in values if v > 0)
    n = len(pos)
    out = []
    for v in values:
        if v <= 0:
            out.append(1)
            continue
        rank = pos.index(v)
        # level k+1 starts at sorted position floor(k*n/L)
        out.append(max(k + 1 for k in range(n_levels) if k * n // n_levels <= rank))
    return out
