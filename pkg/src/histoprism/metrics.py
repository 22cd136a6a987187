"""Evaluation maths: per-gene PCC, HVG panels, macro/micro averaging, GPC
pathway scores, variance levels, k-means, AMI and ARI.

Conventions used throughout:

* Moments are population moments (divide by n).
* A gene whose truth or prediction is constant across a slide's patches has
  an undefined PCC, stored as NaN. Undefined values are excluded from every
  average and the number excluded is reported.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .curation import GeneSet, PathwayCollection, Source

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# correlation


@dataclass(frozen=True)
class GeneCorrelation:
    slide_id: str
    gene_index: int
    r: float | None  # None when undefined

    @property
    def defined(self) -> bool:
        return self.r is not None


def pcc(y, yhat) -> float | None:
    """Pearson correlation; ``None`` when either input is constant."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.size != yhat.size:
        raise ValueError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < 2:
        raise ValueError("pcc needs at least two observations")
    if np.ptp(y) == 0 or np.ptp(yhat) == 0:
        return None
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    r = float(np.dot(dy, dp) / math.sqrt(float(np.dot(dy, dy)) * float(np.dot(dp, dp))))
    return min(1.0, max(-1.0, r))


def pcc_columns(truth, pred) -> np.ndarray:
    """Column-wise PCC of two N x G matrices; NaN marks undefined genes."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim != 2:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    if truth.shape[0] < 2:
        raise ValueError("need at least two patches")
    dt = truth - truth.mean(axis=0)
    dp = pred - pred.mean(axis=0)
    num = np.einsum("ij,ij->j", dt, dp)
    den = np.sqrt(np.einsum("ij,ij->j", dt, dt) * np.einsum("ij,ij->j", dp, dp))
    undefined = (np.ptp(truth, axis=0) == 0) | (np.ptp(pred, axis=0) == 0)
    r = np.full(truth.shape[1], np.nan)
    ok = ~undefined
    r[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    return r


def per_gene_pcc(truth, pred, slide_id: str = "") -> list[GeneCorrelation]:
    r = pcc_columns(truth, pred)
    return [GeneCorrelation(slide_id, g, None if math.isnan(v) else float(v)) for g, v in enumerate(r)]


def population_variance(matrices: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Per-column variance over all rows of the stacked matrices."""
    if isinstance(matrices, np.ndarray):
        stacked = matrices
    else:
        stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in matrices], axis=0)
    return stacked.var(axis=0)


# ---------------------------------------------------------------------------
# HVG panel and macro / micro averaging


@dataclass
class HvgPanel:
    n: int
    per_cancer: dict[str, list[int]]
    union: list[int]


def top_n_by_variance(variances: np.ndarray, n: int) -> list[int]:
    """Indices of the n largest variances; ties go to the lower index."""
    order = np.lexsort((np.arange(variances.size), -variances))
    return [int(i) for i in order[:n]]


def select_hvg(per_cancer_expression: Mapping[str, Sequence[np.ndarray] | np.ndarray], n: int) -> HvgPanel:
    per_cancer: dict[str, list[int]] = {}
    for cancer in sorted(per_cancer_expression):
        var = population_variance(per_cancer_expression[cancer])
        if n > var.size:
            raise ValueError(f"n={n} exceeds the number of genes ({var.size})")
        rows = sum(np.asarray(m).shape[0] for m in per_cancer_expression[cancer]) \
            if not isinstance(per_cancer_expression[cancer], np.ndarray) \
            else per_cancer_expression[cancer].shape[0]
        if rows < 2:
            raise ValueError(f"cancer {cancer!r} has fewer than two patches")
        per_cancer[cancer] = top_n_by_variance(var, n)
    union = sorted({g for genes in per_cancer.values() for g in genes})
    return HvgPanel(n, per_cancer, union)


@dataclass(frozen=True)
class SlideMeta:
    key: str
    cancer: str
    split: int


@dataclass
class PccRow:
    """One row of the macro/micro table.

    ``sd_macro`` is the spread of the units the macro average is taken over
    (splits for a cancer row, cancer types for the overall row); ``sd_micro``
    is the spread over individual slides. All are population std devs.
    """

    label: str
    n_slides: int
    macro: float
    micro: float
    sd_macro: float
    sd_micro: float
    n_units: int


@dataclass
class MacroMicroReport:
    per_cancer: list[PccRow]
    overall: PccRow
    slide_scores: dict[str, float]
    excluded_genes: dict[str, int]
    omitted_cancers: list[str] = field(default_factory=list)


def slide_score(r: np.ndarray, genes: Sequence[int]) -> tuple[float | None, int]:
    """Mean defined PCC over ``genes`` and the number of undefined genes."""
    vals = np.asarray(r)[list(genes)]
    ok = ~np.isnan(vals)
    if not ok.any():
        return None, int(vals.size)
    return float(vals[ok].mean()), int((~ok).sum())


def _exact_mean(values: Sequence[float]) -> Fraction:
    return _mean_of([Fraction(v) for v in values])


def _mean_of(values: Sequence[Fraction]) -> Fraction:
    return sum(values, Fraction(0)) / len(values)


def macro_micro_pcc(per_slide_gene_pcc: Mapping[str, np.ndarray], slide_meta: Sequence[SlideMeta],
                    hvg: HvgPanel) -> MacroMicroReport:
    """Per-cancer and overall macro/micro averages of slide-level HVG PCC.

    Averages are accumulated in exact rational arithmetic and rounded once,
    so a balanced design (equal slides per split) gives macro == micro
    bit-for-bit.
    """
    scores: dict[str, float] = {}
    excluded: dict[str, int] = {}
    by_cancer: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    cancers_seen = []
    for meta in slide_meta:
        if meta.cancer not in cancers_seen:
            cancers_seen.append(meta.cancer)
        genes = hvg.per_cancer.get(meta.cancer)
        if genes is None:
            raise ValueError(f"no HVG list for cancer {meta.cancer!r}")
        score, n_bad = slide_score(per_slide_gene_pcc[meta.key], genes)
        excluded[meta.key] = n_bad
        if score is None:
            log.warning("slide %s: no defined PCC among its HVGs; excluded", meta.key)
            continue
        scores[meta.key] = score
        by_cancer[meta.cancer][meta.split].append(score)

    rows, omitted = [], []
    all_scores: list[float] = []
    macros_exact: list[Fraction] = []
    for cancer in sorted(cancers_seen):
        splits = by_cancer.get(cancer)
        if not splits:
            log.warning("cancer %s has no scoreable slides; omitted", cancer)
            omitted.append(cancer)
            continue
        split_means = [_exact_mean(splits[s]) for s in sorted(splits)]
        pooled = [v for s in sorted(splits) for v in splits[s]]
        all_scores.extend(pooled)
        macro = _mean_of(split_means)
        macros_exact.append(macro)
        rows.append(PccRow(cancer, len(pooled), float(macro), float(_exact_mean(pooled)),
                           float(np.std([float(m) for m in split_means])), float(np.std(pooled)),
                           len(split_means)))
    if not rows:
        raise ValueError("no scoreable slides")
    overall = PccRow("Average", len(all_scores), float(_mean_of(macros_exact)), float(_exact_mean(all_scores)),
                     float(np.std([r.macro for r in rows])), float(np.std(all_scores)), len(rows))
    return MacroMicroReport(rows, overall, scores, excluded, omitted)


# ---------------------------------------------------------------------------
# variance levels


@dataclass
class VarianceLevels:
    """``thresholds[k]`` is the exclusive lower bound of level ``k + 1``."""

    thresholds: np.ndarray
    assignments: np.ndarray | None = None

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds[0] != 0.0 or np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must start at 0 and be strictly increasing")

    @property
    def n_levels(self) -> int:
        return self.thresholds.size

    def level_of(self, value: float) -> int:
        """Largest level whose lower bound ``value`` exceeds; 0 maps to level 1."""
        return max(1, int(np.searchsorted(self.thresholds, value, side="left")))


def variance_levels(gene_variances, n_levels: int = 10) -> VarianceLevels:
    """Quantile levels over the genes with positive variance.

    With the positive variances sorted as v[0..n-1], the lower bound of level
    k+1 is v[floor(k*n/L) - 1], so level k+1 holds sorted positions
    floor(k*n/L) .. floor((k+1)*n/L) - 1 and occupancy differs by at most one.
    """
    v = np.asarray(gene_variances, dtype=np.float64).reshape(-1)
    if np.any(v < 0):
        raise ValueError("variances must be non-negative")
    pos = np.sort(v[v > 0])
    if np.unique(pos).size < n_levels:
        raise ValueError(f"need at least {n_levels} distinct positive variances, got {np.unique(pos).size}")
    n = pos.size
    cuts = [(k * n) // n_levels for k in range(1, n_levels)]
    thresholds = np.concatenate([[0.0], pos[np.array(cuts) - 1]])
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("tied variances straddle a level boundary; thresholds would not be strictly increasing")
    levels = VarianceLevels(thresholds)
    levels.assignments = np.array([levels.level_of(x) for x in v], dtype=np.int64)
    return levels


def pathway_variance_level(gene_idx: Sequence[int], gene_variances, levels_per_split: Sequence[VarianceLevels]
                           ) -> tuple[float, float]:
    """(mean level over splits, mean of the per-split pathway variances).

    ``gene_variances`` is one vector per split, or a single vector shared by
    all splits.
    """
    if isinstance(gene_variances, np.ndarray) and gene_variances.ndim == 1:
        per_split = [gene_variances] * len(levels_per_split)
    else:
        per_split = [np.asarray(v) for v in gene_variances]
    if len(per_split) != len(levels_per_split):
        raise ValueError("one variance vector per split is required")
    idx = list(gene_idx)
    means = [float(v[idx].mean()) for v in per_split]
    lv = [lev.level_of(m) for lev, m in zip(levels_per_split, means)]
    return float(np.mean(lv)), float(np.mean(means))


# ---------------------------------------------------------------------------
# GPC


@dataclass
class GpcRow:
    name: str
    source: Source
    gene_count: int
    file_gene_count: int
    score: float | None
    n_slides_used: int
    n_excluded: int
    mean_variance: float | None = None
    variance_level: float | None = None

    @property
    def scored(self) -> bool:
        return self.score is not None


@dataclass
class GpcReport:
    rows: list[GpcRow]
    n_slides: int

    def by_name(self) -> dict[str, GpcRow]:
        return {r.name: r for r in self.rows}


def gene_indices(gs: GeneSet, gene_names: Sequence[str]) -> list[int]:
    pos = {g: i for i, g in enumerate(gene_names)}
    missing = [g for g in gs.genes if g not in pos]
    if missing:
        raise ValueError(f"pathway {gs.name} has genes outside the panel (restrict first): {missing[:5]}")
    return [pos[g] for g in gs.genes]


def gpc_score(per_slide_pcc: Mapping[str, np.ndarray] | np.ndarray, pathways: PathwayCollection,
              gene_names: Sequence[str], gene_variances=None,
              levels_per_split: Sequence[VarianceLevels] | None = None) -> GpcReport:
    """Pathway coherence: mean over slides of the mean PCC over pathway genes.

    Undefined (NaN) per-gene values are dropped from the inner mean; a slide
    with no defined value for a pathway is dropped from the outer mean.
    """
    if isinstance(per_slide_pcc, np.ndarray):
        table = np.atleast_2d(per_slide_pcc)
    else:
        table = np.stack([np.asarray(per_slide_pcc[k]) for k in per_slide_pcc]) if per_slide_pcc else \
            np.empty((0, len(gene_names)))
    rows = []
    for gs in sorted(pathways.sets, key=lambda s: s.name):
        idx = gene_indices(gs, gene_names)
        sub = table[:, idx]
        ok = ~np.isnan(sub)
        per_slide = [float(sub[i, ok[i]].mean()) for i in range(sub.shape[0]) if ok[i].any()]
        score = float(np.mean(per_slide)) if per_slide else None
        if score is None:
            log.warning("pathway %s has no scoreable genes", gs.name)
        row = GpcRow(gs.name, gs.source, gs.size, gs.file_size, score, len(per_slide), int((~ok).sum()))
        if gene_variances is not None and levels_per_split is not None:
            row.variance_level, row.mean_variance = pathway_variance_level(idx, gene_variances, levels_per_split)
        rows.append(row)
    return GpcReport(rows, table.shape[0])


def source_group(source: Source) -> str:
    if source is Source.HALLMARK:
        return "Hallmark"
    if source in (Source.GO_BP, Source.GO_CC, Source.GO_MF):
        return "GO"
    return "Other"


def gpc_win_rate(report_a: GpcReport, report_b: GpcReport) -> dict[str, float]:
    """Fraction of pathways where ``a`` strictly beats ``b``, per source group.

    Unscored rows count as non-wins.
    """
    names_a = [r.name for r in report_a.rows]
    names_b = [r.name for r in report_b.rows]
    if names_a != names_b:
        raise ValueError("reports do not cover identical pathway rows")
    wins: dict[str, list[bool]] = defaultdict(list)
    for ra, rb in zip(report_a.rows, report_b.rows):
        win = ra.score is not None and rb.score is not None and ra.score > rb.score
        wins[source_group(ra.source)].append(win)
    return {g: sum(w) / len(w) for g, w in sorted(wins.items())}


# ---------------------------------------------------------------------------
# clustering


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    reseeds: int


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("skd,skd->sk", diff, diff)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    s = x.shape[0]
    chosen = [int(rng.integers(s))]
    d2 = _sq_dists(x, x[chosen]).min(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(s, p=d2 / total))
        else:
            nxt = next(i for i in range(s) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult:
    k = centers.shape[0]
    labels = None
    reseeds = 0
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new = d2.argmin(axis=1)
        for j in range(k):
            if not np.any(new == j):
                dist_own = d2[np.arange(x.shape[0]), new]
                far = int(dist_own.argmax())
                if dist_own[far] == 0:
                    continue
                log.info("k-means: empty cluster %d re-seeded from point %d", j, far)
                centers[j] = x[far]
                new[far] = j
                reseeds += 1
                d2 = _sq_dists(x, centers)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
    d2 = _sq_dists(x, centers)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    return KMeansResult(labels, centers, inertia, it, reseeds)


def lloyd_kmeans(x, k: int, seed: int, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best of ``n_init`` restarts."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or not 2 <= k <= x.shape[0]:
        raise ValueError(f"need S >= k >= 2, got S={x.shape[0] if x.ndim == 2 else '?'} k={k}")
    rng = np.random.Generator(np.random.PCG64(seed))
    best = None
    for _ in range(n_init):
        res = _lloyd(x, _kmeanspp(x, k, rng), max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def kmeans_cluster(profiles, k: int, seed: int) -> np.ndarray:
    return lloyd_kmeans(profiles, k, seed).labels


def contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("need at least two labelled items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _same_partition(table: np.ndarray) -> bool:
    nz = table > 0
    return bool(np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1))


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return -math.fsum(p * np.log(p))


# Sums below use math.fsum and pair symmetric terms so that the results are
# bit-identical under transposition and relabelling of the contingency table.


def mutual_info(table: np.ndarray) -> float:
    n = int(table.sum())
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    i, j = np.nonzero(table)
    nij = table[i, j].astype(np.float64)
    terms = nij / n * ((np.log(nij) + math.log(n)) - (np.log(a[i]) + np.log(b[j])))
    return math.fsum(terms)


def expected_mutual_info(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """E[MI] under the hypergeometric (fixed marginals) model."""
    lg_n = gammaln(n + 1)
    terms: list[float] = []
    for ai in a:
        for bj in b:
            lo, hi = max(1, ai + bj - n), min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_p = ((gammaln(ai + 1) + gammaln(bj + 1)) + (gammaln(n - ai + 1) + gammaln(n - bj + 1))
                     - (lg_n + gammaln(nij + 1))
                     - (gammaln(ai - nij + 1) + gammaln(bj - nij + 1))
                     - gammaln(n - ai - bj + nij + 1))
            mi = nij / n * ((np.log(nij) + math.log(n)) - (math.log(ai) + math.log(bj)))
            terms.extend((mi * np.exp(log_p)).tolist())
    return math.fsum(terms)


def ami(labels_a, labels_b) -> float:
    """Adjusted mutual information, arithmetic-mean normaliser, natural log.

    Identical partitions score 1.0. When the normaliser vanishes for
    non-identical partitions (no information to adjust), the score is 0.0.
    """
    table = contingency(labels_a, labels_b)
    if _same_partition(table):
        return 1.0
    n = int(table.sum())
    a, b = table.sum(axis=1), table.sum(axis=0)
    mi = mutual_info(table)
    emi = expected_mutual_info(a, b, n)
    denom = 0.5 * (_entropy(a, n) + _entropy(b, n)) - emi
    if abs(denom) < 1e-15:
        return 0.0
    return (mi - emi) / denom


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the pair-counting contingency table (exact
    integer arithmetic up to the final division)."""
    table = contingency(labels_a, labels_b)
    if _same_partition(table):
        return 1.0
    n = int(table.sum())
    comb = lambda x: x * (x - 1) // 2  # noqa: E731
    index = sum(comb(int(v)) for v in table.ravel())
    sa = sum(comb(int(v)) for v in table.sum(axis=1))
    sb = sum(comb(int(v)) for v in table.sum(axis=0))
    pairs = comb(n)
    num = 2 * (index * pairs - sa * sb)
    den = (sa + sb) * pairs - 2 * sa * sb
    if den == 0:
        return 0.0
    return float(Fraction(num, den))


@dataclass
class ClusterEval:
    ami: float
    ari: float
    k: int
    labels: np.ndarray
    truth: list[str]


def slide_profile(pred: np.ndarray) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64).mean(axis=0)


def cluster_eval(predictions: Mapping[str, np.ndarray], slide_meta: Sequence[SlideMeta], seed: int) -> ClusterEval:
    """Cluster slide-mean predicted profiles into k = #cancer types and score
    the clusters against the cancer labels."""
    truth = [m.cancer for m in slide_meta]
    k = len(set(truth))
    if k < 2:
        raise ValueError("cluster evaluation needs at least two cancer types")
    profiles = np.stack([slide_profile(predictions[m.key]) for m in slide_meta])
    labels = kmeans_cluster(profiles, k, seed)
    return ClusterEval(ami(truth, labels), ari(truth, labels), k, labels, truth)
