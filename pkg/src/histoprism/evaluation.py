"""Glue between prediction files, a dataset and the metric functions."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics as M
from .artifacts import Prediction
from .curation import PathwayCollection
from .synth import Dataset

log = logging.getLogger(__name__)


def hvg_reference(dataset: Dataset) -> dict[str, list[np.ndarray]]:
    """Ground truth used for HVG ranking, per cancer.

    Slides that are training slides in at least one split and test slides in
    none. A cancer with no such slide falls back to its split-0 training
    slides.
    """
    ever_test = {sid for assign in dataset.splits for sid, part in assign.items() if part == "test"}
    ever_train = {sid for assign in dataset.splits for sid, part in assign.items() if part == "train"}
    out: dict[str, list[np.ndarray]] = defaultdict(list)
    for s in dataset.slides:
        if s.slide_id in ever_train and s.slide_id not in ever_test:
            out[s.cancer_label].append(s.expression)
    for cancer in dataset.cancer_names:
        if cancer not in out:
            log.warning("cancer %s: every training slide is a test slide elsewhere; using split-0 training slides",
                        cancer)
            out[cancer] = [s.expression for s in dataset.part(0, "train") if s.cancer_label == cancer]
    return {c: v for c, v in out.items() if v}


def split_gene_variances(dataset: Dataset) -> list[np.ndarray]:
    """Per split, gene variance over every test patch of that split."""
    return [M.population_variance([s.expression for s in dataset.part(k, "test")])
            for k in range(len(dataset.splits))]


@dataclass
class SlideCorrelations:
    meta: list[M.SlideMeta]
    pcc: dict[str, np.ndarray]
    predictions: dict[str, np.ndarray]


def slide_correlations(preds: Sequence[Prediction], dataset: Dataset) -> SlideCorrelations:
    slides = dataset.by_id()
    meta, table, values = [], {}, {}
    for p in sorted(preds, key=lambda q: (q.split, q.slide_id)):
        if p.slide_id not in slides:
            raise KeyError(f"prediction for unknown slide {p.slide_id!r}")
        truth = slides[p.slide_id].expression
        if truth is None or truth.shape != p.values.shape:
            raise ValueError(f"{p.slide_id}: truth/prediction shape mismatch")
        meta.append(M.SlideMeta(p.key, p.cancer_label, p.split))
        table[p.key] = M.pcc_columns(truth, p.values)
        values[p.key] = p.values
    return SlideCorrelations(meta, table, values)


def eval_hvg(corr: SlideCorrelations, dataset: Dataset, n: int = 50) -> tuple[M.MacroMicroReport, M.HvgPanel]:
    panel = M.select_hvg(hvg_reference(dataset), n)
    return M.macro_micro_pcc(corr.pcc, corr.meta, panel), panel


def eval_gpc(corr: SlideCorrelations, dataset: Dataset, pathways: PathwayCollection,
             n_levels: int = 10) -> tuple[M.GpcReport, list[M.VarianceLevels]]:
    variances = split_gene_variances(dataset)
    levels = [M.variance_levels(v, n_levels) for v in variances]
    report = M.gpc_score(corr.pcc, pathways, dataset.gene_names, variances, levels)
    return report, levels


def eval_cluster(corr: SlideCorrelations, seed: int) -> M.ClusterEval:
    return M.cluster_eval(corr.predictions, corr.meta, seed)
