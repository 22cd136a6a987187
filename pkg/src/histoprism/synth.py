"""Synthetic slides with a planted feature -> expression map.

Generative model, per slide of cancer ``c`` with ``n`` patches:

1. Patch features come from that cancer's Gaussian mixture: ``K`` component
   means shared across cancers plus a small cancer-specific shift, cancer
   specific mixing weights, unit isotropic noise.
2. Two latent blocks are read off the features linearly:
   ``h = X @ W_shared`` (``signal_rank`` columns) and ``u = X @ W_gate``
   (one column per cancer type).
3. The gate block gets an additive offset selected by the one-hot,
   ``s * o_c`` with ``o_c = 0`` at column ``c`` and ``-1`` elsewhere, and
   passes through a soft hinge centred so that an offset of 0 is (nearly)
   the identity. For large ``s`` only column ``c`` stays alive; the others
   saturate at a constant.
4. "Offset genes" load only on the gate block, all other genes only on the
   shared block. Their log-rate is
   ``eta = BASE + mu_g + h @ A + gated @ B + noise_sigma * N(0, 1)``.
5. Counts are ``round(COUNT_SCALE * softplus(eta))`` and expression is
   ``log1p(counts)``. With ``BASE`` well below zero, softplus is in its
   exponential regime, so expression is close to affine in the latents.

Randomness: numpy ``PCG64`` seeded through ``SeedSequence(seed)``; the
global parameters and each slide draw from their own spawned stream, so a
slide's content does not depend on how many slides precede it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import containers
from .containers import FormatError
from .model import SlideSample

BASE_LOGIT = -8.0
LOG_COUNT_SCALE = 14.0
GATE_CENTER = 3.0
GATE_SHARPNESS = 3.0
FEATURE_SHIFT = 0.1
N_COMPONENTS = 3

SLIDE_MAGIC = b"HPSLIDE1"
TRUTH_MAGIC = b"HPTRUTH1"
FORMAT_VERSION = 1
PARTS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthSpec:
    n_cancers: int = 4
    slides_per_cancer: int = 6
    patches_per_slide: tuple[int, int] = (64, 64)
    d_img: int = 32
    d_gene: int = 40
    signal_rank: int = 4
    noise_sigma: float = 0.05
    cancer_effect_scale: float = 1.0
    seed: int = 0
    offset_gene_fraction: float = 0.5
    n_splits: int = 2

    def __post_init__(self):
        object.__setattr__(self, "patches_per_slide", tuple(int(x) for x in self.patches_per_slide))
        lo, hi = self.patches_per_slide
        for name in ("n_cancers", "slides_per_cancer", "d_img", "d_gene", "signal_rank", "n_splits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError("patches_per_slide must be (min, max) with 1 <= min <= max")
        if self.noise_sigma < 0 or self.cancer_effect_scale < 0 or self.seed < 0:
            raise ValueError("noise_sigma, cancer_effect_scale and seed must be non-negative")
        if not 0 <= self.offset_gene_fraction <= 1:
            raise ValueError("offset_gene_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patches_per_slide"] = list(self.patches_per_slide)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        return cls(**dict(d))


@dataclass
class GeneratorTruth:
    """Ground-truth generator parameters, kept for oracle evaluation."""

    tensors: dict[str, np.ndarray]
    offset_genes: np.ndarray  # bool mask over genes

    def latent_expression(self, sample: SlideSample, cancer_index: int, scale: float) -> np.ndarray:
        """Noise-free, rounding-free expression ``log1p(COUNT_SCALE * softplus(eta))``."""
        eta = _log_rate(self.tensors, sample.patch_features, cancer_index, scale)
        return LOG_COUNT_SCALE + np.log(_softplus(eta))


@dataclass
class Dataset:
    slides: list[SlideSample]
    gene_names: list[str]
    cancer_names: list[str]
    splits: list[dict[str, str]]
    spec: SynthSpec | None = None
    truth: GeneratorTruth | None = None

    def by_id(self) -> dict[str, SlideSample]:
        return {s.slide_id: s for s in self.slides}

    def part(self, split: int, part: str) -> list[SlideSample]:
        if part not in PARTS:
            raise ValueError(f"unknown part {part!r}")
        assign = self.splits[split]
        return [s for s in self.slides if assign.get(s.slide_id) == part]

    def cancer_index(self, sample: SlideSample) -> int:
        return int(np.argmax(sample.cancer_onehot))


def log1p_normalize(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise ValueError("counts must be finite and non-negative")
    return np.log1p(counts)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _log_rate(t: Mapping[str, np.ndarray], x: np.ndarray, c: int, scale: float) -> np.ndarray:
    h = x @ t["w_shared"]
    u = x @ t["w_gate"] + scale * t["gate_offsets"][c]
    gated = _softplus(GATE_SHARPNESS * (u + GATE_CENTER)) / GATE_SHARPNESS - GATE_CENTER
    return BASE_LOGIT + t["gene_base"] + h @ t["load_shared"] + gated @ t["load_gate"]


def grid_coords(n: int) -> np.ndarray:
    side = math.ceil(math.sqrt(n))
    idx = np.arange(n)
    return np.stack([idx // side, idx % side], axis=1).astype(np.float64)


def stratified_splits(labels: Sequence[str], ids: Sequence[str], n_splits: int,
                      rng: np.random.Generator) -> list[dict[str, str]]:
    """Per cancer: shuffle once, then each split takes a different test block.

    Cancers with >= 3 slides get >= 1 slide in each of train/val/test; two
    slides give train/test; a single slide is train only.
    """
    splits: list[dict[str, str]] = [{} for _ in range(n_splits)]
    for cancer in sorted(set(labels)):
        members = [i for i, lab in zip(ids, labels) if lab == cancer]
        order = [members[j] for j in rng.permutation(len(members))]
        n = len(order)
        if n >= 3:
            n_test = max(1, round(0.2 * n))
            n_val = max(1, round(0.2 * n))
        else:
            n_test, n_val = n - 1, 0
        for k, assign in enumerate(splits):
            start = (k * n_test) % n
            rolled = order[start:] + order[:start]
            for j, sid in enumerate(rolled):
                assign[sid] = "test" if j < n_test else "val" if j < n_test + n_val else "train"
    return splits


def generate(spec: SynthSpec) -> Dataset:
    root = np.random.SeedSequence(spec.seed)
    global_seq, slide_seq, split_seq = root.spawn(3)
    rng = np.random.Generator(np.random.PCG64(global_seq))
    C, D, G, R = spec.n_cancers, spec.d_img, spec.d_gene, spec.signal_rank

    shared_means = rng.standard_normal((N_COMPONENTS, D))
    means = shared_means[None] + FEATURE_SHIFT * rng.standard_normal((C, N_COMPONENTS, D))
    weights = rng.dirichlet(np.full(N_COMPONENTS, 2.0), size=C)
    feat_scale = 1.0 / math.sqrt(2.0 * D)
    w_shared = feat_scale * rng.standard_normal((D, R))
    w_gate = feat_scale * rng.standard_normal((D, C))
    n_offset = int(round(spec.offset_gene_fraction * G))
    offset_genes = np.zeros(G, dtype=bool)
    offset_genes[rng.permutation(G)[:n_offset]] = True
    load_shared = rng.standard_normal((R, G)) / math.sqrt(R)
    load_shared[:, offset_genes] = 0.0
    load_gate = rng.standard_normal((C, G))
    load_gate[:, ~offset_genes] = 0.0
    gene_base = rng.uniform(-0.5, 0.5, size=(1, G))
    gate_offsets = np.eye(C) - 1.0

    truth = GeneratorTruth(
        tensors={
            "component_means": means.reshape(C * N_COMPONENTS, D),
            "component_weights": weights,
            "w_shared": w_shared,
            "w_gate": w_gate,
            "load_shared": load_shared,
            "load_gate": load_gate,
            "gene_base": gene_base,
            "gate_offsets": gate_offsets,
        },
        offset_genes=offset_genes,
    )

    cancer_names = [f"CANCER_{c}" for c in range(C)]
    gene_names = [f"GENE_{g:04d}" for g in range(G)]
    eye = np.eye(C)
    slides = []
    n_slides = C * spec.slides_per_cancer
    lo, hi = spec.patches_per_slide
    for i, seq in enumerate(slide_seq.spawn(n_slides)):
        c = i // spec.slides_per_cancer
        r = np.random.Generator(np.random.PCG64(seq))
        n = int(r.integers(lo, hi + 1))
        comp = r.choice(N_COMPONENTS, size=n, p=weights[c])
        x = means[c][comp] + r.standard_normal((n, D))
        eta = _log_rate(truth.tensors, x, c, spec.cancer_effect_scale)
        eta = eta + spec.noise_sigma * r.standard_normal((n, G))
        counts = np.rint(math.exp(LOG_COUNT_SCALE) * _softplus(eta))
        slides.append(SlideSample(
            patch_features=x,
            cancer_onehot=eye[c],
            expression=log1p_normalize(counts),
            coords=grid_coords(n),
            cancer_label=cancer_names[c],
            slide_id=f"S{i:04d}_{cancer_names[c]}",
        ))
    split_rng = np.random.Generator(np.random.PCG64(split_seq))
    splits = stratified_splits([s.cancer_label for s in slides], [s.slide_id for s in slides],
                               spec.n_splits, split_rng)
    return Dataset(slides, gene_names, cancer_names, splits, spec, truth)


# ---------------------------------------------------------------------------
# directory I/O
#
#   <dir>/metadata.json      names, splits, spec, per-slide index
#   <dir>/slides/<id>.hpt    container (SLIDE_MAGIC): features, expression,
#                            coords, cancer_onehot
#   <dir>/truth.hpt          container (TRUTH_MAGIC), only for synthetic data


def write_dataset(d: Dataset, directory) -> None:
    directory = Path(directory)
    (directory / "slides").mkdir(parents=True, exist_ok=True)
    index = []
    for s in d.slides:
        tensors = {"features": s.patch_features, "cancer_onehot": s.cancer_onehot}
        if s.expression is not None:
            tensors["expression"] = s.expression
        if s.coords is not None:
            tensors["coords"] = s.coords
        rel = f"slides/{s.slide_id}.hpt"
        containers.write(directory / rel, SLIDE_MAGIC,
                         {"slide_id": s.slide_id, "cancer_label": s.cancer_label}, tensors)
        index.append({"slide_id": s.slide_id, "cancer_label": s.cancer_label,
                      "n_patches": s.n_patches, "file": rel})
    meta = {
        "format": "histoprism-dataset",
        "version": FORMAT_VERSION,
        "gene_names": d.gene_names,
        "cancer_names": d.cancer_names,
        "slides": index,
        "splits": d.splits,
        "spec": d.spec.to_dict() if d.spec else None,
        "has_truth": d.truth is not None,
    }
    if d.truth is not None:
        t = dict(d.truth.tensors)
        t["offset_genes"] = d.truth.offset_genes.astype(np.float64)
        containers.write(directory / "truth.hpt", TRUTH_MAGIC, {}, t)
    (directory / "metadata.json").write_text(
        containers.dumps_json(meta) + "\n", encoding="utf-8")


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "metadata.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FormatError(meta_path, 0, f"unreadable metadata: {exc}") from None
    if meta.get("format") != "histoprism-dataset":
        raise FormatError(meta_path, 0, "not a histoprism dataset")
    slides = []
    for entry in meta["slides"]:
        path = directory / entry["file"]
        smeta, t = containers.read(path, SLIDE_MAGIC)
        if "features" not in t or "cancer_onehot" not in t:
            raise FormatError(path, 16, "slide file lacks features or cancer_onehot")
        if t["features"].shape[0] != entry["n_patches"]:
            raise FormatError(path, 16, f"{t['features'].shape[0]} patches, metadata says {entry['n_patches']}")
        slides.append(SlideSample(
            patch_features=t["features"],
            cancer_onehot=t["cancer_onehot"].reshape(-1),
            expression=t.get("expression"),
            coords=t.get("coords"),
            cancer_label=smeta["cancer_label"],
            slide_id=smeta["slide_id"],
        ))
    truth = None
    if meta.get("has_truth"):
        t = containers.read(directory / "truth.hpt", TRUTH_MAGIC)[1]
        mask = t.pop("offset_genes").reshape(-1) > 0.5
        truth = GeneratorTruth(t, mask)
    spec = SynthSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    return Dataset(slides, list(meta["gene_names"]), list(meta["cancer_names"]),
                   [dict(s) for s in meta["splits"]], spec, truth)
