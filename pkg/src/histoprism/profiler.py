"""Analytical FLOPs model and forward-pass scaling benchmarks.

Counting convention: one multiply-accumulate of a matrix product is 2 FLOPs;
softmax, layer norm, GELU and bias additions are not counted (the matrix
products dominate at any realistic width).
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, SlideSample, forward
from .synth import grid_coords

WARMUP_RUNS = 5
# a timing whose mean is below this many clock ticks is flagged as unreliable
MIN_TICKS = 100


@dataclass(frozen=True)
class FlopBreakdown:
    """Per-stage MAC counts; ``total`` is in FLOPs (2 per MAC)."""

    macs: dict[str, int]

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total(self) -> int:
        return 2 * self.total_macs

    def flops(self, stage: str) -> int:
        return 2 * self.macs[stage]


def stage_macs(config: ModelConfig, n: int) -> dict[str, int]:
    """Multiply-accumulates per stage for a slide of ``n`` patches.

    cancer_embed       1 x d_onco by d_onco x d_img
    cross.l            q: n*di^2; k, v from the single context token: 2*di^2;
                       scores and value mix against one token: 2*n*di;
                       output projection: n*di^2
    hidden_proj        n*di*dh
    enc.l              q, k, v: 3*n*dh^2; scores and value mix: 2*n^2*dh;
                       output: n*dh^2; feed-forward: 2*ffn_mult*n*dh^2
    head_hidden        n*dh^2
    head_out           n*dh*d_gene
    """
    di, dh, dg = config.d_img, config.d_hidden, config.d_gene
    macs: dict[str, int] = {}
    if config.use_cross_attention:
        macs["cancer_embed"] = config.d_onco * di
        for l in range(config.n_cross_layers):
            macs[f"cross.{l}"] = n * di * di + 2 * di * di + 2 * n * di + n * di * di
    macs["hidden_proj"] = n * di * dh
    for l in range(config.n_enc_layers):
        macs[f"enc.{l}"] = (3 * n * dh * dh + 2 * n * n * dh + n * dh * dh
                            + 2 * config.ffn_mult * n * dh * dh)
    macs["head_hidden"] = n * dh * dh
    macs["head_out"] = n * dh * dg
    return macs


def count_flops(config: ModelConfig, n_patches: int) -> int:
    return FlopBreakdown(stage_macs(config, n_patches)).total


def flop_breakdown(config: ModelConfig, n_patches: int) -> FlopBreakdown:
    return FlopBreakdown(stage_macs(config, n_patches))


def random_slide(config: ModelConfig, n: int, seed: int = 0) -> SlideSample:
    rng = np.random.Generator(np.random.PCG64(seed))
    onehot = np.zeros(config.d_onco)
    onehot[0] = 1.0
    return SlideSample(rng.standard_normal((n, config.d_img)), onehot,
                       np.zeros((n, config.d_gene)), grid_coords(n))


def instrumented_macs(config: ModelConfig, params, n: int, seed: int = 0) -> int:
    sample = random_slide(config, n, seed)
    with T.count_macs() as counter:
        forward(sample, params, config)
    return counter.macs


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log(y) on log(x); NaN with < 2 usable points."""
    pts = [(math.log(a), math.log(b)) for a, b in zip(x, y) if a > 0 and b > 0]
    if len(pts) < 2:
        return float("nan")
    lx, ly = np.array(pts).T
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass
class ProfileReport:
    n_patches: list[int]
    analytical_flops: list[int]
    time_mean: list[float]
    time_std: list[float]
    peak_bytes: list[int]
    flagged: list[bool]
    runs: int
    warmup: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.n_patches, self.n_patches[1:])):
            raise ValueError("n_patches must be strictly increasing")

    def slopes(self) -> dict[str, float]:
        return {"runtime": loglog_slope(self.n_patches, self.time_mean),
                "peak_bytes": loglog_slope(self.n_patches, self.peak_bytes),
                "flops": loglog_slope(self.n_patches, self.analytical_flops)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
            fh.write(f"# runs: {self.runs}\n# warmup: {self.warmup}\n")
            fh.write("# flops: 2 x multiply-accumulates of matrix products; time in seconds; "
                     "peak_bytes from the autodiff allocation tracker\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n_patches", "analytical_flops", "time_mean_s", "time_std_s", "peak_bytes", "timer_flag"])
            for row in zip(self.n_patches, self.analytical_flops, self.time_mean, self.time_std,
                           self.peak_bytes, self.flagged):
                n, fl, tm, ts, pb, fg = row
                w.writerow([n, fl, repr(tm), repr(ts), pb, int(fg)])

    @classmethod
    def read_csv(cls, path) -> "ProfileReport":
        meta: dict[str, str] = {}
        rows = []
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, val = line[2:].partition(": ")
                meta[key] = val
            else:
                body.append(line)
        reader = csv.DictReader(body)
        for r in reader:
            rows.append(r)
        return cls(n_patches=[int(r["n_patches"]) for r in rows],
                   analytical_flops=[int(r["analytical_flops"]) for r in rows],
                   time_mean=[float(r["time_mean_s"]) for r in rows],
                   time_std=[float(r["time_std_s"]) for r in rows],
                   peak_bytes=[int(r["peak_bytes"]) for r in rows],
                   flagged=[bool(int(r["timer_flag"])) for r in rows],
                   runs=int(meta["runs"]), warmup=int(meta["warmup"]),
                   config=json.loads(meta["config"]))


def benchmark_forward(config: ModelConfig, params: Mapping[str, np.ndarray], n_patches_list: Sequence[int],
                      runs: int = 100, warmup: int = WARMUP_RUNS, seed: int = 0) -> ProfileReport:
    if runs < 3:
        raise ValueError("runs must be >= 3")
    ns = sorted(int(n) for n in n_patches_list)
    resolution = time.get_clock_info("perf_counter").resolution
    means, stds, peaks, flags = [], [], [], []
    for n in ns:
        sample = random_slide(config, n, seed)
        for _ in range(warmup):
            forward(sample, params, config)
        times = np.empty(runs)
        for i in range(runs):
            t0 = time.perf_counter()
            forward(sample, params, config)
            times[i] = time.perf_counter() - t0
        with T.track_allocations() as tracker:
            forward(sample, params, config)
        means.append(float(times.mean()))
        stds.append(float(times.std()))
        peaks.append(tracker.peak)
        flags.append(bool(times.mean() < MIN_TICKS * resolution))
    return ProfileReport(ns, [count_flops(config, n) for n in ns], means, stds, peaks, flags,
                         runs, warmup, config.to_dict())


def plot_profile(report: ProfileReport, path) -> None:
    """Three panels (runtime, peak memory, FLOPs) against patch count, log-log."""
    from .plots import figure, save_svg

    fig, axes = figure(1, 3, (12, 3.6))
    n = report.n_patches
    axes[0].errorbar(n, report.time_mean, yerr=report.time_std, marker="o", capsize=3)
    axes[0].set_ylabel("forward time (s)")
    axes[1].plot(n, report.peak_bytes, marker="o")
    axes[1].set_ylabel("peak bytes")
    axes[2].plot(n, report.analytical_flops, marker="o")
    axes[2].set_ylabel("FLOPs")
    slopes = report.slopes()
    for ax, key in zip(axes, ("runtime", "peak_bytes", "flops")):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("patches N")
        ax.set_title(f"slope {slopes[key]:.2f}")
    save_svg(fig, path)
