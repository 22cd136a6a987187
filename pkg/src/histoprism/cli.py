"""``histoprism`` command line: data generation, training, prediction,
curation, evaluation and profiling.

Every subcommand writes into ``--out`` (a directory) and leaves a
``manifest.json`` there. On failure a ``FAILED`` marker holding the error is
written instead and the exit status is 1.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

from . import __version__, curation
from . import evaluation as E
from . import reports as R
from .artifacts import (Checkpoint, Prediction, load_checkpoint, read_predictions, save_checkpoint,
                        write_predictions)
from .containers import dumps_json
from .model import ModelConfig, TrainConfig, forward, init_params, train
from .profiler import benchmark_forward, flop_breakdown, plot_profile
from .synth import PARTS, SynthSpec, generate, read_dataset, write_dataset

log = logging.getLogger("histoprism")

MANIFEST = "manifest.json"
FAILED = "FAILED"


# ---------------------------------------------------------------------------
# helpers


def sha256_path(path) -> str:
    """Digest of a file, or of a directory's sorted (relative path, content) pairs."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write(out: Path, name: str, text: str) -> Path:
    p = out / name
    p.write_text(text, encoding="utf-8")
    return p


class Run:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out)
        self.inputs: dict[str, str] = {}
        self.config: dict = {}
        self.seeds: dict[str, int] = {}
        self.outputs: list[str] = []
        self.started = dt.datetime.now(dt.timezone.utc).isoformat()

    def input(self, label: str, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"{label}: {path} does not exist")
        self.inputs[f"{label}:{path}"] = sha256_path(path)
        return path

    def output(self, path: Path) -> None:
        self.outputs.append(str(path.relative_to(self.out)))

    def manifest(self) -> dict:
        return {"subcommand": self.args.command, "version": __version__, "config": self.config,
                "seeds": self.seeds, "inputs": self.inputs, "outputs": sorted(self.outputs),
                "started": self.started, "finished": dt.datetime.now(dt.timezone.utc).isoformat()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(run: Run) -> None:
    a = run.args
    spec_dict = _load_json(a.spec and run.input("spec", a.spec))
    if a.seed is not None:
        spec_dict["seed"] = a.seed
    spec = SynthSpec.from_dict(spec_dict)
    run.config = spec.to_dict()
    run.seeds["data"] = spec.seed
    ds = generate(spec)
    write_dataset(ds, run.out / "dataset")
    run.output(run.out / "dataset")
    counts = {f"split{k}": {part: len(ds.part(k, part)) for part in PARTS} for k in range(len(ds.splits))}
    run.config["split_counts"] = counts


def _model_config(a, ds) -> ModelConfig:
    cfg = _load_json(a.model_config and a.model_config)
    cfg.setdefault("d_img", ds.slides[0].patch_features.shape[1])
    cfg.setdefault("d_gene", len(ds.gene_names))
    cfg.setdefault("d_onco", len(ds.cancer_names))
    if a.d_hidden is not None:
        cfg["d_hidden"] = a.d_hidden
    if a.no_cross_residual:
        cfg["cross_residual"] = False
    if a.no_cross_attention:
        cfg["use_cross_attention"] = False
    return ModelConfig.from_dict(cfg)


def cmd_train(run: Run) -> None:
    a = run.args
    ds = read_dataset(run.input("dataset", a.dataset))
    if a.model_config:
        run.input("model_config", a.model_config)
    if a.train_config:
        run.input("train_config", a.train_config)
    mc = _model_config(a, ds)
    tc_dict = _load_json(a.train_config)
    if a.seed is not None:
        tc_dict["seed"] = a.seed
    if a.max_epochs is not None:
        tc_dict["max_epochs"] = a.max_epochs
    tc = TrainConfig.from_dict(tc_dict)
    if not 0 <= a.split < len(ds.splits):
        raise ValueError(f"split {a.split} out of range (dataset has {len(ds.splits)})")
    run.config = {"model": mc.to_dict(), "train": tc.to_dict(), "split": a.split}
    run.seeds["train"] = tc.seed
    params, trace = train(ds.part(a.split, "train"), ds.part(a.split, "val"), mc, tc)
    path = run.out / "checkpoint.hpc"
    save_checkpoint(Checkpoint(mc, tc, params, trace, a.split, sha256_path(a.dataset)), path)
    run.output(path)
    run.config["best_epoch"] = trace.best_epoch
    run.config["epochs_run"] = trace.epochs
    run.config["stop_reason"] = trace.stop_reason


def cmd_predict(run: Run) -> None:
    a = run.args
    ck = load_checkpoint(run.input("checkpoint", a.checkpoint))
    ds = read_dataset(run.input("dataset", a.dataset))
    slides = ds.slides if a.part == "all" else ds.part(ck.split, a.part)
    preds = [Prediction(s.slide_id, s.cancer_label, ck.split, forward(s, ck.params, ck.config)) for s in slides]
    run.config = {"part": a.part, "split": ck.split, "n_slides": len(preds)}
    for p in write_predictions(preds, run.out / "predictions"):
        run.output(p)


def cmd_curate(run: Run) -> None:
    a = run.args
    coll = None
    for g in a.gmt:
        c = curation.parse_gmt(run.input("gmt", g))
        coll = c if coll is None else coll.merged(c)
    panel = curation.read_panel(run.input("panel", a.panel)) if a.panel else None
    out = curation.curate(coll, panel, a.tau, a.min_size, a.max_size)
    cert = curation.max_pairwise_jaccard(curation.redundancy_filter(
        curation.size_filter(coll, a.min_size, a.max_size), a.tau))
    if cert > a.tau:
        raise RuntimeError(f"certificate failed: max pairwise Jaccard {cert} > {a.tau}")
    run.config = {"tau": a.tau, "min_size": a.min_size, "max_size": a.max_size, "n_input": len(coll),
                  "n_output": len(out), "max_jaccard": cert, "ordering": curation.ORDERING_RULE}
    curation.write_gmt(out, run.out / "curated.gmt")
    curation.write_curation_log(out, run.out / "curation_log.tsv", a.tau)
    run.output(run.out / "curated.gmt")
    run.output(run.out / "curation_log.tsv")


def _predictions(run: Run, dirs) -> list[Prediction]:
    preds = []
    for d in dirs:
        preds.extend(read_predictions(run.input("predictions", d)))
    keys = [p.key for p in preds]
    if len(set(keys)) != len(keys):
        raise ValueError("the same (split, slide) appears in more than one prediction file")
    return preds


def cmd_eval_hvg(run: Run) -> None:
    a = run.args
    ds = read_dataset(run.input("dataset", a.dataset))
    corr = E.slide_correlations(_predictions(run, a.predictions), ds)
    report, panel = E.eval_hvg(corr, ds, a.hvg_n)
    run.config = {"hvg_n": a.hvg_n, "union_size": len(panel.union), "n_slides": len(corr.meta)}
    for name, text in (("pcc_table.txt", R.pcc_table_text(report, panel, a.label)),
                       ("pcc_table.csv", R.pcc_table_csv(report)),
                       ("slide_scores.csv", R.slide_scores_csv(report))):
        run.output(_write(run.out, name, text))


def cmd_eval_gpc(run: Run) -> None:
    a = run.args
    ds = read_dataset(run.input("dataset", a.dataset))
    pathways = curation.parse_gmt(run.input("pathways", a.pathways))
    pathways = curation.restrict_to_panel(pathways, ds.gene_names)
    corr = E.slide_correlations(_predictions(run, a.predictions), ds)
    report, levels = E.eval_gpc(corr, ds, pathways, a.levels)
    other = None
    if a.baseline:
        other_corr = E.slide_correlations(_predictions(run, a.baseline), ds)
        other, _ = E.eval_gpc(other_corr, ds, pathways, a.levels)
    run.config = {"levels": a.levels, "n_pathways": len(report.rows), "n_slides": report.n_slides}
    run.output(_write(run.out, "gpc.txt", R.gpc_text(report, other, (a.label, a.baseline_label))))
    run.output(_write(run.out, "gpc.csv", R.gpc_csv(report)))
    run.output(_write(run.out, "variance_thresholds.txt", R.thresholds_text(levels)))
    series = {a.label: report}
    if other is not None:
        run.output(_write(run.out, "gpc_baseline.csv", R.gpc_csv(other)))
        series[a.baseline_label] = other
    R.plot_gpc_by_level(series, run.out / "gpc_by_level.svg")
    run.output(run.out / "gpc_by_level.svg")


def cmd_eval_cluster(run: Run) -> None:
    a = run.args
    ds = read_dataset(run.input("dataset", a.dataset))
    corr = E.slide_correlations(_predictions(run, a.predictions), ds)
    seed = 0 if a.seed is None else a.seed
    res = E.eval_cluster(corr, seed)
    run.seeds["kmeans"] = seed
    run.config = {"k": res.k, "ami": res.ami, "ari": res.ari}
    run.output(_write(run.out, "cluster.txt", R.cluster_text(res, seed)))
    run.output(_write(run.out, "cluster_assignments.csv", R.cluster_csv(res, [m.key for m in corr.meta])))


def cmd_profile(run: Run) -> None:
    a = run.args
    cfg = _load_json(a.model_config and run.input("model_config", a.model_config))
    cfg.setdefault("d_img", 1536)
    cfg.setdefault("d_gene", 50)
    cfg.setdefault("d_onco", 32)
    if a.d_hidden is not None:
        cfg["d_hidden"] = a.d_hidden
    mc = ModelConfig.from_dict(cfg)
    seed = 0 if a.seed is None else a.seed
    params = init_params(mc, seed)
    report = benchmark_forward(mc, params, a.n, runs=a.runs, seed=seed)
    run.seeds["params"] = seed
    run.config = {"model": mc.to_dict(), "n": report.n_patches, "runs": a.runs, "slopes": {k: (None if v != v else v) for k, v in report.slopes().items()},
                  "flops_by_stage": {str(n): flop_breakdown(mc, n).macs for n in report.n_patches},
                  "timer_flagged": [n for n, f in zip(report.n_patches, report.flagged) if f]}
    report.write_csv(run.out / "profile.csv")
    plot_profile(report, run.out / "profile.svg")
    run.output(run.out / "profile.csv")
    run.output(run.out / "profile.svg")


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "predict": cmd_predict, "curate": cmd_curate,
            "eval-hvg": cmd_eval_hvg, "eval-gpc": cmd_eval_gpc, "eval-cluster": cmd_eval_cluster,
            "profile": cmd_profile}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histoprism", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        return sp

    sp = cmd("gen-synth", "generate a synthetic dataset")
    sp.add_argument("--spec", help="JSON file with SynthSpec fields (defaults used when omitted)")

    sp = cmd("train", "train one model on one split")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", type=int, default=0)
    sp.add_argument("--model-config", help="JSON with ModelConfig fields; dims default to the dataset's")
    sp.add_argument("--train-config", help="JSON with TrainConfig fields")
    sp.add_argument("--d-hidden", type=int)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--no-cross-residual", action="store_true")
    sp.add_argument("--no-cross-attention", action="store_true")

    sp = cmd("predict", "write per-slide predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--part", choices=[*PARTS, "all"], default="test")

    sp = cmd("curate", "size and redundancy filtering of GMT gene sets")
    sp.add_argument("--gmt", nargs="+", required=True)
    sp.add_argument("--panel", help="gene panel, one symbol per line")
    sp.add_argument("--tau", type=float, default=curation.DEFAULT_TAU)
    sp.add_argument("--min-size", type=int, default=curation.DEFAULT_MIN_SIZE)
    sp.add_argument("--max-size", type=int, default=curation.DEFAULT_MAX_SIZE)

    for name, help_ in (("eval-hvg", "macro/micro PCC over HVGs"), ("eval-gpc", "pathway coherence scores"),
                        ("eval-cluster", "k-means AMI/ARI on predicted profiles")):
        sp = cmd(name, help_)
        sp.add_argument("--predictions", nargs="+", required=True, help="predictions directories")
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--label", default="model")
        if name == "eval-hvg":
            sp.add_argument("--hvg-n", type=int, default=50)
        if name == "eval-gpc":
            sp.add_argument("--pathways", required=True, help="curated GMT")
            sp.add_argument("--levels", type=int, default=10)
            sp.add_argument("--baseline", nargs="+", help="predictions of a second model to compare")
            sp.add_argument("--baseline-label", default="baseline")

    sp = cmd("profile", "FLOPs, runtime and memory versus patch count")
    sp.add_argument("--model-config")
    sp.add_argument("--d-hidden", type=int)
    sp.add_argument("--n", type=int, nargs="+", default=[64, 128, 256, 512])
    sp.add_argument("--runs", type=int, default=100)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stale in (out / FAILED, out / MANIFEST):
        stale.unlink(missing_ok=True)
    run = Run(args)
    try:
        COMMANDS[args.command](run)
    except Exception as exc:  # noqa: BLE001 - every failure must leave a marker
        (out / FAILED).write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}", encoding="utf-8")
        log.error("%s failed: %s", args.command, exc)
        return 1
    (out / MANIFEST).write_text(dumps_json(run.manifest()) + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
