import json

import numpy as np
import pytest

from histoprism import cli
from histoprism.artifacts import (Checkpoint, Prediction, load_checkpoint, read_predictions, save_checkpoint,
                                  write_predictions)
from histoprism.containers import FormatError
from histoprism.model import ModelConfig, TrainConfig, TrainingTrace, forward, init_params
from histoprism.synth import read_dataset

SPEC = {"n_cancers": 3, "slides_per_cancer": 5, "patches_per_slide": [10, 16], "d_img": 8, "d_gene": 12, "seed": 4}


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def write_gmt(path, n_genes=12):
    lines = [f"GOBP_SET_{i}\tx\t" + "\t".join(f"GENE_{g:04d}" for g in range(i, i + 4)) for i in range(0, n_genes - 4, 2)]
    lines.append("HALLMARK_ALL\tx\t" + "\t".join(f"GENE_{g:04d}" for g in range(0, n_genes, 3)))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    assert run("gen-synth", "--spec", root / "spec.json", "--out", root / "data") == 0
    assert run("train", "--dataset", root / "data/dataset", "--d-hidden", 16, "--max-epochs", 4,
               "--out", root / "train") == 0
    assert run("predict", "--checkpoint", root / "train/checkpoint.hpc", "--dataset", root / "data/dataset",
               "--part", "all", "--out", root / "pred") == 0
    assert run("curate", "--gmt", write_gmt(root / "p.gmt"), "--min-size", 1, "--out", root / "cur") == 0
    return root


class TestArtifacts:
    def test_checkpoint_round_trip(self, tmp_path):
        cfg = ModelConfig(d_img=6, d_gene=4, d_onco=2, d_hidden=8, n_cross_heads=2, n_enc_heads=2)
        params = init_params(cfg, 1)
        trace = TrainingTrace([1.0, 0.5], [1.2, 0.9], [0.1, 0.1], 1, "max_epochs")
        save_checkpoint(Checkpoint(cfg, TrainConfig(max_epochs=2), params, trace, 1, "abc"), tmp_path / "c.hpc")
        back = load_checkpoint(tmp_path / "c.hpc")
        assert back.config == cfg and back.train_config.max_epochs == 2 and back.split == 1
        assert back.trace.to_dict() == trace.to_dict()
        for k in params:
            np.testing.assert_array_equal(back.params[k], params[k])

    def test_checkpoint_wrong_magic(self, tmp_path):
        write_predictions([Prediction("s", "c", 0, np.ones((2, 2)))], tmp_path)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "split0_s.hpp")

    def test_prediction_round_trip(self, tmp_path):
        p = [Prediction("a", "X", 0, np.arange(6.0).reshape(3, 2)), Prediction("a", "X", 1, np.ones((1, 2)))]
        write_predictions(p, tmp_path)
        back = read_predictions(tmp_path)
        assert [q.key for q in back] == ["0:a", "1:a"]
        np.testing.assert_array_equal(back[0].values, p[0].values)

    def test_empty_prediction_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_predictions(tmp_path)


class TestPipeline:
    def test_manifests(self, pipeline):
        for sub, cmd in (("data", "gen-synth"), ("train", "train"), ("pred", "predict"), ("cur", "curate")):
            m = manifest(pipeline / sub)
            assert m["subcommand"] == cmd
            assert m["outputs"]
            assert not (pipeline / sub / "FAILED").exists()
        m = manifest(pipeline / "train")
        assert m["seeds"] == {"train": 0}
        assert m["config"]["epochs_run"] == 4
        assert all(len(v) == 64 for v in m["inputs"].values())

    def test_prediction_matches_in_process_forward(self, pipeline):
        ck = load_checkpoint(pipeline / "train/checkpoint.hpc")
        ds = read_dataset(pipeline / "data/dataset")
        preds = {p.slide_id: p.values for p in read_predictions(pipeline / "pred/predictions")}
        assert len(preds) == len(ds.slides)
        for s in ds.slides:
            np.testing.assert_array_equal(preds[s.slide_id], forward(s, ck.params, ck.config))

    def test_evaluations(self, pipeline):
        data, pred = pipeline / "data/dataset", pipeline / "pred/predictions"
        assert run("eval-hvg", "--predictions", pred, "--dataset", data, "--hvg-n", 4, "--out", pipeline / "hvg") == 0
        assert "\nAverage " in (pipeline / "hvg/pcc_table.txt").read_text()
        assert run("eval-gpc", "--predictions", pred, "--dataset", data, "--pathways", pipeline / "cur/curated.gmt",
                   "--levels", 3, "--baseline", pred, "--out", pipeline / "gpc") == 0
        assert "win rate" in (pipeline / "gpc/gpc.txt").read_text()
        assert run("eval-cluster", "--predictions", pred, "--dataset", data, "--seed", 2,
                   "--out", pipeline / "clu") == 0
        m = manifest(pipeline / "clu")
        assert m["seeds"] == {"kmeans": 2}
        assert -1 <= m["config"]["ari"] <= 1 and m["config"]["k"] == 3

    def test_reruns_are_byte_identical(self, pipeline):
        assert run("gen-synth", "--spec", pipeline / "spec.json", "--out", pipeline / "data2") == 0
        assert run("train", "--dataset", pipeline / "data2/dataset", "--d-hidden", 16, "--max-epochs", 4,
                   "--out", pipeline / "train2") == 0
        assert cli.sha256_path(pipeline / "data/dataset") == cli.sha256_path(pipeline / "data2/dataset")
        assert (pipeline / "train/checkpoint.hpc").read_bytes() == (pipeline / "train2/checkpoint.hpc").read_bytes()

    def test_profile(self, tmp_path):
        assert run("profile", "--d-hidden", 16, "--n", 8, 16, "--runs", 3, "--out", tmp_path) == 0
        m = manifest(tmp_path)
        assert m["config"]["n"] == [8, 16]
        assert sorted(m["outputs"]) == ["profile.csv", "profile.svg"]


class TestFailures:
    def test_missing_input_writes_failed_marker(self, tmp_path):
        assert run("train", "--dataset", tmp_path / "nope", "--out", tmp_path / "o") == 1
        assert "does not exist" in (tmp_path / "o/FAILED").read_text()
        assert not (tmp_path / "o/manifest.json").exists()

    def test_bad_split(self, pipeline, tmp_path):
        assert run("train", "--dataset", pipeline / "data/dataset", "--split", 9, "--out", tmp_path) == 1
        assert "out of range" in (tmp_path / "FAILED").read_text()

    def test_success_clears_stale_marker(self, tmp_path):
        (tmp_path / "FAILED").write_text("old")
        assert run("profile", "--d-hidden", 8, "--n", 4, 8, "--runs", 3, "--out", tmp_path) == 0
        assert not (tmp_path / "FAILED").exists()

    def test_corrupt_checkpoint(self, pipeline, tmp_path):
        bad = tmp_path / "bad.hpc"
        bad.write_bytes((pipeline / "train/checkpoint.hpc").read_bytes()[:-3])
        assert run("predict", "--checkpoint", bad, "--dataset", pipeline / "data/dataset",
                   "--out", tmp_path / "o") == 1
        assert "bad.hpc" in (tmp_path / "o/FAILED").read_text()

    def test_runs_minimum_enforced(self, tmp_path):
        assert run("profile", "--n", 4, "--runs", 1, "--out", tmp_path) == 1
