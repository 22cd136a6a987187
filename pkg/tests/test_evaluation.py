import csv
import io

import numpy as np
import pytest

from histoprism import evaluation as E
from histoprism import metrics as M
from histoprism import reports as R
from histoprism.artifacts import Prediction
from histoprism.curation import GeneSet, PathwayCollection, Source
from histoprism.synth import SynthSpec, generate


@pytest.fixture(scope="module")
def ds():
    return generate(SynthSpec(n_cancers=3, slides_per_cancer=6, patches_per_slide=(10, 14), d_img=6, d_gene=30,
                              seed=3))


def truth_predictions(ds, split=0, noise=0.0):
    rng = np.random.default_rng(0)
    return [Prediction(s.slide_id, s.cancer_label, split, s.expression + noise * rng.normal(size=s.expression.shape))
            for s in ds.part(split, "test")]


def pathways(n_genes=30):
    return PathwayCollection([GeneSet("HALLMARK_A", Source.HALLMARK, tuple(f"GENE_{i:04d}" for i in range(0, 10))),
                              GeneSet("GOBP_B", Source.GO_BP, tuple(f"GENE_{i:04d}" for i in range(12, n_genes)))])


class TestHvgReference:
    def test_reference_never_contains_test_slides(self, ds):
        ref = E.hvg_reference(ds)
        ever_test = {sid for a in ds.splits for sid, p in a.items() if p == "test"}
        ref_ids = {id(x) for v in ref.values() for x in v}
        for s in ds.slides:
            if s.slide_id in ever_test:
                assert id(s.expression) not in ref_ids
        assert set(ref) == set(ds.cancer_names)

    def test_fallback_when_every_slide_is_tested(self, caplog):
        small = generate(SynthSpec(n_cancers=2, slides_per_cancer=2, patches_per_slide=(3, 4), d_img=4, d_gene=5))
        ref = E.hvg_reference(small)
        for c in small.cancer_names:
            want = [s.expression for s in small.part(0, "train") if s.cancer_label == c]
            assert len(ref[c]) == len(want)
            for a, b in zip(ref[c], want):
                assert a is b


class TestSlideCorrelations:
    def test_perfect_predictions(self, ds):
        corr = E.slide_correlations(truth_predictions(ds), ds)
        for v in corr.pcc.values():
            defined = v[~np.isnan(v)]
            np.testing.assert_allclose(defined, 1.0, rtol=0, atol=1e-12)
        assert [m.key for m in corr.meta] == sorted(m.key for m in corr.meta)

    def test_unknown_slide(self, ds):
        with pytest.raises(KeyError):
            E.slide_correlations([Prediction("nope", "X", 0, np.ones((2, 30)))], ds)

    def test_shape_mismatch(self, ds):
        s = ds.slides[0]
        with pytest.raises(ValueError, match="mismatch"):
            E.slide_correlations([Prediction(s.slide_id, s.cancer_label, 0, np.ones((1, 30)))], ds)


class TestEvalGpc:
    def test_levels_per_split_and_scores(self, ds):
        corr = E.slide_correlations(truth_predictions(ds, noise=0.3), ds)
        report, levels = E.eval_gpc(corr, ds, pathways(), n_levels=4)
        assert len(levels) == len(ds.splits)
        for k, lv in enumerate(levels):
            v = M.population_variance([s.expression for s in ds.part(k, "test")])
            np.testing.assert_array_equal(lv.thresholds, M.variance_levels(v, 4).thresholds)
        for r in report.rows:
            assert 1 <= r.variance_level <= 4 and 0 < r.score < 1

    def test_eval_hvg_truth_is_one(self, ds):
        corr = E.slide_correlations(truth_predictions(ds), ds)
        report, panel = E.eval_hvg(corr, ds, 5)
        assert len(panel.union) >= 5
        assert report.overall.micro == pytest.approx(1.0, abs=1e-12)


class TestReports:
    def test_pcc_csv_parses_back(self, ds):
        corr = E.slide_correlations(truth_predictions(ds, noise=0.5), ds)
        report, panel = E.eval_hvg(corr, ds, 5)
        rows = list(csv.DictReader(io.StringIO(R.pcc_table_csv(report))))
        assert [r["cancer"] for r in rows] == [*ds.cancer_names, "Average"]
        assert float(rows[-1]["micro"]) == report.overall.micro
        text = R.pcc_table_text(report, panel, "m")
        assert text.startswith("# m: PCC over the top-5 HVGs")

    def test_gpc_outputs(self, ds, tmp_path):
        corr = E.slide_correlations(truth_predictions(ds, noise=0.5), ds)
        a, levels = E.eval_gpc(corr, ds, pathways(), 4)
        b, _ = E.eval_gpc(E.slide_correlations(truth_predictions(ds, noise=2.0), ds), ds, pathways(), 4)
        text = R.gpc_text(a, b, ("x", "y"))
        assert "[GO]" in text and "[Hallmark]" in text and "win rate of x over y" in text
        assert "reconstruction" in R.thresholds_text(levels)
        assert len(R.thresholds_text(levels).splitlines()) == 3 + 4  # note, header, rule
        rows = list(csv.DictReader(io.StringIO(R.gpc_csv(a))))
        assert [r["pathway"] for r in rows] == ["GOBP_B", "HALLMARK_A"]
        R.plot_gpc_by_level({"x": a, "y": b}, tmp_path / "1.svg")
        R.plot_gpc_by_level({"x": a, "y": b}, tmp_path / "2.svg")
        assert (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()

    def test_level_means(self):
        rows = [M.GpcRow("a", Source.GO_BP, 1, 1, 0.2, 1, 0, 1.0, 2.0),
                M.GpcRow("b", Source.GO_BP, 1, 1, 0.4, 1, 0, 1.0, 2.0),
                M.GpcRow("c", Source.GO_BP, 1, 1, None, 0, 1, 1.0, 3.0)]
        assert R.level_means(M.GpcReport(rows, 1)) == {2.0: pytest.approx(0.3)}

    def test_cluster_outputs(self, ds):
        corr = E.slide_correlations(truth_predictions(ds), ds)
        res = E.eval_cluster(corr, 0)
        assert "k = 3, seed = 0" in R.cluster_text(res, 0)
        lines = R.cluster_csv(res, [m.key for m in corr.meta]).splitlines()
        assert lines[0] == "slide_key,cancer,cluster" and len(lines) == 1 + len(corr.meta)
