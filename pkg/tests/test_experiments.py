import itertools
import json
import math
import os

import numpy as np
import pytest
from scipy import stats as sst

from featloss_sr.data import PhantomSpec, generate_phantom, make_pairs, normalize
from featloss_sr.data import nifti
from featloss_sr.errors import ConfigError, ShapeError
from featloss_sr.experiments import plans, stats
from featloss_sr.experiments.cli import main
from featloss_sr.experiments.report import aggregate, csv_text, read_metrics_csv, METRIC_COLUMNS
from featloss_sr.experiments.runner import BicubicModel, NetworkModel, cmd_eval, cmd_qc
from featloss_sr.experiments.spectrum import artifact_spectrum, band_fraction
from featloss_sr.model import UNetConfig, build_unet
from featloss_sr.qc import DwiVolumeSet, GradientTable, parse_gradient_table


class TestSpectrum:
    def test_sinusoid(self):
        x = np.arange(64)
        img = np.sin(2 * np.pi * x / 4)[None, :] * np.ones((64, 1))
        assert artifact_spectrum(img, [4])[4] > 0.9
        assert artifact_spectrum(img.T, [4])[4] > 0.9

    def test_white_noise_fraction(self):
        f = band_fraction((64, 64), 8)
        ratios = [artifact_spectrum(np.random.default_rng(s).standard_normal((64, 64)), [8])[8] for s in range(20)]
        assert all(0.5 * f <= r <= 1.5 * f for r in ratios)
        assert abs(np.mean(ratios) - f) < 0.1 * f

    def test_invariances(self, rng):
        img = rng.random((32, 32))
        a = artifact_spectrum(img, [2, 4, 8])
        b = artifact_spectrum(3.7 * img + 11.0, [2, 4, 8])
        for s in a:
            assert a[s] == pytest.approx(b[s], rel=1e-10)

    def test_band_geometry(self):
        f = band_fraction((64, 64), 8, halfwidth=0)
        assert f == pytest.approx(63 / 4096)
        assert band_fraction((64, 64), 8, halfwidth=1) == pytest.approx(63 * 9 / 4096)

    def test_errors(self):
        with pytest.raises(ShapeError):
            artifact_spectrum(np.zeros((10, 10)), [8])
        with pytest.raises(ShapeError):
            artifact_spectrum(np.zeros((10,)), [2])
        with pytest.raises(ShapeError):
            artifact_spectrum(np.zeros((10, 10)), [1])
        assert artifact_spectrum(np.ones((16, 16)), [2])[2] == 0.0


def brute_wilcoxon_p(d):
    n = len(d)
    ranks = sst.rankdata(np.abs(d))
    w = ranks[np.asarray(d) > 0].sum()
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=n)]
    lo = sum(s <= w + 1e-9 for s in sums)
    hi = sum(s >= w - 1e-9 for s in sums)
    return min(1.0, 2 * min(lo, hi) / 2 ** n)


class TestStats:
    def test_identical(self):
        a = np.arange(8.0)
        res = {r.test: r for r in stats.stat_tests(a, a, m=3)}
        assert res["paired-t"].statistic == 0 and res["paired-t"].p_raw == 1.0
        assert res["wilcoxon-signed-rank"].degenerate

    def test_all_positive_six(self):
        _, p, _ = stats.wilcoxon(np.arange(1, 7) + 10.0, np.zeros(6))
        assert p == 2 / 64

    def test_exact_vs_enumeration(self, rng):
        for _ in range(15):
            n = int(rng.integers(5, 11))
            d = rng.standard_normal(n)
            _, p, _ = stats.wilcoxon(d, np.zeros(n))
            assert p == pytest.approx(brute_wilcoxon_p(d), abs=1e-15)

    def test_counts(self):
        c = stats.signed_rank_counts(6)
        assert sum(c) == 64 and c[0] == 1 and c[-1] == 1 and c == c[::-1]

    def test_normal_branch(self, rng):
        a, b = rng.standard_normal(40), rng.standard_normal(40)
        _, p, _ = stats.wilcoxon(a, b)
        ref = sst.wilcoxon(a, b, correction=True, method="approx").pvalue
        assert p == pytest.approx(ref, rel=1e-9)

    def test_paired_t_matches_scipy(self, rng):
        a, b = rng.standard_normal(12), rng.standard_normal(12)
        t, p = stats.paired_t(a, b)
        ref = sst.ttest_rel(a, b)
        assert t == pytest.approx(ref.statistic) and p == pytest.approx(ref.pvalue)

    def test_bonferroni(self, rng):
        assert stats.bonferroni(0.03, 5) == pytest.approx(0.15)
        assert stats.bonferroni(0.4, 5) == 1.0
        for _ in range(20):
            p = float(rng.random())
            vals = [stats.bonferroni(p, m) for m in range(1, 30)]
            assert all(v <= 1 for v in vals) and vals == sorted(vals)
        with pytest.raises(ConfigError):
            stats.bonferroni(0.1, 0)

    def test_preconditions(self):
        with pytest.raises(ConfigError):
            stats.stat_tests([1, 2, 3], [1, 2, 3])
        with pytest.raises(ConfigError):
            stats.stat_tests(np.ones(6), np.ones(7))


class TestPlans:
    def test_presets(self):
        assert plans.ExperimentPlan(kind="ablation").tap_sets == ((1, 2, 3, 4, 5), (1, 2, 3, 4), (1, 2, 3), (1, 2), (1,))
        assert plans.ExperimentPlan(kind="isolation").tap_sets == ((1,), (2,), (3,), (4,), (5,))
        assert plans.ExperimentPlan(kind="baseline").tap_sets == ((),)
        p = plans.ExperimentPlan(kind="resolution")
        assert p.tap_sets == ((1,), ()) and (p.finetune.frozen_epochs, p.finetune.unfrozen_epochs) == (5, 20)

    def test_hash(self):
        a, b = plans.ExperimentPlan(kind="ablation"), plans.ExperimentPlan(kind="ablation")
        assert plans.config_hash(a) == plans.config_hash(b)
        assert plans.config_hash(a) != plans.config_hash(a.with_seed(1))
        back = plans.ExperimentPlan.from_json(json.dumps(a.to_dict()))
        assert plans.config_hash(back) == plans.config_hash(a)

    def test_errors(self):
        with pytest.raises(ConfigError):
            plans.ExperimentPlan(kind="nope")
        with pytest.raises(ConfigError):
            plans.ExperimentPlan.from_dict({"bogus": 1})
        with pytest.raises(ConfigError):
            plans.ExperimentPlan(tap_sets=[[7]])


def small_pairs(factor=2):
    spec = PhantomSpec(shape=(16, 16, 2), n_b0=1, per_shell=(3, 3))
    return list(make_pairs(normalize(generate_phantom(spec, 0).dwi), factor, case="c"))


class TestEvalAndQc:
    def test_eval_self_consistency(self):
        pairs = small_pairs()
        net = NetworkModel(build_unet(UNetConfig(levels=2, base_channels=2)))
        ev = cmd_eval({"net": (net, "{}")}, pairs, 2)
        assert {r["model"] for r in ev["rows"]} == {"net", "bicubic"}
        assert {a["b_value"] for a in ev["aggregates"]} == {0.0, 1000.0, 2000.0}
        for a in ev["aggregates"]:
            rows = [r for r in ev["rows"] if r["model"] == a["model"] and r["b_value"] == a["b_value"]]
            for s in ("mae", "mse", "psnr", "ssim"):
                assert abs(a[s] - sum(r[s] for r in rows) / len(rows)) < 1e-10

    def test_eval_factor_mismatch(self):
        net = NetworkModel(build_unet(UNetConfig(levels=2, base_channels=2, scale=3)))
        with pytest.raises(ConfigError):
            cmd_eval({"net": (net, "{}")}, small_pairs(), 2)

    def test_csv_roundtrip(self, tmp_path):
        ev = cmd_eval({}, small_pairs(), 2)
        (tmp_path / "m.csv").write_text(csv_text(ev["rows"], METRIC_COLUMNS))
        back = read_metrics_csv(tmp_path / "m.csv")
        assert [r["psnr"] for r in back] == [r["psnr"] for r in ev["rows"]]
        assert aggregate(back)[0]["psnr"] == ev["aggregates"][0]["psnr"]

    def test_qc_duplicate_and_flags(self):
        rng = np.random.default_rng(0)
        base = rng.random((6, 6, 2, 3))
        vols = np.concatenate([base[..., :1] + 1, base[..., 1:], base[..., 1:]], axis=-1)
        t = GradientTable([0, 1000, 1000, 1000, 1000], [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [0, 1, 0]])
        d = DwiVolumeSet(vols, t, np.ones((6, 6, 2), bool))
        out = cmd_qc({"gt": d, "sr": d.replace(volumes=vols * 0.5)}, antipodal=False)
        assert out["antipodal"] is False
        assert set(out["datasets"]) == {"gt", "sr"}
        assert out["datasets"]["gt"]["neighbor_correlation"] == pytest.approx(1.0)


class TestCli:
    def test_phantom_degrade_eval_pipeline(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(PhantomSpec(shape=(16, 16, 2), n_b0=1, per_shell=(3, 3)).to_json())
        out = tmp_path / "ph"
        assert main(["phantom", "--config", str(spec), "--out", str(out), "--cases", "2"]) == 0
        bvals = (out / "case00.bval").read_text()
        bvecs = (out / "case00.bvec").read_text()
        table = parse_gradient_table(bvals, bvecs)
        assert table.bvals.tolist() == [0, 1000, 1000, 1000, 2000, 2000, 2000]
        assert main(["degrade", "--input", str(out / "case00_dwi.nii"), "--output", str(tmp_path / "lr.nii"),
                     "--factor", "2"]) == 0
        assert nifti.load(tmp_path / "lr.nii").data.shape == (8, 8, 2, 7)
        assert main(["qc", "--dwi", str(out / "case00_dwi.nii"), "--bvals", str(out / "case00.bval"),
                     "--bvecs", str(out / "case00.bvec"), "--mask", str(out / "case00_mask.nii"),
                     "--compare", str(out / "case01_dwi.nii"), "--out", str(tmp_path / "qc")]) == 0
        q = json.loads((tmp_path / "qc" / "qc.json").read_text())
        assert q["antipodal"] is True and set(q["datasets"]) == {"dataset", "compare"}
        assert main(["spectrum", "--input", str(tmp_path / "lr.nii"), "--strides", "2,4",
                     "--out", str(tmp_path / "sp")]) == 0
        assert (tmp_path / "sp" / "spectrum.csv").read_text().startswith("source,slice,volume,stride,ratio")

    def test_run_eval_stats(self, tmp_path):
        cfg = {"kind": "baseline",
               "data": {"phantom": {"shape": [16, 16, 2], "n_b0": 1, "per_shell": [3, 3]}, "n_cases": 3,
                        "split_sizes": [1, 1, 1]},
               "model": {"levels": 2, "base_channels": 2},
               "schedule": {"frozen_epochs": 1, "unfrozen_epochs": 1, "batch_size": 8}}
        (tmp_path / "plan.json").write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert main(["run", "--config", str(tmp_path / "plan.json"), "--out", str(out)]) == 0
        files = set(os.listdir(out))
        assert {"report.json", "metrics.csv", "qc.json", "spectrum.csv", "models"} <= files
        header = (out / "metrics.csv").read_text().splitlines()[0].split(",")
        assert header[:8] == ["model", "tap_set", "b_value", "slice", "mae", "mse", "psnr", "ssim"]
        assert main(["eval", "--config", str(tmp_path / "plan.json"), "--checkpoint",
                     str(out / "models" / "baseline_x2"), "--out", str(tmp_path / "ev")]) == 0
        assert main(["stats", "--csv", str(out / "metrics.csv"), "--a", "baseline_x2", "--b", "bicubic",
                     "--m", "2", "--out", str(tmp_path / "st")]) == 0
        st = json.loads((tmp_path / "st" / "stats.json").read_text())
        assert {t["test"] for t in st["tests"]} == {"paired-t", "wilcoxon-signed-rank"}

    def test_exit_codes(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
        (tmp_path / "k.json").write_text(json.dumps({"kind": "weird"}))
        assert main(["run", "--config", str(tmp_path / "k.json"), "--out", str(tmp_path)]) == 2
        (tmp_path / "x.nii").write_bytes(b"\0" * 10)
        assert main(["degrade", "--input", str(tmp_path / "x.nii"), "--output", str(tmp_path / "y.nii")]) == 3
