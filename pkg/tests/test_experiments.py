import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest

from goldilocks.autodiff import NetworkArchitecture, QuadraticField
from goldilocks.cli import build_parser, main, resolve_config
from goldilocks.errors import ConfigurationError, FormatError
from goldilocks.geometry import SubspaceChart
from goldilocks.experiments import plots
from goldilocks.experiments.config import EXPERIMENTS, ExperimentConfig, apply_overrides, default_config
from goldilocks.experiments.records import (CSV_HEADER, ResultStore, TrialRecord, read_csv, trial_key,
                                            write_csv)
from goldilocks.experiments.runner import (cell_mean, crossings, derive_seed, fit_loss_scaling, run,
                                           sweep_curvature, variance_decomposition)

DATA = Path(__file__).parent / "data"
FIXTURE = DATA / "fixture-curvature-sweep.csv"


def tiny_config(tmp_path, **changes) -> ExperimentConfig:
    cfg = default_config("curvature-sweep")
    cfg.architecture.layer_sizes = [12, 6, 10]
    cfg.dataset.source = "synthetic"
    cfg.dataset.n_per_class = 10
    cfg.rho_grid = [0.5, 1.0, 5.0]
    cfg.d_grid = [3, 5]
    cfg.seeds = 2
    cfg.chart.overlap_bound = None
    cfg.hessian.eval_batch_size = 64
    cfg.out_dir = str(tmp_path)
    for k, v in changes.items():
        setattr(cfg, k, v)
    return cfg.validate()


class TestConfig:
    @pytest.mark.parametrize("name", EXPERIMENTS)
    def test_roundtrip_identity(self, name):
        cfg = default_config(name)
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.hash() == cfg.hash()

    def test_unknown_key(self):
        data = default_config("wick").to_dict()
        data["optimizer"]["momentum"] = 0.9
        with pytest.raises(ConfigurationError, match="momentum"):
            ExperimentConfig.from_dict(data)

    def test_overrides(self):
        data = apply_overrides(default_config("contours").to_dict(),
                               ["seeds=4", "optimizer.lr=0.01", "rho_grid=[1, 2]", "chart.scheme=he"])
        cfg = ExperimentConfig.from_dict(data)
        assert (cfg.seeds, cfg.optimizer.lr, cfg.rho_grid, cfg.chart.scheme) == (4, 0.01, [1, 2], "he")

    def test_bad_override(self):
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["seeds"])

    @pytest.mark.parametrize("changes", [{"rho_grid": [0.0]}, {"d_grid": [-1]}, {"seeds": 0},
                                         {"kinds": ["torus"]}, {"experiment": "nope"}])
    def test_validation(self, changes):
        data = default_config("curvature-sweep").to_dict()
        data.update(changes)
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict(data)

    def test_seed_derivation(self):
        assert derive_seed(0, "anchor", 1) == derive_seed(0, "anchor", 1)
        assert len({derive_seed(0, "anchor", i) for i in range(100)}) == 100
        assert derive_seed(0, "anchor", 1) != derive_seed(1, "anchor", 1)


class TestRecords:
    def test_header_exact(self, tmp_path):
        write_csv(tmp_path / "r.csv", [])
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == (
            "experiment,rho,d,seed,kind,trace,fro_norm,frac_positive,ratio,init_loss,init_acc,"
            "final_loss,final_acc,steps,diverged")
        assert CSV_HEADER == (tmp_path / "r.csv").read_text().splitlines()[0]

    def test_null_requires_reason(self):
        rec = TrialRecord("wick", 1.0, 2, 0, "hyperplane")
        with pytest.raises(FormatError):
            rec.csv_row()

    def test_roundtrip_identity(self, tmp_path):
        src = FIXTURE.read_text()
        records = read_csv(FIXTURE)
        assert records[5].reasons["trace"] == "overflow" and records[5].trace is None
        write_csv(tmp_path / "back.csv", records)
        assert (tmp_path / "back.csv").read_text() == src

    def test_float_repr_exact(self, tmp_path):
        rec = TrialRecord("wick", 0.1 + 0.2, 1, 0, "sphere", 1 / 3, np.pi, 0.5, 2 ** -40, 1e300, 0.0,
                          steps=3, diverged=True)
        rec.set_null("not_trained", "final_loss", "final_acc")
        write_csv(tmp_path / "f.csv", [rec])
        back = read_csv(tmp_path / "f.csv")[0]
        assert (back.rho, back.trace, back.fro_norm, back.ratio) == (rec.rho, rec.trace, rec.fro_norm, rec.ratio)
        assert back.diverged is True and back.steps == 3

    def test_missing_column(self, tmp_path):
        lines = FIXTURE.read_text().splitlines()
        rows = [",".join(line.split(",")[:-1]) for line in lines]
        (tmp_path / "short.csv").write_text("\n".join(rows) + "\n")
        with pytest.raises(FormatError, match="diverged"):
            read_csv(tmp_path / "short.csv")

    def test_store_drops_row_without_sidecar(self, tmp_path):
        store = ResultStore(tmp_path, "s")
        for seed in range(3):
            rec = TrialRecord("wick", 1.0, 2, seed, "hyperplane", *([1.0] * 8), index=seed)
            store.append(rec)
        lines = (tmp_path / "s.jsonl").read_text().splitlines()
        (tmp_path / "s.jsonl").write_text("\n".join(lines[:2]) + "\n")
        again = ResultStore(tmp_path, "s")
        assert again.done(trial_key("wick", "hyperplane", 1.0, 2, 1))
        assert not again.done(trial_key("wick", "hyperplane", 1.0, 2, 2))
        assert len(read_csv(tmp_path / "s.csv")) == 2


class TestSweeps:
    def test_deterministic_per_seed(self, tmp_path):
        a = sweep_curvature(tiny_config(tmp_path / "a"))
        b = sweep_curvature(tiny_config(tmp_path / "b"))
        assert (tmp_path / "a" / "curvature-sweep.csv").read_bytes() == \
               (tmp_path / "b" / "curvature-sweep.csv").read_bytes()
        assert a["cells"] == b["cells"]
        c = sweep_curvature(tiny_config(tmp_path / "c", seed=1))
        assert c["cells"] != a["cells"]

    def test_resume_skips_and_matches(self, tmp_path, monkeypatch):
        full = tmp_path / "full"
        sweep_curvature(tiny_config(full))
        expected = (full / "curvature-sweep.csv").read_bytes()

        part = tmp_path / "part"
        part.mkdir()
        lines = expected.decode().splitlines(keepends=True)
        (part / "curvature-sweep.csv").write_text("".join(lines[:6]))
        side = (full / "curvature-sweep.jsonl").read_text().splitlines(keepends=True)
        (part / "curvature-sweep.jsonl").write_text("".join(side[:5]))

        from goldilocks.experiments import runner
        calls = []
        original = runner._measure
        monkeypatch.setattr(runner, "_measure", lambda rec, *a, **k: calls.append(rec.key) or original(rec, *a, **k))
        sweep_curvature(tiny_config(part))
        assert len(calls) == 12 - 5
        assert (part / "curvature-sweep.csv").read_bytes() == expected

    def test_threads_same_output(self, tmp_path):
        sweep_curvature(tiny_config(tmp_path / "one"))
        sweep_curvature(tiny_config(tmp_path / "two", threads=3))
        assert (tmp_path / "one" / "curvature-sweep.csv").read_bytes() == \
               (tmp_path / "two" / "curvature-sweep.csv").read_bytes()

    def test_quadratic_hook_constant_ratio(self, tmp_path):
        # a quadratic has the same curvature at every anchor, so rescaling the anchor must not move the ratio
        cfg = tiny_config(tmp_path, rho_grid=[0.1, 1.0, 10.0, 100.0], d_grid=[1, 4], seeds=2)
        arch = cfg.architecture.build()
        A = np.diag(np.random.default_rng(0).uniform(0.1, 2.0, arch.n_params))
        s = sweep_curvature(cfg, QuadraticField(A), arch)
        for rho in cfg.rho_grid:
            assert cell_mean(s, "ratio", rho=rho, d=1, kind="hyperplane") == pytest.approx(1.0, abs=1e-9)
        records = read_csv(tmp_path / "curvature-sweep.csv")
        side = [json.loads(line) for line in (tmp_path / "curvature-sweep.jsonl").read_text().splitlines()]
        for rec, item in zip(records, side):
            assert rec.reasons["init_acc"] == "no_labels"
            chart = SubspaceChart.from_descriptor(dict(item["chart"], rho=1.0))
            J = chart.jacobian(np.zeros(chart.d))
            lam = np.linalg.eigvalsh(J.T @ A @ J)
            assert rec.ratio == pytest.approx(lam.sum() / np.linalg.norm(lam), rel=1e-6)

    def test_manifest(self, tmp_path):
        cfg = tiny_config(tmp_path, rho_grid=[1.0], d_grid=[3], seeds=1)
        run(cfg)
        manifest = json.loads((tmp_path / "curvature-sweep.manifest.json").read_text())
        assert manifest["config_hash"] == cfg.hash()
        assert manifest["trials"] == {"0": "done"}
        assert ExperimentConfig.load(tmp_path / "curvature-sweep.config.json") == cfg


class TestAnalysisHelpers:
    def test_variance_decomposition(self):
        out = variance_decomposition([1.0, 3.0, 5.0, 7.0], [0, 0, 1, 1])
        assert out["between_anchor_var"] == pytest.approx(8.0)
        assert out["within_anchor_var"] == pytest.approx(2.0)

    def test_crossings_log_interpolated(self):
        x = np.array([1.0, 10.0, 100.0])
        xs = crossings(x, np.array([0.0, 2.0, 0.0]), np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(xs, [10 ** 0.5, 10 ** 1.5])

    def test_loss_scaling_fit(self):
        rho = np.logspace(-2, 3, 21)
        loss = np.where(rho < 1, np.log(10), np.log(10) * rho ** 3)
        fit = fit_loss_scaling(rho, loss, 0.3, 1.0)
        assert fit["flat_level"] == pytest.approx(np.log(10))
        assert fit["slope"] == pytest.approx(3.0)


def _polyline_points(svg):
    pts = re.search(r'<polyline[^>]*points="([^"]+)"', svg).group(1)
    return [tuple(map(float, p.split(","))) for p in pts.split()]


class TestPlots:
    @pytest.mark.parametrize("name", ["ratio", "frac_positive"])
    def test_golden(self, tmp_path, name):
        plots.emit_plots(FIXTURE, tmp_path)
        got = (tmp_path / f"curvature-sweep_{name}.svg").read_bytes()
        assert got == (DATA / f"golden-curvature-sweep_{name}.svg").read_bytes()

    def test_no_data(self):
        svg = plots.line_plot({}, "empty")
        assert "no data" in svg and svg.startswith("<svg")

    def test_monotone_polyline(self):
        svg = plots.line_plot({"a": ([3.0, 1.0, 2.0], [9.0, 1.0, 4.0])}, "t")
        xs = [p[0] for p in _polyline_points(svg)]
        assert xs == sorted(xs)

    def test_missing_column(self, tmp_path):
        text = FIXTURE.read_text().replace(",diverged", ",broken", 1)
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(FormatError):
            plots.emit_plots(tmp_path / "bad.csv", tmp_path)


class TestCli:
    def test_dry_run(self, capsys):
        assert main(["wick", "--dry-run", "--set", "seeds=7", "--seed", "3"]) == 0
        cfg = ExperimentConfig.from_json(capsys.readouterr().out)
        assert (cfg.seeds, cfg.seed, cfg.experiment) == (7, 3, "wick")

    def test_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seeds": 2, "optimizer": {"lr": 0.5}}))
        cfg = resolve_config(build_parser().parse_args(["contours", "--config", str(path)]))
        assert (cfg.seeds, cfg.optimizer.lr, cfg.optimizer.batch_size) == (2, 0.5, 128)

    def test_wrong_experiment_config(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"experiment": "stokes"}))
        assert main(["wick", "--config", str(path)]) == 2
        assert "stokes" in capsys.readouterr().err

    def test_unknown_key_is_error(self, capsys):
        assert main(["wick", "--dry-run", "--set", "bogus=1"]) == 2

    def test_sweep_and_plot(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, rho_grid=[1.0], d_grid=[3], seeds=1)
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        assert main(["curvature-sweep", "--config", str(path)]) == 0
        assert main(["plot", str(tmp_path / "curvature-sweep.csv")]) == 0
        assert (tmp_path / "curvature-sweep_ratio.svg").exists()

    def test_small_wick(self, tmp_path, capsys):
        code = main(["wick", "--out-dir", str(tmp_path), "--set", "architecture.layer_sizes=[20,8,10]",
                     "--set", "dataset.source=\"synthetic\"", "--set", "d_grid=[4,8,16]",
                     "--set", "hessian.wick_samples=20000", "--set", "params.D=200",
                     "--set", "params.quad_D=100", "--set", "params.live_samples=2000",
                     "--set", "chart.overlap_bound=null"])
        out = capsys.readouterr().out
        assert re.search(r"^(PASS|FAIL) identity_mean", out, re.M)
        assert code in (0, 1)
        summary = json.loads((tmp_path / "wick.summary.json").read_text())
        assert {c["check"] for c in summary["checks"]} >= {"diag_mean_se", "quad_trace_r2"}
