import json
from pathlib import Path

import numpy as np
import pytest

from shapefit import archive
from shapefit.cli import main
from shapefit.data import ColumnSchema, Dataset, load_csv, load_schema_json
from shapefit.distributions import DistributionSpec
from shapefit.errors import ArchiveError
from shapefit.model import TermSpec, build_model, center_terms
from shapefit.plots import read_grid_csv, render_grid


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    """A small simulated dataset written through the CLI."""
    d = tmp_path_factory.mktemp("sim")
    code = run(["simulate", "--n", 400, "--phi", 1.0, "--seed", 3,
                "--out", d / "data.csv"])
    assert code == 0
    return d


def small_trained_model(tmp_path):
    rng = np.random.default_rng(0)
    schema = [
        ColumnSchema("a", "continuous", "feature"),
        ColumnSchema("b", "continuous", "feature"),
        ColumnSchema("y", "continuous", "response"),
    ]
    x = rng.uniform(-1, 1, (60, 2))
    y = rng.gamma(2.0, np.exp(0.4 + 0.5 * x[:, 0]) / 2.0)
    ds = Dataset(schema, x, y)
    specs = [
        TermSpec(("a",), hidden_layers=1, first_hidden_width=4),
        TermSpec(("b",), backend="lattice", monotonic=(1,), lattice_sizes=(4,), calibrator_knots=3),
        TermSpec(("a", "b"), hidden_layers=1, first_hidden_width=3),
    ]
    model = build_model(ds, specs, DistributionSpec("gamma", 1.0), seed=5)
    center_terms(model, ds)
    return model, ds


class TestArchive:
    def test_round_trip_preserves_predictions_bitwise(self, tmp_path):
        model, ds = small_trained_model(tmp_path)
        path = tmp_path / "model.json"
        archive.save_model(model, path)
        loaded = archive.load_model(path)
        a, _, ca = model.predict(ds.x)
        b, _, cb = loaded.predict(ds.x)
        assert a.tobytes() == b.tobytes()
        assert ca.tobytes() == cb.tobytes()

    def test_save_load_save_byte_identical(self, tmp_path):
        model, _ = small_trained_model(tmp_path)
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        archive.save_model(model, p1)
        archive.save_model(archive.load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_higher_version_rejected(self, tmp_path):
        model, _ = small_trained_model(tmp_path)
        path = tmp_path / "m.json"
        archive.save_model(model, path)
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ArchiveError):
            archive.load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArchiveError):
            archive.load_model(tmp_path / "none.json")

    def test_constraints_rebuilt_on_load(self, tmp_path):
        model, _ = small_trained_model(tmp_path)
        path = tmp_path / "m.json"
        archive.save_model(model, path)
        loaded = archive.load_model(path)
        assert len(loaded.term("b").constraints) == 3


class TestSimulateCommand:
    def test_writes_three_files(self, sim_dir):
        assert (sim_dir / "data.csv").exists()
        assert (sim_dir / "data.csv.truth.csv").exists()
        assert (sim_dir / "data.csv.schema.json").exists()

    def test_deterministic_bytes(self, tmp_path):
        for sub in ("one", "two"):
            (tmp_path / sub).mkdir()
            assert run(["simulate", "--n", 200, "--phi", 1.0, "--seed", 7,
                        "--out", tmp_path / sub / "d.csv"]) == 0
        assert (tmp_path / "one" / "d.csv").read_bytes() == (tmp_path / "two" / "d.csv").read_bytes()

    def test_round_trips_through_loader(self, sim_dir):
        schema = load_schema_json(sim_dir / "data.csv.schema.json")
        ds = load_csv(sim_dir / "data.csv", schema)
        assert ds.n == 400 and ds.p == 10

    def test_rerun_overwrites_atomically(self, tmp_path):
        out = tmp_path / "d.csv"
        for _ in range(2):
            assert run(["simulate", "--n", 50, "--seed", 1, "--out", out]) == 0
        # no temp droppings left behind by the atomic writes
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []
        assert out.exists()


class TestPreprocessCommand:
    def test_standardize_and_report(self, sim_dir, tmp_path):
        out = tmp_path / "prep.csv"
        report = tmp_path / "report.json"
        code = run(["preprocess", "--data", sim_dir / "data.csv",
                    "--schema", sim_dir / "data.csv.schema.json",
                    "--iqr-filter", "--out", out, "--report", report])
        assert code == 0
        doc = json.loads(report.read_text())
        assert doc["standardize"] is True
        schema = load_schema_json(str(out) + ".schema.json")
        ds = load_csv(out, schema)
        assert abs(float(np.mean(ds.x[:, 0]))) < 1e-9

    def test_apply_report(self, sim_dir, tmp_path):
        report = tmp_path / "rep.json"
        out1 = tmp_path / "train.csv"
        assert run(["preprocess", "--data", sim_dir / "data.csv",
                    "--schema", sim_dir / "data.csv.schema.json",
                    "--out", out1, "--report", report]) == 0
        out2 = tmp_path / "test.csv"
        assert run(["preprocess", "--data", sim_dir / "data.csv",
                    "--schema", sim_dir / "data.csv.schema.json",
                    "--apply-report", report, "--out", out2]) == 0
        assert out2.exists()


@pytest.fixture(scope="module")
def trained(sim_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    model_path = d / "model.json"
    code = run([
        "train", "--data", sim_dir / "data.csv",
        "--schema", sim_dir / "data.csv.schema.json",
        "--mains", "x1,x2,x3,x4", "--pairs", "x3:x4", "--monotone", "x3:dec",
        "--main-layers", 1, "--main-width", 6, "--pair-layers", 1, "--pair-width", 6,
        "--lattice-vertices", 5, "--pair-lattice-vertices", 4, "--calibrator-knots", 4,
        "--epochs", 8, "--batch", 120, "--patience", 4, "--lr", 0.05,
        "--seed", 1, "--out", model_path,
    ])
    assert code == 0
    return sim_dir, d, model_path


class TestTrainEvaluatePredict:
    def test_train_without_x4_main_fails_heredity(self, sim_dir, tmp_path):
        code = run([
            "train", "--data", sim_dir / "data.csv",
            "--schema", sim_dir / "data.csv.schema.json",
            "--mains", "x1,x3", "--pairs", "x3:x4",
            "--epochs", 2, "--out", tmp_path / "m.json",
        ])
        assert code == 3

    def test_artifacts_written(self, trained):
        _, d, model_path = trained
        assert model_path.exists()
        history = Path(str(model_path) + ".history.csv")
        assert history.exists()
        assert history.read_text().splitlines()[0] == \
            "epoch,train_objective,train_nll,val_nll,smooth_pen,mc_pen"
        doc = json.loads(model_path.read_text())
        assert doc["train_config"]["epochs"] == 8
        assert "history_sha256" in doc["history_digest"]

    def test_term_set_matches_flags(self, trained):
        sim_dir, _, model_path = trained
        model = archive.load_model(model_path)
        assert model.term_labels() == ["x1", "x2", "x3", "x4", "x3:x4"]

    def test_evaluate_exit_zero_and_metrics(self, trained, tmp_path):
        sim_dir, _, model_path = trained
        out = tmp_path / "metrics.csv"
        code = run(["evaluate", "--model", model_path,
                    "--data", sim_dir / "data.csv",
                    "--schema", sim_dir / "data.csv.schema.json",
                    "--refit-dispersion-on", sim_dir / "data.csv",
                    "--out", out])
        assert code == 0
        header, row = out.read_text().splitlines()
        assert header == "nll,rmse,mae,n_test,family,dispersion"
        values = row.split(",")
        assert np.isfinite(float(values[0])) and np.isfinite(float(values[1]))

    def test_predict_round_trip_bit_exact(self, trained, tmp_path):
        sim_dir, _, model_path = trained
        model = archive.load_model(model_path)
        schema = load_schema_json(sim_dir / "data.csv.schema.json")
        ds = load_csv(sim_dir / "data.csv", schema)
        before = model.predict(ds.x[:100])[0]

        copy_path = tmp_path / "copy.json"
        archive.save_model(model, copy_path)
        again = archive.load_model(copy_path)
        after = again.predict(ds.x[:100])[0]
        assert before.tobytes() == after.tobytes()

        out = tmp_path / "pred.csv"
        code = run(["predict", "--model", model_path,
                    "--data", sim_dir / "data.csv",
                    "--schema", sim_dir / "data.csv.schema.json", "--out", out])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "mu,eta,x1,x2,x3,x4,x3:x4"
        assert len(lines) == 401
        assert float(lines[1].split(",")[0]) == before[0]

    def test_export_shapes_and_plot(self, trained, tmp_path):
        _, _, model_path = trained
        shapes = tmp_path / "shapes"
        code = run(["export-shapes", "--model", model_path, "--out-dir", shapes,
                    "--resolution", 50])
        assert code == 0
        files = sorted(shapes.glob("*.csv"))
        assert {f.name for f in files} == {
            "shape_x1.csv", "shape_x2.csv", "shape_x3.csv", "shape_x4.csv",
            "shape_x3_x_x4.csv",
        }
        figures = tmp_path / "figs"
        code = run(["plot", "--grids", shapes, "--out-dir", figures])
        assert code == 0
        made = sorted(figures.glob("*.svg"))
        assert len(made) == 5
        assert all(f.stat().st_size > 500 for f in made)


class TestSelectCommands:
    def test_select_main_then_pairs(self, tmp_path):
        data = tmp_path / "d.csv"
        assert run(["simulate", "--n", 500, "--phi", 1.0, "--seed", 9, "--out", data]) == 0
        stage1 = tmp_path / "stage1.json"
        code = run([
            "select-main", "--data", data, "--schema", str(data) + ".schema.json",
            "--ensemble", 2, "--k1", 4, "--features", "x1,x2,x3,x9",
            "--epochs", 6, "--batch", 150, "--patience", 3, "--lr", 0.05,
            "--out", stage1, "--scores-csv", tmp_path / "scores.csv",
        ])
        assert code == 0
        doc = json.loads(stage1.read_text())
        assert len(doc["selected_mains"]) == 4
        assert (tmp_path / "scores.csv").read_text().splitlines()[0] == "feature,score"

        stage2 = tmp_path / "stage2.json"
        code = run([
            "select-pairs", "--data", data, "--schema", str(data) + ".schema.json",
            "--stage1", stage1, "--k2", 1,
            "--epochs", 4, "--batch", 150, "--patience", 2, "--lr", 0.05,
            "--pair-layers", 1, "--pair-width", 6,
            "--out", stage2,
        ])
        assert code == 0
        doc2 = json.loads(stage2.read_text())
        assert len(doc2["pair_deltas"]) == 6  # 4 choose 2
        assert len(doc2["selected_pairs"]) == 1


class TestCliErrors:
    def test_unknown_command_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_data_file(self, tmp_path):
        schema = tmp_path / "s.json"
        schema.write_text(json.dumps({"columns": [
            {"name": "x", "kind": "continuous", "role": "feature"},
            {"name": "y", "kind": "continuous", "role": "response"},
        ]}))
        code = run(["preprocess", "--data", tmp_path / "missing.csv", "--schema", schema])
        assert code == 3

    def test_bad_monotone_flag(self, sim_dir, tmp_path):
        code = run(["train", "--data", sim_dir / "data.csv",
                    "--schema", sim_dir / "data.csv.schema.json",
                    "--monotone", "x3:sideways", "--out", tmp_path / "m.json"])
        assert code == 2

    def test_config_file_defaults_and_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n": 123, "seed": 5}))
        out = tmp_path / "d.csv"
        assert run(["--config", cfg, "simulate", "--out", out]) == 0
        schema = load_schema_json(str(out) + ".schema.json")
        assert load_csv(out, schema).n == 123
        out2 = tmp_path / "d2.csv"
        assert run(["--config", cfg, "simulate", "--n", 77, "--out", out2]) == 0
        assert load_csv(out2, schema).n == 77

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"does_not_exist": 1}))
        assert run(["--config", cfg, "simulate", "--out", tmp_path / "x.csv"]) == 2


class TestPlots:
    def test_read_grid_csv(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text("input1,value\n0.0,1.0\n1.0,2.0\n")
        inputs, values = read_grid_csv(p)
        assert values == [1.0, 2.0]

    def test_render_pair_heatmap(self, tmp_path):
        p = tmp_path / "pair.csv"
        lines = ["input1,input2,value"]
        for i in range(3):
            for j in range(3):
                lines.append(f"{i},{j},{i * j}")
        p.write_text("\n".join(lines) + "\n")
        out = render_grid(p, tmp_path / "pair.svg")
        assert out.exists() and out.stat().st_size > 500

    def test_categorical_bar_chart(self, tmp_path):
        p = tmp_path / "cat.csv"
        p.write_text("input1,value\nred,0.5\ngreen,-0.25\n")
        out = render_grid(p, tmp_path / "cat.svg")
        assert out.exists()
