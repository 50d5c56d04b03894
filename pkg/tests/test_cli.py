import csv
import json

import pytest

from platoonsim.cli import emit_plot_data, main, run_scenario, run_sweep


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def constant_config(tmp_path):
    return write_json(tmp_path / "scenario.json", {
        "n_vehicles": 3,
        "mode": "CACC",
        "per": 0.2,
        "seed": 7,
        "duration": 5.0,
        "leader_profile": {"kind": "constant", "v": 20.0},
        "bounds": {"a_max": 1.0, "a_min": -1.0},
    })


@pytest.fixture
def tiny_sweep(tmp_path):
    return write_json(tmp_path / "sweep.json", {
        "modes": ["CACC"],
        "lengths": [3],
        "pers": [0.2],
        "seeds": [7],
        "template": {
            "duration": 5.0,
            "leader_profile": {"kind": "constant", "v": 20.0},
            "bounds": {"a_max": 1.0, "a_min": -1.0},
        },
    })


class TestRunScenario:
    def test_writes_outputs(self, constant_config, tmp_path, capsys):
        out = tmp_path / "out"
        assert run_scenario(constant_config, str(out)) == 0
        assert (out / "trace.csv").exists()
        assert (out / "report.csv").exists()
        with open(out / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["status"] == "ok"
        assert float(rows[0]["p95_error"]) <= 1e-3  # equilibrium
        assert "p95_error" in capsys.readouterr().out

    def test_byte_identical_reruns(self, constant_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_scenario(constant_config, str(out1)) == 0
        assert run_scenario(constant_config, str(out2)) == 0
        assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
        assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()

    def test_seed_override_changes_trace(self, constant_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", constant_config, "--out", str(out1)]) == 0
        assert main(["run", "--config", constant_config, "--out", str(out2),
                     "--seed", "99"]) == 0
        assert (out1 / "trace.csv").read_bytes() != (out2 / "trace.csv").read_bytes()

    def test_invalid_config_exits_one(self, tmp_path, capsys):
        bad = write_json(tmp_path / "bad.json", {"n_vehicles": 1, "mode": "CACC"})
        assert run_scenario(bad, str(tmp_path / "out")) == 1
        assert "n_vehicles" in capsys.readouterr().err

    def test_malformed_json_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{\n  \"n_vehicles\": 3,\n")
        assert run_scenario(str(bad), str(tmp_path / "out")) == 1
        assert "line" in capsys.readouterr().err


class TestSweep:
    def test_single_cell_matches_run_scenario(self, constant_config, tiny_sweep, tmp_path):
        out_run, out_sweep = tmp_path / "run", tmp_path / "sweep"
        assert run_scenario(constant_config, str(out_run)) == 0
        assert run_sweep(tiny_sweep, str(out_sweep), workers=1) == 0
        with open(out_run / "report.csv", newline="") as fh:
            run_row = list(csv.DictReader(fh))[0]
        with open(out_sweep / "aggregate.csv", newline="") as fh:
            agg_row = list(csv.DictReader(fh))[0]
        for key in ("mode", "n_vehicles", "per", "seed", "p95_error",
                    "mean_speed_diff", "max_speed_diff"):
            assert run_row[key] == agg_row[key]

    def test_resume_reuses_cells_byte_identical(self, tiny_sweep, tmp_path, capsys):
        out = tmp_path / "out"
        assert run_sweep(tiny_sweep, str(out), workers=1) == 0
        first = (out / "aggregate.csv").read_bytes()
        capsys.readouterr()
        assert run_sweep(tiny_sweep, str(out), workers=1) == 0
        assert "1 cells cached, 0 to run" in capsys.readouterr().out
        assert (out / "aggregate.csv").read_bytes() == first

    def test_parallel_matches_serial(self, tmp_path):
        spec = write_json(tmp_path / "sweep.json", {
            "modes": ["CACC"],
            "lengths": [3],
            "pers": [0.0, 0.5],
            "seeds": [1, 2],
            "template": {
                "duration": 3.0,
                "leader_profile": {"kind": "constant", "v": 20.0},
            },
        })
        out1, out2 = tmp_path / "serial", tmp_path / "parallel"
        assert run_sweep(spec, str(out1), workers=1) == 0
        assert run_sweep(spec, str(out2), workers=2) == 0
        assert (out1 / "aggregate.csv").read_bytes() == (out2 / "aggregate.csv").read_bytes()

    def test_invalid_spec_exits_one(self, tmp_path, capsys):
        bad = write_json(tmp_path / "bad.json", {"modes": [], "template": {}})
        assert run_sweep(bad, str(tmp_path / "out")) == 1
        capsys.readouterr()


def make_aggregate(tmp_path, cells):
    from platoonsim.cli import REPORT_FIELDS, write_rows
    rows = []
    for mode, n, per, seed, sd, p95 in cells:
        row = {k: "" for k in REPORT_FIELDS}
        row.update(mode=mode, n_vehicles=n, per=repr(float(per)), seed=seed,
                   status="ok", mean_speed_diff=repr(sd), p95_error=repr(p95),
                   p95_unit="m")
        rows.append(row)
    path = tmp_path / "aggregate.csv"
    write_rows(str(path), rows)
    return str(path)


class TestPlotData:
    def test_fig5_series(self, tmp_path):
        cells = []
        for mode in ("CACC", "Platooning"):
            for n in (5, 15):
                for per in (0.0, 0.6):
                    for seed in (1, 2):
                        cells.append((mode, n, per, seed, 0.1 * n + per + seed * 0.001, 0.2))
        agg = make_aggregate(tmp_path, cells)
        assert emit_plot_data(agg, "fig5", str(tmp_path)) == 0
        with open(tmp_path / "fig5_plotdata.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        labels = {r["series"] for r in rows}
        assert labels == {"CACC PER=0.0", "CACC PER=0.6",
                          "Platooning PER=0.0", "Platooning PER=0.6"}
        # seed-averaged value
        first = [r for r in rows if r["series"] == "CACC PER=0.0" and r["x"] == "5"][0]
        assert float(first["y"]) == pytest.approx(0.5 + 0.0015)

    def test_fig7_series(self, tmp_path):
        cells = []
        for n in (5, 15):
            cells.append(("ACC", n, 0.6, 1, 1.0, 2.0))
            for mode in ("CACC", "Platooning"):
                for per in (0.0, 0.6):
                    cells.append((mode, n, per, 1, 0.3, 0.5))
        agg = make_aggregate(tmp_path, cells)
        assert emit_plot_data(agg, "fig7", str(tmp_path)) == 0
        with open(tmp_path / "fig7_plotdata.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["series"] for r in rows} == {
            "ACC", "CACC PER=0", "CACC PER=0.6",
            "Platooning PER=0", "Platooning PER=0.6"}

    def test_missing_cells_listed(self, tmp_path, capsys):
        cells = [("CACC", 5, 0.0, 1, 0.1, 0.2), ("CACC", 15, 0.6, 1, 0.1, 0.2)]
        agg = make_aggregate(tmp_path, cells)
        assert emit_plot_data(agg, "fig5", str(tmp_path)) == 1
        err = capsys.readouterr().err
        assert "missing" in err and "n=15" in err

    def test_empty_aggregate_header_only(self, tmp_path):
        agg = make_aggregate(tmp_path, [])
        assert emit_plot_data(agg, "fig6", str(tmp_path)) == 0
        content = (tmp_path / "fig6_plotdata.csv").read_text()
        assert content.strip() == "series,x,y"

    def test_unknown_figure(self, tmp_path, capsys):
        agg = make_aggregate(tmp_path, [])
        assert emit_plot_data(agg, "fig9", str(tmp_path)) == 1
        capsys.readouterr()
