import csv
import json
import math
from pathlib import Path

import pytest

from endpoint_ddp import cli
from endpoint_ddp.cli import (
    CAMPAIGN_COLUMNS,
    COMPARE_COLUMNS,
    OUTPUT_ENV,
    TRACE_COLUMNS,
    ConfigError,
    dump_config,
    load_config,
    main,
    read_config,
    resolve_output_dir,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

LQR = """\
problem:
  family: lqr
  horizon: 10
  seed: 2
solver:
  max_iters: 5
"""

DPEND_SMALL = """\
problem:
  family: dpend
  formulation: inverse
  horizon: 40
  dt: 0.05
solver:
  hessian_mode: exact-callback
  max_iters: 100
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def drop_timing(rows):
    header = rows[0]
    keep = [i for i, name in enumerate(header) if name not in cli.TIMING_COLUMNS]
    return [[row[i] for i in keep] for row in rows]


class TestConfig:
    def test_minimal(self):
        cfg = load_config("problem: {family: cartpole}\n")
        assert cfg.problem.family == "cartpole"
        assert cfg.repetitions is None and cfg.cold_magnitude is None

    @pytest.mark.parametrize(
        "text, line, field",
        [
            ("problem:\n  family: lqr\n  horizn: 5\n", 3, "problem.horizn"),
            ("problem:\n  family: lqr\nsolver:\n  max_iters: 5\n  armijo: -1\n", 5, "solver.armijo"),
            ("problem:\n  family: lqr\nrepetitions: 0\n", 3, "repetitions"),
            ("problem:\n  family: lqr\nvariants: [schur, svd]\n", 3, "variants"),
            ("problem:\n  family: lqr\ncold_start:\n  magnitude: -1\n", 4, "cold_start.magnitude"),
            ("problem:\n  family: lqr\nextra: 1\n", 3, "extra"),
            ("problem:\n  family: lqr\n  dt: -0.1\n", 3, "problem.dt"),
        ],
    )
    def test_diagnostics_name_line_and_field(self, text, line, field):
        with pytest.raises(ConfigError) as err:
            load_config(text, "cfg.yaml")
        assert f"cfg.yaml:{line}:" in str(err.value)
        assert f"'{field}'" in str(err.value)

    def test_unknown_family(self):
        with pytest.raises(ConfigError, match="problem.family"):
            load_config("problem:\n  family: quadrotor\n")

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError, match="cfg.yaml:3: malformed YAML"):
            load_config("problem:\n  family: lqr\n\thorizon: 3\nsolver: {}\n", "cfg.yaml")

    def test_missing_problem(self):
        with pytest.raises(ConfigError, match="problem"):
            load_config("solver: {max_iters: 3}\n")

    def test_round_trip(self):
        cfg = load_config(DPEND_SMALL + "repetitions: 3\ncold_start: {seed: 4, magnitude: 0.25}\nvariants: [schur, null-lu]\n")
        again = load_config(dump_config(cfg))
        assert again.problem == cfg.problem
        assert again.solver == cfg.solver
        assert (again.repetitions, again.cold_seed, again.cold_magnitude) == (3, 4, 0.25)
        assert again.variants == ("schur", "null-lu")

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.name)
    def test_shipped_configs_parse(self, path):
        cfg = read_config(path)
        assert load_config(dump_config(cfg)).problem == cfg.problem

    def test_output_dir_precedence(self, monkeypatch):
        cfg = load_config(LQR + "output_dir: from-config\n")
        monkeypatch.delenv(OUTPUT_ENV, raising=False)
        assert resolve_output_dir(cfg) == Path("from-config")
        monkeypatch.setenv(OUTPUT_ENV, "from-env")
        assert resolve_output_dir(cfg) == Path("from-env")
        assert resolve_output_dir(cfg, "from-flag") == Path("from-flag")


class TestRun:
    def test_lqr_one_iteration(self, tmp_path):
        assert main(["run", "-c", write(tmp_path, LQR), "-o", str(tmp_path / "out")]) == 0
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["status"] == "Converged"
        assert summary["iterations"] == 1
        assert summary["final_feasibility"] <= 1e-10

    def test_trace_matches_manifest(self, tmp_path):
        main(["run", "-c", write(tmp_path, LQR), "-o", str(tmp_path)])
        manifest = json.loads((tmp_path / "trace_manifest.json").read_text())
        rows = read_csv(tmp_path / "trace.csv")
        assert manifest["schema_version"] == cli.TRACE_SCHEMA_VERSION
        assert rows[0] == [c["name"] for c in manifest["columns"]] == [n for n, _ in TRACE_COLUMNS]
        assert set(manifest["timing_columns"]) <= set(rows[0])
        assert all(len(r) == len(rows[0]) for r in rows)
        for row in rows[1:]:
            float(row[rows[0].index("penalty")])

    def test_environment_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
        assert main(["run", "-c", write(tmp_path, LQR + "output_dir: ignored\n")]) == 0
        assert (tmp_path / "env" / "summary.json").exists()
        assert not Path("ignored").exists()

    def test_pendulum_trace(self, tmp_path):
        assert main(["run", "-c", write(tmp_path, DPEND_SMALL), "-o", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["status"] == "Converged"
        assert summary["final_feasibility"] <= 1e-8
        rows = read_csv(tmp_path / "trace.csv")
        col = {name: i for i, name in enumerate(rows[0])}
        recs = rows[1:]
        assert len(recs) == summary["iterations"]
        assert float(recs[0][col["normalized_cost"]]) == pytest.approx(float(recs[0][col["cost"]]) / summary["initial_cost"])
        for a, b in zip(recs, recs[1:]):
            if a[col["penalty"]] == b[col["penalty"]]:
                assert float(b[col["merit_reference"]]) <= float(a[col["merit_reference"]]) * (1 + 1e-12)

    def test_reruns_bitwise_identical(self, tmp_path):
        cfg = write(tmp_path, DPEND_SMALL.replace("max_iters: 100", "max_iters: 6") + "cold_start: {seed: 3, magnitude: 0.3}\n")
        for name in ("a", "b"):
            assert main(["run", "-c", cfg, "-o", str(tmp_path / name)]) == 0
        a, b = (read_csv(tmp_path / n / "trace.csv") for n in ("a", "b"))
        assert drop_timing(a) == drop_timing(b)

    def test_non_convergence_exits_zero(self, tmp_path):
        cfg = write(tmp_path, "problem: {family: cartpole, horizon: 30}\nsolver: {max_iters: 2}\n")
        assert main(["run", "-c", cfg, "-o", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "summary.json").read_text())["status"] == "MaxIters"


class TestExitCodes:
    def test_malformed_config(self, tmp_path, capsys):
        assert main(["run", "-c", write(tmp_path, "problem:\n  family: lqr\n  horizn: 3\n")]) == 2
        assert "cfg.yaml:3" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["run", "-c", str(tmp_path / "nope.yaml")]) == 2

    def test_bad_repetition_flag(self, tmp_path):
        assert main(["campaign", "-c", write(tmp_path, LQR), "-n", "0"]) == 2

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["run", "-c", write(tmp_path, LQR), "-o", str(blocker / "sub")]) == 1

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit):
            main([])


class TestCompare:
    def test_lqr_all_variants_agree(self, tmp_path):
        cfg = write(tmp_path, LQR + "repetitions: 2\n")
        assert main(["compare", "-c", cfg, "-o", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "compare.json").read_text())
        assert report["trajectories_agree"] is True
        assert [v["variant"] for v in report["variants"]] == ["schur", "null-qr", "null-lu"]
        assert all(v["status"] == "Converged" for v in report["variants"])
        assert read_csv(tmp_path / "compare.csv")[0] == list(COMPARE_COLUMNS)

    def test_duplicated_endpoint_marks_schur_failed(self, tmp_path):
        assert main(["compare", "-c", str(CONFIGS / "lqr_duplicated_compare.yaml"), "-o", str(tmp_path), "-n", "1"]) == 0
        variants = {v["variant"]: v for v in json.loads((tmp_path / "compare.json").read_text())["variants"]}
        assert variants["schur"]["status"] == "FAILED(SingularEndpointOperator)"
        assert variants["null-qr"]["status"] == variants["null-lu"]["status"] == "Converged"
        assert variants["null-lu"]["max_deviation"] <= 1e-6

    def test_single_variant_rejected(self, tmp_path):
        cfg = write(tmp_path, LQR + "variants: [schur]\n")
        assert main(["compare", "-c", cfg, "-o", str(tmp_path)]) == 2
        with pytest.raises(ConfigError):
            cli.compare(load_config(LQR + "variants: [schur]\n"), tmp_path)


class TestCampaign:
    def test_lqr_always_one_iteration(self, tmp_path):
        cfg = write(tmp_path, LQR + "cold_start: {magnitude: 2.0}\n")
        assert main(["campaign", "-c", cfg, "-o", str(tmp_path), "-n", "4"]) == 0
        report = json.loads((tmp_path / "campaign.json").read_text())
        assert [r["formulation"] for r in report["rows"]] == ["forward", "inverse"]
        for row in report["rows"]:
            assert row["success_rate"] == 1.0 and row["mean_iterations"] == 1.0
        assert read_csv(tmp_path / "campaign.csv")[0] == list(CAMPAIGN_COLUMNS)

    def test_zero_magnitude_trials_identical(self, tmp_path):
        cfg = load_config("problem: {family: cartpole, horizon: 20, dt: 0.05}\nsolver: {max_iters: 5}\n"
                          "cold_start: {magnitude: 0}\nformulations: [inverse]\nrepetitions: 3\n")
        report = cli.campaign(cfg, tmp_path)
        trials = [(t["status"], t["iterations"], t["final_feasibility"]) for t in report["trials"]]
        assert len(trials) == 3 and len(set(trials)) == 1

    def test_seed_flag_shifts_trials(self, tmp_path):
        cfg = write(tmp_path, LQR)
        main(["campaign", "-c", cfg, "-o", str(tmp_path), "-n", "2", "--seed", "7"])
        seeds = [t["seed"] for t in json.loads((tmp_path / "campaign.json").read_text())["trials"]]
        assert seeds == [7, 8, 7, 8]

    def test_nan_is_json_null(self, tmp_path):
        cfg = load_config("problem: {family: cartpole, horizon: 20}\nsolver: {max_iters: 1}\nformulations: [forward]\nrepetitions: 1\n")
        report = cli.campaign(cfg, tmp_path)
        assert math.isnan(report["rows"][0]["mean_iterations"])
        assert json.loads((tmp_path / "campaign.json").read_text())["rows"][0]["mean_iterations"] is None
