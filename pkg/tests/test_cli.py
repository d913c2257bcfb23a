from pathlib import Path

from aseplab.cli import main
from aseplab.experiments import CSV_HEADER, load_rows


def write_spec(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


class TestCheck:
    def test_check_writes_csv_and_figure(self, tmp_path):
        spec = write_spec(tmp_path / "meanq.spec",
                          "experiment = mean-q\nrho = 0.5\np = 1.0\nt = 2\n"
                          "replicas = 2000\nseed = 5\n")
        out = tmp_path / "rows.csv"
        code = main(["check", str(spec), "--out", str(out)])
        assert code == 0
        assert out.read_text().startswith(CSV_HEADER)
        # mean-q has no figure renderer; identity-variance does
        spec2 = write_spec(tmp_path / "var.spec",
                           "experiment = identity-variance\nrho = 0.5\np = 1.0\nt = 2\n"
                           "z = 0\nreplicas = 2000\nseed = 6\n")
        out2 = tmp_path / "var.csv"
        assert main(["check", str(spec2), "--out", str(out2)]) == 0
        assert (tmp_path / "var.png").exists()

    def test_no_figures_flag(self, tmp_path):
        spec = write_spec(tmp_path / "var.spec",
                          "experiment = identity-variance\nrho = 0.5\np = 1.0\nt = 1\n"
                          "z = 0\nreplicas = 1500\nseed = 7\n")
        out = tmp_path / "var.csv"
        assert main(["check", str(spec), "--out", str(out), "--no-figures"]) == 0
        assert not (tmp_path / "var.png").exists()

    def test_failing_experiment_exit_code(self, tmp_path):
        # TV at 300 replicas sits far above the 0.01 bound: a legitimate FAIL
        spec = write_spec(tmp_path / "oc.spec",
                          "experiment = oracle-compare\np = 0.7\nq = 0.3\nt = 1\n"
                          "z = 6\nm = 3\nreplicas = 300\nseed = 8\n")
        assert main(["check", str(spec), "--out", str(tmp_path / "oc.csv")]) == 1

    def test_config_error_exit_code(self, tmp_path):
        spec = write_spec(tmp_path / "bad.spec", "experiment = mean-q\nrho = 0.5\n")
        assert main(["check", str(spec)]) == 2

    def test_replica_override_and_seed_override(self, tmp_path):
        spec = write_spec(tmp_path / "meanq.spec",
                          "experiment = mean-q\nrho = 0.5\np = 1.0\nt = 1\n"
                          "replicas = 100000\nseed = 5\n")
        out = tmp_path / "o.csv"
        code = main(["check", str(spec), "--replicas", "500", "--seed", "99",
                     "--out", str(out)])
        assert code == 0
        rows = load_rows(out)
        assert rows[0].replicas == 500 and rows[0].seed == 99

    def test_determinism_across_worker_counts(self, tmp_path):
        spec = write_spec(tmp_path / "cov.spec",
                          "experiment = identity-covariance\nrho = 0.5\np = 1.0\nt = 0.5\n"
                          "z = 3\nreplicas = 3000\nseed = 11\n")
        out1, out2 = tmp_path / "w1.csv", tmp_path / "w2.csv"
        assert main(["check", str(spec), "--out", str(out1), "--workers", "1",
                     "--no-figures"]) == 0
        assert main(["check", str(spec), "--out", str(out2), "--workers", "2",
                     "--no-figures"]) == 0
        assert out1.read_bytes() == out2.read_bytes()


class TestSuite:
    def test_suite_runs_directory(self, tmp_path):
        d = tmp_path / "specs"
        d.mkdir()
        write_spec(d / "a.spec",
                   "experiment = mean-q\nrho = 0.5\np = 1.0\nt = 1\nreplicas = 1500\nseed = 1\n")
        write_spec(d / "b.spec",
                   "experiment = mean-current\nrho = 0.3\np = 1.0\nt = 1\nz = 0\n"
                   "replicas = 1500\nseed = 2\n")
        out = tmp_path / "suite.csv"
        assert main(["suite", str(d), "--out", str(out)]) == 0
        rows = load_rows(out)
        assert {r.experiment for r in rows} == {"mean-q", "mean-current"}

    def test_empty_dir_is_usage_error(self, tmp_path):
        d = tmp_path / "none"
        d.mkdir()
        assert main(["suite", str(d)]) == 2


class TestSimulateAndOracle:
    def test_simulate_summary_and_worldlines(self, tmp_path):
        out = tmp_path / "sim.csv"
        code = main(["simulate", "--rho", "0.4", "--p", "1.0", "--t", "2",
                     "--window", "15", "--seed", "3", "--out", str(out)])
        assert code == 0
        assert out.exists() and (tmp_path / "sim.png").exists()

    def test_oracle_second_class(self, tmp_path):
        out = tmp_path / "oracle.csv"
        code = main(["oracle", "second-class", "--p", "1.0", "--rho", "0.5",
                     "--t", "0.5", "--half-width", "4", "--out", str(out)])
        assert code == 0
        rows = load_rows(out)
        assert len(rows) == 9
        assert all(r.verdict == "PASS" for r in rows)

    def test_oracle_distribution_stdout(self, capsys):
        assert main(["oracle", "distribution", "--p", "0.7", "--q", "0.3",
                     "--t", "1.0", "--ring", "4", "--particles", "2"]) == 0
        assert len(capsys.readouterr().out.strip().split("\n")) == 4
