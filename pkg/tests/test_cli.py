import csv
import json
import subprocess
import sys


def run_cli(args):
    return subprocess.run(
        [sys.executable, "-m", "moray.cli", *args],
        capture_output=True,
        text=True,
        timeout=600,
    )


class TestCli:
    def test_structured_small_star(self, tmp_path):
        out = tmp_path / "star"
        res = run_cli(
            [
                "--scenario", "structured-small", "--protocol", "star",
                "--rounds", "5", "--seed", "1", "--out", str(out),
            ]
        )
        assert res.returncode == 0, res.stderr
        rows = list(csv.DictReader((tmp_path / "star.per_round.csv").open()))
        assert len(rows) == 5
        assert set(rows[0]) == {"round", "avg_latency_ms", "avg_layers", "aggregate_reward"}

    def test_moray_json_export_and_trace(self, tmp_path):
        out = tmp_path / "m.json"
        trace = tmp_path / "trace.txt"
        res = run_cli(
            [
                "--scenario", "structured-small", "--protocol", "moray",
                "--rounds", "8", "--seed", "2", "--format", "json",
                "--out", str(out), "--trace", str(trace),
            ]
        )
        assert res.returncode == 0, res.stderr
        doc = json.loads(out.read_text())
        assert len(doc["per_round"]) == 8
        lines = trace.read_text().splitlines()
        assert lines and all(len(line.split()) == 4 for line in lines)

    def test_real_world_sources_by_city(self, tmp_path):
        res = run_cli(
            [
                "--scenario", "real-world", "--protocol", "star",
                "--rounds", "3", "--seed", "0", "--sources", "Paris,Seattle",
                "--out", str(tmp_path / "rw"),
            ]
        )
        assert res.returncode == 0, res.stderr
        assert "source Paris" in res.stdout
        assert "source Seattle" in res.stdout

    def test_random_scenario_sizes(self, tmp_path):
        res = run_cli(
            [
                "--scenario", "random", "--sfus", "3", "--clients", "6",
                "--protocol", "moray", "--rounds", "5", "--seed", "3",
            ]
        )
        assert res.returncode == 0, res.stderr

    def test_unknown_scenario_rejected(self):
        res = run_cli(["--scenario", "bogus", "--rounds", "1"])
        assert res.returncode != 0
