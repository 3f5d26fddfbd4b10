import csv
import hashlib
import json

import pytest

from slicewave.cli import main

B2B = """
scenario = "b2b_sweep"
n_samples = 32768
seed = 4

[sweep]
osnr_db = [20, 25, 30, 35, 40]
"""


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def b2b_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("b2b")
    (d / "c.toml").write_text(B2B)
    assert main(["run", "-c", str(d / "c.toml"), "--out", str(d / "out")]) == 0
    return d


class TestRun:
    def test_b2b_rows(self, b2b_dir):
        rows = _rows(b2b_dir / "out" / "results.csv")
        assert len(rows) == 5
        assert [float(r["osnr_db"]) for r in rows] == [20, 25, 30, 35, 40]
        snr = [float(r["snr_db"]) for r in rows]
        assert all(b >= a for a, b in zip(snr, snr[1:]))
        # saturation: the last step gains far less than the first
        assert snr[-1] - snr[-2] < 0.25 * (snr[1] - snr[0])

    def test_every_row_has_the_config_hash(self, b2b_dir):
        out = b2b_dir / "out"
        man = json.loads((out / "manifest.json").read_text())
        assert {r["config_hash"] for r in _rows(out / "results.csv")} == {man["config_hash"]}
        assert man["seed"] == 4 and man["scenario"] == "b2b_sweep"
        assert {"numpy", "scipy", "python"} <= set(man["versions"])

    def test_manifest_hashes(self, b2b_dir):
        out = b2b_dir / "out"
        man = json.loads((out / "manifest.json").read_text())
        assert "results.csv" in man["files"]
        assert len([f for f in man["files"] if f.startswith("constellations/")]) == 5
        for name, digest in man["files"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest

    def test_constellation_dump(self, b2b_dir):
        rows = _rows(b2b_dir / "out" / "constellations" / "point_04.csv")
        assert list(rows[0]) == ["index", "pol", "re", "im"]
        assert {r["pol"] for r in rows} == {"x", "y"}

    def test_deterministic(self, b2b_dir, tmp_path):
        assert main(["run", "-c", str(b2b_dir / "c.toml"), "--out", str(tmp_path)]) == 0
        for name in ("results.csv", "results.json", "manifest.json"):
            assert (tmp_path / name).read_bytes() == (b2b_dir / "out" / name).read_bytes()

    def test_seed_flag_overrides(self, b2b_dir, tmp_path):
        assert main(["run", "-c", str(b2b_dir / "c.toml"), "--seed", "5",
                     "--out", str(tmp_path)]) == 0
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["seed"] == 5
        assert (tmp_path / "results.csv").read_bytes() != \
            (b2b_dir / "out" / "results.csv").read_bytes()

    def test_transmission_distances(self, tmp_path):
        cfg = tmp_path / "t.toml"
        cfg.write_text('scenario = "transmission_sweep"\nn_samples = 32768\n'
                       "[sweep]\nloops = [0, 2, 15, 18]\n[output]\ndump_constellations = false\n")
        assert main(["run", "-c", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rows = _rows(tmp_path / "o" / "results.csv")
        assert [float(r["distance_km"]) for r in rows] == [0, 1210, 9075, 10890]
        tel = _rows(tmp_path / "o" / "telemetry.csv")
        assert len(tel) == 18
        assert not (tmp_path / "o" / "constellations").exists()

    def test_stitch_scenario(self, tmp_path):
        assert main(["run", "--scenario", "stitch_test", "--out", str(tmp_path)]) == 0
        row = _rows(tmp_path / "results.csv")[0]
        assert float(row["evm_db"]) <= -35

    def test_invalid_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("entropy = -1.0\n")
        out = tmp_path / "never"
        assert main(["run", "-c", str(cfg), "--out", str(out)]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config" and err["path"] == ["entropy"]
        assert not out.exists()

    def test_missing_config(self, tmp_path, capsys):
        assert main(["run", "-c", str(tmp_path / "x.toml"), "--out", str(tmp_path / "o")]) == 2
        assert "not found" in json.loads(capsys.readouterr().err)["message"]


class TestReport:
    def test_series(self, b2b_dir, tmp_path):
        assert main(["report", str(b2b_dir / "out"), "--out", str(tmp_path)]) == 0
        rates = _rows(tmp_path / "bitrate_vs_distance.csv")
        assert list(rates[0]) == ["distance_km", "air_tbps", "net_tbps"]
        snr = _rows(tmp_path / "snr_vs_osnr.csv")
        assert [float(r["osnr_db"]) for r in snr] == [20, 25, 30, 35, 40]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n_points"] == 5
        assert len(summary["constellation_files"]) == 5

    def test_report_deterministic(self, b2b_dir, tmp_path):
        main(["report", str(b2b_dir / "out"), "--out", str(tmp_path / "a")])
        main(["report", str(b2b_dir / "out"), "--out", str(tmp_path / "b")])
        for name in ("bitrate_vs_distance.csv", "snr_vs_osnr.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_dir(self, tmp_path, capsys):
        assert main(["report", str(tmp_path)]) == 1
        assert "no results" in capsys.readouterr().err

    def test_empty_points(self, tmp_path, capsys):
        (tmp_path / "results.json").write_text('{"points": []}')
        assert main(["report", str(tmp_path)]) == 1
        assert "no results" in capsys.readouterr().err

    def test_corrupt(self, tmp_path, capsys):
        (tmp_path / "results.json").write_text("{not json")
        assert main(["report", str(tmp_path)]) == 1
        assert "corrupt" in capsys.readouterr().err


class TestOtherCommands:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 8 and all(line.startswith("PASS") for line in lines)

    def test_calibrate(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("n_samples = 32768\n")
        assert main(["calibrate-tx", "-c", str(cfg), "--target", "14"]) == 0
        got = json.loads(capsys.readouterr().out)
        assert got["achieved_db"] == pytest.approx(14.0, abs=0.02)

    def test_requires_command(self):
        with pytest.raises(SystemExit):
            main([])
