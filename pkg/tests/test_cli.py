import csv
import json

import numpy as np
import pytest

from hardlabel import cli
from hardlabel.oracle import LinearVictim, save_victim


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    return lines[0], list(csv.DictReader(lines[1:]))


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    cfg = write_cfg(tmp, {"seed": 3})
    assert cli.main(["mi-sweep", cfg, "-o", str(tmp / "a")]) == 0
    assert cli.main(["mi-sweep", cfg, "-o", str(tmp / "b")]) == 0
    return tmp


class TestConfig:
    def test_override_parses_json(self):
        cfg = cli._merge(cli.DEFAULTS, {})
        cli.apply_override(cfg, "attack.q=50")
        cli.apply_override(cfg, "attack.variant=hsja")
        cli.apply_override(cfg, "mi_sweep.c2_values=[1,2]")
        assert cfg["attack"]["q"] == 50 and cfg["attack"]["variant"] == "hsja"
        assert cfg["mi_sweep"]["c2_values"] == [1, 2]

    def test_bad_override(self):
        with pytest.raises(cli.ConfigError):
            cli.apply_override(cli._merge(cli.DEFAULTS, {}), "attack.q")

    def test_hash_ignores_output_location(self):
        a = cli._merge(cli.DEFAULTS, {"output_dir": "x", "workers": 4})
        assert cli.config_hash(a) == cli.config_hash(cli.DEFAULTS)

    def test_hash_is_order_independent(self):
        a = cli._merge(cli.DEFAULTS, {"seed": 1, "attack": {"q": 7}})
        b = cli._merge(cli.DEFAULTS, {"attack": {"q": 7}, "seed": 1})
        assert cli.config_hash(a) == cli.config_hash(b)
        assert cli.config_hash(a) != cli.config_hash(cli._merge(a, {"seed": 2}))

    def test_missing_config_exit_code(self, tmp_path, capsys):
        assert cli.main(["mi-sweep", str(tmp_path / "nope.json")]) == 1
        assert "config error" in capsys.readouterr().err

    def test_malformed_config_exit_code(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert cli.main(["attack", str(p)]) == 1

    def test_unknown_victim_exit_code(self, tmp_path):
        cfg = write_cfg(tmp_path, {"victim": {"kind": "quantum"}, "output_dir": str(tmp_path)})
        assert cli.main(["attack", cfg]) == 1


class TestMiSweep:
    def test_row_count_and_columns(self, sweep_dir):
        meta, rows = read_csv(sweep_dir / "a" / "mi_sweep.csv")
        assert len(rows) == 30 * 4 * 3
        assert "seed=3" in meta
        assert {"d", "c2", "epsilon"} <= set(rows[0])

    def test_rerun_byte_identical(self, sweep_dir):
        a = (sweep_dir / "a" / "mi_sweep.csv").read_bytes()
        b = (sweep_dir / "b" / "mi_sweep.csv").read_bytes()
        assert a == b

    def test_manifest(self, sweep_dir):
        m = json.loads((sweep_dir / "a" / "mi_sweep.json").read_text())
        assert m["rows"] == 360 and m["seed"] == 3 and len(m["d_values"]) == 30


ATTACK = {"seed": 5, "victim": {"kind": "linear", "d": 12}, "data": {"batch": 3},
          "attack": {"budget": 1200, "q": 20, "snapshot_every": 400}}


@pytest.fixture(scope="module")
def attack_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("attack")
    cfg = write_cfg(tmp, ATTACK)
    assert cli.main(["attack", cfg, "-o", str(tmp / "a")]) == 0
    assert cli.main(["attack", cfg, "-o", str(tmp / "b"), "--set", "workers=3"]) == 0
    return tmp


class TestAttack:
    def test_outputs(self, attack_dir):
        d = attack_dir / "a" / "attack"
        assert sorted(p.name for p in d.glob("sample_*.csv")) == [
            "sample_0000.csv", "sample_0001.csv", "sample_0002.csv"]
        meta, rows = read_csv(d / "sample_0000.csv")
        assert "sample=0" in meta
        assert list(rows[0]) == ["query", "l2", "linf", "g", "event"]
        assert int(rows[-1]["query"]) <= 1200

    def test_summary_reproducible_across_workers(self, attack_dir):
        a = json.loads((attack_dir / "a" / "attack" / "summary.json").read_text())
        b = json.loads((attack_dir / "b" / "attack" / "summary.json").read_text())
        assert a == b
        for i in range(3):
            name = f"sample_{i:04d}.csv"
            la = (attack_dir / "a" / "attack" / name).read_bytes()
            lb = (attack_dir / "b" / "attack" / name).read_bytes()
            assert la == lb

    def test_infinite_threshold_counts_successes(self, attack_dir):
        s = json.loads((attack_dir / "a" / "attack" / "summary.json").read_text())
        assert s["threshold"] == "inf"
        assert s["success_rate"] == 1.0
        assert sorted(s["median_l2_at_checkpoint"], key=int) == ["0", "400", "800", "1200"]

    def test_snapshots_saved(self, attack_dir):
        snaps = cli.load_snapshots(attack_dir / "a" / "attack" / "sample_0001.npz")
        assert {0, 400, 800, 1200} <= set(snaps)

    def test_partial_failure_exit_code(self, tmp_path):
        cfg = write_cfg(tmp_path, {**ATTACK, "attack": {"budget": 3, "q": 5}})
        assert cli.main(["attack", cfg, "-o", str(tmp_path)]) in (0, 2)
        s = json.loads((tmp_path / "attack" / "summary.json").read_text())
        assert s["success_rate"] == 0.0

    def test_init_failure_is_exit_two(self, tmp_path):
        save_victim(LinearVictim(np.zeros(4), 1.0), tmp_path / "v.bin")
        cfg = write_cfg(tmp_path, {"victim": {"kind": "file", "path": str(tmp_path / "v.bin")},
                                   "data": {"batch": 2},
                                   "attack": {"budget": 20000, "q": 5}})
        assert cli.main(["attack", cfg, "-o", str(tmp_path)]) == 2


class TestFid:
    def test_trajectory(self, attack_dir, tmp_path):
        cfg = write_cfg(tmp_path, {**ATTACK, "fid": {"attack_dir": str(attack_dir / "a" / "attack"),
                                                     "checkpoints": [0, 400, 1200]}})
        assert cli.main(["fid", cfg, "-o", str(tmp_path)]) == 0
        _, rows = read_csv(tmp_path / "fid.csv")
        assert [int(r["query"]) for r in rows] == [0, 400, 1200]
        assert float(rows[0]["frechet"]) == pytest.approx(0.0, abs=1e-9)
        assert float(rows[2]["frechet"]) > 0

    def test_off_grid_checkpoint_uses_latest(self, attack_dir, tmp_path):
        cfg = write_cfg(tmp_path, {**ATTACK, "fid": {"attack_dir": str(attack_dir / "a" / "attack"),
                                                     "checkpoints": [399, 400]}})
        assert cli.main(["fid", cfg, "-o", str(tmp_path)]) == 0
        _, rows = read_csv(tmp_path / "fid.csv")
        assert float(rows[0]["frechet"]) == pytest.approx(0.0, abs=1e-9)

    def test_missing_attack_output(self, tmp_path):
        cfg = write_cfg(tmp_path, {"fid": {"attack_dir": str(tmp_path / "none")}})
        assert cli.main(["fid", cfg]) == 1


class TestDeviation:
    def run(self, tmp_path, **over):
        cfg = {"seed": 1, "victim": {"kind": "linear", "d": 30},
               "deviation": {"samples": 20, "variants": ["exact", "sign-opt", "hsja"]}}
        cfg["deviation"].update(over)
        path = write_cfg(tmp_path, cfg, f"dev{len(over)}.json")
        out = tmp_path / f"o{over.get('q', 0)}"
        assert cli.main(["deviation", path, "-o", str(out)]) == 0
        _, rows = read_csv(out / "deviation.csv")
        return {r["variant"]: r for r in rows}

    def test_exact_estimator_has_no_deviation(self, tmp_path):
        rows = self.run(tmp_path)
        assert float(rows["exact"]["l2_mean"]) == pytest.approx(0.0, abs=1e-12)
        assert float(rows["exact"]["linf_mean"]) == pytest.approx(0.0, abs=1e-12)
        assert int(rows["sign-opt"]["samples"]) == 20

    def test_more_queries_reduce_deviation(self, tmp_path):
        lo = self.run(tmp_path, q=20)
        hi = self.run(tmp_path, q=200)
        assert float(hi["sign-opt"]["l2_mean"]) < float(lo["sign-opt"]["l2_mean"])

    def test_smoothed_victim_unsupported(self, tmp_path):
        cfg = write_cfg(tmp_path, {"victim": {"kind": "linear", "d": 4,
                                              "smoothing": {"noise_sigma": 0.1, "mc_rounds": 5}}})
        assert cli.main(["deviation", cfg, "-o", str(tmp_path)]) == 1
