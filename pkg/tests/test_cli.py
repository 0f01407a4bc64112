import hashlib
import json
import subprocess
import sys

import pytest

TOPO = {"depth": 2, "m_im": [2, 2], "m_tx": [2, 2], "n_states": 3}


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "jghm.cli", *args], capture_output=True, text=True
    )


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture()
def workdir(tmp_path):
    return tmp_path


class TestGenModel:
    def test_deterministic_output(self, workdir):
        cfg = workdir / "gen.json"
        cfg.write_text(json.dumps({"topology": TOPO, "p_flip": 0.25, "model_seed": 3}))
        r1 = run_cli("gen-model", "--config", str(cfg), "--out", str(workdir / "a"))
        r2 = run_cli("gen-model", "--config", str(cfg), "--out", str(workdir / "b"))
        assert r1.returncode == 0 and r2.returncode == 0
        assert "B_psi" in r1.stdout
        assert digest(workdir / "a/model.json") == digest(workdir / "b/model.json")

    def test_invalid_topology_exits_nonzero(self, workdir):
        cfg = workdir / "bad.json"
        cfg.write_text(json.dumps({"topology": {**TOPO, "n_states": 1}, "p_flip": 0.2}))
        r = run_cli("gen-model", "--config", str(cfg), "--out", str(workdir))
        assert r.returncode != 0
        assert "error" in r.stderr

    def test_missing_config_usage_error(self, workdir):
        cfg = workdir / "none.json"
        r = run_cli("gen-model", "--config", str(cfg), "--out", str(workdir))
        assert r.returncode == 2


class TestSweep:
    def test_row_count_and_thread_determinism(self, workdir):
        cfg = workdir / "sweep.json"
        cfg.write_text(
            json.dumps(
                {
                    "task": "zsc",
                    "topology": TOPO,
                    "model_seed": 3,
                    "p_flip_list": [0.1, 0.2, 0.3],
                    "train_p_flip": 0.2,
                    "n": 300,
                    "seed": 5,
                }
            )
        )
        r1 = run_cli("sweep", "--config", str(cfg), "--out", str(workdir / "t1"), "--threads", "1")
        r8 = run_cli("sweep", "--config", str(cfg), "--out", str(workdir / "t8"), "--threads", "8")
        assert r1.returncode == 0 and r8.returncode == 0
        assert digest(workdir / "t1/sweep.csv") == digest(workdir / "t8/sweep.csv")
        lines = (workdir / "t1/sweep.csv").read_text().splitlines()
        assert lines[0].startswith("# build=")
        assert lines[1].startswith("# seed=5")
        assert lines[2].startswith("# config_hash=")
        # header + 3 rows per point (bayes risk, ood risk, ood excess)
        assert len(lines) == 3 + 1 + 3 * 3

    def test_bayes_only_sweep(self, workdir):
        cfg = workdir / "sweep2.json"
        cfg.write_text(
            json.dumps(
                {"task": "clip", "topology": TOPO, "model_seed": 3,
                 "p_flip_list": [0.2, 0.4], "n": 200, "K": 4, "seed": 1}
            )
        )
        r = run_cli("sweep", "--config", str(cfg), "--out", str(workdir / "c"))
        assert r.returncode == 0
        lines = (workdir / "c/sweep.csv").read_text().splitlines()
        assert len(lines) == 3 + 1 + 2

    def test_empty_sweep_rejected(self, workdir):
        cfg = workdir / "sweep3.json"
        cfg.write_text(json.dumps({"task": "zsc", "topology": TOPO, "p_flip_list": []}))
        r = run_cli("sweep", "--config", str(cfg), "--out", str(workdir))
        assert r.returncode == 2

    @pytest.mark.parametrize("task", ["cdm", "vlm"])
    def test_all_tasks_run(self, workdir, task):
        cfg = workdir / f"sweep-{task}.json"
        cfg.write_text(
            json.dumps({"task": task, "topology": TOPO, "model_seed": 3,
                        "p_flip_list": [0.2, 0.4], "ood": True, "n": 150, "seed": 2})
        )
        r = run_cli("sweep", "--config", str(cfg), "--out", str(workdir / task))
        assert r.returncode == 0
        lines = (workdir / task / "sweep.csv").read_text().splitlines()
        assert len(lines) == 3 + 1 + 3 * 2  # ood default train 0.2 adds two series

    def test_unknown_command_usage_error(self):
        r = run_cli("frobnicate")
        assert r.returncode == 2


class TestExportDataset:
    def test_line_count_and_determinism(self, workdir):
        cfg = workdir / "exp.json"
        cfg.write_text(
            json.dumps({"topology": TOPO, "p_flip": 0.3, "model_seed": 3, "n": 5,
                        "seed": 21, "noise_t": 1.0})
        )
        r1 = run_cli("export-dataset", "--config", str(cfg), "--out", str(workdir / "d1"),
                     "--with-messages")
        r2 = run_cli("export-dataset", "--config", str(cfg), "--out", str(workdir / "d2"),
                     "--with-messages")
        assert r1.returncode == 0 and r2.returncode == 0
        assert digest(workdir / "d1/dataset.jsonl") == digest(workdir / "d2/dataset.jsonl")
        lines = (workdir / "d1/dataset.jsonl").read_text().splitlines()
        assert len(lines) == 5
        rec = json.loads(lines[0])
        assert rec["schema_version"] == 1
        assert set(rec["messages"]) == {"im", "tx"}
        assert len(rec["messages"]["tx"]["h"]) == 3  # levels 0..L
        assert len(rec["messages"]["tx"]["q"]) == 2  # levels 1..L
        assert rec["noisy"]["t"] == 1.0
        assert len(rec["noisy"]["messages"]["b"]) == 3  # levels 1..L plus leaves
        assert min(min(level) for level in rec["levels"]["im"]) >= 1

    def test_messages_absent_without_flag(self, workdir):
        cfg = workdir / "exp2.json"
        cfg.write_text(json.dumps({"topology": TOPO, "p_flip": 0.3, "model_seed": 3, "n": 2, "seed": 1}))
        r = run_cli("export-dataset", "--config", str(cfg), "--out", str(workdir / "d3"))
        assert r.returncode == 0
        rec = json.loads((workdir / "d3/dataset.jsonl").read_text().splitlines()[0])
        assert "messages" not in rec and "noisy" not in rec

    def test_model_path_round_trip(self, workdir):
        gen = workdir / "gen.json"
        gen.write_text(json.dumps({"topology": TOPO, "p_flip": 0.3, "model_seed": 3}))
        assert run_cli("gen-model", "--config", str(gen), "--out", str(workdir)).returncode == 0
        cfg = workdir / "exp3.json"
        cfg.write_text(json.dumps({"model_path": str(workdir / "model.json"), "n": 2, "seed": 1}))
        r = run_cli("export-dataset", "--config", str(cfg), "--out", str(workdir / "d4"))
        assert r.returncode == 0

    def test_corrupted_model_file_names_invariant(self, workdir):
        gen = workdir / "gen.json"
        gen.write_text(json.dumps({"topology": TOPO, "p_flip": 0.3, "model_seed": 3}))
        assert run_cli("gen-model", "--config", str(gen), "--out", str(workdir)).returncode == 0
        doc = json.loads((workdir / "model.json").read_text())
        doc["kernels_im"][0][0][0][0] += 0.5  # break a row sum
        (workdir / "model.json").write_text(json.dumps(doc))
        cfg = workdir / "exp4.json"
        cfg.write_text(json.dumps({"model_path": str(workdir / "model.json"), "n": 2, "seed": 1}))
        r = run_cli("export-dataset", "--config", str(cfg), "--out", str(workdir / "d5"))
        assert r.returncode == 1
        assert "row sums" in r.stderr

    def test_records_carry_build_metadata(self, workdir):
        cfg = workdir / "exp5.json"
        cfg.write_text(json.dumps({"topology": TOPO, "p_flip": 0.3, "model_seed": 3, "n": 1, "seed": 9}))
        r = run_cli("export-dataset", "--config", str(cfg), "--out", str(workdir / "d6"))
        assert r.returncode == 0
        rec = json.loads((workdir / "d6/dataset.jsonl").read_text().splitlines()[0])
        assert rec["build"].startswith("jghm-lab-") and rec["seed"] == 9
        assert len(rec["config_hash"]) == 16


class TestOtherCommands:
    def test_zsc_command(self, workdir):
        cfg = workdir / "zsc.json"
        cfg.write_text(
            json.dumps({"topology": TOPO, "p_flip": 0.3, "p_flip_tx": 0.05, "model_seed": 3,
                        "M_list": [4, 16], "n": 200, "seed": 2})
        )
        r = run_cli("zsc", "--config", str(cfg), "--out", str(workdir / "z"))
        assert r.returncode == 0
        assert len((workdir / "z/zsc.csv").read_text().splitlines()) == 3 + 1 + 2

    def test_vlm_command(self, workdir):
        cfg = workdir / "vlm.json"
        cfg.write_text(json.dumps({"topology": TOPO, "p_flip": 0.3, "model_seed": 3,
                                   "encoder": "constant"}))
        r = run_cli("vlm", "--config", str(cfg), "--out", str(workdir / "v"))
        assert r.returncode == 0

    def test_cdm_sample_command(self, workdir):
        cfg = workdir / "cdm.json"
        cfg.write_text(
            json.dumps({"topology": {"depth": 1, "m_im": [2], "m_tx": [2], "n_states": 2},
                        "p_flip": 0.35, "model_seed": 3, "T": 8.0, "dt": 0.02,
                        "n_paths": 400, "seed": 4})
        )
        r = run_cli("cdm-sample", "--config", str(cfg), "--out", str(workdir / "cd"))
        assert r.returncode == 0
        assert (workdir / "cd/cdm_sample.csv").exists()


def test_selftest_passes():
    r = run_cli("selftest")
    assert r.returncode == 0
    assert "selftest: all checks passed" in r.stdout
    assert "SKIP oracle-equivalence" in r.stdout
