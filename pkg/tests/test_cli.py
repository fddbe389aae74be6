import json
import os
from pathlib import Path

import numpy as np
import pytest

from collapsecert.cli import main

SMALL_MODEL = ["--input-dim", "8", "--latent", "3", "--classes", "4", "--hidden", "16"]


def run(argv, capsys=None):
    code = main(argv)
    return code


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + warmup + teacher-search artifacts shared across CLI tests."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data.csv"
    assert main(["gen-data", "--n", "240", "--d", "8", "--c", "4",
                 "--separation", "8", "--noise", "1", "--seed", "5",
                 "--out", str(data)]) == 0
    warm = root / "warm"
    assert main(["warmup", "--data", str(data), "--out-dir", str(warm),
                 "--steps", "200", "--seed", "5", *SMALL_MODEL]) == 0
    teacher = root / "teacher.json"
    cache = root / "cache.json"
    assert main(["teacher-search", "--features", str(warm / "features.csv"),
                 "--ks", "4", "--seeds", "0,1",
                 "--out-teacher", str(teacher), "--out-cache", str(cache)]) == 0
    return root


class TestGenData:
    def test_defaults_write_files(self, tmp_path):
        out = tmp_path / "d.csv"
        assert main(["gen-data", "--n", "50", "--d", "8", "--c", "4",
                     "--seed", "1", "--out", str(out)]) == 0
        assert out.exists()
        meta = json.loads((tmp_path / "d.csv.meta.json").read_text())
        assert meta["n"] == 50 and meta["d"] == 8 and meta["c"] == 4 and meta["seed"] == 1

    def test_repeat_same_seed_identical(self, tmp_path):
        args = ["gen-data", "--n", "40", "--d", "8", "--c", "4", "--seed", "2"]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_c1_exits_2_naming_constraint(self, tmp_path, capsys):
        code = main(["gen-data", "--c", "1", "--out", str(tmp_path / "x.csv")])
        assert code == 2
        assert "c >= 2" in capsys.readouterr().err

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COLLAPSE_CERT_SEED", "123")
        out = tmp_path / "d.csv"
        assert main(["gen-data", "--n", "20", "--d", "8", "--c", "4",
                     "--out", str(out)]) == 0
        meta = json.loads((tmp_path / "d.csv.meta.json").read_text())
        assert meta["seed"] == 123


class TestTeacherSearch:
    def test_feasible_verdict(self, workspace, capsys):
        warm = workspace / "warm"
        assert main(["teacher-search", "--features", str(warm / "features.csv"),
                     "--ks", "4", "--seeds", "0",
                     "--out-teacher", str(workspace / "t2.json"),
                     "--out-cache", str(workspace / "c2.json")]) == 0
        assert "feasible" in capsys.readouterr().out

    def test_degenerate_named_failure(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        from collapsecert.data import save_csv

        save_csv(tmp_path / "one_blob.csv", rng.normal(size=(200, 2)))
        code = main(["teacher-search", "--features", str(tmp_path / "one_blob.csv"),
                     "--ks", "2", "--seeds", "0",
                     "--high-margin-min", "0.99",
                     "--out-teacher", str(tmp_path / "t.json"),
                     "--out-cache", str(tmp_path / "c.json")])
        assert code == 0
        out = capsys.readouterr().out
        assert "infeasible" in out and "failed:" in out

    def test_deterministic_outputs(self, workspace, tmp_path):
        warm = workspace / "warm"
        outs = []
        for i in range(2):
            t = tmp_path / f"t{i}.json"
            c = tmp_path / f"c{i}.json"
            assert main(["teacher-search", "--features", str(warm / "features.csv"),
                         "--ks", "4", "--seeds", "0,1",
                         "--out-teacher", str(t), "--out-cache", str(c)]) == 0
            outs.append(t.read_bytes() + c.read_bytes())
        assert outs[0] == outs[1]


class TestTrain:
    def test_full_run_writes_artifacts(self, workspace, capsys):
        out = workspace / "full"
        code = main(["train", "--mode", "full", "--data", str(workspace / "data.csv"),
                     "--teacher", str(workspace / "teacher.json"),
                     "--init", str(workspace / "warm" / "checkpoint.json"),
                     "--out-dir", str(out), "--steps", "120", "--seed", "5",
                     *SMALL_MODEL])
        assert code == 0
        assert (out / "metrics.jsonl").exists()
        assert (out / "checkpoint.json").exists()
        assert (out / "resolved.cfg").exists()
        final = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "g_tau" in final and final["target_kind"] == "searched_teacher"

    def test_noalign_then_rescue_lineage(self, workspace):
        noal = workspace / "noalign"
        assert main(["train", "--mode", "noalign", "--data", str(workspace / "data.csv"),
                     "--cache", str(workspace / "cache.json"),
                     "--init", str(workspace / "warm" / "checkpoint.json"),
                     "--out-dir", str(noal), "--steps", "80", "--seed", "5",
                     *SMALL_MODEL]) == 0
        resc = workspace / "rescue"
        assert main(["train", "--mode", "rescue", "--data", str(workspace / "data.csv"),
                     "--cache", str(workspace / "cache.json"),
                     "--init", str(noal / "checkpoint.json"),
                     "--out-dir", str(resc), "--steps", "80", "--seed", "5",
                     *SMALL_MODEL]) == 0
        from collapsecert.vae import load_checkpoint

        ckpt = load_checkpoint(resc / "checkpoint.json")
        assert ckpt.mode_lineage == ["warmup", "noalign", "rescue"]

    def test_rescue_without_init_exits_2(self, workspace):
        code = main(["train", "--mode", "rescue", "--data", str(workspace / "data.csv"),
                     "--cache", str(workspace / "cache.json"),
                     "--out-dir", str(workspace / "r2")])
        assert code == 2

    def test_fixed_t0_without_cache_exits_2(self, workspace):
        code = main(["train", "--mode", "fixed_t0", "--data", str(workspace / "data.csv"),
                     "--teacher", str(workspace / "teacher.json"),
                     "--init", str(workspace / "warm" / "checkpoint.json"),
                     "--out-dir", str(workspace / "f2")])
        assert code == 2

    def test_tampered_cache_exits_5(self, workspace, tmp_path):
        cache = json.loads((workspace / "cache.json").read_text())
        cache["teacher_fingerprint"] = "0" * 16
        bad = tmp_path / "bad_cache.json"
        bad.write_text(json.dumps(cache))
        code = main(["train", "--mode", "fixed_t0", "--data", str(workspace / "data.csv"),
                     "--cache", str(bad), "--teacher", str(workspace / "teacher.json"),
                     "--init", str(workspace / "warm" / "checkpoint.json"),
                     "--out-dir", str(tmp_path / "out"), "--steps", "20",
                     *SMALL_MODEL])
        assert code == 5

    def test_corrupted_cache_rows_exit_5(self, workspace, tmp_path):
        cache = json.loads((workspace / "cache.json").read_text())
        cache["rows"][0][0] += 0.5
        bad = tmp_path / "bad_rows.json"
        bad.write_text(json.dumps(cache))
        code = main(["train", "--mode", "fixed_t0", "--data", str(workspace / "data.csv"),
                     "--cache", str(bad),
                     "--init", str(workspace / "warm" / "checkpoint.json"),
                     "--out-dir", str(tmp_path / "out"), "--steps", "20",
                     *SMALL_MODEL])
        assert code == 5

    def test_unknown_config_key_exits_2(self, workspace, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("steps = 10\nwombat = 3\n")
        code = main(["train", "--mode", "full", "--data", str(workspace / "data.csv"),
                     "--cache", str(workspace / "cache.json"),
                     "--init", str(workspace / "warm" / "checkpoint.json"),
                     "--config", str(cfg), "--out-dir", str(tmp_path / "out")])
        assert code == 2

    def test_resolved_config_is_reloadable(self, workspace, tmp_path):
        out = workspace / "full"
        from collapsecert.cli import parse_config_file

        resolved = parse_config_file(out / "resolved.cfg")
        assert resolved["steps"] == 120
        assert resolved["classes"] == 4


class TestCertify:
    def test_matches_training_report(self, workspace, capsys):
        code = main(["certify", "--checkpoint", str(workspace / "full" / "checkpoint.json"),
                     "--data", str(workspace / "data.csv"),
                     "--cache", str(workspace / "cache.json"), "--tau", "0.1"])
        assert code == 0
        offline = json.loads(capsys.readouterr().out.strip())
        last = json.loads((workspace / "full" / "metrics.jsonl")
                          .read_text().strip().splitlines()[-1])
        for key in ("i_t", "l_align_raw", "g_tau", "student_mi"):
            assert offline[key] == last[key]
        assert offline["g_tau"] > 0.0

    def test_noalign_endpoint_is_negative(self, workspace, capsys):
        code = main(["certify", "--checkpoint",
                     str(workspace / "noalign" / "checkpoint.json"),
                     "--data", str(workspace / "data.csv"),
                     "--cache", str(workspace / "cache.json")])
        assert code == 0
        report = json.loads(capsys.readouterr().out.strip())
        assert report["g_tau"] < 0.0

    def test_tau_override_shifts_only_margin(self, workspace, capsys):
        args = ["certify", "--checkpoint", str(workspace / "full" / "checkpoint.json"),
                "--data", str(workspace / "data.csv"),
                "--cache", str(workspace / "cache.json")]
        assert main(args + ["--tau", "0.1"]) == 0
        a = json.loads(capsys.readouterr().out.strip())
        assert main(args + ["--tau", "0.3"]) == 0
        b = json.loads(capsys.readouterr().out.strip())
        assert b["l_align_raw"] == a["l_align_raw"]
        assert b["bare_margin"] == a["bare_margin"]
        assert b["g_tau"] == pytest.approx(a["g_tau"] - 0.2, abs=1e-12)


class TestReport:
    def test_merges_runs(self, workspace, tmp_path, capsys):
        out = tmp_path / "series.csv"
        code = main(["report", "--runs", str(workspace / "full"),
                     str(workspace / "noalign"), str(workspace / "rescue"),
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("run,step,mode")
        labels = {l.split(",")[0] for l in lines[1:]}
        assert labels == {"full", "noalign", "rescue"}
        tau_lines = (tmp_path / "series.tau.csv").read_text().splitlines()
        assert tau_lines[0] == "run,tau,g_tau"

    def test_missing_run_exits_1(self, tmp_path):
        assert main(["report", "--runs", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "s.csv")]) == 1

    def test_idempotent(self, workspace, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        runs = ["--runs", str(workspace / "full"), str(workspace / "noalign")]
        assert main(["report", *runs, "--out", str(a)]) == 0
        assert main(["report", *runs, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.tau.csv").read_bytes() == (tmp_path / "b.tau.csv").read_bytes()


class TestChecksCommands:
    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--cases", "24", "--seed", "0"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_identity_check_passes(self, capsys):
        assert main(["identity-check", "--cases", "300", "--flows", "3", "--seed", "0"]) == 0
        assert "PASS" in capsys.readouterr().out


def test_unknown_command_exits_2():
    assert main(["frobnicate"]) == 2


def test_missing_required_flag_exits_2():
    assert main(["train", "--mode", "full"]) == 2
