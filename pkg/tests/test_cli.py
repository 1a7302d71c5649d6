import pytest

import mvlab.tensor
from mvlab.cli import dispatch, selftest, worker_count


def run(capsys, *argv):
    code = dispatch(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def result_kv(out):
    line = [l for l in out.strip().splitlines() if l.startswith("RESULT ")][-1]
    return dict(part.split("=", 1) for part in line[len("RESULT "):].split())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def synth_path(workdir):
    path = workdir / "data.mvds"
    code = dispatch(["synth", "--n", "64", "--classes", "4", "--size", "32",
                     "--seed", "7", "--out", str(path)])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def trained(workdir, synth_path):
    out = workdir / "run"
    code = dispatch(["train", "--variant", "toy", "--data", str(synth_path),
                     "--epochs", "8", "--batch", "16", "--lr", "0.002",
                     "--milestones", "", "--seed", "0", "--out", str(out)])
    assert code == 0
    return out / "best.mvwt"


class TestEndToEnd:
    def test_synth_then_train_reports_val_acc(self, capsys, workdir, synth_path):
        out = workdir / "run2"
        code, stdout, _ = run(capsys, "train", "--variant", "toy", "--data", str(synth_path),
                              "--epochs", "2", "--batch", "16", "--milestones", "",
                              "--out", str(out))
        assert code == 0
        kv = result_kv(stdout)
        assert "val_acc" in kv and 0.0 <= float(kv["val_acc"]) <= 1.0
        assert (out / "config.txt").exists() and (out / "epochs.csv").exists()

    def test_eval_runs_on_checkpoint(self, capsys, synth_path, trained):
        code, stdout, _ = run(capsys, "eval", "--ckpt", str(trained), "--data", str(synth_path),
                              "--split", "test")
        assert code == 0
        kv = result_kv(stdout)
        assert 0.0 <= float(kv["acc"]) <= 1.0

    def test_attack_writes_report(self, capsys, workdir, synth_path, trained):
        report = workdir / "attack.txt"
        code, stdout, _ = run(capsys, "attack", "--method", "fgsm", "--eps", "0.031",
                              "--step", "0.015", "--iters", "5", "--ckpt", str(trained),
                              "--data", str(synth_path), "--report", str(report),
                              "--split", "train")
        assert code == 0
        kv = result_kv(stdout)
        assert float(kv["robust_acc"]) <= float(kv["clean_acc"])
        text = report.read_text()
        assert "clean_acc=" in text and "eps=0.031" in text

    def test_audit_reports_params_and_flops(self, capsys):
        code, stdout, _ = run(capsys, "audit", "--variant", "t", "--input", "224")
        assert code == 0
        kv = result_kv(stdout)
        assert int(kv["params"]) == 10_861_240
        assert kv["gmacs"] == "2.698"

    def test_gradcam_writes_pgm(self, capsys, workdir, synth_path, trained):
        out = workdir / "cam.pgm"
        code, stdout, _ = run(capsys, "gradcam", "--ckpt", str(trained), "--data", str(synth_path),
                              "--index", "1", "--layer", "stage2.block3.attn", "--out", str(out))
        assert code == 0
        assert out.read_bytes().startswith(b"P5\n32 32\n255\n")


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        code, _, err = run(capsys, "bogus")
        assert code == 1 and "usage" in err.lower()

    def test_missing_subcommand(self, capsys):
        code, _, _ = run(capsys)
        assert code == 1

    def test_missing_data_file_is_data_error(self, capsys, workdir):
        code, _, err = run(capsys, "train", "--variant", "toy",
                           "--data", str(workdir / "nope.mvds"), "--out", str(workdir / "x"))
        assert code == 2

    def test_corrupt_data_is_data_error(self, capsys, workdir):
        bad = workdir / "bad.mvds"
        bad.write_bytes(b"NOPE" + b"\0" * 40)
        code, _, _ = run(capsys, "eval", "--ckpt", str(bad), "--data", str(bad))
        assert code == 2

    def test_version_flag(self, capsys):
        code, stdout, _ = run(capsys, "--version")
        assert code == 0 and stdout.startswith("mvlab ")


class TestSelftest:
    def test_green_and_deterministic(self, capsys):
        code1, out1, _ = run(capsys, "selftest")
        code2, out2, _ = run(capsys, "selftest")
        assert code1 == code2 == 0
        assert out1 == out2
        assert "RESULT selftest=ok" in out1

    def test_injected_relu_fault_is_named(self, capsys):
        mvlab.tensor._injected_faults.add("relu_grad")
        try:
            code, stdout, _ = run(capsys, "selftest")
        finally:
            mvlab.tensor._injected_faults.discard("relu_grad")
        assert code != 0
        kv = result_kv(stdout)
        assert kv["selftest"] == "fail"
        assert "relu" in kv["failed"] or "gradient" in kv["failed"]


class TestConfigFile:
    def test_file_overrides_defaults_but_flags_win(self, capsys, workdir, synth_path):
        cfg = workdir / "conf.txt"
        cfg.write_text("epochs=1\nlr=0.005\nmilestones=\n# comment line\n")
        out = workdir / "run3"
        code, stdout, _ = run(capsys, "train", "--variant", "toy", "--data", str(synth_path),
                              "--config", str(cfg), "--epochs", "2", "--batch", "16",
                              "--out", str(out))
        assert code == 0
        echoed = (out / "config.txt").read_text()
        assert "epochs=2" in echoed      # flag beats file
        assert "lr=0.005" in echoed      # file beats default

    def test_dotted_augmentation_keys_accepted(self, capsys, workdir, synth_path):
        cfg = workdir / "pmc.txt"
        cfg.write_text("pmc.enabled=on\npmc.lambda=0.4\npmc.stage=2\n"
                       "pmc.probability=0.9\npmc.eps=1e-4\nepochs=1\nmilestones=\n")
        out = workdir / "run_pmc"
        code, _, _ = run(capsys, "train", "--variant", "toy", "--data", str(synth_path),
                         "--config", str(cfg), "--batch", "16", "--out", str(out))
        assert code == 0
        echoed = (out / "config.txt").read_text()
        assert "pmc=True" in echoed and "pmc_lambda=0.4" in echoed and "pmc_stage=2" in echoed

    def test_malformed_config_line_is_usage_error(self, capsys, workdir, synth_path):
        cfg = workdir / "broken.txt"
        cfg.write_text("epochs 3\n")
        code, _, err = run(capsys, "train", "--variant", "toy", "--data", str(synth_path),
                           "--config", str(cfg), "--out", str(workdir / "r4"))
        assert code == 1 and "key=value" in err

    def test_rerun_from_echoed_config_is_bit_identical_at_64bit(self, capsys, workdir, synth_path):
        out1 = workdir / "d1"
        out2 = workdir / "d2"
        base = ["train", "--variant", "toy", "--data", str(synth_path), "--epochs", "2",
                "--batch", "16", "--milestones", "", "--dtype", "float64", "--seed", "5"]
        assert dispatch(base + ["--out", str(out1)]) == 0
        capsys.readouterr()
        assert dispatch(["train", "--data", str(synth_path),
                         "--config", str(out1 / "config.txt"), "--out", str(out2)]) == 0
        capsys.readouterr()
        assert (out1 / "epochs.csv").read_text() == (out2 / "epochs.csv").read_text()
        c1 = (out1 / "best.mvwt").read_bytes()
        c2 = (out2 / "best.mvwt").read_bytes()
        assert c1 == c2


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("MEDVIT_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MEDVIT_THREADS", "")
    assert worker_count() >= 1
