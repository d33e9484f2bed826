import json
import subprocess
import sys

import numpy as np
import pytest

from tcnet import __version__
from tcnet.cli import main
from tcnet.forest import load_forest
from tcnet.io import load_dataset, save_dataset, synth_generate
from tcnet.model import CompactEncoder, TCNet, load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1, err
    assert lines[0].startswith("error: ")
    return lines[0]


@pytest.fixture(scope="module")
def synth_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.tcd"
    assert main(["synth", "--per-class", "60", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def six_channel(tmp_path_factory):
    path = tmp_path_factory.mktemp("data6") / "six.tcd"
    save_dataset(synth_generate(per_class=20, n_channels=6, seed=2), str(path))
    return path


class TestDispatch:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        code, _, err = run(capsys, "bogus")
        assert code == 2
        assert "invalid choice" in err

    def test_missing_argument_is_usage_error(self, capsys):
        assert run(capsys, "train")[0] == 2

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "tcnet.cli", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert proc.stdout.strip() == f"tcnet {__version__}"

    def test_missing_file_is_io_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "extract", "--data", tmp_path / "none.tcd", "--out", tmp_path / "f.csv")
        assert code == 1
        assert error_line(err).startswith("error: io: ")

    def test_bad_dataset_reports_format_kind(self, capsys, tmp_path):
        bad = tmp_path / "bad.tcd"
        bad.write_bytes(b"garbage!")
        code, _, err = run(capsys, "rf-baseline", "--data", bad, "--out", tmp_path / "o")
        assert code == 1
        assert error_line(err).startswith("error: unrecognized format: ")


class TestSynthAndRepro:
    def test_synth_writes_dataset_and_record(self, synth_file):
        ds = load_dataset(str(synth_file))
        assert ds.windows.shape == (180, 3, 128)
        record = json.loads(open(str(synth_file) + ".repro.json").read())
        assert record["command"] == "synth" and record["seed"] == 0
        assert record["version"] == __version__
        assert len(record["config_hash"]) == 64
        assert "timestamp" not in record

    def test_seed_from_environment(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("TCNET_SEED", "7")
        assert run(capsys, "synth", "--per-class", "4", "--out", tmp_path / "a.tcd")[0] == 0
        record = json.loads((tmp_path / "a.tcd.repro.json").read_text())
        assert record["seed"] == 7
        expected = synth_generate(per_class=4, seed=7).windows
        assert load_dataset(str(tmp_path / "a.tcd")).windows.tobytes() == expected.tobytes()

    def test_flag_beats_environment(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("TCNET_SEED", "7")
        run(capsys, "synth", "--per-class", "4", "--seed", "3", "--out", tmp_path / "a.tcd")
        assert json.loads((tmp_path / "a.tcd.repro.json").read_text())["seed"] == 3

    def test_bad_environment_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("TCNET_SEED", "abc")
        code, _, err = run(capsys, "synth", "--out", tmp_path / "a.tcd")
        assert code == 1 and "TCNET_SEED" in error_line(err)

    def test_same_inputs_same_hash(self, capsys, tmp_path):
        for name in ("a", "b"):
            run(capsys, "synth", "--per-class", "4", "--out", tmp_path / f"{name}.tcd")
        a = json.loads((tmp_path / "a.tcd.repro.json").read_text())
        b = json.loads((tmp_path / "b.tcd.repro.json").read_text())
        assert a["config_hash"] == b["config_hash"]


class TestPipelines:
    def test_default_synth_chain(self, capsys, tmp_path):
        data = tmp_path / "d.tcn"
        assert run(capsys, "synth", "--classes", "3", "--per-class", "200", "--out", data)[0] == 0
        runs = []
        for name in ("a", "b"):
            code, stdout, _ = run(capsys, "rf-baseline", "--data", data, "--out", tmp_path / name)
            assert code == 0
            runs.append(json.loads(stdout))
        assert runs[0]["macro_f1"] >= 0.95
        assert runs[0]["macro_f1"] == runs[1]["macro_f1"]
        assert (tmp_path / "a" / "forest.tcrf").read_bytes() == (tmp_path / "b" / "forest.tcrf").read_bytes()
        assert load_forest(str(tmp_path / "a" / "forest.tcrf")).config.n_trees == 300

    def test_synth_to_rf_baseline(self, capsys, synth_file, tmp_path):
        out = tmp_path / "rf"
        code, stdout, _ = run(capsys, "rf-baseline", "--data", synth_file, "--trees", "60", "--out", out)
        assert code == 0
        result = json.loads(stdout)
        assert result["macro_f1"] >= 0.95
        saved = json.loads((out / "metrics.json").read_text())
        assert abs(sum(saved["family_importance"].values()) - 1) < 1e-9
        assert saved["test_subjects"] == [8, 9]
        assert load_forest(str(out / "forest.tcrf")).config.n_trees == 60
        assert (out / "repro.json").exists()

    def test_extract_rows(self, capsys, synth_file, tmp_path):
        out = tmp_path / "anchors.csv"
        code, _, _ = run(capsys, "extract", "--data", synth_file, "--block", "64", "--out", out)
        assert code == 0
        lines = out.read_text().splitlines()
        header = lines[0].split(",")
        assert header[:4] == ["window", "block", "channel", "filterbank.band0"]
        assert len(header) == 3 + 51
        assert len(lines) == 1 + 180 * 2 * 3

    def test_extract_oversized_block(self, capsys, synth_file, tmp_path):
        code, _, err = run(capsys, "extract", "--data", synth_file, "--block", "256", "--out", tmp_path / "x.csv")
        assert code == 1 and "exceeds" in error_line(err)

    def test_train_config_mismatch(self, capsys, synth_file, tmp_path):
        code, _, err = run(capsys, "train", "--data", synth_file, "--preset", "uci-har-shape", "--out", tmp_path)
        assert code == 1
        assert error_line(err) == ("error: config mismatch: config 'uci-har-shape' expects 9 channels, "
                                   "dataset has 3")

    def test_train_then_eval(self, capsys, synth_file, tmp_path):
        out = tmp_path / "run"
        code, stdout, _ = run(capsys, "train", "--data", synth_file, "--preset", "tiny", "--epochs", "2",
                              "--out", out)
        assert code == 0
        assert isinstance(load_checkpoint(str(out / "model.tcnm")), TCNet)
        history = (out / "history.csv").read_text().splitlines()
        assert len(history) == 3
        summary = json.loads((out / "metrics.json").read_text())
        assert summary["epochs_run"] == 2 and summary["test_subjects"] == [8, 9]
        record = json.loads((out / "repro.json").read_text())
        assert record["config"]["train"]["max_epochs"] == 2

        ev = tmp_path / "eval"
        code, stdout, _ = run(capsys, "eval", "--model", out / "model.tcnm", "--data", synth_file, "--out", ev)
        assert code == 0
        rows = (ev / "correction_magnitudes.csv").read_text().splitlines()
        assert rows[0] == "family,dataset,mean_rel_delta"
        assert len(rows) == 8
        assert json.loads((ev / "metrics.json").read_text())["accuracy"] == json.loads(stdout)["accuracy"]

    def test_grad_check_module(self, capsys, tmp_path):
        code, stdout, _ = run(capsys, "grad-check", "--module", "loss", "--inputs", "2", "--out", tmp_path)
        assert code == 0
        assert stdout.strip().splitlines()[-1] == "3/3 operations below 0.0001"
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["passed"] is True

    def test_grad_check_failure_exit(self, capsys, tmp_path):
        code, _, err = run(capsys, "grad-check", "--module", "loss", "--inputs", "1", "--tol", "1e-30",
                           "--out", tmp_path)
        assert code == 1
        assert error_line(err).startswith("error: gradient mismatch: ")

    def test_sensitivity(self, capsys, synth_file, tmp_path):
        code, stdout, _ = run(capsys, "sensitivity", "--data", synth_file, "--noise", "0,0.04", "--rotation", "0",
                              "--shift", "0.25", "--max-windows", "20", "--per-feature", "--out", tmp_path)
        assert code == 0
        result = json.loads(stdout)
        assert set(result) == {"gaussian-noise:0", "gaussian-noise:0.04", "rotation:0", "temporal-shift:0.25"}
        assert all(v == 0 for v in result["gaussian-noise:0"].values())
        assert all(v > 0 for v in result["gaussian-noise:0.04"].values())
        assert (tmp_path / "sensitivity.csv").read_text().startswith("kind,magnitude,family,relative_change")
        assert (tmp_path / "sensitivity_features.csv").exists()

    def test_sensitivity_rotation_needs_triaxial(self, capsys, tmp_path):
        path = tmp_path / "two.tcd"
        save_dataset(synth_generate(per_class=4, n_channels=2), str(path))
        code, _, err = run(capsys, "sensitivity", "--data", path, "--rotation", "10", "--out", tmp_path)
        assert code == 1 and "tri-axial" in error_line(err)

    def test_pretrain_embed_probe_forest(self, capsys, six_channel, tmp_path):
        pt = tmp_path / "pt"
        code, stdout, _ = run(capsys, "pretrain", "--data", six_channel, "--epochs", "1", "--out", pt)
        assert code == 0
        assert json.loads(stdout)["instances"] == 120
        assert isinstance(load_checkpoint(str(pt / "encoder.tcnm")), CompactEncoder)

        emb = tmp_path / "emb.npz"
        assert run(capsys, "freeze-embed", "--model", pt / "encoder.tcnm", "--data", six_channel, "--out", emb)[0] == 0
        with np.load(emb) as data:
            assert data["features"].shape == (60, 512)

        code, stdout, _ = run(capsys, "probe", "--data", six_channel, "--embeddings", emb, "--out", tmp_path / "pr")
        assert code == 0
        assert (tmp_path / "pr" / "probe.csv").read_text().startswith("family,r2_train,r2_test")
        assert len(json.loads(stdout)) == 6

        code, stdout, _ = run(capsys, "rf-baseline", "--features", emb, "--trees", "10", "--out", tmp_path / "rf")
        assert code == 0 and "macro_f1" in json.loads(stdout)

    def test_eval_rejects_encoder(self, capsys, six_channel, tmp_path):
        run(capsys, "pretrain", "--data", six_channel, "--epochs", "1", "--out", tmp_path)
        code, _, err = run(capsys, "eval", "--model", tmp_path / "encoder.tcnm", "--data", six_channel)
        assert code == 1 and "not a classifier" in error_line(err)

    def test_import_csv(self, capsys, tmp_path):
        rows = ["t,x,y,z,act,sub"] + [f"{i},{np.sin(i / 5):.4f},0.1,1.0,walk,3" for i in range(300)]
        (tmp_path / "rec.csv").write_text("\n".join(rows) + "\n")
        manifest = {"channels": ["x", "y", "z"], "label": "act", "subject": "sub", "window": 100,
                    "sampling_rate": 50}
        (tmp_path / "m.json").write_text(json.dumps(manifest))
        code, stdout, _ = run(capsys, "import-csv", "--dir", tmp_path, "--manifest", tmp_path / "m.json",
                              "--out", tmp_path / "imp.tcd")
        assert code == 0
        assert json.loads(stdout)["windows"] == 3
        assert load_dataset(str(tmp_path / "imp.tcd")).subjects.tolist() == [3, 3, 3]
