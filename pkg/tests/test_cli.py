import csv
import json

import pytest

from asymct.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from asymct.config import benchmark_settings, load_settings, settings_snapshot, write_settings
from asymct.datasynth import load_dataset


TINY_INI = """
[synth]
n_identities_source = 10
n_identities_target = 10
samples_per_identity = 8
dim = 10
shift_scale = 0.6
corrupt_frac = 0.1
noise_sigma = 0.4
seed = 5

[stages]
e1 = 3
e2 = 1
e3 = 2
r2 = 1
r3 = 1

[metric]
k = 8

[cluster]
rho = 0.03
k_means_k = 10

[train]
p_identities = 5
k_instances = 4
lr_source = 3e-3
lr_adapt = 1e-3
lr_coteach = 5e-4
hidden_dim = 16
embedding_dim = 8
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--config", tiny_config, "--out", str(out)]) == EXIT_OK
    return out


class TestSynth:
    def test_outputs_parse_back(self, dataset_dir, tiny_config):
        source, target, cfg = load_dataset(dataset_dir)
        assert source.n == 80 and target.n == 80
        assert (dataset_dir / "eval_split.json").exists()
        settings = load_settings(tiny_config)
        assert cfg == settings.synth

    def test_byte_identical_reruns(self, tmp_path, tiny_config):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", tiny_config, "--out", str(a)]) == EXIT_OK
        assert main(["synth", "--config", tiny_config, "--out", str(b)]) == EXIT_OK
        for name in ("dataset.csv", "synth_config.json", "eval_split.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_missing_out_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth"])
        assert exc.value.code == 2

    def test_bad_config_value_exits_2(self, tmp_path, tiny_config):
        bad = tmp_path / "bad.ini"
        bad.write_text(TINY_INI.replace("corrupt_frac = 0.1", "corrupt_frac = 1.4"))
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CONFIG


class TestRun:
    def test_run_writes_all_artifacts(self, dataset_dir, tiny_config, tmp_path):
        out = tmp_path / "run"
        code = main([
            "run", "--config", tiny_config, "--data", str(dataset_dir),
            "--out", str(out), "--pipeline", "act", "--seed", "1",
        ])
        assert code == EXIT_OK
        for name in (
            "round_records.csv", "act_records.csv", "selection_trace.csv",
            "metrics.json", "manifest.json", "m_src.npz", "m_ada.npz", "m_final.npz",
        ):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["complete"] is True
        assert manifest["pipeline"] == "act"
        for rel in manifest["metrics_files"].values():
            assert (out / rel).exists()
        for rel in manifest["checkpoints"].values():
            assert (out / rel).exists()

    def test_direct_pipeline_skips_adaptation(self, dataset_dir, tiny_config, tmp_path):
        out = tmp_path / "direct"
        assert main([
            "run", "--config", tiny_config, "--data", str(dataset_dir),
            "--out", str(out), "--pipeline", "direct",
        ]) == EXIT_OK
        rows = list(csv.reader((out / "round_records.csv").open()))
        assert len(rows) == 1  # header only
        assert not (out / "m_ada.npz").exists()

    def test_act_with_r3_zero_equals_theory(self, dataset_dir, tiny_config, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        main(["run", "--config", tiny_config, "--data", str(dataset_dir),
              "--out", str(out_a), "--pipeline", "act", "--r3", "0", "--seed", "2"])
        main(["run", "--config", tiny_config, "--data", str(dataset_dir),
              "--out", str(out_b), "--pipeline", "theory", "--seed", "2"])
        metrics_a = json.loads((out_a / "metrics.json").read_text())
        metrics_b = json.loads((out_b / "metrics.json").read_text())
        assert metrics_a["map"] == metrics_b["map"]
        assert metrics_a["rank1"] == metrics_b["rank1"]

    def test_metrics_bit_identical_across_reruns(self, dataset_dir, tiny_config, tmp_path):
        outs = [tmp_path / "r1", tmp_path / "r2"]
        for out in outs:
            assert main([
                "run", "--config", tiny_config, "--data", str(dataset_dir),
                "--out", str(out), "--pipeline", "act", "--seed", "3",
            ]) == EXIT_OK
        for name in ("round_records.csv", "act_records.csv", "selection_trace.csv", "metrics.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_invalid_stage_override_exits_2(self, dataset_dir, tiny_config, tmp_path):
        assert main([
            "run", "--config", tiny_config, "--data", str(dataset_dir),
            "--out", str(tmp_path / "x"), "--pipeline", "act", "--r3", "-1",
        ]) == EXIT_CONFIG

    def test_runtime_failure_writes_incomplete_manifest(self, dataset_dir, tiny_config, tmp_path):
        out = tmp_path / "fail"
        # eps_abs = 0 finds no clusters, aborting stage 2 at runtime
        bad = tmp_path / "fail.ini"
        bad.write_text(TINY_INI.replace("rho = 0.03", "rho = 0.03\neps_abs = 0.0"))
        code = main([
            "run", "--config", str(bad), "--data", str(dataset_dir),
            "--out", str(out), "--pipeline", "theory",
        ])
        assert code == EXIT_RUNTIME
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["complete"] is False
        assert "error" in manifest


class TestAblate:
    def test_rows_and_schema(self, dataset_dir, tiny_config, tmp_path):
        out = tmp_path / "ablate"
        code = main([
            "ablate", "--config", tiny_config, "--data", str(dataset_dir),
            "--out", str(out), "--seeds", "0,1",
        ])
        assert code == EXIT_OK
        with (out / "ablation.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 8  # 5 stage-3 pipelines + kmeans + 2 kmeans act variants
        names = {r["pipeline"] for r in rows}
        assert names == {
            "theory", "theory_plus_to", "ct", "ct_plus_to", "act",
            "kmeans", "kmeans_act_u20", "kmeans_act_u30",
        }
        for row in rows:
            assert 0.0 <= float(row["map"]) <= 1.0
            assert 0.0 <= float(row["rank1"]) <= 1.0


def test_out_root_env_var(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("ASYMCT_OUT", str(tmp_path))
    assert main(["synth", "--config", tiny_config, "--out", "envdata"]) == EXIT_OK
    assert (tmp_path / "envdata" / "dataset.csv").exists()


class TestEval:
    def test_eval_checkpoint(self, dataset_dir, tiny_config, tmp_path):
        run_out = tmp_path / "run"
        main(["run", "--config", tiny_config, "--data", str(dataset_dir),
              "--out", str(run_out), "--pipeline", "theory", "--seed", "1"])
        metrics_path = tmp_path / "metrics.json"
        assert main([
            "eval", "--data", str(dataset_dir),
            "--checkpoint", str(run_out / "m_final.npz"), "--out", str(metrics_path),
        ]) == EXIT_OK
        payload = json.loads(metrics_path.read_text())
        run_metrics = json.loads((run_out / "metrics.json").read_text())
        assert payload["map"] == pytest.approx(run_metrics["map"])


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        settings = benchmark_settings()
        path = tmp_path / "bench.ini"
        write_settings(path, settings)
        again = load_settings(path)
        assert settings_snapshot(again) == settings_snapshot(settings)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[synth]\nbananas = 4\n")
        with pytest.raises(ValueError, match="bananas"):
            load_settings(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="config file"):
            load_settings(tmp_path / "nope.ini")

    def test_flags_override_file(self, dataset_dir, tiny_config, tmp_path):
        out = tmp_path / "r"
        assert main([
            "run", "--config", tiny_config, "--data", str(dataset_dir),
            "--out", str(out), "--pipeline", "theory", "--r2", "2", "--seed", "1",
        ]) == EXIT_OK
        rows = list(csv.DictReader((out / "round_records.csv").open()))
        assert len(rows) == 2
