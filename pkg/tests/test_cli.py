import json
import os
import subprocess
import sys

import pytest

from shedd import cli
from shedd import config as C
from shedd.data import SyntheticBenchConfig
from shedd.trainer import ExperimentConfig
from shedd.augment import AugmentConfig


def tiny_run_config():
    return C.RunConfig(
        benchmark=SyntheticBenchConfig(num_classes=3, latent_dim=8,
                                       source_channels=4, target_channels=2,
                                       image_size=8, source_samples=48,
                                       target_samples=36, seed=3),
        experiment=ExperimentConfig(epochs=1, batch_size=4, labels_per_class=2,
                                    channels=(4,), embed_dim=8, stem_pool=1,
                                    eval_batch=64),
        augment=AugmentConfig())


def write_config(tmp_path, cfg=None, name="config.json"):
    cfg = cfg or tiny_run_config()
    path = tmp_path / name
    path.write_text(C.dumps_config(cfg))
    return str(path)


def run_cli(*argv):
    return cli.main(list(argv))


# ---------------------------------------------------------------------------
# config document

def test_print_defaults_round_trips(capsys):
    assert run_cli("generate", "--print-defaults") == 0
    raw = json.loads(capsys.readouterr().out)
    cfg = C.config_from_dict(raw)
    assert cfg.benchmark.num_classes == 6
    assert cfg.benchmark.source_channels != cfg.benchmark.target_channels


def test_missing_config_field_names_it(tmp_path, capsys):
    raw = json.loads(C.dumps_config(tiny_run_config()))
    del raw["experiment"]["tau"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    code = run_cli("generate", "--config", str(path), "--out", str(tmp_path / "d"))
    assert code == cli.EXIT_CONFIG
    assert "experiment.tau" in capsys.readouterr().err


def test_unknown_config_field_rejected(tmp_path, capsys):
    raw = json.loads(C.dumps_config(tiny_run_config()))
    raw["experiment"]["mystery"] = 1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    code = run_cli("generate", "--config", str(path), "--out", str(tmp_path / "d"))
    assert code == cli.EXIT_CONFIG
    assert "experiment.mystery" in capsys.readouterr().err


def test_invalid_tau_rejected(tmp_path, capsys):
    cfg = tiny_run_config()
    cfg.experiment.tau = 1.5
    raw = json.loads(C.dumps_config(cfg))
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    code = run_cli("generate", "--config", str(path), "--out", str(tmp_path / "d"))
    assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# generate

def test_generate_writes_heterogeneous_pair(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "data"
    assert run_cli("generate", "--config", config, "--out", str(out)) == 0
    src = json.loads((out / "source_manifest.json").read_text())
    tgt = json.loads((out / "target_manifest.json").read_text())
    assert src["channels"] == 4 and tgt["channels"] == 2
    assert (out / "provenance.json").exists()


def test_generate_refuses_nonempty_without_force(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "data"
    assert run_cli("generate", "--config", config, "--out", str(out)) == 0
    assert run_cli("generate", "--config", config, "--out", str(out)) == cli.EXIT_CONFIG


def test_generate_force_same_seed_identical_checksums(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "data"
    assert run_cli("generate", "--config", config, "--out", str(out)) == 0
    first = json.loads((out / "source_manifest.json").read_text())["checksum"]
    assert run_cli("generate", "--config", config, "--out", str(out), "--force") == 0
    second = json.loads((out / "source_manifest.json").read_text())["checksum"]
    assert first == second


# ---------------------------------------------------------------------------
# train / evaluate / report round trip

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    config = write_config(base)
    data = base / "data"
    runs = base / "runs"
    assert run_cli("generate", "--config", config, "--out", str(data)) == 0
    assert run_cli("train", "--config", config, "--data", str(data),
                   "--out", str(runs), "--seeds", "1,2") == 0
    return base, config, data, runs


def test_train_produces_run_dirs_and_aggregate(trained):
    _, _, _, runs = trained
    for seed in (1, 2):
        d = runs / f"seed_{seed}"
        for artifact in ("log.csv", "metrics.json", "provenance.json"):
            assert (d / artifact).exists()
        assert (d / "checkpoint_full" / "index.json").exists()
        assert (d / "checkpoint_inference" / "index.json").exists()
    agg = (runs / "aggregate.csv").read_text().splitlines()
    assert agg[0] == "config,n_t,mean_f1,std_f1"
    assert len(agg) == 2


def test_provenance_reproducibility_record(trained):
    _, _, _, runs = trained
    prov = json.loads((runs / "seed_1" / "provenance.json").read_text())
    assert prov["seed"] == 1
    assert "config" in prov and "version" in prov and "config_hash" in prov
    # the embedded config is a loadable document
    C.config_from_dict(prov["config"])


def test_evaluate_checkpoint(trained, capsys):
    base, _, data, runs = trained
    ck = runs / "seed_1" / "checkpoint_inference"
    out_file = base / "metrics_eval.json"
    assert run_cli("evaluate", "--checkpoint", str(ck), "--data", str(data),
                   "--out", str(out_file)) == 0
    payload = json.loads(out_file.read_text())
    assert 0.0 <= payload["weighted_f1"] <= 1.0


def test_report_builds_tables_and_figures(trained):
    base, _, _, runs = trained
    out = base / "report"
    assert run_cli("report", "--runs", str(runs), "--out", str(out)) == 0
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "config,n_t,mean_f1,std_f1,runs"
    assert len(summary) == 2  # one config at one budget
    assert (out / "summary.md").exists()
    assert (out / "f1_by_config.png").exists()
    assert (out / "curves_full.png").exists()


def test_report_single_run_single_row(trained, tmp_path):
    _, _, _, runs = trained
    out = tmp_path / "single"
    assert run_cli("report", "--runs", str(runs / "seed_1"), "--out", str(out)) == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert len(rows) == 2
    assert rows[1].split(",")[4] == "1"


def test_missing_data_dir_is_data_error(tmp_path, capsys):
    config = write_config(tmp_path)
    code = run_cli("train", "--config", config, "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o"), "--seeds", "1")
    assert code == cli.EXIT_DATA


def test_budget_flag_overrides_labels(trained, tmp_path):
    base, config, data, _ = trained
    out = tmp_path / "budget_run"
    assert run_cli("train", "--config", config, "--data", str(data),
                   "--out", str(out), "--seeds", "1", "--budget", "3") == 0
    prov = json.loads((out / "seed_1" / "provenance.json").read_text())
    assert prov["budget"] == 3
    assert prov["config"]["experiment"]["labels_per_class"] == 3


def test_ablation_flag(trained, tmp_path):
    base, config, data, _ = trained
    out = tmp_path / "abl_run"
    assert run_cli("train", "--config", config, "--data", str(data),
                   "--out", str(out), "--seeds", "1", "--ablation", "abla1") == 0
    prov = json.loads((out / "seed_1" / "provenance.json").read_text())
    assert prov["label"] == "abla1"
    toggles = prov["config"]["experiment"]["toggles"]
    assert toggles["cl_st"] and not toggles["pl_u"]


def test_unknown_ablation_rejected(trained, tmp_path):
    base, config, data, _ = trained
    code = run_cli("train", "--config", config, "--data", str(data),
                   "--out", str(tmp_path / "x"), "--seeds", "1",
                   "--ablation", "abla99")
    assert code == cli.EXIT_CONFIG


def test_ablate_table_shape(trained, tmp_path):
    base, config, data, _ = trained
    out = tmp_path / "ablation"
    assert run_cli("ablate", "--config", config, "--data", str(data),
                   "--out", str(out), "--seeds", "1") == 0
    rows = (out / "ablation_table.csv").read_text().splitlines()
    assert rows[0] == "ablation,cl_st,dom_st,dom_uu,orth_st,orth_uu,pl_u,mean_f1,std_f1"
    assert len(rows) == 8  # header + 7 ablation rows
    assert rows[1].startswith("abla1,")
    assert rows[7].startswith("full,1,1,1,1,1,1")
    assert (out / "ablation_table.md").exists()
    assert (out / "ablation_f1.png").exists()


def test_cli_subprocess_smoke(tmp_path):
    config = write_config(tmp_path)
    env = dict(os.environ, SHEDD_THREADS="1",
               PYTHONPATH=os.pathsep.join(sys.path))
    proc = subprocess.run(
        [sys.executable, "-m", "shedd.cli", "generate", "--config", config,
         "--out", str(tmp_path / "sub_data")],
        capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "sub_data" / "target_manifest.json").exists()
