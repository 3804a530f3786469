import json

import numpy as np
import pytest

from rslab.errors import ConfigError
from rslab.harness import cli
from rslab.harness.config import ParseError, dump_config, from_dict, validate_config
from rslab.harness.runner import map_paths, run_experiment
from rslab.io import read_csv


def test_minimal_config_defaults():
    cfg = validate_config("kind: rs_special\n")
    assert cfg.seed == 0 and cfg.paths == 100 and cfg.horizon == 10_000
    assert cfg.schedule.kind == "LR1" and cfg.schedule.nu == 0.8
    assert cfg.process.sigma == 0.5 and cfg.analysis.deltas == (0.1,)
    assert validate_config(dump_config(cfg)) == cfg


def test_lr1_nu_error_cites_bound():
    with pytest.raises(ConfigError, match=r"\(2/3, 1\]") as err:
        validate_config("kind: skeleton\nschedule: {kind: LR1, nu: 0.5}\n")
    assert err.value.field == "schedule.nu"


def test_epsilon_error():
    with pytest.raises(ConfigError, match=r"\(0, 1\)") as err:
        validate_config("kind: linear_q\npolicy: {epsilon: 1.0}\n")
    assert err.value.field == "policy.epsilon"


def test_unknown_key_named():
    with pytest.raises(ConfigError) as err:
        validate_config("kind: rs_special\nprocess: {alpah: 1}\n")
    assert err.value.field == "process"


def test_type_error_named():
    with pytest.raises(ConfigError) as err:
        validate_config("kind: rs_special\npaths: many\n")
    assert err.value.field == "paths"


def test_missing_kind():
    with pytest.raises(ConfigError) as err:
        validate_config("seed: 3\n")
    assert err.value.field == "kind"


def test_yaml_syntax_error_has_line():
    with pytest.raises(ParseError) as err:
        validate_config("kind: rs_special\nprocess: {alpha: [1, 2\n")
    assert err.value.line is not None and err.value.line >= 2


def test_growth_constant_checked():
    with pytest.raises(ConfigError) as err:
        validate_config("kind: rs_special\nprocess: {growth_b: 1.2}\n")
    assert err.value.field == "process.growth_b"


def test_lr1_nu_one_needs_regime():
    with pytest.raises(ConfigError):
        from_dict({"kind": "skeleton", "schedule": {"kind": "LR1", "nu": 1.0}})
    cfg = from_dict({"kind": "skeleton", "schedule": {"kind": "LR1", "nu": 1.0}, "regime": {"nu1": 0.5}})
    assert cfg.regime.nu1 == 0.5


def test_map_paths_order_and_interrupt():
    out, partial = map_paths(lambda i: i * i, 20, 4)
    assert out == [i * i for i in range(20)] and not partial

    def stop(i):
        if i == 5:
            raise KeyboardInterrupt
        return i

    out, partial = map_paths(stop, 10, 1)
    assert out == [0, 1, 2, 3, 4] and partial


def test_example1_bundle(tmp_path):
    cfg = from_dict({"kind": "example1", "paths": 1000, "horizon": 100_000, "seed": 1})
    bundle = run_experiment(cfg, tmp_path)
    ids = {v.id for v in bundle.verdicts}
    assert "AC2" in ids and bundle.all_passed
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["stats"]["spike_fraction"] >= 0.9


def test_deterministic_bundle(tmp_path):
    cfg = from_dict({"kind": "rs_special", "paths": 1, "horizon": 100_000,
                     "process": {"noise_variant": "deterministic"}})
    bundle = run_experiment(cfg, tmp_path)
    final = [v for v in bundle.verdicts if "d(z_N" in v.check][0]
    assert final.passed and final.value == 0.0


def test_linear_q_bundle(tmp_path):
    cfg = from_dict({"kind": "linear_q", "paths": 3, "horizon": 20_000, "analysis": {"record_every": 100}})
    bundle = run_experiment(cfg, tmp_path)
    assert "w_norm_stats.csv" in bundle.files
    cols = read_csv(tmp_path / "w_norm_stats.csv")
    assert cols["n"][1] == 100
    assert any(v.id == "AC7" and "bounded" in v.check and v.passed for v in bundle.verdicts)


def test_skeleton_bundle(tmp_path):
    bundle = run_experiment(from_dict({"kind": "skeleton", "horizon": 100_000}), tmp_path)
    assert bundle.all_passed and "skeleton.csv" in bundle.files


@pytest.mark.parametrize("kind", ["rs_special", "rs_general", "linear_q"])
def test_outputs_identical_across_worker_counts(tmp_path, kind):
    raw = {"kind": kind, "paths": 8, "horizon": 3000, "seed": 42}
    a = run_experiment(from_dict({**raw, "threads": 1}), tmp_path / "a")
    b = run_experiment(from_dict({**raw, "threads": 4}), tmp_path / "b")
    assert a.files == b.files
    for name in a.files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_reproduces_outputs(tmp_path):
    first = run_experiment(from_dict({"kind": "rs_special", "paths": 5, "horizon": 2000, "seed": 9}), tmp_path / "a")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    again = run_experiment(from_dict(manifest["config"]), tmp_path / "b")
    assert manifest["base_seed"] == 9 and manifest["path_ids"] == [0, 4]
    for name in first.files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert again.manifest["config_hash"] == manifest["config_hash"]


def test_analyze_roundtrip(tmp_path):
    raw = {"kind": "rs_special", "paths": 4, "horizon": 1000, "seed": 3}
    run_experiment(from_dict(raw), tmp_path / "sim")
    cfg = from_dict({"kind": "analyze", "analysis": {"input": str(tmp_path / "sim" / "distance_paths.bin"),
                                                    "target": 0.0}})
    run_experiment(cfg, tmp_path / "an")
    a = read_csv(tmp_path / "sim" / "distance_stats.csv")
    b = read_csv(tmp_path / "an" / "distance_stats.csv")
    assert np.array_equal(a["mean"], b["mean"])


# --- CLI -------------------------------------------------------------------------

def test_cli_success(tmp_path, capsys):
    assert cli.main(["skeleton", "--horizon", "100000", "--out", str(tmp_path)]) == 0
    assert "[PASS] AC6" in capsys.readouterr().out
    assert (tmp_path / "manifest.json").exists()


def test_cli_failing_verdict(tmp_path):
    # a short linear-Q run has not plateaued yet, so the plateau verdict fails
    assert cli.main(["qlearn", "--paths", "2", "--horizon", "2000", "--out", str(tmp_path)]) == 1


def test_cli_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("kind: linear_q\npolicy: {epsilon: 1.0}\n")
    assert cli.main(["qlearn", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "policy.epsilon" in capsys.readouterr().err


def test_cli_kind_mismatch(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("kind: linear_q\n")
    assert cli.main(["skeleton", "--config", str(cfg)]) == 2


def test_cli_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("RSLAB_OUT", str(tmp_path / "env"))
    assert cli.main(["skeleton", "--horizon", "50000"]) == 0
    assert (tmp_path / "env" / "summary.json").exists()
    assert cli.main(["skeleton", "--horizon", "50000", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "summary.json").exists()


def test_cli_corpus(tmp_path, capsys):
    assert cli.main(["corpus", "list"]) == 0
    assert "random5x2" in capsys.readouterr().out
    assert cli.main(["corpus", "generate", "small3x2", "--out", str(tmp_path / "m.mdp")]) == 0
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"kind: linear_q\npaths: 1\nhorizon: 500\nmdp: {{file: {tmp_path / 'm.mdp'}}}\n")
    assert cli.main(["qlearn", "--config", str(cfg), "--out", str(tmp_path / "o")]) in (0, 1)
    assert cli.main(["corpus", "generate", "--out", str(tmp_path / "x")]) == 2


def test_cli_verify_subset(capsys):
    assert cli.main(["verify", "--only", "AC9"]) == 0
    assert capsys.readouterr().out.startswith("AC9 PASS")
