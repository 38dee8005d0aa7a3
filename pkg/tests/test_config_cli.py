import json
from pathlib import Path

import pytest

from marlflow.cli import main
from marlflow.config import (default_config, parse_config, serialize_config,
                             validate_config, with_overrides)
from marlflow.errors import ConfigError
from marlflow.loop import build_environment, train_loop


def write_cfg(tmp_path, family="A", name="run.cfg", **kwargs):
    params = dict(seed=21, iterations=2, out_dir=str(tmp_path / "out"),
                  n_train=16, n_eval=6)
    params.update(kwargs)
    cfg = default_config(family, **params)
    path = tmp_path / name
    path.write_text(serialize_config(cfg), encoding="utf-8")
    return path, cfg


def test_config_roundtrip_all_families():
    for family in "ABCD":
        cfg = default_config(family, seed=3, iterations=5, n_train=10, n_eval=4)
        text = serialize_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert serialize_config(again) == text


def test_parse_rejects_unknown_keys_and_bad_values():
    cfg = default_config("A")
    text = serialize_config(cfg) + "bogus.key = 1\n"
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(text)
    with pytest.raises(ConfigError, match="run.seed"):
        parse_config(serialize_config(cfg).replace("run.seed = 42",
                                                   "run.seed = forty"))
    with pytest.raises(ConfigError, match="missing required"):
        parse_config("run.seed = 1\n")


def test_parse_model_overrides_and_weights():
    cfg = default_config("A")
    text = serialize_config(cfg)
    text += "models.m_answer.learning_rate = 0.001\n"
    text += "rewards.weights.answer = 1.0,0.5,2.0\n"
    parsed = parse_config(text)
    assert parsed.model_overrides == {"m_answer": {"learning_rate": 0.001}}
    assert parsed.reward_spec.weights_for("answer").traj == 2.0
    assert serialize_config(parse_config(serialize_config(parsed))) == \
        serialize_config(parsed)


def test_validate_config_catches_cross_section_mismatches():
    cfg = default_config("A")
    bad = parse_config(serialize_config(cfg).replace(
        "rewards.family = shared-final", "rewards.family = verify-delta"))
    problems = validate_config(bad, frozenset({"retrieve"}))
    assert any("does not match workflow family" in p for p in problems)

    bad2 = parse_config(serialize_config(cfg).replace(
        "mapping.answer = m_answer\n", ""))
    problems2 = validate_config(bad2, frozenset({"retrieve"}))
    assert any("unmapped-agent-role" in p for p in problems2)


def test_override_precedence():
    cfg = default_config("A", seed=5, iterations=7)
    out = with_overrides(cfg, seed=9, iterations=1, out_dir="elsewhere")
    assert out.seed == 9
    assert out.trainer.iterations == 1
    assert out.out_dir == "elsewhere"


def test_cmd_train_writes_all_artifacts(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path, iterations=2)
    assert main(["train", "--config", str(path)]) == 0
    out = Path(cfg.out_dir)
    for name in ("metrics.csv", "trajectories.log", "summary.json",
                 "config.resolved"):
        assert (out / name).exists(), name
    for model_id in cfg.model_ids:
        assert (out / "ckpt" / f"{model_id}.ckpt").exists()
        assert (out / "ckpt_best" / f"{model_id}.ckpt").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 2
    assert "baseline" in summary
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("# metrics v1 seed=21")
    assert metrics[1].startswith("iteration,model_id,")
    # FullSeparate family A: both roles fire every trajectory, so both
    # models must take an update every iteration
    rows = [line.split(",")[:2] for line in metrics[2:]]
    for iteration in ("1", "2"):
        updated = {model for it, model in rows if it == iteration}
        assert updated == {"m_decompose", "m_answer"}
    log = (out / "trajectories.log").read_text().splitlines()
    assert log[0].startswith("# trajlog v1 seed=21 family=A")
    assert log[1].startswith("# vocab ")


def test_cmd_train_invalid_config_exits_2(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path)
    broken = path.read_text().replace("mapping.answer = m_answer\n", "")
    path.write_text(broken)
    assert main(["train", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "unmapped-agent-role" in err and "answer" in err


def test_cmd_train_iterations_zero_records_baseline(tmp_path):
    path, cfg = write_cfg(tmp_path, iterations=0)
    assert main(["train", "--config", str(path)]) == 0
    summary = json.loads((Path(cfg.out_dir) / "summary.json").read_text())
    assert summary["best_iteration"] == 0
    assert summary["baseline"] == summary["best"] == summary["final"]


def test_cmd_train_seed_override_recorded(tmp_path):
    path, cfg = write_cfg(tmp_path)
    assert main(["train", "--config", str(path), "--seed", "99",
                 "--iterations", "1"]) == 0
    resolved = (Path(cfg.out_dir) / "config.resolved").read_text()
    assert "run.seed = 99" in resolved
    assert "run.iterations = 1" in resolved


def test_cmd_eval_matches_untrained_baseline(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path, iterations=0)
    main(["train", "--config", str(path)])
    summary = json.loads((Path(cfg.out_dir) / "summary.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--config", str(path), "--ckpt",
                 str(Path(cfg.out_dir) / "ckpt")]) == 0
    line1 = capsys.readouterr().out
    assert f"f1={summary['baseline']!r}" in line1
    assert main(["eval", "--config", str(path), "--ckpt",
                 str(Path(cfg.out_dir) / "ckpt")]) == 0
    assert capsys.readouterr().out == line1


def test_cmd_eval_missing_checkpoint_exits_2(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path)
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--config", str(path), "--ckpt",
                 str(tmp_path / "empty")]) == 2
    assert "missing checkpoint" in capsys.readouterr().err


def test_cmd_eval_code_family_reports_used_turns(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path, family="D", iterations=0, n_train=6,
                          n_eval=4)
    main(["train", "--config", str(path)])
    capsys.readouterr()
    assert main(["eval", "--config", str(path), "--ckpt",
                 str(Path(cfg.out_dir) / "ckpt")]) == 0
    out = capsys.readouterr().out
    assert "all_passed=" in out
    assert "used_turns=" in out
    used = float(out.split("used_turns=")[1].split()[0])
    assert 1.0 <= used <= 3.0


def test_cmd_inspect_renders_and_flags_tampering(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path, iterations=1)
    main(["train", "--config", str(path)])
    log_path = Path(cfg.out_dir) / "trajectories.log"
    capsys.readouterr()
    assert main(["inspect", "--log", str(log_path), "--id", "s21-e1-t0"]) == 0
    out = capsys.readouterr().out
    assert "decompose" in out and "answer" in out
    assert "reward" in out

    # tamper with a total and expect the arithmetic check to flag it
    lines = log_path.read_text().splitlines()
    for i, line in enumerate(lines):
        parts = line.split("\t")
        if parts[0] == "step" and parts[7] != "-":
            comps = parts[7].split(",")
            comps[3] = repr(float(comps[3]) + 1.0)
            parts[7] = ",".join(comps)
            lines[i] = "\t".join(parts)
            break
    log_path.write_text("\n".join(lines) + "\n")
    assert main(["inspect", "--log", str(log_path), "--id", "s21-e1-t0"]) == 0
    captured = capsys.readouterr()
    assert "ARITHMETIC MISMATCH" in captured.out
    assert "mismatch" in captured.err


def test_cmd_inspect_unknown_id_exits_2(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path, iterations=1)
    main(["train", "--config", str(path)])
    log_path = Path(cfg.out_dir) / "trajectories.log"
    assert main(["inspect", "--log", str(log_path), "--id", "nope"]) == 2


def test_cmd_export_metrics_round_trips(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path, iterations=1)
    main(["train", "--config", str(path)])
    capsys.readouterr()
    assert main(["export-metrics", "--run", cfg.out_dir, "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out == (Path(cfg.out_dir) / "metrics.csv").read_text()
    assert main(["export-metrics", "--run", cfg.out_dir,
                 "--format", "parquet"]) == 2


def test_train_loop_rejects_bad_env_params(tmp_path):
    cfg = default_config("A", seed=1, iterations=1,
                         out_dir=str(tmp_path / "x"), n_train=50000)
    with pytest.raises(ConfigError):
        train_loop(cfg)


def test_cmd_train_divergence_exits_3(tmp_path, monkeypatch, capsys):
    import marlflow.cli as cli_mod
    from marlflow.errors import DivergenceError

    def explode(cfg):
        raise DivergenceError("non-finite loss for model 'm_answer'")

    path, _ = write_cfg(tmp_path)
    monkeypatch.setattr(cli_mod, "train_loop", explode)
    assert main(["train", "--config", str(path)]) == 3
    assert "divergence" in capsys.readouterr().err


def test_workflow_d_inspect_shows_rounds(tmp_path, capsys):
    path, cfg = write_cfg(tmp_path, family="D", iterations=1, n_train=6,
                          n_eval=2)
    main(["train", "--config", str(path)])
    log_path = Path(cfg.out_dir) / "trajectories.log"
    capsys.readouterr()
    assert main(["inspect", "--log", str(log_path), "--id", "s21-e1-t0"]) == 0
    out = capsys.readouterr().out
    assert "planner" in out and "coder" in out and "verify" in out
    assert "scores:" in out
