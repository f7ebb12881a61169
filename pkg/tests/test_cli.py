import subprocess
import sys

import pytest

from isep import trainer as TR
from isep.cli import ALL_KEYS, ValidationError, main, parse_cli, read_config_file

TINY = ["--total-steps", "12", "--eval-every", "6", "--eval-rollouts", "40", "--dataset-size", "100",
        "--batch-size", "16", "--critic-hidden", "8,8", "--policy-hidden", "8,8"]


def test_train_flags_over_preset():
    ns, cfg = parse_cli(["train", "--env", "danger_bandit", "--p", "0.5", "--seed", "7", "--out", "x"])
    preset = TR.preset_config("danger_bandit")
    assert cfg.hp.p == 0.5 and cfg.seed == 7
    assert cfg.hp.tau == preset.hp.tau and cfg.total_steps == preset.total_steps
    assert cfg.hp.beta == preset.hp.beta and cfg.critic_hidden == preset.critic_hidden


def test_p_out_of_range_exit_1(capsys):
    assert main(["train", "--p", "1.5", "--out", "x"]) == 1
    assert "[0, 1]" in capsys.readouterr().err


def test_validation_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.txt"), "--out", "x"]) == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("p=0.3\n# comment\nwidth=3\n")
    with pytest.raises(ValidationError, match="bad.txt:3"):
        read_config_file(str(bad))
    assert main(["train", "--config", str(bad), "--out", "x"]) == 1
    assert main(["train", "--tau", "abc", "--out", "x"]) == 1
    assert main(["train", "--env", "tabular_chain", "--out", "x"]) == 1
    assert main(["bogus"]) == 1
    assert main(["eval", "--run", str(tmp_path)]) == 1
    capsys.readouterr()


def test_file_then_flags_precedence(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("p = 0.2\ntau=0.8  # inline comment\nseed=3\n")
    _, cfg = parse_cli(["train", "--config", str(cfg_file), "--p", "0.4", "--out", "x"])
    assert (cfg.hp.p, cfg.hp.tau, cfg.seed) == (0.4, 0.8, 3)


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in ALL_KEYS:
        assert "--" + key.replace("_", "-") in out
    assert "published" in out


def test_sweep_children_differ_only_in_p():
    ns, cfg = parse_cli(["sweep", "--p-grid", "0.0,0.3,0.5,1.0", "--out", "x"])
    kids = TR.child_configs(cfg, [float(x) for x in ns.p_grid.split(",")], [0])
    assert len(kids) == 4 and [k.hp.p for k in kids] == [0.0, 0.3, 0.5, 1.0]
    assert main(["sweep", "--p-grid", "0.0,2.0", "--out", "x"]) == 1


def test_end_to_end_smoke(tmp_path, capsys):
    data = tmp_path / "data.csv"
    assert main(["gen-data", "--env", "multimodal_bandit", "--n", "100", "--seed", "1", "--out", str(data)]) == 0

    run = tmp_path / "run"
    assert main(["train", "--env", "multimodal_bandit", "--policy-kind", "flow", "--dataset", str(data),
                 "--out", str(run)] + TINY) == 0
    for name in ("config.txt", "metrics.csv", "actions.csv", "flow.bin", "flow_init.bin", "v.bin"):
        assert (run / name).exists(), name
    first = (run / "metrics.csv").read_bytes()
    assert main(["train", "--env", "multimodal_bandit", "--policy-kind", "flow", "--dataset", str(data),
                 "--out", str(run)] + TINY) == 0
    assert (run / "metrics.csv").read_bytes() == first

    assert main(["eval", "--run", str(run), "--n", "50"]) == 0
    assert (run / "eval_actions.csv").read_text().count("\n") == 51

    grun = tmp_path / "grun"
    assert main(["train", "--out", str(grun)] + TINY) == 0
    assert main(["eval", "--run", str(grun), "--n", "20"]) == 0

    sweep = tmp_path / "sweep"
    assert main(["sweep", "--p-grid", "0.0,1.0", "--seeds", "0,1", "--out", str(sweep)] + TINY) == 0
    assert (sweep / "sweep.csv").read_text().count("\n") == 3

    abl = tmp_path / "abl"
    assert main(["ablate", "--seeds", "0", "--out", str(abl)] + TINY) == 0
    rows = (abl / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("variant,seed") and len(rows) == 3

    th = tmp_path / "theory.csv"
    assert main(["theory-check", "--instances", "3", "--iters", "60", "--out", str(th)]) == 0
    assert th.read_text().startswith("instance,seed,delta_tau,delta_sub,p_bound_min,violations\n")
    out = capsys.readouterr().out
    assert "0 violations over 3 instances" in out

    for kind, inputs in (("scatter", [str(run / "actions.csv"), str(run / "eval_actions.csv")]),
                         ("curve", [str(run / "metrics.csv"), str(grun / "metrics.csv")]),
                         ("bars", [str(sweep / "sweep.csv")])):
        svg = tmp_path / f"{kind}.svg"
        assert main(["plot", "--kind", kind, "--env", "multimodal_bandit", "--out", str(svg)] + ["--inputs"] + inputs) == 0
        assert svg.read_text().startswith("<svg")
    assert main(["plot", "--kind", "curve", "--inputs", str(tmp_path / "nope.csv"), "--out", str(svg)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code_2(tmp_path, capsys):
    data = tmp_path / "huge.csv"
    assert main(["gen-data", "--env", "danger_bandit", "--n", "100", "--out", str(data)]) == 0
    lines = data.read_text().splitlines()
    rows = [row.split(",") for row in lines[1:]]
    data.write_text("\n".join([lines[0]] + [",".join(r[:3] + ["1e200"] + r[4:]) for r in rows]) + "\n")
    assert main(["train", "--dataset", str(data), "--out", str(tmp_path / "r")] + TINY) == 2
    assert "step 1" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "isep", "train", "--p", "-1", "--out", "x"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "[0, 1]" in res.stderr
