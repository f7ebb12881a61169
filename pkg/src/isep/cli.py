"""Command-line front end.

Configuration precedence: preset defaults < ``--config`` key=value file < flags.
Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import envs_data as E
from . import plots
from . import theory_checks as T
from . import trainer as TR
from .critic import HyperParams
from .policy_flow import FlowPolicyParams
from .policy_gauss import GaussianPolicyParams
from .rng import SplitMix64
from .tensor_nn import AdamVector, NonFiniteError, load_mlp

log = logging.getLogger("isep")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# key -> (type, help). Provenance notes give the published per-task ranges.
HP_KEYS = {
    "p": (float, "expansion probability in [0, 1]; published per-task settings 0.2-0.5"),
    "tau": (float, "expectile level in (0, 1); published per-task settings 0.7 or 0.8"),
    "beta": (float, "advantage temperature > 0; published per-task settings 0.2-10"),
    "w": (float, "guidance weight for the flow sampler; published per-task settings 0.5-3"),
    "gamma": (float, "discount in [0, 1); published default 0.99, bandit presets use 0"),
    "rho": (float, "Polyak coefficient in [0, 1); published default 0.995"),
    "lr_v": (float, "value learning rate; published default 3e-4"),
    "lr_q": (float, "Q learning rate; published default 3e-4"),
    "lr_pi": (float, "policy learning rate; published default 3e-4"),
    "batch_size": (int, "minibatch size; published default 256"),
    "omega_max": (float, "cap on the advantage weight; published default 100"),
    "flow_steps": (int, "Euler steps of the flow sampler; published default 10"),
    "token_dropout": (float, "null-token rate for guidance training; published default 0.10"),
    "expand_token": (int, "conditioning token for expansion samples (0, 1 or 2)"),
    "gate_mode": (str, "per_step or per_element gate"),
}


def _hidden(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"hidden sizes must be comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise ValueError(f"hidden sizes must be positive, got {text!r}")
    return sizes


RUN_KEYS = {
    "env": (str, f"environment: {E.DANGER} or {E.MULTIMODAL}"),
    "policy_kind": (str, f"policy: {', '.join(TR.POLICY_KINDS)}"),
    "total_steps": (int, "number of gradient steps"),
    "eval_every": (int, "evaluate every this many steps"),
    "eval_rollouts": (int, "policy draws per evaluation"),
    "seed": (int, "run seed (also seeds a generated dataset)"),
    "dataset": (str, "dataset file; generated from the seed when absent"),
    "dataset_size": (int, "size of a generated dataset"),
    "critic_hidden": (_hidden, "critic hidden sizes, e.g. 32,32"),
    "policy_hidden": (_hidden, "policy hidden sizes, e.g. 32,32"),
}
ALL_KEYS = {**HP_KEYS, **RUN_KEYS}


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def preset_name(env: str, policy_kind: str | None) -> str:
    if env == E.DANGER:
        return "danger_bandit"
    if env == E.MULTIMODAL:
        return f"multimodal_{policy_kind or TR.FLOW}"
    raise ValidationError(f"unknown env {env!r}; choose {E.DANGER} or {E.MULTIMODAL}")


def read_config_file(path: str) -> dict[str, str]:
    """Plain key=value lines; blank lines and ``#`` comments ignored."""
    if not Path(path).is_file():
        raise ValidationError(f"config file {path} does not exist")
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{i}: expected key=value")
        key, val = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in ALL_KEYS:
            raise ValidationError(f"{path}:{i}: unknown key {key!r}")
        out[key] = val
    return out


def write_config_file(config: TR.TrainConfig, path: Path) -> None:
    d = TR.config_dict(config)
    lines = []
    for key in ALL_KEYS:
        src = {"env": "env_id", "dataset": "dataset_path"}.get(key, key)
        val = d[src]
        if val is None:
            continue
        if isinstance(val, (tuple, list)):
            val = ",".join(str(x) for x in val)
        lines.append(f"{key}={val}")
    path.write_text("\n".join(lines) + "\n")


def resolve_config(file_values: dict[str, str], flag_values: dict[str, object]) -> TR.TrainConfig:
    """Merge file < flags on top of the preset picked by env and policy_kind."""
    raw: dict[str, object] = {}
    for key, text in file_values.items():
        try:
            raw[key] = ALL_KEYS[key][0](text)
        except ValueError as exc:
            raise ValidationError(f"bad value for {key}: {exc}") from None
    raw.update({k: v for k, v in flag_values.items() if v is not None})
    env = raw.pop("env", E.DANGER)
    kind = raw.get("policy_kind")
    if env == E.DANGER and kind is None:
        kind = TR.GAUSSIAN
    name = preset_name(env, kind)
    if name not in TR.PRESETS:
        raise ValidationError(f"no preset for env={env} policy_kind={kind}")
    if "dataset" in raw:
        path = raw.pop("dataset")
        if not Path(path).is_file():
            raise ValidationError(f"dataset file {path} does not exist")
        raw["dataset_path"] = path
    try:
        return TR.preset_config(name, **raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value file; flags override it")
    for key, (typ, help_text) in ALL_KEYS.items():
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=str, default=None, help=help_text)


def _flag_values(ns: argparse.Namespace) -> dict[str, object]:
    out = {}
    for key, (typ, _) in ALL_KEYS.items():
        text = getattr(ns, key)
        if text is None:
            continue
        try:
            out[key] = typ(text)
        except ValueError as exc:
            raise ValidationError(f"bad value for --{key.replace('_', '-')}: {exc}") from None
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isep", description="Offline RL with stochastic in-sample/expansion interpolation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a bandit dataset")
    g.add_argument("--env", required=True, choices=[E.DANGER, E.MULTIMODAL])
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one configuration")
    _add_config_flags(t)
    t.add_argument("--out", required=True, help="run directory")

    s = sub.add_parser("sweep", help="train over a p grid and seeds")
    _add_config_flags(s)
    s.add_argument("--p-grid", default="0.0,0.3,0.5,1.0")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="sample and score actions from a finished run")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--n", type=int, default=1_000)
    e.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="gated flow policy vs deterministic interpolation on the multimodal bandit")
    _add_config_flags(a)
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--out", required=True)

    th = sub.add_parser("theory-check", help="check the value-safety bound on random tabular MDPs")
    th.add_argument("--instances", type=int, default=50)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--tau", type=float, default=0.7)
    th.add_argument("--iters", type=int, default=300)
    th.add_argument("--out", required=True, help="CSV path")

    pl = sub.add_parser("plot", help="render an SVG figure")
    pl.add_argument("--kind", required=True, choices=plots.PLOT_KINDS)
    pl.add_argument("--inputs", nargs="*", default=[])
    pl.add_argument("--labels", nargs="*", default=[])
    pl.add_argument("--env", default=E.DANGER, choices=[E.DANGER, E.MULTIMODAL])
    pl.add_argument("--metric", default="eval_reward_mean")
    pl.add_argument("--title", default="")
    pl.add_argument("--out", required=True)
    return parser


def parse_cli(argv: list[str]) -> tuple[argparse.Namespace, TR.TrainConfig | None]:
    """Parse argv; for config-taking subcommands also return the resolved TrainConfig."""
    ns = build_parser().parse_args(argv)
    config = None
    if ns.command in ("train", "sweep", "ablate"):
        file_values = read_config_file(ns.config) if ns.config else {}
        flags = _flag_values(ns)
        if ns.command == "ablate":
            file_values.setdefault("env", E.MULTIMODAL)
            flags.setdefault("env", file_values["env"])
            flags.setdefault("policy_kind", TR.FLOW)
        config = resolve_config(file_values, flags)
    return ns, config


def load_run(run_dir: Path) -> tuple[TR.TrainConfig, GaussianPolicyParams | FlowPolicyParams]:
    cfg_path = run_dir / "config.txt"
    config = resolve_config(read_config_file(str(cfg_path)), {})
    if config.policy_kind == TR.FLOW:
        net = load_mlp(run_dir / "flow.bin", "mish")
        return config, FlowPolicyParams(net, 1, 2)
    mean = load_mlp(run_dir / "pi_mean.bin", "relu")
    log_std = np.array([float(x) for x in (run_dir / "pi_log_std.txt").read_text().split()])
    return config, GaussianPolicyParams(mean, AdamVector(log_std))


def _print_eval(ev: dict | None) -> None:
    if ev is None:
        print("no evaluation recorded")
        return
    for k, v in ev.items():
        if v is not None:
            print(f"{k}: {v:.6g}")


def cmd_gen_data(ns) -> int:
    ds = E.generate_dataset(ns.env, ns.n, ns.seed)
    E.save_dataset(ds, ns.out)
    print(f"wrote {len(ds)} transitions to {ns.out}")
    return EXIT_OK


def cmd_train(ns, config: TR.TrainConfig) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(config, out / "config.txt")
    table, state = TR.run_training(config, out)
    if table.diverged_at is not None:
        print(f"training aborted at step {table.diverged_at} (non-finite value)", file=sys.stderr)
        return EXIT_RUNTIME
    _, actions = TR.evaluate(state, config)
    plots.write_actions(actions, out / "actions.csv")
    _print_eval(table.final_eval)
    return EXIT_OK


def cmd_sweep(ns, config: TR.TrainConfig) -> int:
    grid, seeds = _float_list(ns.p_grid), _int_list(ns.seeds)
    TR.child_configs(config, grid, seeds)  # validates every child before any training starts
    rows = TR.p_sweep(config, grid, seeds, ns.out)
    print(TR.sweep_csv(rows), end="")
    return EXIT_RUNTIME if any(r.n_diverged for r in rows) else EXIT_OK


def cmd_eval(ns) -> int:
    run = Path(ns.run)
    if not (run / "config.txt").is_file():
        raise ValidationError(f"{run} is not a run directory (config.txt missing)")
    config, policy = load_run(run)
    rng = SplitMix64(ns.seed).spawn("eval")
    actions = TR.sample_eval_actions(policy, config, ns.n, rng)
    plots.write_actions(actions, run / "eval_actions.csv")
    _print_eval(TR.score_actions(config.env_id, actions))
    return EXIT_OK


ABLATION_HEADER = ["variant", "seed", "eval_opt_island_rate", "eval_subopt_island_rate", "eval_reward_mean",
                   "diverged"]


def run_ablation(config: TR.TrainConfig, seeds: list[int], out_dir: Path | None = None) -> list[list]:
    rows = []
    for variant in (TR.FLOW, TR.DET_INTERP):
        base = TR.preset_config(preset_name(config.env_id, variant))
        cfg = replace(base, hp=config.hp, total_steps=config.total_steps, eval_every=config.eval_every,
                      eval_rollouts=config.eval_rollouts, dataset_path=config.dataset_path,
                      dataset_size=config.dataset_size, critic_hidden=config.critic_hidden,
                      policy_hidden=config.policy_hidden)
        for seed in seeds:
            run_dir = None if out_dir is None else out_dir / f"{variant}_seed{seed}"
            table, _ = TR.run_training(replace(cfg, seed=seed), run_dir)
            ev = table.final_eval or {}
            rows.append([variant, seed, ev.get("eval_opt_island_rate"), ev.get("eval_subopt_island_rate"),
                         ev.get("eval_reward_mean"), table.diverged_at is not None])
    return rows


def cmd_ablate(ns, config: TR.TrainConfig) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(config, _int_list(ns.seeds), out)
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_HEADER)
        for r in rows:
            wr.writerow([r[0], r[1]] + ["" if x is None else repr(x) for x in r[2:5]] + [int(r[5])])
    for variant in (TR.FLOW, TR.DET_INTERP):
        occ = [r[2] for r in rows if r[0] == variant and r[2] is not None]
        print(f"{variant}: mean optimal-island occupancy {np.mean(occ) if occ else float('nan'):.3f}")
    return EXIT_RUNTIME if any(r[5] for r in rows) else EXIT_OK


def cmd_theory_check(ns) -> int:
    if ns.instances < 1 or not 0.0 < ns.tau < 1.0 or ns.iters < 1:
        raise ValidationError("need instances >= 1, tau in (0, 1), iters >= 1")
    report = T.theorem_sweep(ns.instances, ns.seed, ns.tau, ns.iters, probe_margin=None)
    print(f"{'inst':>4} {'seed':>6} {'d_tau':>10} {'d_sub':>10} {'p_bound':>10} result")
    for r in report.results:
        status = "pass" if r.violations == 0 else f"FAIL ({r.violations})"
        print(f"{r.instance:>4} {r.seed:>6} {r.delta_tau:>10.4g} {r.delta_sub:>10.4g} {r.p_bound_min:>10.4g} {status}")
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    print(f"{report.total_violations} violations over {len(report.results)} instances "
          f"({report.rejected_seeds} draws rejected)")
    return EXIT_OK if report.total_violations == 0 else EXIT_RUNTIME


def cmd_plot(ns) -> int:
    spec = plots.PlotSpec(ns.kind, ns.inputs, ns.out, ns.title, ns.labels, ns.env, ns.metric)
    try:
        spec.validate()
    except (ValueError, FileNotFoundError) as exc:
        raise ValidationError(str(exc)) from None
    print(f"wrote {plots.emit_plot(spec)}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        if any(a in ("-h", "--help") for a in argv):
            build_parser().parse_args(argv)  # prints help, raises SystemExit(0)
        ns, config = parse_cli(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
        if ns.command == "gen-data":
            return cmd_gen_data(ns)
        if ns.command == "train":
            return cmd_train(ns, config)
        if ns.command == "sweep":
            return cmd_sweep(ns, config)
        if ns.command == "eval":
            return cmd_eval(ns)
        if ns.command == "ablate":
            return cmd_ablate(ns, config)
        if ns.command == "theory-check":
            return cmd_theory_check(ns)
        return cmd_plot(ns)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TR.TrainingAborted, NonFiniteError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
