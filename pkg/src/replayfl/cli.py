"""Command-line front end.

Subcommands map one-to-one onto the experiment drivers:

    simulate      standard pipeline (shares, warm start, federated rounds)
    late-join     base federation, one client arrives mid-run
    pulse-probe   plain averaging with periodic centralized fine-tunes
    gen-data      write the synthetic corpus of a scenario to .fedr files
    eval          score a saved parameter snapshot against a .fedr file
                  or against a scenario's validation split

A scenario file is the experiment config JSON, optionally extended with
a "dataset" block (corpus shape) and, per subcommand, a "late_join" or
"pulse" block. `--seed` re-derives every seed stream from the new
master; `--out` redirects the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import nn
from .config import FedConfig, config_from_dict, save_config
from .data import gen_synthetic, load_fedr, save_fedr, stratified_split
from .errors import ConfigError, ReplayFLError
from .metrics import emit_metrics
from .simulate import (
    DatasetSpec,
    evaluate,
    load_params,
    make_federation_data,
    make_late_join_data,
    mean_ce_loss,
    run_late_join,
    run_pulse_probe,
    run_simulation,
    save_params,
)

# stream seeds are re-derived whenever the master seed is overridden
_DERIVED_SEED_KEYS = ("seed_data", "seed_init", "seed_select", "seed_clients")


def _load_scenario(path: str, seed_override: int | None,
                   ) -> tuple[FedConfig, DatasetSpec, dict, dict]:
    """Parse a scenario file into (config, dataset spec, join, pulse)."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    dataset = raw.pop("dataset", {})
    late_join = raw.pop("late_join", {})
    pulse = raw.pop("pulse", {})
    if seed_override is not None:
        raw["seed"] = seed_override
        for key in _DERIVED_SEED_KEYS:
            raw.pop(key, None)
    cfg = config_from_dict(raw, where=str(path))
    return cfg, DatasetSpec.from_dict(dataset), late_join, pulse


def _out_dir(args: argparse.Namespace, cfg: FedConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path("runs") / f"{cfg.scenario}-seed{cfg.seed}"


def _echo_scenario(out: Path, cfg: FedConfig, spec: DatasetSpec,
                   extras: dict) -> None:
    payload = {"config": cfg.to_dict(), "dataset": asdict(spec), **extras}
    (out / "scenario.json").write_text(json.dumps(payload, indent=2) + "\n")


def _finish_run(result, cfg: FedConfig, spec: DatasetSpec, out: Path,
                extras: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    param_count = nn.param_count(result.final_params)
    emit_metrics(result.all_reports, out, cfg, param_count,
                 n_classes=len(result.class_names),
                 pulses=result.pulses, join=result.join)
    save_params(result.final_params, result.class_names,
                out / "final_params.npz")
    save_config(cfg, out / "config.json")
    _echo_scenario(out, cfg, spec, extras)
    best = max(r.accuracy for r in result.all_reports)
    print(f"rounds run        : {len(result.reports)}")
    print(f"final accuracy    : {result.all_reports[-1].accuracy:.4f}")
    print(f"best accuracy     : {best:.4f}")
    print(f"head parameters   : {param_count}")
    print(f"outputs           : {out}")


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg, spec, _, _ = _load_scenario(args.config, args.seed)
    fed = make_federation_data(cfg, spec)
    result = run_simulation(cfg, fed)
    _finish_run(result, cfg, spec, _out_dir(args, cfg), {})
    return 0


def _cmd_late_join(args: argparse.Namespace) -> int:
    cfg, spec, join_block, _ = _load_scenario(args.config, args.seed)
    if "join_round" not in join_block or "n_new_classes" not in join_block:
        raise ConfigError(
            "late-join scenarios need a late_join block with join_round "
            "and n_new_classes")
    known = {"join_round", "n_new_classes"}
    unknown = set(join_block) - known
    if unknown:
        raise ConfigError(
            f"late_join block has unrecognized keys: {sorted(unknown)}")
    fed, joiner_data = make_late_join_data(cfg, spec,
                                           join_block["n_new_classes"])
    result = run_late_join(cfg, fed, join_block["join_round"], joiner_data)
    _finish_run(result, cfg, spec, _out_dir(args, cfg),
                {"late_join": join_block})
    join = result.join
    print(f"join round        : {join['join_round']}")
    print(f"new classes       : {join['new_class_names']}")
    print(f"old-class accuracy: {join['old_class_acc_before_kd']:.4f} -> "
          f"{join['old_class_acc_after_kd']:.4f} after distillation")
    return 0


def _cmd_pulse_probe(args: argparse.Namespace) -> int:
    cfg, spec, _, pulse_block = _load_scenario(args.config, args.seed)
    known = {"finetune_every", "finetune_epochs"}
    unknown = set(pulse_block) - known
    if unknown:
        raise ConfigError(
            f"pulse block has unrecognized keys: {sorted(unknown)}")
    every = pulse_block.get("finetune_every", 10)
    epochs = pulse_block.get("finetune_epochs", 1)
    fed = make_federation_data(cfg, spec)
    result = run_pulse_probe(cfg, fed, every, epochs)
    _finish_run(result, cfg, spec, _out_dir(args, cfg),
                {"pulse": {"finetune_every": every,
                           "finetune_epochs": epochs}})
    for p in result.pulses:
        print(f"pulse @ round {p.round_index:>4}: "
              f"{p.acc_before:.4f} -> {p.acc_after:.4f}")
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg, spec, _, _ = _load_scenario(args.config, args.seed)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    full = gen_synthetic(spec.n_classes, spec.per_class, cfg.d_in,
                         spec.spread, cfg.seed_data,
                         n_families=spec.n_families,
                         family_spread=spec.family_spread)
    train, val = stratified_split(full, spec.holdout_frac, cfg.seed_data)
    for name, ds in (("full", full), ("train", train), ("val", val)):
        path = out / f"{name}.fedr"
        save_fedr(ds, path)
        print(f"{name:<5} : {len(ds):>6} records, "
              f"{ds.n_classes} classes -> {path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if (args.data is None) == (args.config is None):
        raise ConfigError(
            "eval needs exactly one data source: --data <file.fedr> or "
            "--config <scenario.json> (its validation split)")
    params, class_names = load_params(args.params)
    if args.data is not None:
        ds = load_fedr(args.data)
    else:
        cfg, spec, _, _ = _load_scenario(args.config, args.seed)
        full = gen_synthetic(spec.n_classes, spec.per_class, cfg.d_in,
                             spec.spread, cfg.seed_data,
                             n_families=spec.n_families,
                             family_spread=spec.family_spread)
        _, ds = stratified_split(full, spec.holdout_frac, cfg.seed_data)
    accuracy, per_class = evaluate(params, ds)
    loss = mean_ce_loss(params, ds)
    print(f"records      : {len(ds)}")
    print(f"accuracy     : {accuracy:.4f}")
    print(f"mean CE loss : {loss:.4f}")
    for cid, acc in enumerate(per_class):
        name = class_names[cid] if cid < len(class_names) else f"class {cid}"
        print(f"  {name:<20} {acc:.4f}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "accuracy": accuracy,
            "loss": loss,
            "per_class": {class_names[c]: float(a)
                          for c, a in enumerate(per_class)},
            "records": len(ds),
        }
        (out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
        print(f"outputs      : {out / 'eval.json'}")
    return 0


def _add_common(sub: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        sub.add_argument("--config", required=True,
                         help="scenario JSON file")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the master seed (re-derives all streams)")
    sub.add_argument("--out", default=None,
                     help="output directory (default runs/<scenario>-seed<n>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="replayfl",
        description="Replay-assisted federated learning over frozen "
                    "embeddings: simulation drivers and data tools.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("simulate", help="run the standard pipeline")
    _add_common(p)
    p.set_defaults(func=_cmd_simulate)

    p = subs.add_parser("late-join", help="run with a late-arriving client")
    _add_common(p)
    p.set_defaults(func=_cmd_late_join)

    p = subs.add_parser("pulse-probe",
                        help="plain averaging with periodic fine-tune pulses")
    _add_common(p)
    p.set_defaults(func=_cmd_pulse_probe)

    p = subs.add_parser("gen-data",
                        help="write a scenario's synthetic corpus as .fedr")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = subs.add_parser("eval",
                        help="score a parameter snapshot on a .fedr dataset")
    p.add_argument("--params", required=True,
                   help="parameter snapshot (.npz from a run directory)")
    p.add_argument("--data", default=None, help=".fedr dataset to score")
    p.add_argument("--config", default=None,
                   help="scenario JSON; scores on its validation split")
    _add_common(p, with_config=False)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ReplayFLError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
