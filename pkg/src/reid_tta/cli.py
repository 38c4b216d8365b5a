"""Command-line entry points.

Subcommands:

* ``pretrain``       train a source model from a world+extractor config file
                     and write a checkpoint;
* ``adapt``          run one method over a scenario, writing metrics CSV,
                     summary JSON, and the final checkpoint;
* ``sweep``          repeat ``adapt`` along one hyperparameter axis into a
                     combined long-format CSV;
* ``dump-features``  export gallery and per-phase query features as CSV;
* ``gradcheck``      run the finite-difference gradient suite.

Config files are JSON. Any hard error exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .adaptation import SelectionStrategy, TempConfig
from .baselines import METHOD_NAMES
from .extractor import ExtractorConfig, PretrainConfig, load_checkpoint, pretrain, save_checkpoint
from .gradcheck import run_gradient_suite
from .harness import SWEEP_AXES, RunConfig, dump_features, run_experiment, sweep
from .metrics import write_records_csv
from .scenario import GalleryEvent, QueryBatch, build_stream, generate_world, load_scenario, source_training_set


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _temp_config_from_args(args, base: TempConfig | None = None) -> TempConfig:
    cfg = base or TempConfig()
    updates = {}
    if args.k is not None:
        updates["k"] = args.k
    if args.lam is not None:
        updates["lam"] = args.lam
    if args.batch_size is not None:
        updates["batch_size"] = args.batch_size
    if args.selection is not None:
        updates["selection"] = SelectionStrategy.parse(args.selection)
    if getattr(args, "learning_rate", None) is not None:
        updates["learning_rate"] = args.learning_rate
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _add_temp_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, default=None, help="gallery candidates per query")
    parser.add_argument("--lambda", dest="lam", type=float, default=None,
                        help="anti-forgetting regularization weight")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--selection", type=str, default=None,
                        choices=[s.value for s in SelectionStrategy])
    parser.add_argument("--learning-rate", type=float, default=None)


def cmd_pretrain(args) -> int:
    cfg = _load_json(args.config)
    from .scenario import WorldConfig

    world = generate_world(WorldConfig.from_dict(cfg["world"]))
    inputs, labels = source_training_set(world)
    extractor_config = ExtractorConfig.from_dict(cfg["extractor"])
    pre_cfg = PretrainConfig(**cfg.get("pretrain", {}))
    if args.seed is not None:
        pre_cfg = dataclasses.replace(pre_cfg, seed=args.seed[0])
    result = pretrain(inputs, labels, extractor_config, pre_cfg)
    save_checkpoint(args.out, result.params, result.head)
    print(f"pretrained on {len(labels)} samples / {len(np.unique(labels))} identities")
    print(f"epoch loss: first={result.epoch_losses[0]:.4f} last={result.epoch_losses[-1]:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_adapt(args) -> int:
    base_temp = None
    run_kwargs: dict = {}
    if args.config:
        cfg = _load_json(args.config)
        if "temp" in cfg:
            t = cfg["temp"]
            base_temp = TempConfig(
                k=t.get("k", 50),
                lam=t.get("lambda", t.get("lam", 0.0001)),
                learning_rate=t.get("learning_rate", 0.00035),
                selection=SelectionStrategy.parse(t.get("selection", "top-k")),
                batch_size=t.get("batch_size", 16),
            )
        run_kwargs = {k: cfg[k] for k in ("run_id",) if k in cfg}
    scenario = load_scenario(args.scenario)
    config = RunConfig(
        method=args.method,
        scenario=scenario,
        temp=_temp_config_from_args(args, base_temp),
        seeds=tuple(args.seed),
        out_dir=args.out,
        **run_kwargs,
    )
    result = run_experiment(config, checkpoint_path=args.checkpoint)
    for phase, entry in sorted(result.summary["methods"][config.method].items(), key=lambda kv: int(kv[0])):
        label = entry.get("label", f"phase {phase}")
        print(f"{label}: top-1 CMC {entry['cmc_top1_mean']:.4f} +/- {entry['cmc_top1_std']:.4f} "
              f"(entropy {entry['reid_entropy_mean']:.4f})")
    if result.paths:
        print(f"metrics written to {result.paths['metrics']}")
    return 0


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    config = RunConfig(
        method=args.method,
        scenario=scenario,
        temp=_temp_config_from_args(args),
        seeds=tuple(args.seed),
        out_dir=args.out,
    )
    values = None
    if args.values:
        values = [v for v in args.values.split(",") if v]
    tagged, out_path = sweep(config, args.axis, values, checkpoint_path=args.checkpoint)
    errors = sum(1 for _, r in tagged if r.error_tag)
    print(f"sweep over {args.axis}: {len(tagged)} rows, {errors} error-tagged")
    if out_path:
        print(f"combined CSV written to {out_path}")
    return 0


def cmd_dump_features(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    scenario = load_scenario(args.scenario)
    world = generate_world(scenario.world)
    stream = build_stream(scenario, world, args.seed[0])
    first = True
    for event in stream.events():
        if isinstance(event, GalleryEvent):
            dump_features(params, event.images, event.labels, "gallery", event.phase,
                          args.out, append=not first)
            first = False
        elif isinstance(event, QueryBatch):
            dump_features(params, event.images, event.labels, "query", event.phase,
                          args.out, append=not first)
            first = False
    print(f"features written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = run_gradient_suite(verbose=True, seed=args.seed[0])
    if worst > 1e-3:
        print(f"FAILED: max relative error {worst:.3e} exceeds 1e-3")
        return 1
    print(f"ok: max relative error {worst:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reid-tta")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, nargs="+", default=[0, 1, 2])

    p = sub.add_parser("pretrain", parents=[common], help="train a source checkpoint")
    p.add_argument("--config", required=True, help="JSON with world/extractor/pretrain sections")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common], help="run one method over a scenario")
    p.add_argument("--config", default=None, help="optional JSON run config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--method", required=True, choices=list(METHOD_NAMES))
    p.add_argument("--out", default=None, help="output directory")
    _add_temp_flags(p)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("sweep", parents=[common], help="sweep one hyperparameter axis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--method", required=True, choices=list(METHOD_NAMES))
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", default=None, help="comma-separated axis values (default: standard grid)")
    p.add_argument("--out", default=None)
    _add_temp_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("dump-features", parents=[common], help="export features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_features)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
