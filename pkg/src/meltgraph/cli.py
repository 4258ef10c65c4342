"""Command line entry point: ``meltgraph generate|train|evaluate|compare``.

Exit codes: 0 success, 2 configuration error, 3 data contract violation,
4 numerical failure. ``MELTGRAPH_LOG_LEVEL`` sets log verbosity (default
WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .anomaly import VARIANTS
from .errors import ConfigError, MeltGraphError
from .models import KINDS, params_to_json

log = logging.getLogger("meltgraph")

LOG_ENV = "MELTGRAPH_LOG_LEVEL"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configuration seed")


def build_parser():
    parser = _Parser(prog="meltgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write synthetic layer CSVs and a manifest")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.add_argument("--layers", type=int, help="number of nominal training layers")
    p.add_argument("--eval-layers", type=int, help="number of anomalous evaluation layers")

    p = sub.add_parser("train", help="fit a model on the nominal layers")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--model", choices=KINDS, help="model kind (default from config)")
    p.add_argument("--layers", type=Path, nargs="+",
                   help="train on these layer CSVs instead of the manifest's training split")

    p = sub.add_parser("evaluate", help="score evaluation layers with trained params")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--params", type=Path, required=True, help="params.json from train")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--variant", choices=VARIANTS, action="append",
                   help="score variant; repeat for several (default from config)")
    p.add_argument("--holdout", action="store_true",
                   help="choose the threshold on half the eval layers, report on the rest")
    p.add_argument("--no-importance", action="store_true", help="skip permutation importance")

    p = sub.add_parser("compare", help="train every model kind and tabulate the results")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--models", help="comma-separated rows, e.g. fc,gcn or Graph-T-A")
    return parser


def _cmd_generate(args, cfg):
    manifest = ex.generate(cfg, args.out, args.force, args.layers, args.eval_layers)
    print(f"wrote {len(manifest['layers'])} layers to {args.out}")


def _cmd_train(args, cfg):
    if args.layers:
        scans = [ex.read_layer(p) for p in args.layers]
    else:
        scans = ex.load_layers(args.data, "train")
    params, history = ex.fit(cfg, ex.graphs_for(cfg, scans), args.model)
    ex.write_training(args.out, params, history)
    print(f"{params.spec.kind}: final loss {history[-1] if history else float('nan')!r}")


def _eval_inputs(cfg, data):
    train_graphs = ex.graphs_for(cfg, ex.load_layers(data, "train"))
    eval_names = ex.layer_names(data, "eval")
    eval_graphs = ex.graphs_for(cfg, ex.load_layers(data, "eval"))
    return train_graphs, eval_graphs, eval_names


def _cmd_evaluate(args, cfg):
    if args.holdout:
        cfg = replace(cfg, evaluate=replace(cfg.evaluate, threshold_mode="holdout"))
    params = ex.read_params(args.params)
    train_graphs, eval_graphs, names = _eval_inputs(cfg, args.data)
    for variant in args.variant or [cfg.evaluate.variant]:
        ev = ex.evaluate_model(cfg, params, train_graphs, eval_graphs, variant,
                               importance=False if args.no_importance else None)
        ex.write_evaluation(args.out, ev, names, variant)
        r = ev.report
        print(f"{r.model} {variant}: AP {r.ap:.4f} AUROC {r.auroc:.4f} F1 {r.f1:.4f} "
              f"threshold {r.threshold:.3f}")


def _cmd_compare(args, cfg):
    rows = ex.parse_models(args.models)
    train_graphs, eval_graphs, names = _eval_inputs(cfg, args.data)
    results, trained = ex.compare(cfg, train_graphs, eval_graphs, rows)
    for ev in results:
        ex.write_evaluation(args.out, ev, names, ev.report.model)
    for kind, params in sorted(trained.items()):
        ex.write_atomic(args.out / f"params_{kind}.json", params_to_json(params))
    ex.write_atomic(args.out / "compare.csv", ex.compare_csv(results))
    sys.stdout.write(ex.compare_csv(results))


COMMANDS = {"generate": _cmd_generate, "train": _cmd_train, "evaluate": _cmd_evaluate,
            "compare": _cmd_compare}


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"{LOG_ENV}={level!r} is not a logging level")
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = ex.load_config(args.config, args.seed)
        COMMANDS[args.command](args, cfg)
    except MeltGraphError as exc:
        print(f"meltgraph: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"meltgraph: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
