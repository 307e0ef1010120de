#!/usr/bin/env python3
# main.py - Command-line entry point: pretrain / train / attack / eval / run / gradcheck / costmodel

import argparse
import logging
import sys
from typing import List, Optional

from cost_model import cost_ratio, cost_table, inference_cost_abnn, inference_cost_plain
from error_handler import ABNNError, ConfigError, PipelineStageError, format_stage_error, handle_stage_error
from experiment_config import load_experiment_config
from gradcheck import GRADCHECK_TOLERANCE, gradcheck_passed, run_gradcheck_suite
from logging_setup import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_USAGE = 2
EXIT_COST_MISMATCH = 3
EXIT_GRADCHECK_FAILED = 4

PIPELINE_VERBS = ("pretrain", "train", "attack", "eval", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abnn", description="Adaptive batch normalization adversarial defense")
    parser.add_argument("--log-level", default=None, help="overrides ABNN_LOG_LEVEL")
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb in PIPELINE_VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="output directory")
        if verb == "run":
            p.add_argument("--seeds", type=int, nargs="+", default=None, help="seed sweep")
            p.add_argument("--workers", type=int, default=1)

    g = sub.add_parser("gradcheck")
    g.add_argument("--cases", type=int, default=4, help="random cases per operation")
    g.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("costmodel")
    c.add_argument("setting", help="t_max=<k>")
    return parser


def parse_t_max(setting: str) -> int:
    key, _, value = setting.partition("=")
    if key != "t_max" or not value.isdigit() or int(value) < 1:
        raise ConfigError(f"expected t_max=<k> with k >= 1, got {setting!r}")
    return int(value)


def cmd_costmodel(setting: str) -> int:
    t_max = parse_t_max(setting)
    print(f"Training cost per step (t_max = {t_max}):")
    for row in cost_table(t_max):
        print(f"  {row['method']:<11} {row['training_cost']:>5}   {row['ratio_to_abnn']:.2f}x ABNN")
    print(f"PGD-AT / ABNN ratio: {cost_ratio(t_max):.4f}")
    print(f"Inference passes: plain {inference_cost_plain()}N, ABNN {inference_cost_abnn()}N")
    return EXIT_OK


def cmd_gradcheck(cases: int, seed: int) -> int:
    results = run_gradcheck_suite(cases_per_op=cases, seed=seed)
    for name, error in results.items():
        mark = "✓" if error < GRADCHECK_TOLERANCE else "✗"
        print(f"{mark} {name:<24} {error:.3e}")
    worst = max(results, key=results.get)
    print(f"Worst relative error: {results[worst]:.3e} ({worst}), "
          f"{cases * len(results)} cases, tolerance {GRADCHECK_TOLERANCE:g}")
    return EXIT_OK if gradcheck_passed(results) else EXIT_GRADCHECK_FAILED


def _report_exit(report) -> int:
    if report.get("all_costs_verified"):
        print("✓ all cost-model verifications passed")
        return EXIT_OK
    print("✗ cost-model verification failed")
    return EXIT_COST_MISMATCH


def cmd_pipeline(args) -> int:
    import pipeline

    config = load_experiment_config(args.config)
    seeds = args.seeds if args.verb == "run" and args.seeds else None
    if args.verb == "run" and seeds is None and args.seed is None:
        seeds = config.seeds
    if seeds:
        merged = pipeline.run_seed_sweep(config, seeds, args.out, workers=args.workers)
        for method, medians in merged["medians"].items():
            print(f"  {method:<11} clean {medians['clean_acc']:.3f}  pgd {medians['pgd_acc']:.3f}  "
                  f"roa {medians['roa_acc']:.3f}")
        return _report_exit(merged)
    if args.verb == "run":
        return _report_exit(pipeline.run_experiment(config, args.out, args.seed))
    if args.verb == "eval":
        return _report_exit(pipeline.run_eval(config, args.out, args.seed))
    runner = {"pretrain": pipeline.run_pretrain, "train": pipeline.run_train, "attack": pipeline.run_attack}
    ctx = runner[args.verb](config, args.out, args.seed)
    print(f"✓ {args.verb} finished: {ctx.out_dir}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.verb == "costmodel":
            return cmd_costmodel(args.setting)
        if args.verb == "gradcheck":
            return cmd_gradcheck(args.cases, args.seed)
        return cmd_pipeline(args)
    except PipelineStageError as e:
        print(f"✗ {format_stage_error(e.report)}", file=sys.stderr)
        return EXIT_STAGE_FAILED
    except ABNNError as e:
        # config and usage errors surface before any stage starts
        report = handle_stage_error("config" if isinstance(e, ConfigError) else args.verb, e)
        print(f"✗ {format_stage_error(report)}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ConfigError) else EXIT_STAGE_FAILED


if __name__ == "__main__":
    sys.exit(main())
