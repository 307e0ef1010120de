# pipeline.py - Orchestrates pre-train -> train -> attack -> evaluate and writes the run outputs

import contextlib
import logging
import os
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Any, Dict, List, Optional, Union

import numpy as np

from attacks import evaluate_under_attack, export_adversarial, pgd_attack, roa_attack
from checkpoint import load_checkpoint, save_checkpoint
from cost_model import cost_oudefend, cost_table, predicted_cost, step_schedule, verify_cost_model
from datasets import (DatasetContainer, classes_disjoint, gen_synthetic, load_cifar10_binary,
                      split_train_test)
from defaults import METHODS
from error_handler import (ABNNError, CheckpointError, DatasetError, PipelineStageError,
                           SubstituteNotFrozenError, log_error)
from experiment_config import ExperimentConfig, load_experiment_config
from networks import (ABNNModel, assert_frozen, build_plain, build_substitute, build_target, freeze,
                      parameter_digest)
from normalization import bn_stats_shift
from report_store import (MANIFEST_FILE, RESULTS_FILE, SWEEP_FILE, load_json_file, save_json_file,
                          save_report, write_results_csv)
from training import PassCounter, pretrain_substitute, train_pgd_at, train_plain, train_target
from visualize import save_attack_preview

logger = logging.getLogger(__name__)

CHECKPOINTS = {
    "substitute": "substitute.ckpt",
    "no-defense": "no_defense.ckpt",
    "abnn": "abnn_target.ckpt",
    "pgd-at": "pgd_at.ckpt",
}
TRAINED_METHODS = tuple(METHODS)


@dataclass
class RunContext:
    config: ExperimentConfig
    seed: int
    out_dir: str
    data: Dict[str, DatasetContainer] = field(default_factory=dict)
    models: Dict[str, Any] = field(default_factory=dict)
    counters: Dict[str, PassCounter] = field(default_factory=dict)
    losses: Dict[str, List[float]] = field(default_factory=dict)
    attack_summaries: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def update_manifest(self, section: str, payload: Any):
        manifest = load_json_file(self.path(MANIFEST_FILE), {})
        manifest.setdefault("config", self.config.model_dump())
        manifest["seed"] = self.seed
        manifest[section] = payload
        save_json_file(self.path(MANIFEST_FILE), manifest)

    def manifest(self) -> Dict[str, Any]:
        return load_json_file(self.path(MANIFEST_FILE), {})


@contextlib.contextmanager
def stage(name: str, ctx: Optional[RunContext] = None):
    logger.info("▶ stage %s", name)
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as e:
        context = {"seed": ctx.seed, "out_dir": ctx.out_dir} if ctx else {}
        log_error(e, {"stage": name, **context})
        raise PipelineStageError(name, e, context)
    logger.info("✓ stage %s done", name)


def make_context(config: Union[ExperimentConfig, str], out_dir: str = None, seed: int = None) -> RunContext:
    if isinstance(config, str):
        config = load_experiment_config(config)
    seed = config.seed if seed is None else seed
    out_dir = out_dir or os.path.join(config.output_dir, f"{config.name}_seed{seed}")
    os.makedirs(out_dir, exist_ok=True)
    return RunContext(config=config, seed=seed, out_dir=out_dir)


# ---- stages -------------------------------------------------------------------------


def prepare_data(ctx: RunContext):
    task = ctx.config.task
    if task.kind == "cifar-subset":
        directory = task.resolved_cifar_dir()
        limit = task.max_train_per_task
        substitute = load_cifar10_binary(directory, task.substitute_classes, "train", limit)
        target_train = load_cifar10_binary(directory, task.target_classes, "train", limit)
        target_test = load_cifar10_binary(directory, task.target_classes, "test")
    else:
        substitute = gen_synthetic(task.synthetic_spec("substitute"), seed=ctx.seed)
        target = gen_synthetic(task.synthetic_spec("target"), seed=ctx.seed + 1)
        target_train, target_test = split_train_test(target, task.synthetic.test_fraction, seed=ctx.seed)
        if task.max_train_per_task:
            substitute = substitute.head(task.max_train_per_task)
            target_train = target_train.head(task.max_train_per_task)
    if not classes_disjoint(substitute, target_train):
        raise DatasetError("substitute and target tasks share classes")
    ctx.data = {"substitute": substitute, "target_train": target_train, "target_test": target_test}
    logger.info("✓ data: %d substitute / %d target train / %d target test samples",
                len(substitute), len(target_train), len(target_test))


def build_models(ctx: RunContext):
    """Fresh models; each gets its own seed offset so runs are reproducible per seed"""
    models = ctx.config.models
    in_channels = ctx.data["target_train"].image_shape[0]
    num_sub = ctx.data["substitute"].num_classes
    num_tgt = ctx.data["target_train"].num_classes
    seed = ctx.seed
    substitute = ctx.models.get("substitute") or build_substitute(models.substitute_specs(), num_sub,
                                                                 in_channels=in_channels, seed=seed)
    target = build_target(models.target_specs(), num_tgt, substitute_specs=models.substitute_specs(),
                          in_channels=in_channels, seed=seed + 1)
    ctx.models.update({
        "substitute": substitute,
        "no-defense": build_plain(models.target_specs(), num_tgt, in_channels=in_channels, seed=seed + 2),
        "abnn": ABNNModel(target, substitute, attack_mode=models.attack_mode),
        # both baselines start from the same initialisation
        "pgd-at": build_plain(models.target_specs(), num_tgt, in_channels=in_channels, seed=seed + 2),
    })


def _checkpoint_target(method: str, model):
    return model.target if method == "abnn" else model


def load_models(ctx: RunContext, methods=TRAINED_METHODS):
    build_models(ctx)
    load_substitute(ctx)
    for method in methods:
        load_checkpoint(_checkpoint_target(method, ctx.models[method]), ctx.path(CHECKPOINTS[method]))
    training = ctx.manifest().get("training", {})
    for method in methods:
        if method in training:
            ctx.counters[method] = PassCounter.from_dict(training[method])
            ctx.losses[method] = training[method].get("epoch_losses", [])


def load_substitute(ctx: RunContext):
    load_checkpoint(ctx.models["substitute"], ctx.path(CHECKPOINTS["substitute"]))
    freeze(ctx.models["substitute"])


def stage_pretrain(ctx: RunContext):
    substitute = ctx.models["substitute"]
    result = pretrain_substitute(ctx.data["substitute"], substitute,
                                 ctx.config.training.substitute.build(ctx.seed))
    digest = parameter_digest(substitute)
    save_checkpoint(substitute, ctx.path(CHECKPOINTS["substitute"]), {"role": "substitute", "digest": digest})
    ctx.update_manifest("pretrain", {"digest": digest, **result.summary()})


def stage_train(ctx: RunContext):
    training = ctx.config.training
    data = ctx.data["target_train"]
    abnn = ctx.models["abnn"]
    if not assert_frozen(abnn.substitute):
        raise SubstituteNotFrozenError("substitute is not frozen", user_action="Run the pretrain stage first.")

    results = {
        "no-defense": train_plain(data, ctx.models["no-defense"], training.baseline.build(ctx.seed)),
        "abnn": train_target(data, abnn, training.target.build(ctx.seed)),
        "pgd-at": train_pgd_at(data, ctx.models["pgd-at"], training.baseline.build(ctx.seed),
                               ctx.config.attacks.pgd.build()),
    }
    summaries = {}
    for method, result in results.items():
        ctx.counters[method] = result.counter
        ctx.losses[method] = result.epoch_losses
        summaries[method] = result.summary()
        save_checkpoint(_checkpoint_target(method, result.model), ctx.path(CHECKPOINTS[method]),
                        {"method": method, "seed": ctx.seed})
    ctx.update_manifest("training", summaries)


def _numeric_summary(example) -> Dict[str, float]:
    return {k: float(v) for k, v in example.summary().items() if k != "attack"}


def stage_attack(ctx: RunContext):
    """Attack a preview batch of the defended model; export it and render the preview"""
    attacks = ctx.config.attacks
    batch = ctx.data["target_test"].head(attacks.preview_samples)
    abnn = ctx.models["abnn"]
    pgd_example = pgd_attack(abnn, batch.images, batch.labels, attacks.pgd.build(), seed=ctx.seed)
    roa_example = roa_attack(abnn, batch.images, batch.labels, attacks.roa.build())
    num_classes = batch.num_classes
    export_adversarial(pgd_example, num_classes, ctx.path("adversarial_pgd.npz"), {"model": "abnn"})
    export_adversarial(roa_example, num_classes, ctx.path("adversarial_roa.npz"), {"model": "abnn"})
    save_attack_preview(pgd_example.x_clean, pgd_example.x_adv, roa_example.x_adv, ctx.path("attack_preview.png"))
    ctx.attack_summaries = {"pgd": _numeric_summary(pgd_example), "roa": _numeric_summary(roa_example)}
    ctx.update_manifest("attack", ctx.attack_summaries)


def stat_shift_under_pgd(abnn: ABNNModel, images: np.ndarray, labels: np.ndarray, pgd, seed: int) -> Dict[str, Dict[str, float]]:
    """Average per-block change of BN statistics when the input is PGD-perturbed"""
    x_adv = pgd_attack(abnn, images, labels, pgd, seed=seed).x_adv
    clean_t, clean_s = abnn.block_features(images)
    adv_t, adv_s = abnn.block_features(x_adv)
    shifts = {}
    for role, clean, adv in (("target", clean_t, adv_t), ("substitute", clean_s, adv_s)):
        per_block = [bn_stats_shift(c, a) for c, a in zip(clean, adv)]
        shifts[role] = {key: float(np.mean([b[key] for b in per_block])) for key in ("mean_shift", "std_shift")}
    return shifts


def stage_eval(ctx: RunContext) -> Dict[str, Any]:
    config = ctx.config
    attacks = config.attacks
    pgd, roa = attacks.pgd.build(), attacks.roa.build()
    eval_set = ctx.data["target_test"].head(attacks.eval_samples)
    batch_size = attacks.eval_batch_size
    t_max = pgd.t_max

    methods, rows = {}, []
    for method in TRAINED_METHODS:
        model = ctx.models[method]
        counter = ctx.counters.get(method)
        if counter is None:
            raise CheckpointError(f"no training record for {method}", user_action="Run the train stage first.")
        predicted = predicted_cost(method, t_max)
        entry = {
            "clean_acc": evaluate_under_attack(model, eval_set, None, batch_size, ctx.seed),
            "pgd_acc": evaluate_under_attack(model, eval_set, pgd, batch_size, ctx.seed),
            "roa_acc": evaluate_under_attack(model, eval_set, roa, batch_size, ctx.seed),
            "passes_per_step": counter.passes_per_step(),
            "steps": counter.steps,
            "total_passes": counter.total_passes,
            "forward_passes": dict(counter.forward_passes),
            "backward_passes": dict(counter.backward_passes),
            "predicted_cost": str(predicted),
            "cost_verified": verify_cost_model(counter, predicted),
            "epoch_losses": ctx.losses.get(method, []),
        }
        methods[method] = entry
        rows.append({"method": method, **entry})
        logger.info("%s: clean %.3f / pgd %.3f / roa %.3f, %s passes per step (%s predicted)%s",
                    method, entry["clean_acc"], entry["pgd_acc"], entry["roa_acc"], entry["passes_per_step"],
                    predicted, "" if entry["cost_verified"] else " ✗ MISMATCH")

    abnn = ctx.models["abnn"]
    main_mode = abnn.attack_mode
    abnn.attack_mode = "target_only"
    try:
        target_only = evaluate_under_attack(abnn, eval_set, pgd, batch_size, ctx.seed)
    finally:
        abnn.attack_mode = main_mode

    shift_batch = eval_set.head(batch_size)
    shift = stat_shift_under_pgd(abnn, shift_batch.images, shift_batch.labels, pgd, ctx.seed)

    abnn_steps = max(ctx.counters["abnn"].steps, 1)
    oudefend = PassCounter().replay(step_schedule("oudefend", t_max), steps=abnn_steps)
    oudefend_ok = verify_cost_model(oudefend, cost_oudefend(t_max))

    digest_before = ctx.manifest().get("pretrain", {}).get("digest", "")
    digest_after = parameter_digest(ctx.models["substitute"])

    report = {
        "name": config.name,
        "seed": ctx.seed,
        "task": config.task.kind,
        "t_max": t_max,
        "methods": methods,
        "cost_table": cost_table(t_max),
        "oudefend_replay_verified": oudefend_ok,
        "all_costs_verified": oudefend_ok and all(m["cost_verified"] for m in methods.values()),
        "substitute_digest_before": digest_before,
        "substitute_digest_after": digest_after,
        "substitute_unchanged": digest_before == digest_after,
        "abnn_pgd_acc_target_only": target_only,
        "bn_stat_shift": shift,
        "attack_summaries": ctx.attack_summaries or ctx.manifest().get("attack", {}),
    }
    write_results_csv(ctx.path(RESULTS_FILE), rows)
    save_report(ctx.out_dir, report)
    ctx.update_manifest("metrics", {m: {k: methods[m][k] for k in ("clean_acc", "pgd_acc", "roa_acc")}
                                    for m in methods})
    if not report["substitute_unchanged"]:
        logger.warning("⚠ substitute digest changed during the run")
    return report


# ---- verbs --------------------------------------------------------------------------


def run_pretrain(config, out_dir: str = None, seed: int = None) -> RunContext:
    ctx = make_context(config, out_dir, seed)
    with stage("data", ctx):
        prepare_data(ctx)
        build_models(ctx)
    with stage("pretrain", ctx):
        stage_pretrain(ctx)
    return ctx


def run_train(config, out_dir: str = None, seed: int = None) -> RunContext:
    ctx = make_context(config, out_dir, seed)
    with stage("data", ctx):
        prepare_data(ctx)
    with stage("train", ctx):
        build_models(ctx)
        load_substitute(ctx)
        stage_train(ctx)
    return ctx


def run_attack(config, out_dir: str = None, seed: int = None) -> RunContext:
    ctx = make_context(config, out_dir, seed)
    with stage("data", ctx):
        prepare_data(ctx)
    with stage("attack", ctx):
        load_models(ctx)
        stage_attack(ctx)
    return ctx


def run_eval(config, out_dir: str = None, seed: int = None) -> Dict[str, Any]:
    ctx = make_context(config, out_dir, seed)
    with stage("data", ctx):
        prepare_data(ctx)
    with stage("eval", ctx):
        load_models(ctx)
        return stage_eval(ctx)


def run_experiment(config, out_dir: str = None, seed: int = None) -> Dict[str, Any]:
    """Full pipeline in one process; returns the validated report dict"""
    ctx = make_context(config, out_dir, seed)
    with stage("data", ctx):
        prepare_data(ctx)
        build_models(ctx)
    with stage("pretrain", ctx):
        stage_pretrain(ctx)
    with stage("train", ctx):
        stage_train(ctx)
    with stage("attack", ctx):
        stage_attack(ctx)
    with stage("eval", ctx):
        report = stage_eval(ctx)
    logger.info("✓ run complete: %s", ctx.out_dir)
    return report


def _sweep_one(args) -> Dict[str, Any]:
    config, out_dir, seed = args
    return run_experiment(config, out_dir, seed)


def run_seed_sweep(config, seeds: List[int], out_dir: str = None, workers: int = 1) -> Dict[str, Any]:
    """Independent runs per seed, merged sorted by seed with per-metric medians"""
    if isinstance(config, str):
        config = load_experiment_config(config)
    seeds = sorted(set(seeds))
    if not seeds:
        raise ABNNError("seed sweep needs at least one seed")
    out_dir = out_dir or os.path.join(config.output_dir, f"{config.name}_sweep")
    jobs = [(config, os.path.join(out_dir, f"seed_{s}"), s) for s in seeds]
    if workers > 1:
        with Pool(min(workers, len(jobs))) as pool:
            reports = pool.map(_sweep_one, jobs)
    else:
        reports = [_sweep_one(job) for job in jobs]

    runs = sorted(({"seed": r["seed"],
                    "all_costs_verified": r["all_costs_verified"],
                    "methods": {m: {k: v[k] for k in ("clean_acc", "pgd_acc", "roa_acc")}
                                for m, v in r["methods"].items()}}
                   for r in reports), key=lambda r: r["seed"])
    medians = {
        method: {metric: float(np.median([run["methods"][method][metric] for run in runs]))
                 for metric in ("clean_acc", "pgd_acc", "roa_acc")}
        for method in TRAINED_METHODS
    }
    merged = {"seeds": seeds, "runs": runs, "medians": medians,
              "all_costs_verified": all(r["all_costs_verified"] for r in runs)}
    save_json_file(os.path.join(out_dir, SWEEP_FILE), merged)
    logger.info("✓ sweep over %d seeds written to %s", len(seeds), out_dir)
    return merged
