"""Command-line entry point: ``dacn <command> [options]``.

Every command writes into a run directory (``--run-dir``, or a fresh one
under ``$DACN_RUN_ROOT``, default ``runs/``) together with a
``run_manifest.json`` naming the config hash, data hash, seed and every
file produced.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .cstr_sim import SimConfig, SimulationDiverged, all_fault_ids, generate_dataset, parse_id_list
from .dataio import TaskBundle, TaskSpec, build_task, ingest_csv, load_bundle, save_bundle
from .evaluation import export_features, worst_of_runs
from .hpo import SearchSpace, search, write_trial_log
from .model import load_checkpoint, save_checkpoint
from .trainer import (
    NaNAbort,
    RunRecord,
    TrainConfig,
    compare_variants,
    evaluate,
    features,
    infer,
    pretrain,
    run_ablation,
    train,
)

log = logging.getLogger("dacn")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3
RUN_ROOT_ENV = "DACN_RUN_ROOT"


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config_hash: str | None = None
    data_hash: str | None = None
    seed: int | None = None
    started: str = ""
    finished: str = ""
    status: str = "running"
    artifacts: list = dataclasses.field(default_factory=list)

    def add(self, path) -> Path:
        path = Path(path)
        self.artifacts.append(str(path))
        return path

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "run_manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _run_dir(args) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = root / f"{args.command}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out.update(C.parse_config(f"{key.strip()} = {value}"))
    return out


def _task_config(args) -> dict:
    cfg = C.load_config(args.task) if getattr(args, "task", None) else {}
    cfg.update(_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _has_plant(cfg: dict) -> bool:
    return any(k.startswith("plant.") for k in cfg)


def _series(args, cfg: dict, run_dir: Path, manifest: RunManifest):
    spec = TaskSpec.from_config(cfg)
    if args.data:
        schema = cfg.get("channels_expected")
        return ingest_csv(args.data, schema, modes=spec.modes, faults=spec.classes)
    if not _has_plant(cfg):
        raise UsageError("no --data given and the task config has no plant section to simulate from")
    sim = SimConfig.from_config(cfg)
    out = run_dir / "data"
    faults = parse_id_list(cfg.get("faults", "all"), all_fault_ids(sim))
    data_manifest = generate_dataset(spec.modes, faults, out, sim, seed=int(cfg.get("data_seed", 0)))
    for e in data_manifest["entries"]:
        manifest.add(out / e["file"])
    manifest.add(out / "manifest.json")
    return ingest_csv(out, modes=spec.modes, faults=spec.classes)


def _bundle(args, cfg: dict, run_dir: Path, manifest: RunManifest) -> TaskBundle:
    if getattr(args, "bundle", None):
        bundle = load_bundle(args.bundle)
    else:
        if "source_mode" not in cfg:
            raise UsageError("give --bundle, or a --task config naming source_mode/target_modes")
        bundle = build_task(TaskSpec.from_config(cfg), _series(args, cfg, run_dir, manifest))
    manifest.data_hash = bundle.data_hash
    return bundle


def _train_config(cfg: dict, args) -> TrainConfig:
    tc = TrainConfig.from_config(cfg)
    if getattr(args, "variant", None):
        tc = dataclasses.replace(tc, ablation=args.variant)
    return tc


# --- commands -----------------------------------------------------------------


def cmd_simulate(args, run_dir, manifest):
    cfg = C.load_config(args.config)
    cfg.update(_overrides(args.set))
    sim = SimConfig.from_config(cfg)
    modes = parse_id_list(args.modes, list(sim.modes))
    faults = parse_id_list(args.faults, all_fault_ids(sim))
    out = Path(args.out) if args.out else run_dir / "data"
    data = generate_dataset(modes, faults, out, sim, seed=args.seed or 0, duration=args.duration,
                            interval=args.interval, samples_per_class=args.samples_per_class)
    manifest.config_hash = sim.hash
    manifest.seed = args.seed or 0
    for e in data["entries"]:
        manifest.add(out / e["file"])
    manifest.add(out / "manifest.json")
    print(json.dumps({"out": str(out), "files": len(data["entries"]), "counts": data["counts"]}))


def cmd_preprocess(args, run_dir, manifest):
    cfg = _task_config(args)
    bundle = _bundle(args, cfg, run_dir, manifest)
    out = Path(args.out) if args.out else run_dir / "bundle.npz"
    manifest.add(save_bundle(bundle, out, cfg))
    manifest.config_hash = C.config_hash(cfg)
    print(json.dumps({"bundle": str(out), "counts": bundle.counts}))


def _finish_model(model, record: RunRecord, run_dir: Path, name: str, manifest: RunManifest):
    ckpt = manifest.add(save_checkpoint(model, run_dir / f"{name}.safetensors", record.config_hash))
    record.checkpoint = str(ckpt)
    manifest.add(record.to_jsonl(run_dir / f"{name}.jsonl"))
    return ckpt


def cmd_pretrain(args, run_dir, manifest):
    cfg = _task_config(args)
    bundle = _bundle(args, cfg, run_dir, manifest)
    tc = _train_config(cfg, args)
    model, record = pretrain(bundle, tc)
    manifest.config_hash, manifest.seed = record.config_hash, tc.seed
    ckpt = _finish_model(model, record, run_dir, "pretrain", manifest)
    print(json.dumps({"checkpoint": str(ckpt), "final_Lc1": record.epochs[-1]["Lc1"] if record.epochs else None}))


def cmd_train(args, run_dir, manifest):
    cfg = _task_config(args)
    bundle = _bundle(args, cfg, run_dir, manifest)
    tc = _train_config(cfg, args)
    pre = None
    if args.from_ckpt:
        pre, _ = load_checkpoint(args.from_ckpt)
    model, record = train(bundle, pre, tc.effective())
    manifest.config_hash, manifest.seed = record.config_hash, tc.seed
    ckpt = _finish_model(model, record, run_dir, "model", manifest)
    print(json.dumps({"checkpoint": str(ckpt)}))


def _infer_inputs(args, cfg, run_dir, manifest):
    src = args.bundle or (args.data if args.data and Path(args.data).suffix == ".npz" else None)
    if src:
        bundle = load_bundle(src)
        manifest.data_hash = bundle.data_hash
    else:
        bundle = _bundle(args, cfg, run_dir, manifest)
    return getattr(bundle, args.split)


def cmd_infer(args, run_dir, manifest):
    model, header = load_checkpoint(args.ckpt)
    cfg = _task_config(args)
    samples = _infer_inputs(args, cfg, run_dir, manifest)
    pred, probs = infer(model, samples.X)
    out = Path(args.out) if args.out else run_dir / "predictions.csv"
    rows = np.column_stack([pred, samples.y, probs.max(1)])
    with out.open("w") as fh:
        fh.write("pred,label,mode,confidence\n")
        for (p, y, conf), mode in zip(rows, samples.modes):
            fh.write(f"{int(p)},{int(y)},{mode},{conf!r}\n")
    manifest.add(out)
    manifest.config_hash = header["config_hash"]
    print(json.dumps({"predictions": str(out), "n": int(len(pred)), "acc": float(np.mean(pred == samples.y))}))


def cmd_evaluate(args, run_dir, manifest):
    model, header = load_checkpoint(args.ckpt)
    cfg = _task_config(args)
    bundle = _bundle(args, cfg, run_dir, manifest)
    report = evaluate(model, bundle, variant=header["extra"].get("ablation", "full"), seed=cfg.get("seed", 0))
    out = Path(args.out) if args.out else run_dir / "report.json"
    manifest.add(report.save(out))
    if args.features:
        test2 = bundle.test2
        manifest.add(export_features(features(model, test2.X), test2.y, test2.modes, args.features))
    manifest.config_hash = header["config_hash"]
    print(json.dumps({"report": str(out), "test1_acc": report.test1.acc, "test2_acc": report.test2_acc}))


def _seeds(text, default: int) -> list[int]:
    if text is None:
        return [default]
    return [int(s) for s in str(text).split(",") if s.strip()]


def cmd_ablate(args, run_dir, manifest):
    cfg = _task_config(args)
    bundle = _bundle(args, cfg, run_dir, manifest)
    tc = _train_config(cfg, args)
    reports = []
    for seed in _seeds(args.seeds, tc.seed):
        _, record, report = run_ablation(bundle, dataclasses.replace(tc, seed=seed), run_dir)
        manifest.add(report.checkpoint)
        manifest.add(report.record_path)
        manifest.add(report.save(run_dir / f"{tc.ablation}_seed{seed}.report.json"))
        reports.append(report)
    worst = worst_of_runs(reports)
    summary = {"variant": tc.ablation, "seeds": [r.seed for r in reports],
               "test1_acc": [r.test1.acc for r in reports], "test2_acc": [r.test2_acc for r in reports],
               "worst_seed": worst.seed, "worst_test1": worst.test1.acc, "worst_test2": worst.test2_acc}
    path = run_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2))
    manifest.add(path)
    manifest.config_hash, manifest.seed = tc.hash, tc.seed
    print(json.dumps(summary))


def cmd_experiment(args, run_dir, manifest):
    cfg = _task_config(args)
    bundle = _bundle(args, cfg, run_dir, manifest)
    tc = _train_config(cfg, args)
    variants = [v.strip() for v in args.variants.split(",")]
    reports = compare_variants(bundle, tc, _seeds(args.seeds, tc.seed), variants, run_dir)
    summary = {}
    for variant, runs in reports.items():
        worst = worst_of_runs(runs)
        for r in runs:
            manifest.add(r.checkpoint)
            manifest.add(r.record_path)
        summary[variant] = {"test1_acc": [r.test1.acc for r in runs], "test2_acc": [r.test2_acc for r in runs],
                            "worst_seed": worst.seed, "worst_test1": worst.test1.acc,
                            "worst_test2": worst.test2_acc}
    path = run_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2))
    manifest.add(path)
    manifest.config_hash, manifest.seed = tc.hash, tc.seed
    print(json.dumps(summary))


def cmd_search(args, run_dir, manifest):
    cfg = _task_config(args)
    bundle = _bundle(args, cfg, run_dir, manifest)
    template = _train_config(cfg, args)
    if args.space:
        space = SearchSpace.from_json(args.space, budget=args.budget, seed=args.seed)
    else:
        space = SearchSpace(budget=args.budget or 20, seed=args.seed or 0)
    log_path = run_dir / "trials.csv"
    reads_before = bundle.test2_reads
    best, trials = search(space, bundle, template, args.strategy, log_path)
    manifest.add(write_trial_log(trials, space.names, log_path))
    best_cfg = dict(cfg)
    best_cfg.update({k: v for k, v in dataclasses.asdict(best.weights).items()})
    best_cfg["learning_rate"] = best.learning_rate
    best_path = run_dir / "best.cfg"
    best_path.write_text(C.dump_config({k: v for k, v in best_cfg.items() if not k.startswith("plant.")}))
    manifest.add(best_path)
    manifest.config_hash, manifest.seed = C.config_hash(best_cfg), space.seed
    top = max((t for t in trials if t.pseudo_acc is not None), key=lambda t: (t.pseudo_acc, -t.trial))
    print(json.dumps({"best_trial": top.trial, "pseudo_acc": top.pseudo_acc, "test1_acc": top.test1_acc,
                      "test2_reads": bundle.test2_reads - reads_before, "best_config": str(best_path)}))


def cmd_rerun(args, run_dir, manifest):
    old = json.loads(Path(args.manifest).read_text())
    argv = list(old["argv"])
    for flag in ("--run-dir", "--out"):
        while flag in argv:
            i = argv.index(flag)
            del argv[i : i + 2]
    return main(argv + ["--run-dir", str(run_dir)], _nested=True)


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "experiment": cmd_experiment,
    "search": cmd_search,
    "rerun": cmd_rerun,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacn", description="Single-source domain-generalization fault diagnosis")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, task=True, data=True):
        p.add_argument("--run-dir", help=f"output directory (default: a new one under ${RUN_ROOT_ENV})")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if task:
            p.add_argument("--task", help="task config file or shipped name such as cstr_t1")
        if data:
            p.add_argument("--data", help="CSV directory or file (simulated from the task config when absent)")
            p.add_argument("--bundle", help="preprocessed task bundle (.npz)")
        return p

    p = common(sub.add_parser("simulate", help="generate closed-loop CSTR runs"), task=False, data=False)
    p.add_argument("--config", default="cstr_plant")
    p.add_argument("--modes", default="all")
    p.add_argument("--faults", default="all")
    p.add_argument("--out")
    p.add_argument("--duration", type=float)
    p.add_argument("--interval", type=float)
    p.add_argument("--samples-per-class", type=int)

    p = common(sub.add_parser("preprocess", help="standardize, window and split into a task bundle"))
    p.add_argument("--out")

    p = common(sub.add_parser("pretrain", help="fit F, G, C on the source labels"))

    p = common(sub.add_parser("train", help="adversarial/contrastive stage"))
    p.add_argument("--from", dest="from_ckpt", help="pretrained checkpoint")
    p.add_argument("--no-pretrain", action="store_true", help="start from random weights")
    p.add_argument("--variant", choices=["full", "A2", "A3"])

    p = common(sub.add_parser("infer", help="predict classes for a data split"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test1", "test2"], default="test2")
    p.add_argument("--out")

    p = common(sub.add_parser("evaluate", help="metrics report for a checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--features", help="also export test2 invariant features to this CSV")

    p = common(sub.add_parser("ablate", help="train and evaluate one variant over seeds"))
    p.add_argument("--variant", choices=["full", "A1", "A2", "A3", "A4"], required=True)
    p.add_argument("--seeds", help="comma-separated seeds (worst-of-N is reported)")

    p = common(sub.add_parser("experiment", help="several variants over seeds with shared pretraining"))
    p.add_argument("--variants", default="full,A1")
    p.add_argument("--seeds", default="0,1,2,3,4")

    p = common(sub.add_parser("search", help="hyperparameter search on pseudo-feature accuracy"))
    p.add_argument("--space", help="JSON with bounds/budget/seed")
    p.add_argument("--budget", type=int)
    p.add_argument("--strategy", choices=["sobol", "refine"], default="sobol")

    p = sub.add_parser("rerun", help="repeat a run from its run_manifest.json")
    p.add_argument("manifest")
    p.add_argument("--run-dir")
    return parser


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def main(argv=None, _nested: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.from_ckpt and not args.no_pretrain:
        parser.print_usage(sys.stderr)
        _error("usage", "train needs --from <checkpoint> or --no-pretrain")
        return EXIT_USAGE
    if args.command == "train" and args.from_ckpt and args.no_pretrain:
        _error("usage", "--from and --no-pretrain are mutually exclusive")
        return EXIT_USAGE

    run_dir = _run_dir(args)
    if args.command == "rerun":
        return cmd_rerun(args, run_dir, None)
    manifest = RunManifest(args.command, argv, started=_now())
    code = EXIT_OK
    try:
        COMMANDS[args.command](args, run_dir, manifest)
        manifest.status = "ok"
    except UsageError as exc:
        _error("usage", str(exc))
        manifest.status, code = "usage-error", EXIT_USAGE
    except NaNAbort as exc:
        _error("nan", str(exc), term=exc.term, stage=exc.stage, epoch=exc.epoch, step=exc.step)
        manifest.status, code = "nan-abort", EXIT_NAN
    except SimulationDiverged as exc:
        _error("diverged", str(exc), fault_id=exc.fault_id, mode_id=exc.mode_id)
        manifest.status, code = "failed", EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        _error(type(exc).__name__, str(exc))
        manifest.status, code = "failed", EXIT_ERROR
    manifest.finished = _now()
    manifest.write(run_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
