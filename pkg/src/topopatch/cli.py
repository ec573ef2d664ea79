"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal
error. Every subcommand resumes from the work directory's stage ledger, so
re-running with existing artifacts skips completed work.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback

from . import cubical, pimage, pipeline, synth, volume
from .errors import TopoPatchError
from .evaluation import load_manifest, stratified_folds


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p):
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--jobs", type=int, default=None, help="worker processes")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the work directory")


def _load_config(args, require_manifest=True) -> pipeline.PipelineConfig:
    cfg = pipeline.validate_config(args.config, require_manifest=require_manifest)
    replacements = {}
    if args.jobs is not None:
        replacements["jobs"] = args.jobs
    if args.out is not None:
        replacements["work_dir"] = args.out
    if args.seed is not None:
        replacements["cv"] = pipeline.CvConfig(k=cfg.cv.k, runs=cfg.cv.runs, seed=args.seed)
    if replacements:
        cfg = pipeline.PipelineConfig(**{**_cfg_fields(cfg), **replacements})
    return cfg


def _cfg_fields(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def _fold_run_args(p):
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--run", type=int, default=0)


def _stage_context(cfg):
    subjects = load_manifest(cfg.manifest)
    ledger = pipeline.StageLedger(cfg.work_dir)
    plan = stratified_folds(subjects, k=cfg.cv.k, seed=cfg.cv.seed)
    return subjects, ledger, plan


def build_parser() -> _Parser:
    parser = _Parser(prog="topopatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom cohort")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("preprocess", help="preprocess all manifest images")
    _add_config_args(p)

    p = sub.add_parser("patches", help="cut one volume into patches")
    p.add_argument("--in", dest="input", required=True, help="input RVOL volume")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--patch-dims", default=None, help="px,py,pz (default from --config)")
    p.add_argument("--config", default=None)

    p = sub.add_parser("ph", help="persistence diagrams")
    p.add_argument("--in", dest="input", default=None, help="single RVOL input")
    p.add_argument("--out", default=None, help="CSV output for --in mode")
    p.add_argument("--mode", default="sublevel", choices=list(cubical.MODES))
    p.add_argument("--dims", default="0,1,2")
    p.add_argument("--eps", type=float, default=0.0, help="low-persistence filter")
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("pi", help="persistence images")
    p.add_argument("--in", dest="input", default=None, help="single diagram CSV")
    p.add_argument("--out", default=None, help="RVOL output for --in mode")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-patch", help="train patch models for one fold/run")
    _add_config_args(p)
    _fold_run_args(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--patch-index", default=None, help="i,j,k")
    group.add_argument("--all", action="store_true")

    p = sub.add_parser("train-pi", help="train the PI model for one fold/run")
    _add_config_args(p)
    _fold_run_args(p)

    p = sub.add_parser("ensemble-lr", help="logistic-regression ensemble for one fold/run")
    _add_config_args(p)
    _fold_run_args(p)

    p = sub.add_parser("ensemble-fusion", help="fused encoding layer for one fold/run")
    _add_config_args(p)
    _fold_run_args(p)

    p = sub.add_parser("evaluate", help="full cross-validated experiment")
    _add_config_args(p)

    p = sub.add_parser("search", help="random hyperparameter search")
    _add_config_args(p)
    p.add_argument("--budget", type=int, default=20)

    return parser


def _cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = synth.spec_from_json(fh.read())
    manifest = synth.generate_cohort(spec, args.out)
    print(manifest)
    return 0


def _cmd_patches(args) -> int:
    if args.patch_dims:
        pdims = tuple(int(x) for x in args.patch_dims.split(","))
    elif args.config:
        pdims = pipeline.validate_config(args.config).patch_dims
    else:
        raise UsageError("need --patch-dims or --config")
    v = volume.load_volume(args.input)
    grid = volume.extract_patches(v, pdims)
    os.makedirs(args.out, exist_ok=True)
    index = []
    for (i, j, k), patch in grid.patches:
        name = f"patch-{i:02d}-{j:02d}-{k:02d}.rvol"
        volume.save_volume(patch, os.path.join(args.out, name))
        index.append({"index": [i, j, k], "file": name})
    with open(os.path.join(args.out, "patches.json"), "w", encoding="utf-8") as fh:
        json.dump({"source_dims": list(grid.source_dims),
                   "patch_dims": list(grid.patch_dims), "patches": index}, fh, indent=1)
    print(f"{len(index)} patches -> {args.out}")
    return 0


def _cmd_ph(args) -> int:
    if args.input is not None:
        if not args.out:
            raise UsageError("--in mode needs --out")
        dims = tuple(int(d) for d in args.dims.split(","))
        v = volume.load_volume(args.input)
        d = cubical.compute_persistence(v, mode=args.mode, dims=dims)
        if args.eps > 0:
            d = cubical.filter_low_persistence(d, args.eps)
        cubical.save_diagram_csv(d, args.out)
        print(args.out)
        return 0
    if not args.config:
        raise UsageError("need --in or --config")
    cfg = _load_config(args)
    subjects, ledger, _ = _stage_context(cfg)
    pre = pipeline.stage_preprocess(cfg, ledger, subjects)
    pipeline.stage_ph(cfg, ledger, subjects, pre)
    return 0


def _cmd_pi(args) -> int:
    if args.input is not None:
        if not args.out:
            raise UsageError("--in mode needs --out")
        params = pimage.PersistenceImageParams()
        d = cubical.load_diagram_csv(args.input, mode="sublevel", source_dims=(1, 1, 1))
        pts = pimage.to_birth_persistence(d, args.dim if args.dim is not None else 1)
        img = pimage.render_persistence_image(pts, params)
        volume.save_volume(pimage.image_to_volume(img), args.out)
        print(args.out)
        return 0
    if not args.config:
        raise UsageError("need --in or --config")
    cfg = _load_config(args)
    subjects, ledger, _ = _stage_context(cfg)
    pre = pipeline.stage_preprocess(cfg, ledger, subjects)
    ph = pipeline.stage_ph(cfg, ledger, subjects, pre)
    pipeline.stage_pi(cfg, ledger, subjects, ph)
    return 0


def _cmd_train_patch(args) -> int:
    cfg = _load_config(args)
    subjects, ledger, plan = _stage_context(cfg)
    pre = pipeline.stage_preprocess(cfg, ledger, subjects)
    if args.all:
        indices = None
    else:
        indices = [tuple(int(x) for x in args.patch_index.split(","))]
    paths = pipeline.stage_train_patches(cfg, ledger, subjects, plan, pre,
                                         args.fold, args.run, indices=indices)
    for index in sorted(paths):
        print(paths[index])
    return 0


def _cmd_train_pi(args) -> int:
    cfg = _load_config(args)
    subjects, ledger, plan = _stage_context(cfg)
    pre = pipeline.stage_preprocess(cfg, ledger, subjects)
    ph = pipeline.stage_ph(cfg, ledger, subjects, pre)
    pis = pipeline.stage_pi(cfg, ledger, subjects, ph)
    print(pipeline.stage_train_pi(cfg, ledger, subjects, plan, pis, args.fold, args.run))
    return 0


def _cmd_ensemble_lr(args) -> int:
    cfg = _load_config(args)
    subjects, ledger, plan = _stage_context(cfg)
    pre = pipeline.stage_preprocess(cfg, ledger, subjects)
    patch_paths = pipeline.stage_train_patches(cfg, ledger, subjects, plan, pre,
                                               args.fold, args.run)
    print(pipeline.stage_ensemble_lr(cfg, ledger, subjects, plan, patch_paths,
                                     args.fold, args.run))
    return 0


def _cmd_ensemble_fusion(args) -> int:
    cfg = _load_config(args)
    subjects, ledger, plan = _stage_context(cfg)
    pre = pipeline.stage_preprocess(cfg, ledger, subjects)
    ph = pipeline.stage_ph(cfg, ledger, subjects, pre)
    pis = pipeline.stage_pi(cfg, ledger, subjects, ph)
    patch_paths = pipeline.stage_train_patches(cfg, ledger, subjects, plan, pre,
                                               args.fold, args.run)
    pi_path = pipeline.stage_train_pi(cfg, ledger, subjects, plan, pis, args.fold, args.run)
    print(pipeline.stage_ensemble_fusion(cfg, ledger, subjects, plan, patch_paths,
                                         pi_path, args.fold, args.run))
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    results = pipeline.run_experiment(cfg)
    for name in sorted(results["models"]):
        m = results["models"][name]
        print(f"{name}: " + " ".join(
            f"{k}={m['mean'][k]:.3f}±{m['std'][k]:.3f}" for k in ("acc", "auc", "aps")))
    print(os.path.join(cfg.work_dir, "results.json"))
    return 0


def _cmd_search(args) -> int:
    cfg = _load_config(args)
    out = pipeline.run_search(cfg, budget=args.budget, seed=args.seed)
    print(json.dumps(out["best"], indent=1))
    return 0


def _cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    subjects, ledger, _ = _stage_context(cfg)
    pipeline.stage_preprocess(cfg, ledger, subjects)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "patches": _cmd_patches,
    "ph": _cmd_ph,
    "pi": _cmd_pi,
    "train-patch": _cmd_train_patch,
    "train-pi": _cmd_train_pi,
    "ensemble-lr": _cmd_ensemble_lr,
    "ensemble-fusion": _cmd_ensemble_fusion,
    "evaluate": _cmd_evaluate,
    "search": _cmd_search,
}


def run_command(argv) -> int:
    """Dispatch one CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (TopoPatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
