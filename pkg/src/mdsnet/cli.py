"""Command-line entry points.

Every subcommand reads and writes the plain file formats of the library:
volume header/raw pairs, checkpoint manifests, and CSV/JSON reports.
Training flags mirror the ``TrainConfig`` field names and may also come from
a ``key = value`` config file given with ``--config`` (flags win).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .biclstm import refine_volume
from .experiments import (CV_HEADER, SWEEP_HEADER, CVPlan, cross_validate, robustness_study, sweep,
                          sweep_table)
from .gradcheck import STACK_CASES, loss_gradcheck
from .metrics import MetricReport, evaluate_case, fuse_maps, write_rows
from .training import (MDSNet, TrainConfig, evaluate, fit, load_cases, load_config_file, phantom_cases,
                       predict, run_pipeline, save_cases)
from .volume import VIEWS, Volume, load_volume, save_volume

log = logging.getLogger("mdsnet")

GRADCHECK_TOL = 1e-4


class CommandFailed(Exception):
    """A requested check did not pass; the command exits non-zero."""


# ----------------------------------------------------------------------------
# config flags
# ----------------------------------------------------------------------------

def _optional_int(text):
    return None if text.lower() == "none" else int(text)


def _add_config_flags(parser, require_seed=False):
    # Unset flags stay off the namespace, so an explicit "none" is not confused with absence.
    group = parser.add_argument_group("training configuration")
    group.add_argument("--config", type=Path, help="key = value file; explicit flags override it")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"default": argparse.SUPPRESS}
        if f.name == "seed":
            kw.update(type=int, required=require_seed)
        elif f.name == "views":
            kw.update(nargs="+", choices=VIEWS)
        elif f.type in ("bool", bool):
            kw.update(action=argparse.BooleanOptionalAction)
        elif f.name == "train_margin":
            kw.update(type=_optional_int, help="int or 'none'")
        elif f.type in ("int", int):
            kw.update(type=int)
        elif f.type in ("float", float):
            kw.update(type=float)
        group.add_argument(flag, **kw)


def config_from_args(args):
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    values.update({f.name: getattr(args, f.name) for f in fields(TrainConfig) if hasattr(args, f.name)})
    if isinstance(values.get("views"), str):
        values["views"] = [values["views"]]
    return TrainConfig.from_dict(values)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_phantom(args):
    cases = phantom_cases(args.count, args.seed, tuple(args.dims), args.variability)
    save_cases(cases, args.out)
    print(f"wrote {len(cases)} phantom cases to {args.out}")


def cmd_convert(args):
    src = Path(args.input)
    if src.suffix == ".npy":
        vol = Volume(np.load(src), args.kind, tuple(args.spacing) if args.spacing else None)
        print(save_volume(args.output, vol, args.dtype))
    else:
        np.save(args.output, load_volume(src).voxels)
        print(args.output)


def cmd_train(args):
    config = config_from_args(args)
    cases = load_cases(args.data)
    model = fit(cases, config, workdir=args.out, progress=_progress)
    final = {view: hist[-1] for view, hist in model.histories.items() if hist}
    print(json.dumps({"model": str(Path(args.out) / "model"), "final_loss": final}, sort_keys=True))


def cmd_predict(args):
    model = MDSNet.load(args.model)
    image = load_volume(args.image)
    if args.view:
        prob = predict(model.view_models[args.view], image.voxels, args.view)
    else:
        prob = run_pipeline(image.voxels, model.view_models, None, model.config).fused
    save_volume(args.out, Volume(np.clip(prob, 0, 1), "probability", image.spacing))
    print(args.out)


def cmd_refine(args):
    model = MDSNet.load(args.model)
    if model.refiner is None:
        raise CommandFailed(f"{args.model} holds no refiner")
    prob = load_volume(args.prob)
    refined = refine_volume(model.refiner, prob.voxels)
    save_volume(args.out, Volume(refined, "probability", prob.spacing))
    if args.mask:
        save_volume(args.mask, Volume((refined >= args.thr).astype(np.uint8), "label", prob.spacing))
    print(args.out)


def cmd_fuse(args):
    vols = [load_volume(p) for p in args.inputs]
    fused = fuse_maps({str(p): v.voxels for p, v in zip(args.inputs, vols)}, args.thr)
    save_volume(args.out, Volume(fused.mask, "label", vols[0].spacing))
    if args.mean:
        save_volume(args.mean, Volume(fused.mean_prob, "probability", vols[0].spacing))
    print(args.out)


def cmd_evaluate(args):
    if args.model:
        if not args.data:
            raise CommandFailed("--model needs --data")
        model = MDSNet.load(args.model)
        report = evaluate(model, load_cases(args.data), use_refiner=not args.no_refiner)
    else:
        if not (args.pred and args.label):
            raise CommandFailed("give --model/--data or --pred/--label")
        pred, label = load_volume(args.pred), load_volume(args.label)
        mask = pred.voxels if pred.kind == "label" else (pred.voxels >= args.thr).astype(np.uint8)
        report = MetricReport([evaluate_case(mask, label.voxels, Path(args.pred).name, label.spacing)])
    if args.csv:
        report.write_csv(args.csv)
    if args.json:
        report.write_json(args.json)
    print(json.dumps(report.formatted(), ensure_ascii=False, sort_keys=True))


def cmd_cv(args):
    config = config_from_args(args)
    cases = load_cases(args.data)
    out = Path(args.out)
    if args.groups:
        study = robustness_study(cases, config, tuple(args.groups), args.folds, args.seed, _cv_progress)
        rows = [r for g, res in enumerate(study.groups) for r in res.rows(f"group{g}")]
        summary = {"t": study.t, "p": study.p, "groups": list(args.groups)}
    else:
        res = cross_validate(cases, CVPlan(args.folds, args.repetitions, args.seed), config, progress=_cv_progress)
        rows = list(res.rows("group0"))
        summary = {"mean_dice": float(np.mean(res.dice()))}
    write_rows(out / "cv_cases.csv", CV_HEADER, rows)
    summary.update(seed=args.seed, folds=args.folds)
    (out / "cv_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def cmd_sweep(args):
    config = config_from_args(args)
    cases = load_cases(args.data)
    n_train = args.train if args.train else (3 * len(cases)) // 4
    if not 0 < n_train < len(cases):
        raise CommandFailed(f"--train must leave at least one test case (got {n_train} of {len(cases)})")
    seeds = range(config.seed, config.seed + args.repeat) if args.repeat > 1 else None
    rows = sweep(cases[:n_train], cases[n_train:], config, args.axis, seeds=seeds,
                 progress=lambda label, d: log.info("%s: dice %.4f", label, d))
    path = write_rows(args.out, SWEEP_HEADER, sweep_table(rows, config))
    print(path)


def cmd_gradcheck(args):
    rows, worst = [], 0.0
    for k in args.k:
        for kind in args.cases:
            for seed in range(args.seed, args.seed + args.seeds):
                err = loss_gradcheck(seed, k, kind)
                worst = max(worst, err)
                rows.append((seed, k, kind, f"{err:.3e}", "pass" if err < GRADCHECK_TOL else "FAIL"))
    writer = sys.stdout
    writer.write("seed,k,case,max_rel_error,status\n")
    for r in rows:
        writer.write(",".join(str(x) for x in r) + "\n")
    if args.out:
        write_rows(args.out, ("seed", "k", "case", "max_rel_error", "status"), rows)
    if worst >= GRADCHECK_TOL:
        raise CommandFailed(f"max relative error {worst:.3e} >= {GRADCHECK_TOL}")


def _progress(view, epoch, loss):
    log.info("%s epoch %d loss %.4f", view, epoch + 1, loss)


def _cv_progress(rep, fold, dice):
    log.info("repetition %d fold %d dice %.4f", rep, fold, dice)


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mdsnet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--dims", type=int, nargs=3, default=(32, 64, 64), metavar=("D", "L", "W"))
    p.add_argument("--variability", type=float, default=1.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("convert", help="convert between .npy arrays and volume files")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--kind", choices=("image", "label", "probability"), default="image")
    p.add_argument("--dtype", choices=("u8", "f32", "f64"), default=None)
    p.add_argument("--spacing", type=float, nargs=3)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train every view and the refiner")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="fused (or single-view) probability volume")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--view", choices=VIEWS)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("refine", help="refine a probability volume with the trained refiner")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--prob", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--mask", type=Path)
    p.add_argument("--thr", type=float, default=0.5)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("fuse", help="average aligned probability volumes and threshold")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--mean", type=Path)
    p.add_argument("--thr", type=float, default=0.5)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="metric report for a model or a prediction")
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--pred", type=Path)
    p.add_argument("--label", type=Path)
    p.add_argument("--no-refiner", action="store_true")
    p.add_argument("--thr", type=float, default=0.5, help="threshold for probability predictions")
    p.add_argument("--csv", type=Path)
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", help="repeated k-fold cross-validation")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--groups", type=int, nargs=2, metavar=("REPS_A", "REPS_B"),
                   help="run two repetition groups and t-test them")
    _add_config_flags(p, require_seed=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("sweep", help="hyper-parameter sweep")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--axis", required=True, choices=("k", "lambda", "lambda-float"))
    p.add_argument("--train", type=int, help="number of leading cases used for training")
    p.add_argument("--repeat", type=int, default=1, help="training seeds per setting (seed, seed+1, ...)")
    _add_config_flags(p, require_seed=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the stack-loss gradient")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, nargs="+", default=(1, 3, 7))
    p.add_argument("--cases", nargs="+", choices=STACK_CASES, default=STACK_CASES)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=1):
            args.func(args)
    except (CommandFailed, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"mdsnet {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0
