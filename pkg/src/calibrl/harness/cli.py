"""``calibrl`` command line.

Exit codes: 0 success, 2 validation error, 3 runtime or diagnostic error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import calibration as cal
from .. import diagnostics as diag
from .. import posthoc
from .. import trainers as tr
from ..errors import DiagnosticError, ValidationError
from ..policy import PolicyParams
from ..synthworld import read_instances, sample_instances, write_instances
from .config import MODES, load_config
from .pipeline import ID_BASE, StageError, make_base, make_datasets, run_experiment
from .plotting import render_reliability_svg
from .report import tabulate

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("calibrl")


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="calibrl", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="emit instances as JSONL")
    g.add_argument("--split", choices=sorted(ID_BASE), default="train")
    g.add_argument("-n", type=int, default=None, help="instance count (default from [data])")

    t = sub.add_parser("train", parents=[common], help="train one mode from Base or a checkpoint")
    t.add_argument("--mode", choices=MODES, required=True)
    t.add_argument("--init", type=Path, default=None, help="initial checkpoint (.bin); default: warm up Base")
    t.add_argument("--train-data", type=Path, default=None)
    t.add_argument("--val-data", type=Path, default=None)

    e = sub.add_parser("eval", parents=[common], help="greedy-decode and score a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default="in_domain")
    e.add_argument("--method", default="")

    d = sub.add_parser("diagnose", parents=[common], help="run a diagnostic study")
    d.add_argument("study", choices=("overconfidence", "swap"))
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)

    ph = sub.add_parser("posthoc", parents=[common], help="fit or apply a post-hoc calibrator")
    ph.add_argument("action", choices=("fit", "apply"))
    ph.add_argument("--records", type=Path, required=True)
    ph.add_argument("--method", choices=("platt", "isotonic"), default="isotonic")
    ph.add_argument("--calibrator", type=Path, default=None, help="calibrator JSON (apply)")

    r = sub.add_parser("report", parents=[common], help="tabulate runs and render reliability plots")
    r.add_argument("runs", nargs="*", type=Path)
    r.add_argument("--plots", type=Path, default=None, help="directory for SVG reliability diagrams")

    sub.add_parser("run", parents=[common], help="full comparison pipeline")
    return parser


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def _out(args, default: Path) -> Path:
    return getattr(args, "out", None) or default


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def cmd_gen(args) -> int:
    cfg = _config(args)
    spec = {"ood": cfg.ood_task, "pretrain": cfg.pretrain_task}.get(args.split, cfg.task)
    sizes = {"train": cfg.data.n_train, "val": cfg.data.n_val, "eval": cfg.data.n_eval,
             "ood": cfg.data.n_ood, "pretrain": cfg.warmup.n_instances}
    n = args.n if args.n is not None else sizes[args.split]
    if n < 0:
        raise ValidationError("-n must be ≥ 0")
    insts = sample_instances(spec, n, cfg.seed, ID_BASE[args.split])
    out = _out(args, cfg.output_dir / f"{args.split}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_instances(insts, out)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = make_datasets(cfg)
    train_set = read_instances(args.train_data) if args.train_data else data.train
    val_set = read_instances(args.val_data) if args.val_data else data.val
    init = PolicyParams.load(args.init) if args.init else make_base(cfg, data)[0]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10 + MODES.index(args.mode) + 1]))
    result = tr.train(args.mode, init, train_set, val_set, cfg.train[args.mode], rng)
    out = _out(args, cfg.output_dir / "checkpoints" / args.mode)
    path = result.best.save(out)
    hist = path.with_name(path.stem + "_history.jsonl")
    hist.write_text("".join(json.dumps(h) + "\n" for h in result.history_dicts()))
    b = result.history[result.best_epoch]
    print(f"{path}  best_epoch={result.best_epoch} accuracy={b.eval_accuracy:.4f} ece={b.eval_ece:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    params = PolicyParams.load(args.checkpoint)
    recs = cal.extract_records(params, read_instances(args.data), split=args.split, method=args.method)
    report = cal.calibration_report(recs, cfg.eval.bins, cfg.eval.threshold, cfg.eval.binning)
    out = getattr(args, "out", None)
    if out is not None:
        cal.write_records(recs, out)
    print(json.dumps(report.metrics()))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    params = PolicyParams.load(args.checkpoint)
    insts = read_instances(args.data)
    dc = cfg.diagnostics
    rng = np.random.default_rng(cfg.seed)
    if args.study == "overconfidence":
        study = diag.rollout_confidence_study(
            params, insts[: dc.n_instances], dc.samples_per_instance, dc.temperature, cfg.eval.threshold, rng
        )
        summary = {"ratio": study.ratio, "n": study.n}
        confs = study.confidences
    else:
        study = diag.swap_study(params, insts, dc.confidence_floor, rng)
        summary = {"flip_ratio": study.flip_ratio, "n": study.n}
        confs = study.flipped_confidences
    out = getattr(args, "out", None)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(study.to_json()) + "\n")
        out.with_suffix(".csv").write_text(diag.histogram_csv(confs))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_posthoc(args) -> int:
    recs = cal.read_records(args.records)
    if args.action == "fit":
        fitted = posthoc.fit_platt(recs) if args.method == "platt" else posthoc.fit_isotonic(recs)
        _emit(posthoc.calibrator_to_json(fitted) + "\n", getattr(args, "out", None))
        return EXIT_OK
    if args.calibrator is None:
        raise ValidationError("posthoc apply needs --calibrator")
    fitted = posthoc.load_calibrator(args.calibrator)
    tag = "platt" if isinstance(fitted, posthoc.PlattParams) else "isotonic"
    new = posthoc.recalibrate_records(fitted, recs, tag)
    out = getattr(args, "out", None)
    if out is None:
        for r in new:
            print(json.dumps(r.to_json()))
    else:
        cal.write_records(new, out)
    return EXIT_OK


def cmd_report(args) -> int:
    table = tabulate(args.runs)
    _emit(table, getattr(args, "out", None))
    if args.plots is not None:
        cfg = _config(args)
        for run in args.runs:
            mpath = run / "metrics.jsonl"
            if not mpath.exists():
                continue
            for line in mpath.read_text().splitlines():
                row = json.loads(line)
                recs = cal.read_records(run / row["records"])
                bins, hist = cal.reliability_bins(recs, cfg.eval.bins, cfg.eval.binning)
                tag = "" if row["posthoc"] == "none" else f"_{row['posthoc']}"
                name = f"{run.name}_{row['method']}_{row['split']}{tag}.svg"
                render_reliability_svg(bins, hist, args.plots / name,
                                       title=f"{row['method']} / {row['split']}{tag.replace('_', ' / ')}",
                                       ece=row["ece"])
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg.output_dir)
    record = run_experiment(cfg, out)
    for row in record.metrics:
        if row["posthoc"] == "none" and row["split"] != "in_domain_heldout":
            print(f"{row['method']:>5} {row['split']:<10} acc={row['accuracy']:.4f} ece={row['ece']:.4f}")
    print(f"wrote {out} in {record.wall_clock:.1f}s")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose,
    "posthoc": cmd_posthoc, "report": cmd_report, "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        code = EXIT_VALIDATION if isinstance(exc.cause, ValidationError) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (DiagnosticError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
