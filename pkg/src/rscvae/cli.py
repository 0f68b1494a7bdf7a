"""Command-line entry point: ``rscvae <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite loss.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .datasets import list_images, load_idx, read_image, resize_images
from .errors import ConfigError, DataError, InvalidInputError, NonFiniteLossError, ParseError
from .networks import load_checkpoint
from .pipeline import ARTIFACTS, evaluate_run, make_task, train_run, write_outputs
from .scoring import combine_scores, export_latents, norm_constants, normalize_scores, score_terms
from .trainer import seed_streams

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONFINITE = 0, 2, 3, 4
REPORT_COLUMNS = ("run", "name", "mode", "seed", "checkpoint", "epoch", "auroc", "s_a")


def _config(args):
    return load_config(args.config, args.set)


def _check_alpha(alpha):
    if alpha is not None and not 0.0 <= alpha <= 1.0:
        raise ConfigError("must lie in [0, 1]", "alpha")


def cmd_train(args):
    cfg = _config(args)
    result = train_run(cfg, args.output_dir)
    best = "n/a" if result.best_auroc is None else f"{result.best_auroc:.4f}"
    print(f"trained {cfg.epochs} epochs; best auroc {best} at epoch {result.best_epoch}")
    print(f"artifacts in {args.output_dir}")


def cmd_evaluate(args):
    _check_alpha(args.alpha)
    if args.write:
        report = write_outputs(args.run_dir, args.checkpoint, args.alpha)
    else:
        report, _ = evaluate_run(args.run_dir, args.checkpoint, args.alpha)
    if args.output:
        report.write(args.output)
    print(f"auroc {report.auroc:.6f} s_a {report.s_a:.6f} alpha {report.alpha}")


def _read_inputs(path, channels, size):
    path = Path(path)
    if path.is_dir():
        files = list_images(path)
        if not files:
            raise DataError(f"no images in {path}")
        return np.stack([read_image(f, size, channels) for f in files]), [f.name for f in files]
    arr, shape = load_idx(path)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != channels:
        raise DataError(f"{path}: cannot use array of shape {shape} as {channels}-channel images")
    return resize_images(arr, size), [f"{i:06d}" for i in range(len(arr))]


def cmd_score(args):
    _check_alpha(args.alpha)
    model, _ = load_checkpoint(args.checkpoint)
    c, size, _ = model.enc_spec.input_shape
    images, ids = _read_inputs(args.inputs, c, size)
    mut, recon = score_terms(model, images)
    if args.reference:
        ref = json.loads(Path(args.reference).read_text())["norm_constants"]
        constants = (ref["e_mut"], ref["e_recon"])
    else:
        constants = norm_constants(mut, recon)
    s = combine_scores(mut, recon, constants, args.alpha)
    s_prime = normalize_scores(s) if len(s) > 1 else np.zeros(1)
    out = {
        "alpha": args.alpha,
        "norm_constants": {"e_mut": constants[0], "e_recon": constants[1]},
        "samples": [
            {"id": i, "s": float(a), "s_prime": float(b), "mut": float(m), "recon": float(r)}
            for i, a, b, m, r in zip(ids, s, s_prime, mut, recon)
        ],
    }
    text = json.dumps(out, indent=1, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_split(args):
    cfg = _config(args)
    task = make_task(cfg, seed_streams(cfg.seed))
    task.write_manifest(args.output)
    n_anom_train = sum(r.label for r in task.train)
    n_anom_test = sum(r.label for r in task.test)
    print(f"train {len(task.train)} ({n_anom_train} anomalies) "
          f"test {len(task.test)} ({len(task.test) - n_anom_test} normal, {n_anom_test} anomalous)")


def cmd_export(args):
    _, (model, x, y, ids) = evaluate_run(args.run_dir, args.checkpoint)
    output = args.output or Path(args.run_dir) / ARTIFACTS["embeddings"]
    mu = export_latents(model, x, y, ids, output)
    print(f"wrote {mu.shape[0]} rows of dimension {mu.shape[1]} to {output}")


def report_rows(run_dirs):
    rows = []
    for run in run_dirs:
        path = Path(run) / ARTIFACTS["report"]
        if not path.is_file():
            raise DataError(f"{path} does not exist")
        rep = json.loads(path.read_text())
        meta = rep.get("meta", {})
        rows.append({
            "run": str(run), "name": meta.get("name", ""), "mode": meta.get("mode", ""),
            "seed": meta.get("seed", ""), "checkpoint": meta.get("checkpoint", ""),
            "epoch": meta.get("epoch", ""), "auroc": rep["auroc"], "s_a": rep["s_a"],
        })
    return rows


def format_table(rows):
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    table = [list(REPORT_COLUMNS)] + [[cell(r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table)


def cmd_report(args):
    rows = report_rows(args.run_dirs)
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        print(format_table(rows))


def build_parser():
    p = argparse.ArgumentParser(prog="rscvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted for nested keys); repeatable")

    sp = sub.add_parser("train", help="train a model and write the run directory")
    with_config(sp)
    sp.add_argument("--output-dir", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a run's test split")
    sp.add_argument("run_dir")
    sp.add_argument("--checkpoint", choices=("best", "final"), default="best")
    sp.add_argument("--alpha", type=float, default=None, help="override the score mixing weight")
    sp.add_argument("--output", help="write the score report here")
    sp.add_argument("--write", action="store_true",
                    help="refresh score_report.json and embeddings.csv in the run directory")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("score", help="score new images with a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("inputs", help="IDX image file or a directory of images")
    sp.add_argument("--reference", help="score_report.json whose normalization constants to reuse")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("split", help="write the train/test manifest of a config")
    with_config(sp)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("export-embeddings", help="write posterior means of the test split as CSV")
    sp.add_argument("run_dir")
    sp.add_argument("--checkpoint", choices=("best", "final"), default="best")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("report", help="tabulate the score reports of several runs")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
