"""``fineformer`` command line: gen-data, train, eval, gradcheck, attn-report.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .architectures import CrossEncoderModel, build_model
from .config import ConfigError, RunConfig, load_run_config
from .evaluation import attention_match_scores, evaluate
from .gradcheck import run_suite
from .synthdata import bag_of_features_bayes_bound, generate_dataset, load_dataset, save_dataset
from .training import Checkpoint, NonFiniteLossError, train

logger = logging.getLogger("fineformer")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"fineformer: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _out_dir(run: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else run.path("out", "runs/default")
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.ini").write_text(run.to_ini())
    return out


def _dataset(run: RunConfig, out: Path, required: bool = False):
    path = run.path("dataset")
    if path is None:
        candidate = out / "dataset.ffds"
        if candidate.exists():
            path = candidate
    if path is not None:
        if not path.exists():
            raise UsageError(f"dataset file {path} does not exist")
        spec, train_set, test_set = load_dataset(path)
        return spec, train_set, test_set
    if required:
        raise UsageError("no dataset: set paths.dataset or run gen-data first")
    return (run.data, *generate_dataset(run.data))


def _checkpoint(run: RunConfig, out: Path) -> Checkpoint:
    path = run.path("checkpoint", out / "final.ffck")
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return Checkpoint.load(path)


def cmd_gen_data(run: RunConfig, args) -> int:
    out = _out_dir(run, args)
    train_set, test_set = generate_dataset(run.data)
    path = run.path("dataset", out / "dataset.ffds")
    save_dataset(path, run.data, train_set, test_set)
    print(f"wrote {path}: {len(train_set)} train / {len(test_set)} test examples, "
          f"order-blind bound {bag_of_features_bayes_bound(run.data):.4f}")
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    out = _out_dir(run, args)
    _, train_set, test_set = _dataset(run, out)
    with T.default_dtype(run.train.dtype):
        model = build_model(run.arch, run.model, run.model_seed)
    resume = None
    if args.resume:
        if not Path(args.resume).exists():
            raise UsageError(f"checkpoint {args.resume} does not exist")
        resume = Checkpoint.load(args.resume)
    result = train(model, train_set, run.train, test_set, out_dir=out, resume=resume,
                   model_seed=run.model_seed)
    if result.history:
        last = result.history[-1]
        print(f"epoch {last.epoch}: train_loss={last.train_loss:.4f} "
              f"top1={100 * last.top1:.2f} mean_class_acc={100 * last.mean_class_acc:.2f}")
    print(f"wrote {out / 'metrics.csv'} and {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    out = _out_dir(run, args)
    ckpt = _checkpoint(run, out)
    _, _, test_set = _dataset(run, out)
    model = ckpt.build_model()
    report = evaluate(model, test_set, run.train.eval_batch_size)
    if report.empty_classes:
        print(f"classes without test examples (excluded from mean): {report.empty_classes}")
    print(report.summary())
    report.write_csv(out / "eval.csv")
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, args) -> int:
    results = run_suite(run.model_seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_attn_report(run: RunConfig, args) -> int:
    out = _out_dir(run, args)
    ckpt = _checkpoint(run, out)
    model = ckpt.build_model()
    if not isinstance(model, CrossEncoderModel):
        raise UsageError(f"attn-report needs a cross-encoder checkpoint, got arch {ckpt.header['arch']!r}")
    _, _, test_set = _dataset(run, out)
    attention, ratios = attention_report(model, test_set, run.train.eval_batch_size)
    write_attention_csv(out / "attention.csv", attention.mean(axis=0), ratios)
    valid = ratios[~np.isnan(ratios)]
    frac = float(np.mean(valid > 1.0)) if len(valid) else float("nan")
    print(f"match ratio > 1 for {frac:.2%} of attributes (mean ratio {np.nanmean(ratios):.3f})")
    return EXIT_OK


def attention_report(model: CrossEncoderModel, dataset, batch_size: int = 256):
    """Text-to-visual attention ``(n, N, T')`` over a dataset and per-attribute match ratios."""
    chunks = [model.cross_attention(dataset.inputs[s:s + batch_size], dataset.kind)
              for s in range(0, len(dataset), batch_size)]
    attention = np.concatenate(chunks)
    return attention, attention_match_scores(attention, dataset.attributes, model.config.vocab_size)


def write_attention_csv(path, matrix: np.ndarray, ratios: np.ndarray) -> None:
    """``N`` rows of mean attention over ``T'`` time steps, then one summary line."""
    valid = ratios[~np.isnan(ratios)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["attribute"] + [f"t{j}" for j in range(matrix.shape[1])] + ["match_ratio"])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(v)) for v in row] + [repr(float(ratios[i]))])
        frac = float(np.mean(valid > 1.0)) if len(valid) else float("nan")
        w.writerow(["summary", f"fraction_ratio_above_1={frac!r}",
                    f"mean_ratio={float(np.nanmean(ratios)) if len(valid) else float('nan')!r}"])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "attn-report": cmd_attn_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fineformer", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI config file with [model] [data] [train] [paths]")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.lr=0.05")
    parser.add_argument("--out", help="output directory (default: paths.out or runs/default)")
    parser.add_argument("--resume", help="checkpoint to resume training from")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_run_config(args.config, args.overrides)
        return COMMANDS[args.command](run, args)
    except (ConfigError, UsageError) as exc:
        print(f"fineformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"fineformer: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
