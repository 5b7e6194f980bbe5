"""Command-line pipeline: gen, train, select, score, eval, run, sweep-lambda.

Exit codes: 0 success, 2 usage/validation, 3 I/O or file format, 4 numeric failure.
Every output file is written through a temp file and renamed on success.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import warnings

from ._binio import FormatError
from .datagen import ManifestError, SyntheticSpec, dataset_files, generate, load_manifest, write_files_atomically
from .encoder import checkpoint_bytes, load_checkpoint
from .estimator import SignDrivenDetector
from .metrics import EvalReport, evaluate
from .numcore import DegenerateInputError
from .scoring import anomaly_scores, predict_matrix, read_score_table, score_matrix, write_score_table
from .trainer import NumericError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


def _float_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("need at least one value")
    return values


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=50, help="full-batch epochs (default: %(default)s)")
    g.add_argument("--lr", type=float, default=1e-2, help="learning rate (default: %(default)s)")
    g.add_argument("--lambda", dest="lam", type=float, default=0.8,
                   help="frozen-path blend weight in [0, 1] (default: %(default)s)")
    g.add_argument("--optimizer", choices=["gd", "momentum"], default="gd",
                   help="update rule (default: %(default)s)")
    g.add_argument("--momentum", type=float, default=0.9, help="momentum coefficient (default: %(default)s)")
    g.add_argument("--safeguard", action="store_true",
                   help="halve the learning rate whenever an update raises the loss")
    g.add_argument("--seed", type=int, default=0, help="initialisation seed (default: %(default)s)")
    g.add_argument("--depth", type=int, default=4, help="frozen backbone layers (default: %(default)s)")
    g.add_argument("--hidden-width", type=int, default=None,
                   help="adapter bottleneck width (default: ceil(dim/4))")
    g.add_argument("--init-scale", type=float, default=0.01,
                   help="std of initial adapter weights (default: %(default)s)")


def _add_selection_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-selection", action="store_true", help="keep every prompt (ablation)")
    p.add_argument("--include-anchor", action="store_true",
                   help="let the anchor compete as a pseudo-category during selection")


def _estimator(args, **overrides) -> SignDrivenDetector:
    params = dict(
        lam=args.lam, epochs=args.epochs, learning_rate=args.lr, optimizer=args.optimizer,
        momentum=args.momentum, safeguard=args.safeguard, depth=args.depth,
        hidden_width=args.hidden_width, init_scale=args.init_scale,
        selection=not getattr(args, "no_selection", False),
        include_anchor_in_delta=getattr(args, "include_anchor", False), random_state=args.seed,
    )
    params.update(overrides)
    return SignDrivenDetector(**params)


def _validate_train_flags(args) -> None:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if not args.lr > 0:
        raise UsageError("--lr must be > 0")
    if not 0.0 <= args.lam <= 1.0:
        raise UsageError("--lambda must lie in [0, 1]")
    if args.depth < 1:
        raise UsageError("--depth must be >= 1")
    if args.hidden_width is not None and args.hidden_width < 1:
        raise UsageError("--hidden-width must be >= 1")


def _require_dir(path: str) -> None:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"output directory {path!r} does not exist")


def _load(manifest: str):
    try:
        return load_manifest(manifest)
    except (OSError, FormatError, ManifestError) as exc:
        raise StageError("load", exc)


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (OSError, FormatError, ManifestError, NumericError, DegenerateInputError) as exc:
        raise StageError(name, exc)


def _fit(args, train, prompts, **overrides):
    est = _estimator(args, **overrides)
    return _stage("train", est.fit, train.inputs, train.labels, prompts)


def _score(est, test):
    feats = est.transform(test.inputs)
    scores = score_matrix(feats, est.bank_, est.selection_)
    preds = predict_matrix(feats, est.bank_, est.selection_)
    anomaly = anomaly_scores(feats, est.bank_, est.selection_)
    return scores, preds, anomaly


def _eval(test, scores, preds, anomaly, categories) -> EvalReport:
    if len(test) == 0:
        raise StageError("eval", ValueError("manifest has no test records"))
    return evaluate(scores, preds, test.labels, categories, anomaly)


# -- subcommands --------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.categories < 2:
        raise UsageError("--categories must be >= 2 (sign selection needs two categories)")
    spec = SyntheticSpec(
        num_categories=args.categories, signs_per_category=args.signs, dim=args.dim,
        prompt_noise=args.prompt_noise, image_noise=args.image_noise, outlier_rate=args.outlier_rate,
        shots_per_category=args.shots, normal_shots=args.normal_shots,
        test_per_pattern=args.test_per_pattern, normal_test=args.normal_test,
        multi_label_rate=args.multi_label_rate, sign_spread=args.sign_spread,
        outlier_noise=args.outlier_noise, anchor_share=args.anchor_share,
        similarity_cap=args.similarity_cap, seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    _require_dir(args.out)
    try:
        data = generate(spec)
    except RuntimeError as exc:
        raise UsageError(str(exc))
    files = dataset_files(data)
    write_files_atomically(args.out, files)
    n_out = sum(int(data.truth.outlier_mask(c).sum()) for c in data.prompts.categories)
    print(f"wrote {len(files)} files to {args.out}")
    print(f"categories={spec.num_categories} signs={spec.signs_per_category} dim={spec.dim} "
          f"train={len(data.train)} test={len(data.test)} planted_outliers={n_out} seed={spec.seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    _validate_train_flags(args)
    _require_dir(args.out)
    train, _, prompts = _load(args.manifest)
    est = _fit(args, train, prompts)
    report = est.train_report_
    report.checkpoints = {"image": "image.ckpt", "text": "text.ckpt"}
    write_files_atomically(args.out, {
        "image.ckpt": checkpoint_bytes(est.image_model_),
        "text.ckpt": checkpoint_bytes(est.text_model_),
        "train_report.tsv": report.to_tsv().encode(),
    })
    print(_train_table(report))
    return EXIT_OK


def _train_table(report) -> str:
    first, last = report.records[0], report.records[-1]
    return (f"epochs={len(report)}  total loss {first.loss.total:.6f} -> {last.loss.total:.6f}  "
            f"margin rate {first.margin_rate:.3f} -> {last.margin_rate:.3f}")


def _fitted_from_checkpoints(args, prompts) -> SignDrivenDetector:
    def load(name):
        return load_checkpoint(os.path.join(args.checkpoints, name))

    image, text = _stage("load", load, "image.ckpt"), _stage("load", load, "text.ckpt")
    est = SignDrivenDetector(selection=not args.no_selection, include_anchor_in_delta=args.include_anchor)
    return _stage("select", est.set_models, image, text, prompts)


def _write_single(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    write_files_atomically(directory, {os.path.basename(path): text.encode()})


def cmd_select(args) -> int:
    _, _, prompts = _load(args.manifest)
    est = _fitted_from_checkpoints(args, prompts)
    _write_single(args.out, est.selection_.to_tsv(est.bank_))
    print(_selection_summary(est))
    return EXIT_OK


def _selection_summary(est) -> str:
    lines = [f"{'category':<20}{'kept':>6}{'discarded':>11}{'fallback':>10}"]
    for c in est.categories_:
        s = est.selection_.categories[c]
        lines.append(f"{c:<20}{len(s.kept):>6}{len(s.discarded):>11}{str(s.fallback_used):>10}")
    return "\n".join(lines)


def cmd_score(args) -> int:
    _, test, prompts = _load(args.manifest)
    est = _fitted_from_checkpoints(args, prompts)
    scores, preds, anomaly = _stage("score", _score, est, test)
    _write_single(args.out, write_score_table(test.ids, est.categories_, scores, preds, anomaly))
    print(f"scored {len(test)} images into {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, test, prompts = _load(args.manifest)
    with open(args.scores) as fh:
        try:
            ids, cats, scores, preds, anomaly = read_score_table(fh.read())
        except ValueError as exc:
            raise StageError("eval", OSError(f"{args.scores}: {exc}"))
    if list(ids) != list(test.ids) or tuple(cats) != tuple(prompts.categories):
        raise StageError("eval", OSError("score table does not match the manifest's test records"))
    report = _eval(test, scores, preds, anomaly, cats)
    _write_single(args.out, report.to_json())
    print(report.format_table())
    return EXIT_OK


def run_pipeline(args, train, test, prompts, **overrides):
    """train -> select -> score -> eval; returns (estimator, files, report)."""
    est = _fit(args, train, prompts, **overrides)
    scores, preds, anomaly = _stage("score", _score, est, test)
    report = _eval(test, scores, preds, anomaly, est.categories_)
    est.train_report_.checkpoints = {"image": "image.ckpt", "text": "text.ckpt"}
    files = {
        "image.ckpt": checkpoint_bytes(est.image_model_),
        "text.ckpt": checkpoint_bytes(est.text_model_),
        "train_report.tsv": est.train_report_.to_tsv().encode(),
        "selection.tsv": est.selection_.to_tsv(est.bank_).encode(),
        "scores.tsv": write_score_table(test.ids, est.categories_, scores, preds, anomaly).encode(),
        "eval.json": report.to_json().encode(),
    }
    return est, files, report


def cmd_run(args) -> int:
    _validate_train_flags(args)
    _require_dir(args.out)
    train, test, prompts = _load(args.manifest)
    est, files, report = run_pipeline(args, train, test, prompts)
    write_files_atomically(args.out, files)
    print(_train_table(est.train_report_))
    print(_selection_summary(est))
    print(report.format_table())
    return EXIT_OK


def sweep_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["lambda", "hamming", "subset_accuracy", "mean_category_auroc"])
    for lam, rep in rows:
        w.writerow([repr(float(lam)), repr(rep.hamming), repr(rep.subset_accuracy), repr(rep.mean_category_auroc)])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    _validate_train_flags(args)
    if any(not 0.0 <= lam <= 1.0 for lam in args.lambdas):
        raise UsageError("every --lambdas value must lie in [0, 1]")
    train, test, prompts = _load(args.manifest)
    rows = []
    for lam in args.lambdas:
        _, _, report = run_pipeline(args, train, test, prompts, lam=lam)
        rows.append((lam, report))
    table = sweep_table(rows)
    _write_single(args.out, table)
    print(f"{'lambda':>8}{'hamming':>10}{'subset':>10}{'mean AUROC':>12}")
    for lam, rep in rows:
        print(f"{lam:>8.3f}{rep.hamming:>10.4f}{rep.subset_accuracy:>10.4f}{rep.mean_category_auroc:>12.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multianomaly", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = SyntheticSpec()

    p = sub.add_parser("gen", help="generate a synthetic dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--seed", type=int, default=defaults.seed, help="generator seed")
    p.add_argument("--categories", type=int, default=defaults.num_categories, help="anomaly categories")
    p.add_argument("--signs", type=int, default=defaults.signs_per_category, help="sign prompts per category")
    p.add_argument("--dim", type=int, default=defaults.dim, help="embedding dimension")
    p.add_argument("--prompt-noise", type=float, default=defaults.prompt_noise, help="prompt noise norm")
    p.add_argument("--image-noise", type=float, default=defaults.image_noise, help="image noise norm")
    p.add_argument("--outlier-rate", type=float, default=defaults.outlier_rate,
                   help="probability a prompt is drawn from a foreign category")
    p.add_argument("--shots", type=int, default=defaults.shots_per_category, help="training shots per category")
    p.add_argument("--normal-shots", type=int, default=defaults.normal_shots, help="normal training shots")
    p.add_argument("--test-per-pattern", type=int, default=defaults.test_per_pattern,
                   help="test images per primary category")
    p.add_argument("--normal-test", type=int, default=defaults.normal_test, help="normal test images")
    p.add_argument("--multi-label-rate", type=float, default=defaults.multi_label_rate,
                   help="probability a test image carries a second category")
    p.add_argument("--sign-spread", type=float, default=defaults.sign_spread,
                   help="scatter of signs around their category direction")
    p.add_argument("--outlier-noise", type=float, default=defaults.outlier_noise,
                   help="distortion norm of outlier prompts")
    p.add_argument("--anchor-share", type=float, default=defaults.anchor_share,
                   help="weight of the category mean signs inside the normal direction")
    p.add_argument("--similarity-cap", type=float, default=defaults.similarity_cap,
                   help="maximum pairwise cosine between category directions")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train adapters and write checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="existing output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, out_help in [("select", cmd_select, "selection report (TSV)"),
                                 ("score", cmd_score, "score table (TSV)")]:
        p = sub.add_parser(name, help=f"write a {out_help} from trained checkpoints")
        p.add_argument("--manifest", required=True)
        p.add_argument("--checkpoints", required=True, help="directory holding image.ckpt and text.ckpt")
        p.add_argument("--out", required=True, help=f"output {out_help}")
        _add_selection_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a score table against the manifest's test labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scores", required=True, help="score table written by 'score'")
    p.add_argument("--out", required=True, help="output report (JSON)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="train, select, score and evaluate in one go")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="existing output directory")
    _add_train_flags(p)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-lambda", help="run the pipeline once per lambda value")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lambdas", type=_float_list, default=[0.2, 0.5, 0.8],
                   help="comma-separated lambda values (default: 0.2,0.5,0.8)")
    p.add_argument("--out", required=True, help="output table (TSV)")
    _add_train_flags(p)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _short_warning(message, category, filename, lineno, line=None):
    return f"warning: {message}\n"


def main(argv=None) -> int:
    previous = warnings.formatwarning
    warnings.formatwarning = _short_warning
    try:
        return _main(argv)
    finally:
        warnings.formatwarning = previous


def _main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        if isinstance(exc.cause, (NumericError, DegenerateInputError)):
            return EXIT_NUMERIC
        return EXIT_IO
    except (OSError, FormatError, ManifestError) as exc:
        print(f"error [io] {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, DegenerateInputError) as exc:
        print(f"error [numeric] {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
