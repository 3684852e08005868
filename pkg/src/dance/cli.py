"""Batch command line: ``dance <subcommand> [options]``.

Exit status is 0 on success, 1 on invalid input or arguments, 2 on I/O or
file-format errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dance import __version__
from dance.conformal import (
    DETERMINISTIC,
    DISJOINT,
    REUSE,
    SMOOTHED,
    ScoreConfig,
    calibrate,
    dance_membership,
    select_lambda,
)
from dance.data import EmbeddedDataset, partition, synth_gaussian_mixture
from dance.errors import DanceError, FormatError, ValidationError
from dance.experiment import GRID, METHODS, ExperimentConfig, SyntheticSpec, monte_carlo_coverage, run_experiment
from dance.io import (
    canonical_json,
    read_artifact,
    read_dataset,
    read_model,
    write_artifact,
    write_dataset,
    write_model,
    write_report,
)
from dance.neighbors import build_index
from dance.rfm import RfmConfig, tune_hyperparameters

log = logging.getLogger("dance")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _lambda(text):
    if text == GRID:
        return GRID
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1] or {GRID!r}, got {text!r}") from None
    return value


def _methods(text):
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {','.join(METHODS)}")
    return names


def _synthetic(text):
    aliases = {"sigma": "noise_sigma", "informative": "informative_dims", "per-class": "per_class"}
    fields = {}
    for part in filter(None, text.split(",")):
        key, _, value = part.partition("=")
        key = aliases.get(key.strip(), key.strip())
        if key not in SyntheticSpec.__dataclass_fields__:
            raise argparse.ArgumentTypeError(f"unknown synthetic field {key!r}")
        fields[key] = float(value) if key == "noise_sigma" else int(value)
    return SyntheticSpec(**fields)


def _shared(p, out_required=True):
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=_lambda, default=GRID)
    p.add_argument("--mode", choices=(REUSE, DISJOINT), default=REUSE)
    p.add_argument("--m-knn", type=int, default=100)
    p.add_argument("--m-clr", type=int, default=50)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--smoothing", choices=(SMOOTHED, DETERMINISTIC), default=SMOOTHED)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", type=_methods, default=("dance", "knn_only", "clr_only"))
    p.add_argument("--out", required=out_required)


def _rfm_flags(p):
    p.add_argument("--iterations", type=int, default=5, help="RFM iterations T")
    p.add_argument("--budget", type=int, default=25, help="random-search candidates")


def _source_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset file (.csv or binary)")
    src.add_argument("--synthetic", type=_synthetic,
                     help="e.g. classes=5,dim=8,per_class=200,sigma=0.5,informative=8,seed=0")


def build_parser():
    parser = _Parser(prog="dance", description="Neighborhood conformal prediction sets on embeddings.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic Gaussian-mixture dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--informative", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="tune and train the RFM adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    _rfm_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="compute conformal thresholds")
    p.add_argument("--model", required=True)
    p.add_argument("--cal", required=True, help="calibration dataset")
    p.add_argument("--reference", help="disjoint reference dataset (disjoint mode only)")
    _shared(p)

    p = sub.add_parser("predict", help="emit label sets as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--artifact")
    p.add_argument("--reference", required=True, help="reference dataset used at calibration")
    p.add_argument("--data", required=True, help="points to predict")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="run the full experiment pipeline")
    _source_flags(p)
    _shared(p)
    _rfm_flags(p)

    p = sub.add_parser("mc-validate", help="Monte Carlo coverage over re-partitions")
    _source_flags(p)
    _shared(p)
    _rfm_flags(p)
    p.add_argument("--trials", type=int, default=100)
    return parser


def _score_config(args):
    return ScoreConfig(args.m_knn, args.m_clr, args.tau, args.epsilon, args.smoothing, args.seed)


def _experiment_config(args):
    return ExperimentConfig(
        data_path=args.data,
        synthetic=args.synthetic,
        alpha=args.alpha,
        lam=args.lam,
        mode=args.mode,
        score=_score_config(args),
        rfm=RfmConfig(iterations=args.iterations, tuning_budget=args.budget, seed=args.seed),
        methods=args.methods,
        seed=args.seed,
        output_path=args.out,
    )


def _cmd_synth(args):
    data = synth_gaussian_mixture(args.classes, args.dim, args.per_class, args.sigma, args.informative, args.seed)
    write_dataset(data, args.out)


def _cmd_fit(args):
    data = read_dataset(args.data)
    train, val = partition(len(data), (0.8, 0.2), args.seed)
    config = RfmConfig(iterations=args.iterations, tuning_budget=args.budget, seed=args.seed)
    _, _, model = tune_hyperparameters(data.subset(train), data.subset(val), config)
    write_model(model, args.out)
    log.info("selected iteration %d, validation accuracy %.4f", model.selected_iteration, model.validation_accuracy)


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValidationError(f"--alpha must lie in (0, 1), got {alpha}")


def _cmd_calibrate(args):
    _check_alpha(args.alpha)
    model = read_model(args.model)
    cal = read_dataset(args.cal)
    cfg = _score_config(args)
    if args.mode == DISJOINT:
        if not args.reference:
            raise ValidationError("disjoint mode needs --reference")
        ref = read_dataset(args.reference)
        # keep reference ids apart from calibration ids
        ref = EmbeddedDataset(ref.embeddings, ref.labels, ref.class_count, len(cal) + np.arange(len(ref)))
        index = build_index(ref, model.learned_feature_matrix)
    else:
        if args.reference:
            raise ValidationError("reuse mode takes its reference from --cal; drop --reference")
        index = build_index(cal, model.learned_feature_matrix)
    lam = args.lam
    if lam == GRID:
        lam = select_lambda(cal, model.kernel, model.learned_feature_matrix, args.alpha, cfg=cfg,
                            reference=index if args.mode == DISJOINT else None, seed=args.seed)
    art = calibrate(cal, index, model.kernel, args.alpha, lam, args.mode, cfg)
    write_artifact(art, args.out)


def _cmd_predict(args):
    if not args.artifact:
        raise ValidationError("predict needs --artifact from a previous calibrate run")
    model = read_model(args.model)
    art = read_artifact(args.artifact)
    ref = read_dataset(args.reference)
    data = read_dataset(args.data)
    index = build_index(ref, model.learned_feature_matrix)
    # test-point noise ids start after the calibration ids
    ids = art.n_cal + np.arange(len(data))
    member = dance_membership(data.embeddings, ids, art, index, model.kernel)
    lines = []
    for i in range(len(data)):
        lines.append(json.dumps({
            "index": i,
            "labels": [int(y) for y in np.flatnonzero(member["dance"][i])],
            "knn": [int(y) for y in np.flatnonzero(member["knn"][i])],
            "clr": [int(y) for y in np.flatnonzero(member["clr"][i])],
        }))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_evaluate(args):
    config = _experiment_config(args)
    reports = run_experiment(config)
    write_report(reports, args.out, config.echo())


def _cmd_mc_validate(args):
    if args.trials < 1:
        raise ValidationError("--trials must be at least 1")
    config = _experiment_config(args)
    results = monte_carlo_coverage(config, args.trials)
    doc = {
        "config": config.echo(),
        "trials": args.trials,
        "results": [{"method": m, "mean": r.mean, "std": r.std, "mean_set_size": r.mean_set_size,
                     "per_trial": r.per_trial} for m, r in results.items()],
    }
    Path(args.out).write_text(canonical_json(doc), encoding="utf-8")


COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "calibrate": _cmd_calibrate,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "mc-validate": _cmd_mc_validate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (FormatError, OSError) as exc:
        print(f"dance: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DanceError, ValueError) as exc:
        print(f"dance: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
