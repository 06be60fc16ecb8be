"""Command line interface for the mismatch-sv toolkit.

Exit codes: 0 success, 2 usage or validation error, 3 numerical/runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np

from . import core
from .cluster import ahc, classify_gender, fit_gender_model, gclc_two_step, kmeans
from .core import EmbeddingSet, FormatError, MismatchSVError, NumericalError
from .evalcal import (CalibrationModel, CostParams, FusionModel, det_points, equalized_metric,
                      format_metrics, metrics_report, train_calibration, train_fusion)
from .plda import PldaModel, interpolate_plda, pseudo_label_plda, train_plda
from .preprocess import (SubspaceModel, WhitenModel, apply_whiten, fit_nuisance_subspace,
                         fit_whiten, length_normalize, pca_subspace, remove_subspace)
from .scorenorm import COSINE, Cohort, glnorm, score_trials, snorm_with_cohort
from . import pipeline

EXIT_USAGE = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("mismatch_sv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _priors(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad prior list {text!r}") from None


def _load(vectors, labels=None) -> EmbeddingSet:
    return core.load_embeddings(vectors, labels)


def _write_vectors(data: EmbeddingSet, path) -> None:
    core.ensure_parent(path)
    core.save_embeddings(data, path)


def _backend(args):
    if args.backend == "plda":
        if not args.plda:
            raise FormatError("--backend plda needs --plda MODEL")
        return PldaModel.load(args.plda)
    return COSINE


# ----------------------------------------------------------------- commands

def cmd_simulate(args) -> None:
    with open(args.config, encoding="utf-8") as f:
        stage = json.load(f)
    stage = {**stage, "stage": "simulate", "seed": args.seed}
    state = pipeline.State()
    pipeline._stage_simulate(state, stage, {"seed": args.seed})
    os.makedirs(args.out, exist_ok=True)
    pipeline._write_sets(state, args.out, "simulate")


def cmd_preprocess(args) -> None:
    if len(args.input) != len(args.output):
        raise FormatError("--input and --output must be given the same number of times")
    if args.model:
        loader = WhitenModel.load if args.op == "whiten" else SubspaceModel.load
        model = loader(args.model)
    elif args.op == "lengthnorm":
        model = None
    else:
        if not args.fit:
            raise FormatError(f"--op {args.op} needs --fit VECTORS or --model MODEL")
        fit = EmbeddingSet.concat([_load(v, l) for v, l in
                                   zip(args.fit, args.fit_labels or [None] * len(args.fit))])
        if args.op == "whiten":
            model = fit_whiten(fit, args.ridge)
        elif args.op == "pca":
            model = pca_subspace(fit, args.k)
        else:
            grouping = args.grouping.split(",") if args.grouping else (
                ["dataset", "gender"] if args.op == "idvc" else ["language", "gender"])
            model = fit_nuisance_subspace(fit, grouping, args.k, args.center)
    if args.model_out and model is not None:
        core.ensure_parent(args.model_out)
        model.save(args.model_out)
    for src, dst in zip(args.input, args.output):
        data = _load(src)
        if args.op == "lengthnorm":
            out = length_normalize(data)
        elif args.op == "whiten":
            out = apply_whiten(data, model)
            if args.lengthnorm:
                out = length_normalize(out)
        else:
            out = remove_subspace(data, model)
        _write_vectors(out, dst)


def cmd_cluster(args) -> None:
    data = _load(args.vectors, args.labels)
    if args.mode == "gender":
        if not args.gender_from:
            raise FormatError("--mode gender needs --gender-from VECTORS LABELS")
        gm = fit_gender_model(_load(*args.gender_from))
        genders = classify_gender(data, gm)
        out = data.with_labels(genders=[genders[i] for i in data.ids])
    else:
        if args.k is None:
            raise FormatError(f"--mode {args.mode} needs --k")
        if args.mode == "kmeans":
            if args.seed is None:
                raise FormatError("--mode kmeans needs --seed")
            res = kmeans(data, args.k, seed=args.seed, max_iter=args.max_iter)
        elif args.mode == "ahc":
            res = ahc(data, args.k)
        else:
            if args.init == "subspace":
                if args.seed is None:
                    raise FormatError("--init subspace needs --seed")
                sub = SubspaceModel.load(args.subspace) if args.subspace else pca_subspace(data, args.pca_dims)
            else:
                sub = None
            res = gclc_two_step(data, args.k, args.init, sub, seed=args.seed or 0,
                                max_iter=args.max_iter)
        field = {"speaker": "speakers", "language": "languages", "dataset": "datasets"}[args.field]
        prefix = args.prefix if args.prefix is not None else ("L" if args.field == "language" else "c")
        out = data.with_labels(**{field: [f"{prefix}{res.labels[i]}" for i in data.ids]})
    core.ensure_parent(args.out)
    core.save_labels(out, args.out)


def cmd_plda_train(args) -> None:
    model = train_plda(_load(args.vectors, args.labels), args.iters)
    core.ensure_parent(args.out)
    model.save(args.out)


def cmd_plda_interp(args) -> None:
    out_model = PldaModel.load(args.out_domain)
    if args.unlabeled:
        if args.k is None:
            raise FormatError("--unlabeled needs --k")
        model = pseudo_label_plda(_load(args.unlabeled), args.k, out_model, args.alpha, args.iters)
    else:
        if not args.in_domain:
            raise FormatError("need --in-domain MODEL or --unlabeled VECTORS")
        model = interpolate_plda(PldaModel.load(args.in_domain), out_model, args.alpha)
    core.ensure_parent(args.out)
    model.save(args.out)


def _models(args) -> EmbeddingSet:
    if args.models:
        return _load(args.models)
    if args.enroll and args.registry:
        return core.build_enrollment_models(_load(args.enroll), core.load_registry(args.registry))
    raise FormatError("need --models VECTORS or --enroll VECTORS with --registry FILE")


def cmd_score(args) -> None:
    models = _models(args)
    if args.models_out:
        _write_vectors(models, args.models_out)
    scores = score_trials(_backend(args), models, _load(args.test), core.load_trials(args.trials))
    core.ensure_parent(args.out)
    core.save_scores(scores, args.out)


def cmd_snorm(args) -> None:
    raw = core.load_scores(args.scores)
    out = snorm_with_cohort(raw, _backend(args), _load(args.models), _load(args.test),
                            _load(args.cohort), top_n=args.top_n, fallback=args.fallback)
    core.ensure_parent(args.out)
    core.save_scores(out, args.out)


def _categories(labels_path) -> dict[str, tuple[str, str]]:
    return {i: (g.value, lang) for i, (_, g, lang, _) in core.load_labels(labels_path).items()}


def cmd_glnorm(args) -> None:
    raw = core.load_scores(args.scores)
    cohort = _load(args.cohort)
    cats = _categories(args.cohort_labels)
    side = {}
    for path in args.side_labels:
        side.update(_categories(path))
    out = glnorm(raw, Cohort(cohort, cats), _backend(args), _load(args.models), _load(args.test),
                 side, fallback=args.fallback)
    core.ensure_parent(args.out)
    core.save_scores(out, args.out)


def cmd_calibrate(args) -> None:
    params = CostParams(args.priors)
    prior = args.prior if args.prior is not None else params.effective_prior
    if args.model:
        model = CalibrationModel.load(args.model)
    else:
        if not (args.scores and args.key):
            raise FormatError("training needs --scores and --key (or give --model)")
        model = train_calibration(core.load_scores(args.scores, core.load_key(args.key)), prior)
        if args.out:
            core.ensure_parent(args.out)
            model.save(args.out)
    if args.apply:
        core.ensure_parent(args.apply_out)
        core.save_scores(model.apply(core.load_scores(args.apply)), args.apply_out)


def cmd_fuse(args) -> None:
    params = CostParams(args.priors)
    prior = args.prior if args.prior is not None else params.effective_prior
    if args.model:
        model = FusionModel.load(args.model)
        subsystems = [core.load_scores(p) for p in args.scores]
    else:
        key = core.load_key(args.key) if args.key else None
        if key is None:
            raise FormatError("fusion training needs --key")
        subsystems = [core.load_scores(p) for p in args.scores]
        from .evalcal import check_aligned
        check_aligned(subsystems)
        subsystems = [core.load_scores(p, key) for p in args.scores]
        model = train_fusion(subsystems, prior, args.l2)
        if args.out:
            core.ensure_parent(args.out)
            model.save(args.out)
    if args.fused_out:
        core.ensure_parent(args.fused_out)
        core.save_scores(model.fuse(subsystems), args.fused_out)


def cmd_metrics(args) -> None:
    params = CostParams(args.priors)
    scores = core.load_scores(args.scores, core.load_key(args.key))
    values = metrics_report(scores, params)
    if args.partition:
        cells = {}
        for lineno, fields in core._lines(args.partition):
            if len(fields) != 3:
                raise FormatError(f"{args.partition}:{lineno}: expected 'model segment category'")
            cells[(fields[0], fields[1])] = fields[2]
        for name in ("eer", "min_cprimary", "act_cprimary"):
            v = equalized_metric(scores, cells, name, params)
            values[f"equalized_{name}"] = 100.0 * v if name == "eer" else v
    text = format_metrics(values)
    sys.stdout.write(text)
    if args.out:
        core.ensure_parent(args.out)
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    if args.det_out:
        tar, non = scores.split()
        _, p_miss, p_fa = det_points(tar, non)
        core.ensure_parent(args.det_out)
        with open(args.det_out, "w", encoding="utf-8", newline="\n") as f:
            for a, b in zip(p_fa, p_miss):
                f.write(f"{a:.6f}\t{b:.6f}\n")


def cmd_pipeline(args) -> None:
    config = pipeline.load_config(args.config)
    if args.check:
        pipeline.validate(config)
        print(f"{args.config}: OK ({len(config['stages'])} stages)")
        return
    state = pipeline.run_pipeline(config, args.workdir, intermediates=not args.no_intermediates)
    if "metrics" in state.outputs:
        sys.stdout.write(state.outputs["metrics"])


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mismatch-sv", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: $MISMATCH_SV_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        return p

    def backend_opts(p):
        p.add_argument("--backend", choices=("plda", "cosine"), default="plda")
        p.add_argument("--plda", help="PLDA model file (plda backend)")

    p = add("simulate", cmd_simulate, "generate a synthetic corpus and protocol")
    p.add_argument("--config", required=True, help="JSON with the simulate stage parameters")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("preprocess", cmd_preprocess, "IDVC/ILVC subspace removal, whitening, length-norm")
    p.add_argument("--op", required=True, choices=("idvc", "ilvc", "pca", "whiten", "lengthnorm"))
    p.add_argument("--fit", action="append", help="vectors to fit on (repeatable)")
    p.add_argument("--fit-labels", action="append", help="labels for each --fit file")
    p.add_argument("--model", help="use a saved model instead of fitting")
    p.add_argument("--model-out")
    p.add_argument("--grouping", help="comma-separated label keys, e.g. dataset,gender")
    p.add_argument("--k", type=int, help="removed dimensions (default: rank)")
    p.add_argument("--center", choices=("groups", "data"), default="groups")
    p.add_argument("--ridge", type=float)
    p.add_argument("--lengthnorm", action="store_true", help="length-normalize after whitening")
    p.add_argument("--input", action="append", default=[], help="vectors to transform (repeatable)")
    p.add_argument("--output", action="append", default=[], help="output for each --input")

    p = add("cluster", cmd_cluster, "k-means, AHC, two-step GCLC or gender classification")
    p.add_argument("--vectors", required=True)
    p.add_argument("--labels")
    p.add_argument("--mode", choices=("kmeans", "ahc", "gclc", "gender"), required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--init", choices=("ahc", "subspace"), default="ahc")
    p.add_argument("--subspace", help="subspace model for --init subspace (default: PCA)")
    p.add_argument("--pca-dims", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--field", choices=("speaker", "language", "dataset"), default="speaker",
                   help="label field receiving the cluster index")
    p.add_argument("--prefix", help="prefix for cluster names")
    p.add_argument("--gender-from", nargs=2, metavar=("VECTORS", "LABELS"))
    p.add_argument("--out", required=True, help="output label file")

    p = add("plda-train", cmd_plda_train, "EM training of a two-covariance PLDA")
    p.add_argument("--vectors", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out", required=True)

    p = add("plda-interp", cmd_plda_interp, "interpolate in-domain and out-of-domain PLDA")
    p.add_argument("--out-domain", required=True)
    p.add_argument("--in-domain")
    p.add_argument("--unlabeled", help="train the in-domain model on AHC pseudo-speakers")
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, "score trials")
    backend_opts(p)
    p.add_argument("--models", help="pooled model vectors")
    p.add_argument("--enroll", help="enrollment segment vectors (pooled via --registry)")
    p.add_argument("--registry")
    p.add_argument("--models-out")
    p.add_argument("--test", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)

    for name, fn in (("snorm", cmd_snorm), ("glnorm", cmd_glnorm)):
        p = add(name, fn, "symmetric score normalisation" if name == "snorm"
                else "gender/language dependent S-norm")
        backend_opts(p)
        p.add_argument("--scores", required=True)
        p.add_argument("--models", required=True)
        p.add_argument("--test", required=True)
        p.add_argument("--cohort", required=True)
        p.add_argument("--fallback", action="store_true", help="pass raw score through when sigma=0")
        p.add_argument("--out", required=True)
        if name == "snorm":
            p.add_argument("--top-n", type=int)
        else:
            p.add_argument("--cohort-labels", required=True, help="label file with cohort categories")
            p.add_argument("--side-labels", action="append", required=True,
                           help="label file(s) with model/test categories")

    p = add("calibrate", cmd_calibrate, "train and/or apply linear calibration")
    p.add_argument("--scores")
    p.add_argument("--key")
    p.add_argument("--priors", type=_priors, default=(0.01, 0.005))
    p.add_argument("--prior", type=float, help="effective prior (default: mean of --priors)")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--apply")
    p.add_argument("--apply-out")

    p = add("fuse", cmd_fuse, "train and/or apply linear fusion")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--key")
    p.add_argument("--priors", type=_priors, default=(0.01, 0.005))
    p.add_argument("--prior", type=float)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--fused-out")

    p = add("metrics", cmd_metrics, "EER, min/act C_primary")
    p.add_argument("--scores", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--priors", type=_priors, default=(0.01, 0.005))
    p.add_argument("--partition", help="file of 'model segment category' lines for equalized metrics")
    p.add_argument("--out")
    p.add_argument("--det-out", help="write (P_fa, P_miss) points")

    p = add("pipeline", cmd_pipeline, "run a JSON-configured pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--check", action="store_true", help="validate the config only")
    p.add_argument("--workdir")
    p.add_argument("--no-intermediates", action="store_true")
    return parser


def _thread_limit(n):
    if n is None:
        env = os.environ.get("MISMATCH_SV_THREADS")
        n = int(env) if env else None
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit(args.threads):
            args.func(args)
    except NumericalError as exc:
        print(f"mismatch-sv: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except np.linalg.LinAlgError as exc:
        print(f"mismatch-sv: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"mismatch-sv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MismatchSVError as exc:
        print(f"mismatch-sv: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
