"""Command-line interface: transform, simulate, fit, predict, evaluate.

Exit codes: 0 success, 2 usage or validation error, 3 data-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (CountTable, Dataset, build_dataset, clr_transform, filter_features, fmt,
                   load_dataset, read_covariates_csv, read_long_csv, rescale_times,
                   write_covariates_csv, write_long_csv)
from .em import fit
from .errors import DataFormatError, SupFTSVDError, ValidationError
from .inference import (default_grid, predict_from_covariates, predict_trajectory,
                        project_subject, reconstruct_insample, to_model_time)
from .metrics import EvalReport, component_errors, mspe, r2_loading, r2_tensor
from .model import FitConfig, ModelFit
from .simulation import SimConfig, SimulationTruth, simulate, simulate_new_subjects

log = logging.getLogger("supftsvd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _range(text: str) -> tuple:
    vals = _floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("expected LOW,HIGH")
    return vals[0], vals[1]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")


def _read_model(path) -> ModelFit:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read model {path}: {exc}") from None
    return ModelFit.from_json(text)


def _read_truth(path) -> SimulationTruth:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read truth {path}: {exc}") from None
    return SimulationTruth.from_json(text)


def _align_covariates(model: ModelFit, names, values):
    """Append the intercept column when the model has one the file lacks."""
    if (len(names) + 1 == model.q and model.covariate_names
            and model.covariate_names[-1] == "intercept"):
        return list(names) + ["intercept"], {k: np.append(v, 1.0) for k, v in values.items()}
    return names, values


def _load_for_model(model: ModelFit, data_csv, covariates_csv) -> Dataset:
    """Read new data on the raw clock and map it onto the model's time scale."""
    ids, features, records = read_long_csv(data_csv)
    missing = sorted(set(model.feature_names) - set(features))
    extra = sorted(set(features) - set(model.feature_names))
    if missing or extra:
        raise DataFormatError(f"feature mismatch with model: missing {missing[:5]}, "
                              f"unexpected {extra[:5]}")
    names, covs = [], None
    if covariates_csv is not None:
        names, covs = read_covariates_csv(covariates_csv)
        names, covs = _align_covariates(model, names, covs)
    elif model.q:
        raise ValidationError(f"model uses {model.q} covariates; pass --covariates")
    ds = build_dataset(ids, list(model.feature_names), records, covs, names)
    if ds.q != model.q:
        raise ValidationError(f"covariates have {ds.q} columns; model expects {model.q}")
    mapped, clamped = to_model_time(model, ds)
    if clamped:
        log.warning("%d time points outside the training range were clamped", clamped)
    return mapped


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_transform(args) -> int:
    counts = load_dataset(args.counts, integer=True, cls=CountTable)
    if args.min_prevalence is not None or args.min_rel_abundance is not None:
        counts = filter_features(counts, args.min_prevalence, args.min_rel_abundance,
                                 args.min_samples)
    write_long_csv(clr_transform(counts), args.out)
    return 0


def cmd_simulate(args) -> int:
    r = len(args.lam)
    gamma = args.gamma or [[1.5, 3.0]] * r
    if args.zero_gamma:
        gamma = [[0.0] * len(g) for g in gamma]
    tau = args.tau or [1.0] * r
    config = SimConfig(n=args.n, p=args.p, gamma=tuple(map(tuple, gamma)), lam=tuple(args.lam),
                       tau=tuple(tau), sigma2=args.sigma2, m=args.m,
                       m_range=(args.m_min, args.m_max), seed=args.seed,
                       covariate_seed=args.covariate_seed)
    ds, truth = simulate(config)
    write_long_csv(ds, args.out_data)
    write_covariates_csv(ds, args.out_covariates)
    _write_text(args.out_truth, truth.to_json())
    if args.heldout_n:
        if not (args.out_heldout_data and args.out_heldout_covariates and args.out_heldout_truth):
            raise ValidationError("--heldout-n needs --out-heldout-data, "
                                  "--out-heldout-covariates and --out-heldout-truth")
        hd, ht = simulate_new_subjects(config, truth, args.heldout_n, args.heldout_seed)
        write_long_csv(hd, args.out_heldout_data)
        write_covariates_csv(hd, args.out_heldout_covariates)
        _write_text(args.out_heldout_truth, ht.to_json())
    return 0


def cmd_fit(args) -> int:
    ds = load_dataset(args.data, args.covariates, add_intercept=args.add_intercept)
    lo, hi = args.time_range if args.time_range else (None, None)
    ds = rescale_times(ds, lo, hi)
    config = FitConfig(rank=args.rank, eta_grid=tuple(args.eta_grid), cv_folds=args.folds,
                       cv_freeze_iter=args.s0, delta_stop=args.delta_stop,
                       max_iter=args.max_iter, seed=args.seed, cv_direction=args.cv_direction,
                       init_eta=args.init_eta, gls_beta=not args.no_gls_beta,
                       init=args.init)
    model = fit(ds, config)
    if not model.diagnostics["converged"]:
        log.warning("EM did not converge within %d iterations", config.max_iter)
    _write_text(args.out_model, model.to_json())
    if args.out_diagnostics:
        d = model.diagnostics
        header = ["iteration", "q_before", "q_after", "delta", "objective"]
        header += [f"eta_{k + 1}" for k in range(model.rank)]
        rows = [[it + 1, fmt(qb), fmt(qa), fmt(dl), fmt(ob), *(fmt(e) for e in eta)]
                for it, (qb, qa, dl, ob, eta) in enumerate(zip(
                    d["q_before"], d["q_after"], d["delta"], d["objective"], d["eta"]))]
        _write_csv(args.out_diagnostics, header, rows)
    return 0


def cmd_predict(args) -> int:
    model = _read_model(args.model)
    grid = default_grid(args.grid)
    raw_grid = model.to_raw_time(grid)
    pred_rows, score_rows = [], []

    def emit(sid, traj, zeta, u):
        for b, name in enumerate(model.feature_names):
            for t, v in zip(raw_grid, traj.values[b]):
                pred_rows.append([sid, fmt(t), name, fmt(v)])
        for k in range(model.rank):
            score_rows.append([sid, k + 1, fmt(zeta[k]), fmt(u[k])])

    if args.data is not None:
        ds = _load_for_model(model, args.data, args.covariates)
        for s in ds.subjects:
            scores = project_subject(model, s)
            emit(s.id, predict_trajectory(model, scores, grid), scores.zeta_hat, scores.u_hat)
    elif args.covariates is not None:
        if model.q == 0:
            raise ValidationError("covariate-only prediction is unavailable for a model "
                                  "fitted without covariates")
        names, covs = read_covariates_csv(args.covariates)
        names, covs = _align_covariates(model, names, covs)
        if len(names) != model.q:
            raise ValidationError(f"covariates have {len(names)} columns; model expects {model.q}")
        for sid, x in covs.items():
            emit(sid, predict_from_covariates(model, x, grid), x @ model.B, np.zeros(model.rank))
    else:
        raise ValidationError("predict needs --data and/or --covariates")
    _write_csv(args.out_predictions, ["subject_id", "time", "feature", "value"], pred_rows)
    if args.out_scores:
        _write_csv(args.out_scores, ["subject_id", "component", "zeta", "u_hat"], score_rows)
    return 0


def _require_identity_time(model: ModelFit):
    if model.time_origin != 0.0 or model.time_scale != 1.0:
        raise ValidationError("comparison with a truth file needs a model fitted on the [0, 1] "
                              "clock (fit with --time-range 0,1)")


def cmd_evaluate(args) -> int:
    if args.truth is None and args.heldout_data is None:
        raise ValidationError("evaluate needs --truth and/or --heldout-data")
    model = _read_model(args.model)
    report = EvalReport()
    if args.truth is not None:
        truth = _read_truth(args.truth)
        _require_identity_time(model)
        ds = None
        if args.data is not None:
            ds = _load_for_model(model, args.data, args.covariates)
        report.components = component_errors(model, truth,
                                             ds.X if ds is not None and ds.q else None)
        if ds is not None:
            report.r2_tensor = r2_tensor(ds, reconstruct_insample(model, ds))
            zeta = np.array([project_subject(model, s).zeta_hat for s in ds.subjects])
            X = ds.X if ds.q else truth.X
            report.r2_loading = list(r2_loading(zeta, X))
    if args.heldout_data is not None:
        if args.heldout_truth is None:
            raise ValidationError("--heldout-data needs --heldout-truth for the noise-free "
                                  "trajectories")
        _require_identity_time(model)
        ht = _read_truth(args.heldout_truth)
        hd = _load_for_model(model, args.heldout_data, args.heldout_covariates)
        if list(hd.subject_ids) != list(ht.subject_ids):
            raise DataFormatError("held-out data and held-out truth list different subjects")
        grid = default_grid(args.grid)
        preds = [predict_trajectory(model, project_subject(model, s), grid) for s in hd.subjects]
        report.mspe = mspe(preds, ht, grid)
        if model.q:
            cov = [predict_from_covariates(model, s.x, grid) for s in hd.subjects]
            report.mspe_covariate_only = mspe(cov, ht, grid)
    _write_text(args.out_report, report.to_json())
    if args.out_csv:
        row = report.csv_fields()
        _write_csv(args.out_csv, list(row), [["" if v is None else
                                              (fmt(v) if isinstance(v, float) else v)
                                              for v in row.values()]])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="supftsvd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("transform", help="filter features and CLR-transform a count table")
    p.add_argument("--counts", required=True, help="long-format integer counts CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--min-prevalence", type=float, help="minimum fraction of samples with count > 0")
    p.add_argument("--min-rel-abundance", type=float, help="relative abundance threshold")
    p.add_argument("--min-samples", type=int, help="samples that must reach --min-rel-abundance")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("simulate", help="draw a synthetic study with known truth")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--p", type=int, default=500)
    p.add_argument("--lam", type=_floats, default=[80.0], help="comma list, one per component")
    p.add_argument("--gamma", type=_floats, action="append",
                   help="covariate effects of one component (repeat per component)")
    p.add_argument("--zero-gamma", action="store_true", help="make covariates irrelevant")
    p.add_argument("--tau", type=_floats, help="loading noise variances, comma list")
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--m", type=int, help="fixed number of visits per subject")
    p.add_argument("--m-min", type=int, default=3)
    p.add_argument("--m-max", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--covariate-seed", type=int, default=0)
    p.add_argument("--out-data", required=True)
    p.add_argument("--out-covariates", required=True)
    p.add_argument("--out-truth", required=True)
    p.add_argument("--heldout-n", type=int, default=0, help="also draw this many test subjects")
    p.add_argument("--heldout-seed", type=int, default=1)
    p.add_argument("--out-heldout-data")
    p.add_argument("--out-heldout-covariates")
    p.add_argument("--out-heldout-truth")
    p.set_defaults(func=cmd_simulate)

    defaults = FitConfig()
    p = sub.add_parser("fit", help="fit the decomposition by penalized EM")
    p.add_argument("--data", required=True)
    p.add_argument("--covariates", help="omit for the unsupervised (q = 0) model")
    p.add_argument("--add-intercept", action="store_true")
    p.add_argument("--time-range", type=_range, help="LOW,HIGH raw times mapped to 0 and 1")
    p.add_argument("--rank", type=int, default=defaults.rank)
    p.add_argument("--eta-grid", type=_floats, default=list(defaults.eta_grid))
    p.add_argument("--init-eta", type=float)
    p.add_argument("--folds", type=int, default=defaults.cv_folds)
    p.add_argument("--s0", type=int, default=defaults.cv_freeze_iter,
                   help="iterations during which eta is cross-validated")
    p.add_argument("--delta-stop", type=float, default=defaults.delta_stop)
    p.add_argument("--max-iter", type=int, default=defaults.max_iter)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--cv-direction", choices=("max", "min"), default=defaults.cv_direction)
    p.add_argument("--no-gls-beta", action="store_true",
                   help="skip the observed-likelihood beta step before each E-step")
    p.add_argument("--init", choices=("best", "mean", "profile"), default=defaults.init,
                   help="starting values: subject-mean scores, profiled direction, or "
                        "whichever has the larger objective")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-diagnostics")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="project new subjects or predict from covariates")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="new subjects' long-format data (raw clock)")
    p.add_argument("--covariates")
    p.add_argument("--grid", type=int, default=101, help="number of evaluation points")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-predictions", required=True)
    p.add_argument("--out-scores")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a model against truth and/or held-out subjects")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", help="truth JSON of the training draw")
    p.add_argument("--data", help="training data, for in-sample R^2")
    p.add_argument("--covariates")
    p.add_argument("--heldout-data")
    p.add_argument("--heldout-covariates")
    p.add_argument("--heldout-truth")
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-report", required=True)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(limits=threads), warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return args.func(args)
    except SupFTSVDError as exc:
        print(f"supftsvd {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"supftsvd {args.command}: {exc}", file=sys.stderr)
        return DataFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
