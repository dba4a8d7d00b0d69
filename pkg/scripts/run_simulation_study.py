#!/usr/bin/env python3
"""Monte Carlo comparison of the supervised and unsupervised (q = 0) fits.

Covers the two simulation setups: varying the number of subjects with
3 to 8 visits each, and varying a fixed number of visits at n = 100. Each
setting is crossed with the noise variance, the loading-noise levels, the
model rank and relevant (gamma != 0) versus irrelevant (gamma = 0)
covariates. Every replicate writes one CSV row per fitting mode; a summary
table of means and standard deviations is printed at the end.

The defaults are the full design (p = 500, 100 replicates), which takes
many hours on one core. For a desk-scale run use e.g.

    python scripts/run_simulation_study.py --reps 5 --p 100 --setup n --n 30 50 \\
        --sigma2 1 --tau-level 0 --rank 1 --out study.csv
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
import time
from dataclasses import dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from supftsvd import em
from supftsvd.errors import SupFTSVDError
from supftsvd.inference import (default_grid, predict_from_covariates, predict_trajectory,
                                project_subject, reconstruct_insample)
from supftsvd.metrics import component_errors, fitted_loadings, mspe, r2_loading, r2_tensor
from supftsvd.model import FitConfig
from supftsvd.simulation import SimConfig, simulate, simulate_new_subjects

log = logging.getLogger("study")

TAU_RANK1 = ((1.0,), (2.0,), (5.0,))
TAU_RANK2 = ((1.0, 1.5), (2.0, 2.25), (3.0, 4.0))


@dataclass(frozen=True)
class Setting:
    setup: str
    n: int
    m: int | None
    sigma2: float
    rank: int
    tau: tuple
    relevant: bool

    def sim_config(self, p: int, seed: int) -> SimConfig:
        make = SimConfig.rank1 if self.rank == 1 else SimConfig.rank2
        cfg = make(n=self.n, p=p, m=self.m, sigma2=self.sigma2, tau=self.tau, seed=seed)
        if not self.relevant:
            cfg = replace(cfg, gamma=tuple((0.0,) * len(g) for g in cfg.gamma))
        return cfg

    def label(self) -> dict:
        return {"setup": self.setup, "n": self.n, "m": "3-8" if self.m is None else self.m,
                "sigma2": self.sigma2, "rank": self.rank,
                "tau": ";".join(f"{t:g}" for t in self.tau),
                "gamma": "nonzero" if self.relevant else "zero"}


def settings(args) -> list:
    out = []
    for rank in args.rank:
        taus = TAU_RANK1 if rank == 1 else TAU_RANK2
        taus = [taus[i] for i in args.tau_level]
        for relevant in [g == "nonzero" for g in args.gamma]:
            grid = []
            if "n" in args.setup:
                grid += [("n", n, None) for n in args.n]
            if "m" in args.setup:
                grid += [("m", args.n_fixed, m) for m in args.m]
            for (setup, n, m), sigma2, tau in itertools.product(grid, args.sigma2, taus):
                out.append(Setting(setup, n, m, sigma2, rank, tau, relevant))
    return out


def _drop_covariates(ds):
    return ds.with_covariates(np.zeros((ds.n, 0)))


def run_replicate(setting: Setting, rep: int, args) -> list:
    cfg = setting.sim_config(args.p, seed=rep)
    train, truth = simulate(cfg)
    test, test_truth = simulate_new_subjects(cfg, truth, args.n_test, seed=args.test_seed + rep)
    grid = default_grid(args.grid)
    rows = []
    for mode in ("supervised", "unsupervised"):
        ds, held = (train, test) if mode == "supervised" else \
            (_drop_covariates(train), _drop_covariates(test))
        start = time.perf_counter()
        model = em.fit(ds, FitConfig(rank=setting.rank, max_iter=args.max_iter, seed=rep,
                                     init=args.init))
        elapsed = time.perf_counter() - start
        row = {**setting.label(), "rep": rep, "mode": mode, "seconds": round(elapsed, 3),
               "n_iter": model.diagnostics["n_iter"],
               "converged": int(model.diagnostics["converged"]),
               "init": model.diagnostics["init"],
               "r2_tensor": r2_tensor(ds, reconstruct_insample(model, ds))}
        zeta = fitted_loadings(model, ds.X)
        for k, v in enumerate(r2_loading(zeta, truth.X), start=1):
            row[f"r2_loading_{k}"] = v
        insample = [predict_trajectory(model, project_subject(model, s), grid)
                    for s in ds.subjects]
        row["mspe_in"] = mspe(insample, truth, grid)
        outsample = [predict_trajectory(model, project_subject(model, s), grid)
                     for s in held.subjects]
        row["mspe_out"] = mspe(outsample, test_truth, grid)
        if model.q:
            cov = [predict_from_covariates(model, s.x, grid) for s in held.subjects]
            row["mspe_covariate_only"] = mspe(cov, test_truth, grid)
        for e in component_errors(model, truth):
            k = e.truth_index + 1
            row[f"xi_error_{k}"] = e.xi_error
            row[f"psi_error_{k}"] = e.psi_error
        rows.append(row)
    return rows


def summarize(rows) -> None:
    metrics = ["r2_tensor", "r2_loading_1", "r2_loading_2", "mspe_in", "mspe_out"]
    keys = ["setup", "n", "m", "sigma2", "rank", "tau", "gamma", "mode"]
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    print("\t".join(keys + metrics))
    for key, members in groups.items():
        cells = []
        for metric in metrics:
            vals = np.array([m[metric] for m in members if metric in m], dtype=float)
            cells.append(f"{vals.mean():.4g}+-{vals.std():.2g}" if vals.size else "")
        print("\t".join([str(k) for k in key] + cells))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--setup", nargs="+", choices=("n", "m"), default=["n", "m"],
                    help="n: vary subjects with 3-8 visits; m: vary visits at --n-fixed")
    ap.add_argument("--n", type=int, nargs="+", default=[30, 50, 100, 200])
    ap.add_argument("--m", type=int, nargs="+", default=[3, 5, 8, 10])
    ap.add_argument("--n-fixed", type=int, default=100)
    ap.add_argument("--p", type=int, default=500)
    ap.add_argument("--sigma2", type=float, nargs="+", default=[1.0, 4.0])
    ap.add_argument("--tau-level", type=int, nargs="+", default=[0, 1, 2],
                    choices=(0, 1, 2), help="index into the three loading-noise settings")
    ap.add_argument("--rank", type=int, nargs="+", default=[1, 2], choices=(1, 2))
    ap.add_argument("--gamma", nargs="+", default=["nonzero", "zero"],
                    choices=("nonzero", "zero"))
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--n-test", type=int, default=100)
    ap.add_argument("--test-seed", type=int, default=10000)
    ap.add_argument("--grid", type=int, default=101)
    ap.add_argument("--max-iter", type=int, default=200)
    ap.add_argument("--init", choices=("best", "mean", "profile"), default="best")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", required=True, help="per-replicate CSV")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    rows = []
    fields = None
    with open(args.out, "w", newline="", encoding="utf-8") as fh, \
            threadpool_limits(limits=args.threads):
        writer = None
        for setting in settings(args):
            for rep in range(args.reps):
                try:
                    new = run_replicate(setting, rep, args)
                except SupFTSVDError as exc:
                    log.warning("%s rep %d failed: %s", setting.label(), rep, exc)
                    continue
                if writer is None:
                    fields = list(new[0])
                    for extra in ("r2_loading_2", "mspe_covariate_only", "xi_error_2",
                                  "psi_error_2"):
                        if extra not in fields:
                            fields.append(extra)
                    writer = csv.DictWriter(fh, fieldnames=fields, restval="")
                    writer.writeheader()
                writer.writerows(new)
                fh.flush()
                rows.extend(new)
                log.info("%s rep %d done", setting.label(), rep)
    summarize(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
