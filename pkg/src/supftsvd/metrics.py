"""Evaluation criteria: tensor R^2, loading R^2, MSPE and component errors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import simpson

from .errors import DegenerateError, RankDeficiencyError, ValidationError
from .kernel import QUAD_GRID
from .model import FORMAT_VERSION, ModelFit
from .simulation import SimulationTruth

MATCH_THRESHOLD = 0.1


def _r2(y, design):
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    ss_res = float(np.sum((y - design @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise DegenerateError("response has zero total variance; R^2 is undefined")
    return 1.0 - ss_res / ss_tot


def r2_tensor(dataset, reconstructions) -> float:
    """R^2 of the pooled regression of all observations on the rank-1 reconstructions.

    ``reconstructions`` holds one (r, p, m_i) array per subject (or objects
    with a ``per_component`` attribute); an intercept is always included.
    """
    parts = [getattr(rec, "per_component", rec) for rec in reconstructions]
    if len(parts) != dataset.n:
        raise ValidationError(f"{len(parts)} reconstructions for {dataset.n} subjects")
    y, cols = [], []
    for s, rec in zip(dataset.subjects, parts):
        rec = np.asarray(rec, dtype=float)
        if rec.ndim != 3 or rec.shape[1:] != s.Y.shape:
            raise ValidationError(f"reconstruction for {s.id!r} has shape {rec.shape}")
        y.append(s.Y.ravel())
        cols.append(rec.reshape(rec.shape[0], -1).T)
    y = np.concatenate(y)
    design = np.column_stack([np.ones(y.size), np.vstack(cols)])
    return _r2(y, design)


def r2_loading(zeta, X) -> np.ndarray:
    """Per-component R^2 of an OLS fit (with intercept) of loadings on covariates.

    Constant covariate columns are dropped because the intercept already
    spans them.
    """
    zeta = np.asarray(zeta, dtype=float)
    X = np.asarray(X, dtype=float).reshape(zeta.shape[0], -1)
    X = X[:, np.ptp(X, axis=0) > 0] if X.shape[1] else X
    n, q = X.shape
    if n <= q + 1:
        raise ValidationError(f"loading R^2 needs n > q + 1 (n={n}, q={q})")
    design = np.column_stack([np.ones(n), X])
    cond = np.linalg.cond(design)
    if cond > 1e12:
        raise RankDeficiencyError(f"covariate matrix is rank deficient (condition {cond:.3g})",
                                  condition_number=float(cond))
    return np.array([_r2(zeta[:, k], design) for k in range(zeta.shape[1])])


def fitted_loadings(model: ModelFit, X) -> np.ndarray:
    """Training-subject loadings x'beta + u_tilde, (n, r)."""
    X = np.asarray(X, dtype=float).reshape(model.posterior.n, model.q)
    return X @ model.B + model.posterior.u_tilde


def mspe(predicted, truth: SimulationTruth, grid) -> float:
    """Mean over subjects and features of the integrated squared error against the truth.

    ``predicted`` holds one (p, len(grid)) array (or TrajectoryGrid) per truth
    subject. Integrals use Simpson's rule on ``grid``.
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size < 3 or np.any(np.diff(grid) <= 0):
        raise ValidationError("MSPE grid must be increasing with at least 3 points")
    values = [np.asarray(getattr(v, "values", v), dtype=float) for v in predicted]
    n = truth.zeta.shape[0]
    if len(values) != n:
        raise ValidationError(f"{len(values)} predictions for {n} truth subjects")
    total = 0.0
    for i, v in enumerate(values):
        if v.shape != (truth.p, grid.size):
            raise ValidationError(f"prediction {i} has shape {v.shape}, expected "
                                  f"{(truth.p, grid.size)}")
        diff = v - truth.trajectory(i, grid)
        total += float(np.sum(simpson(diff**2, x=grid, axis=1)))
    return total / (n * truth.p)


@dataclass(frozen=True)
class ComponentError:
    truth_index: int
    fit_index: int
    matched: bool
    cosine: float
    xi_sign: int
    psi_sign: int
    beta_mse: float
    xi_error: float
    psi_error: float


def _match(cos):
    """Greedy assignment on |cos|, largest first."""
    r = cos.shape[0]
    pairs = []
    used_t, used_f = set(), set()
    order = np.argsort(-np.abs(cos), axis=None, kind="stable")
    for flat in order:
        f, t = np.unravel_index(flat, cos.shape)
        if f in used_f or t in used_t:
            continue
        pairs.append((int(t), int(f)))
        used_t.add(t)
        used_f.add(f)
        if len(pairs) == r:
            break
    return sorted(pairs)


def component_errors(model: ModelFit, truth: SimulationTruth, X=None) -> list:
    """Accuracy of each fitted component against its matched true component.

    Components are paired greedily by |<xi_hat, xi>|. Feature loadings and
    singular functions are sign-aligned separately and the loading sign is
    the product of the two, so the errors are invariant to any sign flip that
    leaves the fitted model unchanged. ``psi_error`` is the integrated squared
    difference; ``beta_mse`` compares ``x'beta_hat`` with the true mean
    loading on the unit-norm scale. ``X`` holds the model's covariates for
    the truth subjects (default: the truth's own covariates). For a model
    without covariates the mean loadings come from regressing its fitted
    loadings on the truth covariates. Pairs with |cosine| below 0.1 are
    flagged unmatched and receive worst-case errors.
    """
    if model.rank != truth.r:
        raise ValidationError(f"model rank {model.rank} differs from truth rank {truth.r}")
    if model.p != truth.p:
        raise ValidationError(f"model has {model.p} features, truth has {truth.p}")
    cos = model.Xi.T @ truth.xi
    fit_psi = np.column_stack([c.psi(QUAD_GRID) for c in model.components])
    true_psi = truth.psi_matrix(QUAD_GRID)
    if model.q == 0:
        if model.posterior.n != truth.X.shape[0]:
            raise ValidationError("model and truth describe different numbers of subjects")
        coef, *_ = np.linalg.lstsq(truth.X, model.posterior.u_tilde, rcond=None)
        fit_mean = truth.X @ coef
    else:
        X = truth.X if X is None else np.asarray(X, dtype=float)
        if X.shape != (truth.X.shape[0], model.q):
            raise ValidationError(f"covariates of shape {X.shape} do not match the model "
                                  f"(q={model.q}) and truth (n={truth.X.shape[0]})")
        fit_mean = X @ model.B
    true_mean = truth.mean_loadings()
    out = []
    for t, f in _match(cos):
        c = float(cos[f, t])
        s_xi = 1 if c >= 0 else -1
        inner = float(simpson(fit_psi[:, f] * true_psi[:, t], x=QUAD_GRID))
        s_psi = 1 if inner >= 0 else -1
        if abs(c) < MATCH_THRESHOLD:
            worst = float(np.mean((np.abs(fit_mean[:, f]) + np.abs(true_mean[:, t])) ** 2))
            out.append(ComponentError(t, f, False, c, s_xi, s_psi, worst, float(np.sqrt(2.0)), 2.0))
            continue
        xi_err = float(np.linalg.norm(s_xi * model.Xi[:, f] - truth.xi[:, t]))
        psi_err = float(simpson((s_psi * fit_psi[:, f] - true_psi[:, t]) ** 2, x=QUAD_GRID))
        beta_mse = float(np.mean((s_xi * s_psi * fit_mean[:, f] - true_mean[:, t]) ** 2))
        out.append(ComponentError(t, f, True, c, s_xi, s_psi, beta_mse, xi_err, psi_err))
    return out


@dataclass
class EvalReport:
    """Evaluation summary; fields not computed for a given run stay None."""

    r2_tensor: float | None = None
    r2_loading: list | None = None
    mspe: float | None = None
    mspe_covariate_only: float | None = None
    components: list = field(default_factory=list)

    @property
    def beta_mse(self):
        return [c.beta_mse for c in self.components]

    @property
    def xi_error(self):
        return [c.xi_error for c in self.components]

    @property
    def psi_error(self):
        return [c.psi_error for c in self.components]

    @property
    def sign_alignment(self):
        return [c.xi_sign for c in self.components]

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION,
                "kind": "supftsvd_report",
                "r2_tensor": self.r2_tensor,
                "r2_loading": None if self.r2_loading is None else [float(v) for v in
                                                                     self.r2_loading],
                "mspe": self.mspe,
                "mspe_covariate_only": self.mspe_covariate_only,
                "components": [asdict(c) for c in self.components]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def csv_fields(self) -> dict:
        """Flat name -> value mapping for one CSV row (missing values are empty)."""
        row = {"r2_tensor": self.r2_tensor, "mspe": self.mspe,
               "mspe_covariate_only": self.mspe_covariate_only}
        for k, v in enumerate(self.r2_loading or []):
            row[f"r2_loading_{k + 1}"] = v
        for c in self.components:
            k = c.truth_index + 1
            row[f"matched_{k}"] = int(c.matched)
            row[f"sign_{k}"] = c.xi_sign
            row[f"beta_mse_{k}"] = c.beta_mse
            row[f"xi_error_{k}"] = c.xi_error
            row[f"psi_error_{k}"] = c.psi_error
        return row
