"""Penalized EM estimation of the supervised functional tensor decomposition.

Model, for subject i, feature b and observation time t_ij::

    Y[b, j] = sum_k (x_i' beta_k + U_ik) xi_bk psi_k(t_ij) + eps,
    U_ik ~ N(0, sigma2_k),   eps ~ N(0, sigma2),

with ||xi_k||_2 = ||psi_k||_L2 = 1 and psi_k penalized by its RKHS norm.

Indices ``k`` are zero-based throughout. Array-level helpers prefixed with an
underscore work on precomputed values of psi at the observation times; the
public functions accept subjects and components and are thin wrappers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace

import numpy as np
import scipy.linalg

from .data import Dataset, Subject
from .errors import (DegenerateError, InsufficientDataError, NumericalError,
                     RankDeficiencyError, SingularMatrixError, ValidationError)
from .kernel import QUAD_GRID, KernelFunction, kernel_matrix, l2_norm, quadrature_weights
from .model import Component, FitConfig, ModelFit, Posterior, SubjectPosterior

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
_DENOM_FLOOR = 1e-12
_MAX_CONDITION = 1e12
_LOG_2PI = math.log(2.0 * math.pi)
# ridge of the profiled initial direction, relative to the data term, and the
# RKHS share of that ridge
PROFILE_RIDGE = 1e-3
PROFILE_SMOOTHING = 1e-6


# ---------------------------------------------------------------------------
# Shared array plumbing
# ---------------------------------------------------------------------------

class _Workspace:
    """Pooled observation times, their Gram matrix and per-subject slices."""

    def __init__(self, dataset: Dataset, with_gram: bool = True):
        self.dataset = dataset
        self.times = dataset.all_times()
        stops = np.cumsum([s.m for s in dataset.subjects])
        self.slices = [slice(int(b - s.m), int(b)) for s, b in zip(dataset.subjects, stops)]
        self.K = kernel_matrix(self.times, self.times) if with_gram else None
        self.X = dataset.X
        self._Kq = None

    @property
    def M(self) -> int:
        return self.times.size

    def psi_at_obs(self, psi: KernelFunction) -> np.ndarray:
        """psi evaluated at every pooled observation time, shape (M,)."""
        if self._on_times(psi):
            return psi.scale * (self.K @ psi.alpha)
        return np.asarray(psi(self.times), dtype=float).reshape(self.M)

    def _on_times(self, psi: KernelFunction) -> bool:
        return (self.K is not None and psi.knots.shape == self.times.shape
                and np.array_equal(psi.knots, self.times))

    def rkhs_norm_sq(self, psi: KernelFunction) -> float:
        """Same value as ``psi.rkhs_norm_sq()``, reusing the pooled Gram matrix."""
        if self._on_times(psi):
            return float(psi.scale**2 * psi.alpha @ self.K @ psi.alpha)
        return psi.rkhs_norm_sq()

    def l2_norm(self, alpha) -> float:
        """Same value as ``raw_l2_norm(self.times, alpha)`` with a cached design."""
        if self._Kq is None:
            self._Kq = kernel_matrix(QUAD_GRID, self.times)
        return l2_norm(self._Kq @ alpha)

    def psi_matrix(self, components) -> np.ndarray:
        """(M, r) matrix of psi_k at the pooled observation times."""
        return np.column_stack([self.psi_at_obs(c.psi) for c in components])


def _stack_params(components):
    Xi = np.column_stack([c.xi for c in components])
    q = components[0].beta.size
    B = np.column_stack([c.beta for c in components]).reshape(q, len(components))
    d = np.array([c.sigma2_k for c in components])
    return Xi, B, d


def _psi_for_subject(subject: Subject, components) -> np.ndarray:
    return np.column_stack([np.atleast_1d(c.psi(subject.times)) for c in components])


def _loadings(x, B, u):
    """zeta = x'B + u, the full subject loadings (r,)."""
    return x @ B + u


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def build_H(subject: Subject, components) -> np.ndarray:
    """The (p m) x r design whose column k is vec(xi_k psi_k(t)'), feature index fastest."""
    if not components:
        raise ValidationError("build_H needs at least one component")
    Psi = _psi_for_subject(subject, components)
    cols = [np.outer(c.xi, Psi[:, k]).reshape(-1, order="F") for k, c in enumerate(components)]
    return np.column_stack(cols)


def _e_step_core(Y, x, Xi, Psi, B, d, sigma2):
    HtH = (Xi.T @ Xi) * (Psi.T @ Psi)
    Z = Y - (Xi * (x @ B)) @ Psi.T
    Hty = np.einsum("bk,bj,jk->k", Xi, Z, Psi)
    precision = HtH / sigma2 + np.diag(1.0 / d)
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(
            "posterior precision is not positive definite; a loading variance may have "
            f"collapsed (sigma2_k={d.tolist()}, sigma2={sigma2!r})") from None
    inv_chol = np.linalg.inv(chol)
    gamma = inv_chol.T @ inv_chol
    gamma = 0.5 * (gamma + gamma.T)
    u = gamma @ Hty / sigma2
    return u, gamma


def e_step(subject: Subject, components, sigma2: float) -> SubjectPosterior:
    """Posterior mean and covariance of one subject's loading deviations.

    Uses Gamma = (H'H / sigma2 + D^-1)^-1 and u = Gamma H'(y - H beta_x) / sigma2,
    built from r x r quantities only.
    """
    if not sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    Xi, B, d = _stack_params(components)
    if np.any(d <= 0):
        raise ValidationError("all sigma2_k must be positive")
    Psi = _psi_for_subject(subject, components)
    u, gamma = _e_step_core(subject.Y, subject.x, Xi, Psi, B, d, sigma2)
    return SubjectPosterior(u, gamma)


def _e_step_all(ws: _Workspace, components, sigma2, Psi_all=None) -> Posterior:
    Xi, B, d = _stack_params(components)
    if Psi_all is None:
        Psi_all = ws.psi_matrix(components)
    us, gammas = [], []
    for s, sl in zip(ws.dataset.subjects, ws.slices):
        u, g = _e_step_core(s.Y, s.x, Xi, Psi_all[sl], B, d, sigma2)
        us.append(u)
        gammas.append(g)
    return Posterior(np.array(us), np.array(gammas))


def e_step_all(dataset: Dataset, components, sigma2: float) -> Posterior:
    return _e_step_all(_Workspace(dataset), components, sigma2)


# ---------------------------------------------------------------------------
# Residual matrices
# ---------------------------------------------------------------------------

def _residual_R_core(Y, zeta, Xi, Psi, k):
    others = np.arange(Xi.shape[1]) != k
    return Y - (Xi[:, others] * zeta[others]) @ Psi[:, others].T


def _residual_Rtilde_core(R, zeta_k, gamma, Xi, Psi, k):
    others = np.arange(Xi.shape[1]) != k
    w = math.sqrt(zeta_k**2 + gamma[k, k])
    if w < _DENOM_FLOOR:
        raise DegenerateError(
            f"component {k}: loading and its posterior variance both vanished")
    cross = (Xi[:, others] * gamma[k, others]) @ Psi[:, others].T
    return (R * zeta_k - cross) / w, w


def residual_R(subject: Subject, components, posterior: SubjectPosterior, k: int) -> np.ndarray:
    """Data minus every fitted component except ``k`` (p x m)."""
    Xi, B, _ = _stack_params(components)
    Psi = _psi_for_subject(subject, components)
    zeta = _loadings(subject.x, B, posterior.u)
    return _residual_R_core(subject.Y, zeta, Xi, Psi, k)


def residual_Rtilde(subject: Subject, components, posterior: SubjectPosterior, k: int,
                    beta_new_k=None) -> np.ndarray:
    """Scaled and shifted residual entering the xi and psi updates (p x m).

    ``beta_new_k`` replaces component k's covariate effect in the loading
    (the freshly updated value); by default the stored one is used.
    """
    Xi, B, _ = _stack_params(components)
    if beta_new_k is not None:
        B = B.copy()
        B[:, k] = np.asarray(beta_new_k, dtype=float)
    Psi = _psi_for_subject(subject, components)
    zeta = _loadings(subject.x, B, posterior.u)
    R = _residual_R_core(subject.Y, zeta, Xi, Psi, k)
    Rt, _ = _residual_Rtilde_core(R, zeta[k], posterior.gamma, Xi, Psi, k)
    return Rt


# ---------------------------------------------------------------------------
# M-step block updates
# ---------------------------------------------------------------------------

def _update_beta_core(ws, components, posterior, k, Psi_all):
    comp = components[k]
    q = comp.beta.size
    if q == 0:
        return np.zeros(0)
    Xi, B, _ = _stack_params(components)
    xi_sq = float(comp.xi @ comp.xi)
    XtX = np.zeros((q, q))
    XtZ = np.zeros(q)
    for i, (s, sl) in enumerate(zip(ws.dataset.subjects, ws.slices)):
        Psi = Psi_all[sl]
        zeta = _loadings(s.x, B, posterior.u_tilde[i])
        R = _residual_R_core(s.Y, zeta, Xi, Psi, k)
        weight = xi_sq * float(Psi[:, k] @ Psi[:, k])
        proj = float(comp.xi @ R @ Psi[:, k])
        XtX += weight * np.outer(s.x, s.x)
        XtZ += s.x * (proj - posterior.u_tilde[i, k] * weight)
    cond = np.linalg.cond(XtX)
    if not np.isfinite(cond) or cond > _MAX_CONDITION:
        raise RankDeficiencyError(
            f"component {k}: covariate design is rank deficient (condition number {cond:.3g})",
            condition_number=float(cond))
    return np.linalg.solve(XtX, XtZ)


def _gls_beta_core(ws, components, sigma2, Psi_all):
    """Covariate effects maximizing the observed-data likelihood, one component at a time.

    With everything else fixed the marginal model for y_i is linear in beta_k
    with covariance H D H' + sigma2 I, so each beta_k is a generalized least
    squares fit. Inverse covariance products are reduced to r x r quantities
    via the Woodbury identity.
    """
    Xi, B, d = _stack_params(components)
    q, r = B.shape
    if q == 0:
        return B
    B = B.copy()
    XiG = Xi.T @ Xi
    prep = []
    for s, sl in zip(ws.dataset.subjects, ws.slices):
        Psi = Psi_all[sl]
        G = XiG * (Psi.T @ Psi)
        gamma = np.linalg.inv(G / sigma2 + np.diag(1.0 / d))
        prep.append((s, Psi, G, gamma))
    for k in range(r):
        XtX = np.zeros((q, q))
        XtZ = np.zeros(q)
        for s, Psi, G, gamma in prep:
            others = np.arange(r) != k
            resid = s.Y - (Xi[:, others] * (s.x @ B[:, others])) @ Psi[:, others].T
            Hz = np.einsum("bk,bj,jk->k", Xi, resid, Psi)
            gk = G[:, k]
            weight = (gk[k] - gk @ gamma @ gk / sigma2) / sigma2
            target = (Hz[k] - gk @ gamma @ Hz / sigma2) / sigma2
            XtX += weight * np.outer(s.x, s.x)
            XtZ += target * s.x
        cond = np.linalg.cond(XtX)
        if not np.isfinite(cond) or cond > _MAX_CONDITION:
            raise RankDeficiencyError(
                f"component {k}: covariate design is rank deficient (condition number {cond:.3g})",
                condition_number=float(cond))
        B[:, k] = np.linalg.solve(XtX, XtZ)
    return B


def gls_beta(dataset: Dataset, components, sigma2: float) -> np.ndarray:
    """Observed-likelihood update of all covariate effects, returned as (q, r)."""
    ws = _Workspace(dataset, with_gram=False)
    return _gls_beta_core(ws, components, sigma2, ws.psi_matrix(components))


def update_beta(dataset: Dataset, components, posterior: Posterior, k: int) -> np.ndarray:
    """Least-squares covariate effect for component k (empty when q = 0)."""
    ws = _Workspace(dataset, with_gram=False)
    return _update_beta_core(ws, components, posterior, k, ws.psi_matrix(components))


def _rtilde_all(ws, components, posterior, k, Psi_all, beta_new_k):
    """Pooled R-tilde (p x M) and per-observation loading weights w (M,)."""
    Xi, B, _ = _stack_params(components)
    B = B.copy()
    B[:, k] = beta_new_k
    p = Xi.shape[0]
    Rt = np.empty((p, ws.M))
    w = np.empty(ws.M)
    for i, (s, sl) in enumerate(zip(ws.dataset.subjects, ws.slices)):
        Psi = Psi_all[sl]
        zeta = _loadings(s.x, B, posterior.u_tilde[i])
        R = _residual_R_core(s.Y, zeta, Xi, Psi, k)
        Rt[:, sl], w[sl] = _residual_Rtilde_core(R, zeta[k], posterior.gamma[i], Xi, Psi, k)
    return Rt, w


def _update_xi_core(Rt, w, psi_k):
    weights = w * psi_k
    denom = float(weights @ weights)
    if denom < _DENOM_FLOOR:
        raise DegenerateError("xi update has no usable time weight (zero denominator)")
    xi_raw = Rt @ weights / denom
    norm = float(np.linalg.norm(xi_raw))
    if norm < _DENOM_FLOOR:
        raise DegenerateError("xi update produced a zero vector")
    return xi_raw / norm, norm


def update_xi(dataset: Dataset, components, posterior: Posterior, k: int, beta_new_k=None):
    """Feature loading update: per-feature weighted slopes, normalized.

    Returns ``(xi, norm)`` where ``norm`` is the Euclidean norm discarded by
    the normalization.
    """
    ws = _Workspace(dataset, with_gram=False)
    Psi_all = ws.psi_matrix(components)
    beta = components[k].beta if beta_new_k is None else np.asarray(beta_new_k, dtype=float)
    Rt, w = _rtilde_all(ws, components, posterior, k, Psi_all, beta)
    return _update_xi_core(Rt, w, Psi_all[:, k])


def _psi_system(Rt, w, xi):
    """Diagonal of B'B and the vector B'R for the representer solve."""
    a_sq = w**2 * float(xi @ xi)
    rhs = w * (xi @ Rt)
    return a_sq, rhs


def _solve_alpha(K, a_sq, rhs, eta):
    system = a_sq[:, None] * K + eta * np.eye(K.shape[0])
    try:
        alpha = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(system)
        raise NumericalError(
            f"representer system is singular (condition estimate {cond:.3g})") from None
    if not np.all(np.isfinite(alpha)):
        raise NumericalError("representer solve returned non-finite coefficients")
    return alpha


def _update_psi_core(ws, Rt, w, xi, eta):
    a_sq, rhs = _psi_system(Rt, w, xi)
    alpha = _solve_alpha(ws.K, a_sq, rhs, eta)
    norm = ws.l2_norm(alpha)
    if not norm > 1e-12:
        raise DegenerateError("singular function update collapsed to zero")
    return KernelFunction(ws.times, alpha, 1.0 / norm), norm


def update_psi(dataset: Dataset, components, posterior: Posterior, k: int, xi_new_k,
               eta_k: float, beta_new_k=None):
    """Penalized kernel regression for psi_k on all observation times.

    Solves ``(B'B K + eta I) alpha = B'R`` with B'B diagonal and returns the
    unit-L2-norm function together with the discarded raw norm.
    """
    if not eta_k > 0:
        raise ValidationError("eta_k must be positive")
    ws = _Workspace(dataset)
    Psi_all = ws.psi_matrix(components)
    beta = components[k].beta if beta_new_k is None else np.asarray(beta_new_k, dtype=float)
    xi_new_k = np.asarray(xi_new_k, dtype=float)
    comps = list(components)
    comps[k] = replace(comps[k], xi=xi_new_k)
    Rt, w = _rtilde_all(ws, comps, posterior, k, Psi_all, beta)
    return _update_psi_core(ws, Rt, w, xi_new_k, eta_k)


def rebalance_scales(component: Component, xi_norm: float, psi_norm: float,
                     posterior: Posterior, k: int):
    """Fold norms removed from xi_k and psi_k back into the loading scale.

    The covariate effect, the posterior means and the k-th row and column of
    every posterior covariance are multiplied by ``xi_norm * psi_norm`` (the
    variance sigma2_k by its square), so every fitted mean is unchanged. A
    negative factor flips the component's sign.
    """
    c = float(xi_norm) * float(psi_norm)
    if c == 0 or not np.isfinite(c):
        raise ValidationError("rebalance factor must be finite and nonzero")
    u = posterior.u_tilde.copy()
    g = posterior.gamma.copy()
    u[:, k] *= c
    g[:, k, :] *= c
    g[:, :, k] *= c
    comp = replace(component, beta=component.beta * c, sigma2_k=component.sigma2_k * c * c)
    return comp, Posterior(u, g)


def _sign_fix(comps, posterior, k):
    xi = comps[k].xi
    if xi[np.argmax(np.abs(xi))] < 0:
        comp, posterior = rebalance_scales(replace(comps[k], xi=-xi), -1.0, 1.0, posterior, k)
        comps[k] = comp
    return comps, posterior


def _subject_terms(ws, components, posterior, Psi_all):
    """Per-subject squared residual, trace and prior terms of the expected log-likelihood."""
    Xi, B, d = _stack_params(components)
    G = Xi.T @ Xi
    out = []
    for i, (s, sl) in enumerate(zip(ws.dataset.subjects, ws.slices)):
        Psi = Psi_all[sl]
        u = posterior.u_tilde[i]
        g = posterior.gamma[i]
        zeta = _loadings(s.x, B, u)
        resid = s.Y - (Xi * zeta) @ Psi.T
        trace = float(np.sum(G * (Psi.T @ Psi) * g))
        prior = float(np.sum((np.diag(g) + u**2) / d))
        out.append((float(np.sum(resid**2)), trace, prior))
    return np.array(out)


def _penalty(ws, components, eta):
    return float(sum(e * ws.rkhs_norm_sq(c.psi) for e, c in zip(eta, components)))


def _update_variances_core(ws, components, posterior, Psi_all, penalty=0.0):
    terms = _subject_terms(ws, components, posterior, Psi_all)
    p = components[0].xi.size
    sigma2_k = np.mean(posterior.u_tilde**2 + np.diagonal(posterior.gamma, axis1=1, axis2=2),
                       axis=0)
    sigma2 = (terms[:, 1].sum() + terms[:, 0].sum() + penalty) / (p * ws.M)
    floored = [f"sigma2_{k}" for k, v in enumerate(sigma2_k) if v < VARIANCE_FLOOR]
    if sigma2 < VARIANCE_FLOOR:
        floored.append("sigma2")
    return np.maximum(sigma2_k, VARIANCE_FLOOR), max(float(sigma2), VARIANCE_FLOOR), floored


def update_variances(dataset: Dataset, components, posterior: Posterior, penalty: float = 0.0):
    """Closed-form loading variances and measurement noise variance.

    ``penalty`` is the total roughness penalty ``sum_k eta_k ||psi_k||_H^2``;
    it enters the noise variance because the penalty sits on the residual
    scale of the objective. With the default of zero the update is the
    plain expected residual sum of squares over pM.

    Returns ``(sigma2_k array, sigma2)``; both are floored at 1e-12.
    """
    ws = _Workspace(dataset, with_gram=False)
    s2k, s2, _ = _update_variances_core(ws, components, posterior,
                                        ws.psi_matrix(components), penalty)
    return s2k, s2


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def _q_value(ws, components, posterior, sigma2, eta, Psi_all):
    terms = _subject_terms(ws, components, posterior, Psi_all)
    _, _, d = _stack_params(components)
    n = ws.dataset.n
    p = components[0].xi.size
    r = len(components)
    pM = p * ws.M
    value = (-0.5 * (pM + n * r) * _LOG_2PI
             - 0.5 * pM * math.log(sigma2)
             - 0.5 * n * float(np.sum(np.log(d)))
             - 0.5 * (terms[:, 0].sum() + terms[:, 1].sum()) / sigma2
             - 0.5 * terms[:, 2].sum()
             - 0.5 * _penalty(ws, components, eta) / sigma2)
    return float(value)


def penalized_objective(dataset: Dataset, components, posterior: Posterior, sigma2: float,
                        eta) -> float:
    """Expected complete-data log-likelihood minus the roughness penalty.

    The penalty is ``sum_k eta_k ||psi_k||_H^2 / (2 sigma2)``, so that
    maximizing over psi_k is exactly the penalized least-squares problem
    solved by :func:`update_psi`.
    """
    ws = _Workspace(dataset, with_gram=False)
    return _q_value(ws, components, posterior, sigma2, np.asarray(eta, dtype=float),
                    ws.psi_matrix(components))


def _marginal_value(ws, components, sigma2, eta, Psi_all):
    Xi, B, d = _stack_params(components)
    G = Xi.T @ Xi
    p = Xi.shape[0]
    total = 0.0
    for s, sl in zip(ws.dataset.subjects, ws.slices):
        Psi = Psi_all[sl]
        resid = s.Y - (Xi * (s.x @ B)) @ Psi.T
        Hty = np.einsum("bk,bj,jk->k", Xi, resid, Psi)
        prec = G * (Psi.T @ Psi) / sigma2 + np.diag(1.0 / d)
        chol = np.linalg.cholesky(prec)
        sol = np.linalg.solve(chol, Hty)
        pm = p * s.m
        logdet = pm * math.log(sigma2) + float(np.sum(np.log(d))) \
            + 2.0 * float(np.sum(np.log(np.diag(chol))))
        quad = (float(np.sum(resid**2)) - float(sol @ sol) / sigma2) / sigma2
        total += -0.5 * (pm * _LOG_2PI + logdet + quad)
    return total - 0.5 * _penalty(ws, components, eta) / sigma2


def marginal_objective(dataset: Dataset, components, sigma2: float, eta) -> float:
    """Observed-data log-likelihood minus the roughness penalty."""
    ws = _Workspace(dataset, with_gram=False)
    return _marginal_value(ws, components, sigma2, np.asarray(eta, dtype=float),
                           ws.psi_matrix(components))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _fix_sign(v):
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def scree(dataset: Dataset, k: int | None = None) -> np.ndarray:
    """Singular values of the stacked p x M data matrix (largest first)."""
    s = np.linalg.svd(dataset.stacked(), compute_uv=False)
    return s if k is None else s[:k]


def _profile_direction(ws: _Workspace, z: np.ndarray) -> np.ndarray:
    """Kernel coefficients of the smooth function best aligned with every subject.

    ``z`` holds one feature-projected value per pooled observation. With
    psi = K alpha and psi_i, z_i the entries of subject i, the ratio

        sum_i (psi_i' z_i)^2 / sum_i ||z_i||^2 ||psi_i||^2

    is at most one and equals one when z_i is proportional to psi_i for every
    subject, so on rank-one data it is maximized by the true psi whatever the
    subject scores are. A small ridge toward small L2 and RKHS norm in the
    denominator removes the freedom to rescale each subject's visits
    separately. Solved as a generalized symmetric eigenproblem; the returned
    coefficients have arbitrary scale.
    """
    M = ws.M
    N = np.zeros((M, M))
    D = np.zeros((M, M))
    for sl in ws.slices:
        Ki = ws.K[sl]
        v = Ki.T @ z[sl]
        N += np.outer(v, v)
        D += float(z[sl] @ z[sl]) * (Ki.T @ Ki)
    Kq = kernel_matrix(QUAD_GRID, ws.times)
    G = Kq.T @ (quadrature_weights()[:, None] * Kq)
    scale = np.trace(D) / np.trace(G) if np.trace(D) > 0 else 1.0
    Bm = D + PROFILE_RIDGE * scale * (G + PROFILE_SMOOTHING * ws.K)
    jitter = 1e-12 * np.trace(Bm) / M
    for _ in range(6):
        try:
            _, vecs = scipy.linalg.eigh(N, Bm + jitter * np.eye(M),
                                        subset_by_index=[M - 1, M - 1])
            return vecs[:, 0]
        except np.linalg.LinAlgError:
            jitter *= 100.0
    raise NumericalError("profiled initial direction: metric matrix is not positive definite")


def _initialize(ws: _Workspace, rank: int, eta: float, method: str = "mean"):
    dataset = ws.dataset
    n, p, q = dataset.n, dataset.p, dataset.q
    if ws.M < rank or p < rank:
        raise InsufficientDataError(f"rank {rank} needs M >= r and p >= r (M={ws.M}, p={p})")
    if method not in ("mean", "profile"):
        raise ValidationError(f"unknown initialization method {method!r}")
    try:
        U, _, _ = np.linalg.svd(dataset.stacked(), full_matrices=False)
    except np.linalg.LinAlgError:
        raise NumericalError("SVD of the stacked data failed") from None
    Xi = np.column_stack([_fix_sign(U[:, k]) for k in range(rank)])

    X = dataset.X
    dof = (n - q if n > q else n) if q > 0 else (n - 1 if n > 1 else n)
    B = np.zeros((q, rank))
    sigma2_k = np.zeros(rank)
    posterior = Posterior(np.zeros((n, rank)), np.zeros((n, rank, rank)))
    comps = []
    Psi_all = np.zeros((ws.M, rank))
    for k in range(rank):
        # data with the earlier initial components removed
        R_all = [s.Y - (Xi[:, :k] * (X[i] @ B[:, :k] + posterior.u_tilde[i, :k]))
                 @ Psi_all[sl, :k].T
                 for i, (s, sl) in enumerate(zip(dataset.subjects, ws.slices))]
        if method == "mean":
            scores = np.array([(Xi[:, k] @ s.Y).sum() / s.m for s in dataset.subjects])
        else:
            z = np.concatenate([Xi[:, k] @ R for R in R_all])
            alpha = _profile_direction(ws, z)
            # unit L2 norm puts the scores on the data scale
            v = ws.K @ (alpha / max(ws.l2_norm(alpha), _DENOM_FLOOR))
            scores = np.array([v[sl] @ z[sl] / max(float(v[sl] @ v[sl]), _DENOM_FLOOR)
                               for sl in ws.slices])
        dof_k = dof
        if q > 0:
            coef, *_ = np.linalg.lstsq(X, scores, rcond=None)
            B[:, k] = coef
            resid = scores - X @ coef
        elif method == "mean":
            resid = scores - scores.mean()
        else:
            # without covariates the loading is U itself, mean included
            resid = scores
            dof_k = n
        sigma2_k[k] = max(float(resid @ resid) / dof_k, VARIANCE_FLOOR)
        u = posterior.u_tilde.copy()
        u[:, k] = resid
        posterior = Posterior(u, posterior.gamma)

        zeta_k = X @ B[:, k] + resid
        w = np.empty(ws.M)
        Rt = np.empty((p, ws.M))
        for i, sl in enumerate(ws.slices):
            w[sl] = max(abs(zeta_k[i]), _DENOM_FLOOR)
            Rt[:, sl] = R_all[i] * zeta_k[i] / w[sl][0]
        psi, psi_norm = _update_psi_core(ws, Rt, w, Xi[:, k], eta)
        comp = Component(B[:, k].copy(), Xi[:, k], psi, sigma2_k[k])
        comp, posterior = rebalance_scales(comp, 1.0, psi_norm, posterior, k)
        comps.append(comp)
        Psi_all[:, k] = ws.psi_at_obs(psi)
        B[:, k] = comp.beta

    # noise level from a no-intercept regression of the data on the initial components
    design = np.empty((p * ws.M, rank))
    y = np.concatenate([s.Y.reshape(-1, order="F") for s in dataset.subjects])
    for k in range(rank):
        cols = []
        for i, (s, sl) in enumerate(zip(dataset.subjects, ws.slices)):
            zeta = X[i] @ B[:, k] + posterior.u_tilde[i, k]
            cols.append(np.outer(Xi[:, k] * zeta, Psi_all[sl, k]).reshape(-1, order="F"))
        design[:, k] = np.concatenate(cols)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    rss = float(np.sum((y - design @ coef) ** 2))
    dof = p * ws.M - rank if p * ws.M > rank else p * ws.M
    sigma2 = max(rss / dof, VARIANCE_FLOOR)
    return comps, posterior, sigma2


def _best_initialization(ws: _Workspace, rank: int, eta: float):
    """Both starts, keeping the one with the larger marginal objective."""
    best = None
    for method in ("mean", "profile"):
        comps, post, sigma2 = _initialize(ws, rank, eta, method)
        value = _marginal_value(ws, comps, sigma2, np.full(rank, eta), ws.psi_matrix(comps))
        log.debug("initialization %s: objective %.10g", method, value)
        if best is None or value > best[0]:
            best = (value, method, comps, post, sigma2)
    return best[1:]


def initialize(dataset: Dataset, rank: int, eta: float | None = None, method: str = "mean"):
    """Starting values from an SVD of the stacked data.

    Feature loadings are the leading left singular vectors. Subject scores
    are then regressed on the covariates (centered when q = 0) to give beta,
    the posterior means and sigma2_k; psi comes from one kernel regression
    and the noise variance from the residual of a regression on the initial
    components.

    ``method`` picks the subject scores: ``"mean"`` averages the projected
    data over each subject's visits; ``"profile"`` first finds a smooth
    direction from the pooled projections (see ``_profile_direction``) and
    takes each subject's least-squares coefficient on it. Components after
    the first are scored on the data with the earlier ones removed. With
    q = 0 the profiled scores are used uncentered, since the loading then is
    the random effect itself.

    Returns ``(components, posterior, sigma2)``.
    """
    eta = FitConfig().default_eta if eta is None else float(eta)
    return _initialize(_Workspace(dataset), rank, eta, method)


# ---------------------------------------------------------------------------
# Cross-validation for the smoothing parameter
# ---------------------------------------------------------------------------

def _cv_core(ws, Rt, w, xi, eta_grid, folds, rng, direction):
    eta_grid = list(eta_grid)
    if len(eta_grid) == 1:
        return eta_grid[0], [float("nan")]
    M = ws.M
    if M < 2 * folds:
        raise InsufficientDataError(f"{M} time points cannot support {folds}-fold CV")
    a_sq, rhs = _psi_system(Rt, w, xi)
    parts = np.array_split(rng.permutation(M), folds)
    scores = []
    for eta in eta_grid:
        rho_sq = []
        for held in parts:
            keep = np.ones(M, dtype=bool)
            keep[held] = False
            idx = np.flatnonzero(keep)
            held = np.sort(held)
            alpha = _solve_alpha(ws.K[np.ix_(idx, idx)], a_sq[idx], rhs[idx], eta)
            psi_held = ws.K[np.ix_(held, idx)] @ alpha
            pred = np.outer(xi, w[held] * psi_held).ravel()
            obs = Rt[:, held].ravel()
            if np.std(pred) == 0 or np.std(obs) == 0:
                rho = 0.0
            else:
                rho = float(np.corrcoef(obs, pred)[0, 1])
            rho_sq.append(rho * rho)
        scores.append(float(np.mean(rho_sq)))
    best = int(np.argmax(scores)) if direction == "max" else int(np.argmin(scores))
    return eta_grid[best], scores


def cv_select_eta(dataset: Dataset, components, posterior: Posterior, k: int, eta_grid,
                  folds: int = 5, seed: int = 0, direction: str = "max", xi_new_k=None,
                  beta_new_k=None) -> float:
    """Smoothing parameter for psi_k by g-fold CV over pooled observation times.

    The held-out score is the squared correlation between R-tilde entries and
    their rank-1 predictions, averaged over folds; ``direction='max'`` picks
    the best-predicting value, ``'min'`` the smallest mean squared correlation.
    """
    if folds < 2:
        raise ValidationError("folds must be at least 2")
    if direction not in ("max", "min"):
        raise ValidationError("direction must be 'max' or 'min'")
    ws = _Workspace(dataset)
    Psi_all = ws.psi_matrix(components)
    beta = components[k].beta if beta_new_k is None else np.asarray(beta_new_k, dtype=float)
    xi = components[k].xi if xi_new_k is None else np.asarray(xi_new_k, dtype=float)
    comps = list(components)
    comps[k] = replace(comps[k], xi=xi)
    Rt, w = _rtilde_all(ws, comps, posterior, k, Psi_all, beta)
    eta, _ = _cv_core(ws, Rt, w, xi, eta_grid, folds, np.random.default_rng(seed), direction)
    return eta


# ---------------------------------------------------------------------------
# EM loop
# ---------------------------------------------------------------------------

def _psi_objective(psi_vals, psi_rkhs_sq, a_sq, rhs, eta):
    return float(a_sq @ psi_vals**2 - 2.0 * rhs @ psi_vals + eta * psi_rkhs_sq)


def _safeguarded_psi(ws, Rt, w, xi, eta, old_psi):
    """Normalized representer update, backtracked toward the current psi if it
    would increase the penalized criterion."""
    new_psi, _ = _update_psi_core(ws, Rt, w, xi, eta)
    a_sq, rhs = _psi_system(Rt, w, xi)

    def crit(psi):
        vals = ws.psi_at_obs(psi)
        return _psi_objective(vals, ws.rkhs_norm_sq(psi), a_sq, rhs, eta)

    f_old = crit(old_psi)
    if crit(new_psi) <= f_old:
        return new_psi, 0
    if not np.array_equal(old_psi.knots, ws.times):
        return old_psi, -1
    a_old = old_psi.scale * old_psi.alpha
    a_new = new_psi.scale * new_psi.alpha
    lam = 0.5
    for step in range(1, 40):
        alpha = (1.0 - lam) * a_old + lam * a_new
        norm = ws.l2_norm(alpha)
        if norm > 1e-12:
            cand = KernelFunction(ws.times, alpha, 1.0 / norm)
            if crit(cand) <= f_old:
                return cand, step
        lam *= 0.5
    return old_psi, -1


def _add_context(exc: Exception, iteration: int):
    exc.args = (f"iteration {iteration}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]


def fit(dataset: Dataset, config: FitConfig | None = None) -> ModelFit:
    """Fit a rank-r model by penalized EM.

    Each iteration runs the E-step for every subject and then, for
    k = 1..r in turn, updates beta_k, xi_k and psi_k (selecting eta_k by
    cross-validation during the first ``cv_freeze_iter`` iterations), followed
    by the variance updates. Iteration stops when the relative change of the
    penalized expected log-likelihood across the M-step falls below
    ``delta_stop``.
    """
    config = config or FitConfig()
    r = config.rank
    ws = _Workspace(dataset)
    rng = np.random.default_rng(config.seed)
    eta = np.full(r, config.default_eta)

    if config.init == "best":
        init_method, comps, _, sigma2 = _best_initialization(ws, r, config.default_eta)
    else:
        init_method = config.init
        comps, _, sigma2 = _initialize(ws, r, config.default_eta, init_method)
    comps = list(comps)

    diag = {"q_before": [], "q_after": [], "delta": [], "objective": [], "eta": [],
            "psi_backtracks": [], "floored": []}
    converged = False
    n_iter = 0
    for it in range(1, config.max_iter + 1):
        n_iter = it
        Psi_all = ws.psi_matrix(comps)
        try:
            if config.gls_beta:
                B = _gls_beta_core(ws, comps, sigma2, Psi_all)
                comps = [replace(c, beta=B[:, k]) for k, c in enumerate(comps)]
            posterior = _e_step_all(ws, comps, sigma2, Psi_all)
        except NumericalError as exc:
            _add_context(exc, it)
            raise
        q_before = _q_value(ws, comps, posterior, sigma2, eta, Psi_all)
        backtracks = []
        try:
            for k in range(r):
                beta_k = _update_beta_core(ws, comps, posterior, k, Psi_all)
                comps[k] = replace(comps[k], beta=beta_k)
                Rt, w = _rtilde_all(ws, comps, posterior, k, Psi_all, beta_k)
                xi_k, _ = _update_xi_core(Rt, w, Psi_all[:, k])
                comps[k] = replace(comps[k], xi=xi_k)
                comps, posterior = _sign_fix(comps, posterior, k)
                xi_k = comps[k].xi
                beta_k = comps[k].beta
                Rt, w = _rtilde_all(ws, comps, posterior, k, Psi_all, beta_k)
                if it <= config.cv_freeze_iter:
                    eta[k], _ = _cv_core(ws, Rt, w, xi_k, config.eta_grid, config.cv_folds,
                                         rng, config.cv_direction)
                psi_k, steps = _safeguarded_psi(ws, Rt, w, xi_k, eta[k], comps[k].psi)
                backtracks.append(steps)
                comps[k] = replace(comps[k], psi=psi_k)
                Psi_all[:, k] = ws.psi_at_obs(psi_k)
            sigma2_k, sigma2, floored = _update_variances_core(
                ws, comps, posterior, Psi_all, _penalty(ws, comps, eta))
        except NumericalError as exc:
            _add_context(exc, it)
            raise
        comps = [replace(c, sigma2_k=s) for c, s in zip(comps, sigma2_k)]
        q_after = _q_value(ws, comps, posterior, sigma2, eta, Psi_all)
        objective = _marginal_value(ws, comps, sigma2, eta, Psi_all)
        delta = (q_after - q_before) / abs(q_before) if q_before != 0 else float("inf")
        diag["q_before"].append(q_before)
        diag["q_after"].append(q_after)
        diag["delta"].append(delta)
        diag["objective"].append(objective)
        diag["eta"].append([float(e) for e in eta])
        diag["psi_backtracks"].append(backtracks)
        diag["floored"].append(floored)
        log.debug("iter %d Q %.10g -> %.10g delta %.3g", it, q_before, q_after, delta)
        if abs(delta) < config.delta_stop:
            converged = True
            break

    posterior = _e_step_all(ws, comps, sigma2)
    diag["init"] = init_method
    diag["n_iter"] = n_iter
    diag["converged"] = converged
    return ModelFit(tuple(comps), float(sigma2), posterior, eta.copy(), diag,
                    dataset.feature_names, dataset.covariate_names, tuple(dataset.subject_ids),
                    dataset.time_origin, dataset.time_scale)
