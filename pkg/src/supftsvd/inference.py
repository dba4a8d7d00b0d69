"""Applying a fitted model to new or training subjects."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Subject
from .em import e_step
from .errors import ValidationError
from .kernel import _check_domain
from .model import ModelFit

DEFAULT_GRID_SIZE = 101


@dataclass(frozen=True)
class NewSubjectScores:
    zeta_hat: np.ndarray   # (r,) x'beta + u_hat
    u_hat: np.ndarray      # (r,)
    gamma_n: np.ndarray    # (r, r) posterior covariance


@dataclass(frozen=True)
class TrajectoryGrid:
    """Predicted values (p, L) on a time grid; ``raw_times`` uses the original clock."""

    times: np.ndarray
    values: np.ndarray
    raw_times: np.ndarray


@dataclass(frozen=True)
class Reconstruction:
    """Fitted values at a subject's observed times: per component (r, p, m) and total (p, m)."""

    subject_id: str
    times: np.ndarray
    per_component: np.ndarray
    total: np.ndarray


def default_grid(size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    if size < 2:
        raise ValidationError("grid size must be at least 2")
    return np.linspace(0.0, 1.0, size)


def _check_subject(model: ModelFit, subject: Subject):
    if subject.p != model.p:
        raise ValidationError(f"subject {subject.id!r} has {subject.p} features; model has {model.p}")
    if subject.x.size != model.q:
        raise ValidationError(
            f"subject {subject.id!r} has {subject.x.size} covariates; model has {model.q}")


def project_subject(model: ModelFit, subject: Subject) -> NewSubjectScores:
    """Posterior loadings of a subject under the frozen fitted parameters."""
    _check_subject(model, subject)
    post = e_step(subject, model.components, model.sigma2)
    mean = subject.x @ model.B
    return NewSubjectScores(mean + post.u, post.u, post.gamma)


def _component_values(model: ModelFit, grid) -> np.ndarray:
    return np.column_stack([np.atleast_1d(c.psi(grid)) for c in model.components])


def predict_trajectory(model: ModelFit, scores, grid=None) -> TrajectoryGrid:
    """Rank-r trajectory ``sum_k zeta_k xi_k psi_k(t)`` on ``grid``.

    ``scores`` is a :class:`NewSubjectScores` or a plain loading vector.
    """
    grid = default_grid() if grid is None else _check_domain(np.asarray(grid, dtype=float).ravel(),
                                                            "grid")
    zeta = scores.zeta_hat if isinstance(scores, NewSubjectScores) else np.asarray(scores, float)
    if zeta.shape != (model.rank,):
        raise ValidationError(f"expected {model.rank} loadings, got shape {zeta.shape}")
    values = (model.Xi * zeta) @ _component_values(model, grid).T
    return TrajectoryGrid(grid, values, model.to_raw_time(grid))


def predict_from_covariates(model: ModelFit, x, grid=None) -> TrajectoryGrid:
    """Mean trajectory implied by covariates alone (posterior deviation set to zero)."""
    if model.q == 0:
        raise ValidationError("covariate-only prediction needs a model fitted with covariates")
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.q:
        raise ValidationError(f"expected {model.q} covariates, got {x.size}")
    return predict_trajectory(model, x @ model.B, grid)


def reconstruct_insample(model: ModelFit, dataset: Dataset) -> list:
    """Per-subject fitted values at observed times using the full loadings x'beta + u."""
    out = []
    for s in dataset.subjects:
        scores = project_subject(model, s)
        Psi = _component_values(model, s.times)
        per = np.stack([np.outer(c.xi * z, Psi[:, k])
                        for k, (c, z) in enumerate(zip(model.components, scores.zeta_hat))])
        out.append(Reconstruction(s.id, s.times, per, per.sum(axis=0)))
    return out


def to_model_time(model: ModelFit, dataset: Dataset):
    """Map a dataset recorded on the raw clock onto the model's [0, 1] time scale.

    Times falling outside the training range are clamped to the boundary and a
    warning is issued. Returns ``(dataset, n_clamped)``.
    """
    subjects = []
    clamped = 0
    for s in dataset.subjects:
        t = model.from_raw_time(s.times)
        outside = (t < 0.0) | (t > 1.0)
        clamped += int(outside.sum())
        subjects.append(replace(s, times=np.clip(t, 0.0, 1.0)))
    if clamped:
        warnings.warn(f"{clamped} time points outside the training range were clamped to [0, 1]",
                      stacklevel=2)
    mapped = replace(dataset, subjects=tuple(subjects), time_origin=model.time_origin,
                     time_scale=model.time_scale)
    return mapped, clamped
