"""Bernoulli-polynomial reproducing kernel on [0, 1] and kernel expansions.

The kernel is the one generating the second-order Sobolev space on the unit
interval,

    K(s, t) = 1 + k1(s) k1(t) + k2(s) k2(t) - k4(|s - t|),

with k1(x) = x - 1/2, k2(x) = (k1(x)^2 - 1/12) / 2 and
k4(x) = (k1(x)^4 - k1(x)^2 / 2 + 7/240) / 24.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import simpson

from .errors import DegenerateError, DomainError, ValidationError

# Composite Simpson quadrature nodes for every L2 integral on [0, 1].
N_QUADRATURE = 1001
QUAD_GRID = np.linspace(0.0, 1.0, N_QUADRATURE)

_DEGENERATE_NORM = 1e-12


def _k1(x):
    return x - 0.5


def _k2(x):
    return 0.5 * (_k1(x) ** 2 - 1.0 / 12.0)


def _k4(x):
    k1 = _k1(x)
    return (k1**4 - 0.5 * k1**2 + 7.0 / 240.0) / 24.0


def _check_domain(t, name="t"):
    t = np.asarray(t, dtype=float)
    if t.size and (not np.all(np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0):
        raise DomainError(f"{name} must be finite and lie in [0, 1]; got range "
                          f"[{t.min()!r}, {t.max()!r}]")
    return t


def kernel_eval(s: float, t: float) -> float:
    """Kernel value K(s, t) for two time points in [0, 1]."""
    _check_domain(s, "s")
    _check_domain(t, "t")
    s = float(s)
    t = float(t)
    return 1.0 + _k1(s) * _k1(t) + _k2(s) * _k2(t) - _k4(abs(s - t))


def kernel_matrix(s, t) -> np.ndarray:
    """Cross-kernel matrix with entries K(s[i], t[j])."""
    s = _check_domain(np.atleast_1d(s), "s")
    t = _check_domain(np.atleast_1d(t), "t")
    return (1.0
            + np.multiply.outer(_k1(s), _k1(t))
            + np.multiply.outer(_k2(s), _k2(t))
            - _k4(np.abs(np.subtract.outer(s, t))))


@dataclass(frozen=True)
class KernelMatrix:
    grid: np.ndarray
    values: np.ndarray

    @property
    def size(self) -> int:
        return self.grid.shape[0]


def gram_matrix(grid) -> KernelMatrix:
    grid = np.array(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValidationError("gram_matrix needs a non-empty grid")
    values = kernel_matrix(grid, grid)
    grid.setflags(write=False)
    values.setflags(write=False)
    return KernelMatrix(grid, values)


@dataclass(frozen=True)
class KernelFunction:
    """The function ``scale * sum_l alpha[l] K(., knots[l])``."""

    knots: np.ndarray
    alpha: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float).ravel()
        alpha = np.array(self.alpha, dtype=float).ravel()
        if knots.shape != alpha.shape:
            raise ValidationError("knots and alpha must have the same length")
        _check_domain(knots, "knots")
        knots.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "scale", float(self.scale))

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if self.knots.size == 0:
            out = np.zeros(t_arr.shape)
        else:
            out = self.scale * (kernel_matrix(t_arr.ravel(), self.knots) @ self.alpha)
            out = out.reshape(t_arr.shape)
        return float(out[0]) if np.ndim(t) == 0 else out

    def rkhs_norm_sq(self) -> float:
        """Squared RKHS norm, ``scale^2 alpha' K alpha``."""
        if self.knots.size == 0:
            return 0.0
        gram = kernel_matrix(self.knots, self.knots)
        return float(self.scale**2 * self.alpha @ gram @ self.alpha)

    def to_dict(self) -> dict:
        return {"knots": [float(v) for v in self.knots],
                "alpha": [float(v) for v in self.alpha],
                "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelFunction":
        return cls(np.asarray(d["knots"], dtype=float),
                   np.asarray(d["alpha"], dtype=float), float(d["scale"]))


def expansion_eval(f: KernelFunction, t):
    _check_domain(t)
    return f(t)


def l2_norm(values_on_quad_grid) -> float:
    """L2 norm on [0, 1] of a function sampled on ``QUAD_GRID``."""
    return float(np.sqrt(simpson(np.asarray(values_on_quad_grid) ** 2, x=QUAD_GRID)))


@lru_cache(maxsize=1)
def quadrature_weights() -> np.ndarray:
    """Weights w with ``w @ f(QUAD_GRID)`` equal to the Simpson integral of f."""
    w = simpson(np.eye(N_QUADRATURE), x=QUAD_GRID, axis=0)
    w.setflags(write=False)
    return w


def raw_l2_norm(knots, alpha) -> float:
    knots = np.asarray(knots, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if knots.size == 0:
        return 0.0
    return l2_norm(kernel_matrix(QUAD_GRID, knots) @ alpha)


def l2_normalize(knots, alpha) -> KernelFunction:
    """Kernel expansion rescaled to unit L2 norm on [0, 1].

    Raises
    ------
    DegenerateError
        If the raw expansion has L2 norm below 1e-12.
    """
    knots = np.asarray(knots, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if knots.shape != alpha.shape:
        raise ValidationError("knots and alpha must have the same length")
    norm = raw_l2_norm(knots, alpha)
    if not np.isfinite(norm) or norm < _DEGENERATE_NORM:
        raise DegenerateError(f"kernel expansion has L2 norm {norm!r}; cannot normalize")
    return KernelFunction(knots, alpha, 1.0 / norm)


def zero_function() -> KernelFunction:
    return KernelFunction(np.zeros(0), np.zeros(0), 1.0)
