"""Synthetic functional tensors with known low-rank structure.

Subject loadings are ``zeta_ik = x_i' gamma_k + e_ik`` with
``e_ik ~ N(0, tau_k)``; observations are

    Y_ij^b = sum_k lambda_k zeta_ik xi_bk phi_k(t_ij) + eps,  eps ~ N(0, sigma2),

where ``phi_k`` is a random combination of the first ten cosine basis
functions. ``phi_k`` is stored with unit L2 norm and its original norm is
folded into ``lambda_k``, so the truth is directly comparable with fitted
unit-norm components: the fitted loading scale corresponds to
``lambda_k * zeta_ik``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Subject
from .errors import DataFormatError, ValidationError
from .kernel import KernelFunction, _check_domain
from .model import FORMAT_VERSION

N_BASIS = 10


def cosine_basis(t, n_basis: int = N_BASIS) -> np.ndarray:
    """Orthonormal basis 1, sqrt(2) cos((l - 1) pi t) on [0, 1]; shape (len(t), n_basis)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    cols = [np.ones_like(t)] + [np.sqrt(2.0) * np.cos(l * np.pi * t) for l in range(1, n_basis)]
    return np.column_stack(cols)


@dataclass(frozen=True)
class CosineFunction:
    """``sum_l coef[l] * basis_l(t)`` for the cosine basis."""

    coef: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coef", np.array(self.coef, dtype=float).ravel())

    def __call__(self, t):
        out = cosine_basis(t, self.coef.size) @ self.coef
        return float(out[0]) if np.ndim(t) == 0 else out

    def to_dict(self) -> dict:
        return {"basis": "cosine", "coef": [float(c) for c in self.coef]}


def psi_from_dict(d: dict):
    basis = d.get("basis", "kernel")
    if basis == "cosine":
        return CosineFunction(np.asarray(d["coef"], dtype=float))
    if basis == "kernel":
        return KernelFunction.from_dict(d)
    raise DataFormatError(f"unknown function basis {basis!r}")


def psi_to_dict(f) -> dict:
    if isinstance(f, KernelFunction):
        return {"basis": "kernel", **f.to_dict()}
    return f.to_dict()


@dataclass(frozen=True)
class SimConfig:
    """Settings for one synthetic draw.

    ``m`` fixes the number of visits per subject; when it is None each
    subject gets a uniform draw from ``m_range`` (inclusive). Covariates come
    from ``covariate_seed`` so that they stay fixed across replicates that
    differ only in ``seed``. Setting every entry of ``gamma`` to zero makes the
    covariates irrelevant.
    """

    n: int = 50
    p: int = 100
    gamma: tuple = ((1.5, 3.0),)
    lam: tuple = (80.0,)
    tau: tuple = (1.0,)
    sigma2: float = 1.0
    m: int | None = None
    m_range: tuple = (3, 8)
    seed: int = 0
    covariate_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(tuple(float(v) for v in g) for g in self.gamma))
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))
        object.__setattr__(self, "tau", tuple(float(v) for v in self.tau))
        object.__setattr__(self, "m_range", tuple(int(v) for v in self.m_range))
        self.validate()

    @property
    def r(self) -> int:
        return len(self.lam)

    @property
    def q(self) -> int:
        return len(self.gamma[0]) if self.gamma else 0

    def validate(self):
        if self.n < 1 or self.p < 1:
            raise ValidationError("n and p must be positive")
        if self.r < 1:
            raise ValidationError("at least one component is required")
        if len(self.gamma) != self.r or len(self.tau) != self.r:
            raise ValidationError("gamma, lam and tau must all have one entry per component")
        if len({len(g) for g in self.gamma}) != 1:
            raise ValidationError("every gamma_k must have the same length")
        if any(not v > 0 for v in self.lam) or any(not v > 0 for v in self.tau):
            raise ValidationError("lam and tau entries must be positive")
        if not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")
        if self.m is not None and self.m < 1:
            raise ValidationError("m must be at least 1")
        lo, hi = self.m_range
        if self.m is None and not 1 <= lo <= hi:
            raise ValidationError("m_range must satisfy 1 <= low <= high")

    @classmethod
    def rank1(cls, **kw) -> "SimConfig":
        """The single-component design: gamma = (1.5, 3), lambda = 80."""
        kw.setdefault("p", 500)
        return cls(gamma=((1.5, 3.0),), lam=(80.0,), tau=kw.pop("tau", (1.0,)), **kw)

    @classmethod
    def rank2(cls, **kw) -> "SimConfig":
        """The two-component design: gamma = (1.5, 3), (2, 3.4); lambda = (120, 80)."""
        kw.setdefault("p", 500)
        return cls(gamma=((1.5, 3.0), (2.0, 3.4)), lam=(120.0, 80.0),
                   tau=kw.pop("tau", (1.0, 1.5)), **kw)


@dataclass(frozen=True)
class SimulationTruth:
    """Ground truth of a draw, on the unit-norm scale.

    ``lam`` already includes the norm of the raw singular function; ``psi``
    holds the unit-norm functions. ``zeta`` and ``e`` are (n, r) and ``X`` is
    (n, q), rows aligned with ``subject_ids``.
    """

    gamma: np.ndarray       # (r, q)
    lam: np.ndarray         # (r,)
    tau: np.ndarray         # (r,)
    xi: np.ndarray          # (p, r)
    psi: tuple              # r callables with unit L2 norm
    sigma2: float
    X: np.ndarray
    zeta: np.ndarray
    e: np.ndarray
    subject_ids: tuple

    @property
    def r(self) -> int:
        return self.lam.size

    @property
    def p(self) -> int:
        return self.xi.shape[0]

    @property
    def beta(self) -> np.ndarray:
        """Covariate effects on the fitted loading scale, (q, r)."""
        return (self.gamma * self.lam[:, None]).T

    def mean_loadings(self, X=None) -> np.ndarray:
        X = self.X if X is None else np.asarray(X, dtype=float)
        return X @ self.beta

    def loadings(self) -> np.ndarray:
        """Full loadings ``lambda_k zeta_ik``, (n, r)."""
        return self.zeta * self.lam

    def psi_matrix(self, grid) -> np.ndarray:
        return np.column_stack([np.atleast_1d(f(grid)) for f in self.psi])

    def trajectory(self, i: int, grid) -> np.ndarray:
        """Noise-free p x len(grid) signal for subject row ``i``."""
        return (self.xi * self.loadings()[i]) @ self.psi_matrix(grid).T

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "supftsvd_truth",
            "rank": self.r,
            "p": self.p,
            "q": self.gamma.shape[1],
            "gamma": self.gamma.tolist(),
            "lam": self.lam.tolist(),
            "tau": self.tau.tolist(),
            "sigma2": float(self.sigma2),
            "xi": self.xi.T.tolist(),
            "psi": [psi_to_dict(f) for f in self.psi],
            "subject_ids": list(self.subject_ids),
            "X": self.X.tolist(),
            "zeta": self.zeta.tolist(),
            "e": self.e.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationTruth":
        if str(d.get("format_version")) != FORMAT_VERSION:
            raise DataFormatError(f"unsupported truth format_version {d.get('format_version')!r}")
        try:
            r = int(d["rank"])
            n = len(d["subject_ids"])
            q = int(d["q"])
            return cls(np.asarray(d["gamma"], dtype=float).reshape(r, q),
                       np.asarray(d["lam"], dtype=float).reshape(r),
                       np.asarray(d["tau"], dtype=float).reshape(r),
                       np.asarray(d["xi"], dtype=float).reshape(r, -1).T,
                       tuple(psi_from_dict(f) for f in d["psi"]),
                       float(d["sigma2"]),
                       np.asarray(d["X"], dtype=float).reshape(n, q),
                       np.asarray(d["zeta"], dtype=float).reshape(n, r),
                       np.asarray(d["e"], dtype=float).reshape(n, r),
                       tuple(str(s) for s in d["subject_ids"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed truth document: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "SimulationTruth":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"truth JSON does not parse: {exc}") from None


def truth_eval_psi(truth: SimulationTruth, k: int, grid) -> np.ndarray:
    """Unit-norm true singular function k (zero-based) on ``grid``."""
    _check_domain(grid, "grid")
    return np.atleast_1d(truth.psi[k](np.asarray(grid, dtype=float)))


def _draw_covariates(n, q, rng):
    # first covariate U(0, 1); the rest Beta(1, 1), which is the same law
    cols = [rng.uniform(0.0, 1.0, n)] + [rng.beta(1.0, 1.0, n) for _ in range(q - 1)]
    return np.column_stack(cols) if q else np.zeros((n, 0))


def _draw_subjects(config, truth_parts, X, rng, id_prefix):
    gamma, lam, xi, psi = truth_parts
    n, r = X.shape[0], lam.size
    e = rng.normal(0.0, 1.0, (n, r)) * np.sqrt(np.asarray(config.tau))
    zeta = X @ gamma.T + e
    if config.m is None:
        ms = rng.integers(config.m_range[0], config.m_range[1] + 1, n)
    else:
        ms = np.full(n, config.m)
    subjects = []
    width = len(str(n))
    for i in range(n):
        times = np.sort(rng.uniform(0.0, 1.0, int(ms[i])))
        signal = (xi * (lam * zeta[i])) @ np.column_stack([f(times) for f in psi]).T
        noise = rng.normal(0.0, np.sqrt(config.sigma2), signal.shape)
        subjects.append(Subject(f"{id_prefix}{i + 1:0{width}d}", X[i], times, signal + noise))
    return subjects, zeta, e


def _dataset(subjects, p, q):
    return Dataset(tuple(subjects), tuple(f"f{b + 1}" for b in range(p)),
                   tuple(f"x{j + 1}" for j in range(q)), 0.0, 1.0)


def simulate(config: SimConfig):
    """Draw a dataset and its truth.

    Returns ``(Dataset, SimulationTruth)``. Times are already on [0, 1] and
    are not rescaled.
    """
    rng = np.random.default_rng(config.seed)
    X = _draw_covariates(config.n, config.q, np.random.default_rng(config.covariate_seed))
    gamma = np.asarray(config.gamma, dtype=float).reshape(config.r, config.q)
    lam = np.asarray(config.lam, dtype=float)
    xi = rng.normal(size=(config.p, config.r))
    xi /= np.linalg.norm(xi, axis=0)
    bounds = 1.0 / np.arange(1, N_BASIS + 1)
    coef = rng.uniform(-bounds, bounds, (config.r, N_BASIS))
    # cosine basis is orthonormal, so the L2 norm is the coefficient norm
    norms = np.linalg.norm(coef, axis=1)
    psi = tuple(CosineFunction(c / s) for c, s in zip(coef, norms))
    lam = lam * norms
    subjects, zeta, e = _draw_subjects(config, (gamma, lam, xi, psi), X, rng, "s")
    truth = SimulationTruth(gamma, lam, np.asarray(config.tau), xi, psi, config.sigma2, X,
                            zeta, e, tuple(s.id for s in subjects))
    return _dataset(subjects, config.p, config.q), truth


def simulate_new_subjects(config: SimConfig, truth: SimulationTruth, n_new: int, seed: int):
    """Fresh subjects (new covariates, loadings, times and noise) from an existing truth.

    Returns ``(Dataset, SimulationTruth)`` where the truth's subject-level
    fields describe the new subjects.
    """
    if n_new < 1:
        raise ValidationError("n_new must be positive")
    rng = np.random.default_rng(seed)
    X = _draw_covariates(n_new, config.q, rng)
    subjects, zeta, e = _draw_subjects(config, (truth.gamma, truth.lam, truth.xi, truth.psi),
                                       X, rng, "t")
    new_truth = replace(truth, X=X, zeta=zeta, e=e, subject_ids=tuple(s.id for s in subjects))
    return _dataset(subjects, config.p, config.q), new_truth
