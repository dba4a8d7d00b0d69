"""Parameter containers for a fitted decomposition and their JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, ValidationError
from .kernel import KernelFunction

FORMAT_VERSION = "1"

DEFAULT_ETA_GRID = tuple(10.0**e for e in range(-4, 3))


@dataclass(frozen=True)
class Component:
    """One rank-1 term: covariate effect, feature loading, singular function."""

    beta: np.ndarray
    xi: np.ndarray
    psi: KernelFunction
    sigma2_k: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.array(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "xi", np.array(self.xi, dtype=float).reshape(-1))
        object.__setattr__(self, "sigma2_k", float(self.sigma2_k))

    def to_dict(self) -> dict:
        return {"beta": [float(v) for v in self.beta],
                "xi": [float(v) for v in self.xi],
                "psi": self.psi.to_dict(),
                "sigma2_k": float(self.sigma2_k)}

    @classmethod
    def from_dict(cls, d) -> "Component":
        return cls(np.asarray(d["beta"], dtype=float), np.asarray(d["xi"], dtype=float),
                   KernelFunction.from_dict(d["psi"]), float(d["sigma2_k"]))


@dataclass(frozen=True)
class SubjectPosterior:
    u: np.ndarray       # (r,) posterior mean of the loading deviations
    gamma: np.ndarray   # (r, r) posterior covariance


@dataclass(frozen=True)
class Posterior:
    """Posterior moments for every subject: ``u_tilde`` (n, r), ``gamma`` (n, r, r)."""

    u_tilde: np.ndarray
    gamma: np.ndarray

    @property
    def n(self) -> int:
        return self.u_tilde.shape[0]

    def subject(self, i: int) -> SubjectPosterior:
        return SubjectPosterior(self.u_tilde[i], self.gamma[i])

    @classmethod
    def stack(cls, items) -> "Posterior":
        items = list(items)
        return cls(np.array([s.u for s in items]), np.array([s.gamma for s in items]))


@dataclass(frozen=True)
class FitConfig:
    rank: int = 1
    eta_grid: tuple = DEFAULT_ETA_GRID
    cv_folds: int = 5
    cv_freeze_iter: int = 3
    delta_stop: float = 1e-6
    max_iter: int = 200
    seed: int = 0
    cv_direction: str = "max"
    init_eta: float | None = None
    gls_beta: bool = True
    init: str = "best"

    def __post_init__(self):
        object.__setattr__(self, "eta_grid", tuple(float(e) for e in self.eta_grid))
        self.validate()

    def validate(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValidationError("rank must be a positive integer")
        if not self.eta_grid or any(not e > 0 for e in self.eta_grid):
            raise ValidationError("eta_grid must be a non-empty list of positive values")
        if self.cv_folds < 2:
            raise ValidationError("cv_folds must be at least 2")
        if self.cv_freeze_iter < 0:
            raise ValidationError("cv_freeze_iter must be nonnegative")
        if not self.delta_stop > 0:
            raise ValidationError("delta_stop must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if self.cv_direction not in ("max", "min"):
            raise ValidationError("cv_direction must be 'max' or 'min'")
        if self.init not in ("best", "mean", "profile"):
            raise ValidationError("init must be 'best', 'mean' or 'profile'")
        if self.init_eta is not None and not self.init_eta > 0:
            raise ValidationError("init_eta must be positive")

    @property
    def default_eta(self) -> float:
        if self.init_eta is not None:
            return float(self.init_eta)
        return float(np.median(self.eta_grid))


@dataclass(frozen=True)
class ModelFit:
    components: tuple
    sigma2: float
    posterior: Posterior
    eta: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    feature_names: tuple = ()
    covariate_names: tuple = ()
    subject_ids: tuple = ()
    time_origin: float = 0.0
    time_scale: float = 1.0

    @property
    def rank(self) -> int:
        return len(self.components)

    @property
    def p(self) -> int:
        return self.components[0].xi.size

    @property
    def q(self) -> int:
        return self.components[0].beta.size

    @property
    def B(self) -> np.ndarray:
        """Covariate effects as a (q, r) matrix."""
        return np.column_stack([c.beta for c in self.components]).reshape(self.q, self.rank)

    @property
    def Xi(self) -> np.ndarray:
        return np.column_stack([c.xi for c in self.components])

    def to_raw_time(self, t):
        return self.time_origin + self.time_scale * np.asarray(t, dtype=float)

    def from_raw_time(self, raw):
        return (np.asarray(raw, dtype=float) - self.time_origin) / self.time_scale

    def with_components(self, components) -> "ModelFit":
        return replace(self, components=tuple(components))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "supftsvd_model",
            "rank": self.rank,
            "p": self.p,
            "q": self.q,
            "components": [c.to_dict() for c in self.components],
            "sigma2": float(self.sigma2),
            "eta": [float(e) for e in self.eta],
            "time_map": {"origin": float(self.time_origin), "scale": float(self.time_scale)},
            "feature_names": list(self.feature_names),
            "covariate_names": list(self.covariate_names),
            "posterior": {
                "subject_ids": list(self.subject_ids),
                "u_tilde": self.posterior.u_tilde.tolist(),
                "gamma": self.posterior.gamma.tolist(),
            },
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d) -> "ModelFit":
        if str(d.get("format_version")) != FORMAT_VERSION:
            raise DataFormatError(f"unsupported model format_version {d.get('format_version')!r}")
        try:
            comps = tuple(Component.from_dict(c) for c in d["components"])
            post = d["posterior"]
            r = len(comps)
            n = len(post["subject_ids"])
            posterior = Posterior(np.asarray(post["u_tilde"], dtype=float).reshape(n, r),
                                  np.asarray(post["gamma"], dtype=float).reshape(n, r, r))
            return cls(comps, float(d["sigma2"]), posterior, np.asarray(d["eta"], dtype=float),
                       d.get("diagnostics", {}), tuple(d["feature_names"]),
                       tuple(d["covariate_names"]), tuple(post["subject_ids"]),
                       float(d["time_map"]["origin"]), float(d["time_map"]["scale"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed model document: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ModelFit":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"model JSON does not parse: {exc}") from None
        return cls.from_dict(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj
