"""Longitudinal multivariate data: subjects, datasets, CSV IO and preprocessing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError, EmptyResultError, ValidationError


def _frozen(a, ndim) -> np.ndarray:
    a = np.array(a, dtype=float)
    if ndim == 1:
        a = a.reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Subject:
    """One subject: covariates ``x`` (q,), sorted ``times`` (m,) and data ``Y`` (p, m)."""

    id: str
    x: np.ndarray
    times: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        x = _frozen(self.x, 1)
        times = _frozen(self.times, 1)
        Y = np.array(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        Y.setflags(write=False)
        if times.size < 1:
            raise DataFormatError(f"subject {self.id!r} has no observations")
        if Y.ndim != 2 or Y.shape[1] != times.size:
            raise DataFormatError(
                f"subject {self.id!r}: Y has shape {Y.shape} but {times.size} time points")
        if np.any(np.diff(times) <= 0):
            raise DataFormatError(f"subject {self.id!r}: times must be strictly increasing")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(times)) and np.all(np.isfinite(x))):
            raise DataFormatError(f"subject {self.id!r} contains non-finite values")
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "Y", Y)

    @property
    def m(self) -> int:
        return self.times.size

    @property
    def p(self) -> int:
        return self.Y.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A collection of subjects sharing feature and covariate dimensions.

    ``time_origin`` and ``time_scale`` record the affine map
    ``raw = time_origin + time_scale * t`` from the stored times back to the
    original clock.
    """

    subjects: tuple
    feature_names: tuple = None
    covariate_names: tuple = None
    time_origin: float = 0.0
    time_scale: float = 1.0

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise DataFormatError("dataset has no subjects")
        p = subjects[0].p
        q = subjects[0].x.size
        ids = set()
        for s in subjects:
            if s.p != p or s.x.size != q:
                raise DataFormatError(
                    f"subject {s.id!r} has p={s.p}, q={s.x.size}; expected p={p}, q={q}")
            if s.id in ids:
                raise DataFormatError(f"duplicate subject id {s.id!r}")
            ids.add(s.id)
        names = self.feature_names
        names = tuple(f"f{b}" for b in range(p)) if names is None else tuple(map(str, names))
        if len(names) != p:
            raise DataFormatError(f"{len(names)} feature names for p={p}")
        cov = self.covariate_names
        cov = tuple(f"x{c}" for c in range(q)) if cov is None else tuple(map(str, cov))
        if len(cov) != q:
            raise DataFormatError(f"{len(cov)} covariate names for q={q}")
        if not self.time_scale > 0:
            raise ValidationError("time_scale must be positive")
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "covariate_names", cov)
        object.__setattr__(self, "time_origin", float(self.time_origin))
        object.__setattr__(self, "time_scale", float(self.time_scale))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].p

    @property
    def q(self) -> int:
        return self.subjects[0].x.size

    @property
    def M(self) -> int:
        return sum(s.m for s in self.subjects)

    @property
    def subject_ids(self) -> list:
        return [s.id for s in self.subjects]

    @property
    def X(self) -> np.ndarray:
        return np.array([s.x for s in self.subjects]).reshape(self.n, self.q)

    def all_times(self) -> np.ndarray:
        """Observation times pooled over subjects, in subject order (with repeats)."""
        return np.concatenate([s.times for s in self.subjects])

    def stacked(self) -> np.ndarray:
        """The p x M matrix [Y_1, ..., Y_n]."""
        return np.hstack([s.Y for s in self.subjects])

    def to_raw_time(self, t):
        return self.time_origin + self.time_scale * np.asarray(t, dtype=float)

    def from_raw_time(self, raw):
        return (np.asarray(raw, dtype=float) - self.time_origin) / self.time_scale

    def with_subjects(self, subjects) -> "Dataset":
        return replace(self, subjects=tuple(subjects))

    def with_covariates(self, X, names=None) -> "Dataset":
        X = np.asarray(X, dtype=float).reshape(self.n, -1)
        subjects = [replace(s, x=X[i]) for i, s in enumerate(self.subjects)]
        return replace(self, subjects=tuple(subjects), covariate_names=names)


@dataclass(frozen=True)
class CountTable(Dataset):
    """A dataset whose entries are nonnegative integer counts."""

    def __post_init__(self):
        super().__post_init__()
        for s in self.subjects:
            if np.any(s.Y < 0) or np.any(s.Y != np.round(s.Y)):
                raise DataFormatError(f"subject {s.id!r}: counts must be nonnegative integers")


def rescale_times(dataset: Dataset, lower: float | None = None,
                  upper: float | None = None) -> Dataset:
    """Map all times affinely onto [0, 1].

    By default the pooled minimum goes to 0 and the maximum to 1; ``lower`` and
    ``upper`` override the range (e.g. a known study window). If every time is
    equal the map sends them to 0.5 with unit scale.
    """
    raw = dataset.to_raw_time(dataset.all_times())
    lo = float(raw.min()) if lower is None else float(lower)
    hi = float(raw.max()) if upper is None else float(upper)
    if hi < lo:
        raise ValidationError(f"time range upper {hi} is below lower {lo}")
    if hi == lo:
        origin, scale = lo - 0.5, 1.0
    else:
        origin, scale = lo, hi - lo
    subjects = []
    for s in dataset.subjects:
        t = (dataset.to_raw_time(s.times) - origin) / scale
        if np.any(t < -1e-12) or np.any(t > 1 + 1e-12):
            raise ValidationError(f"subject {s.id!r} has times outside the rescaling range")
        subjects.append(replace(s, times=np.clip(t, 0.0, 1.0)))
    return replace(dataset, subjects=tuple(subjects), time_origin=origin, time_scale=scale)


def clr_transform(counts: CountTable) -> Dataset:
    """Centered log-ratio transform with a +0.5 offset, column by column."""
    if counts.p < 2:
        raise ValidationError("CLR transform needs at least two features")
    subjects = []
    for s in counts.subjects:
        logy = np.log(s.Y + 0.5)
        # shift by the first row so equal counts give exact zeros
        logy = logy - logy[:1]
        subjects.append(replace(s, Y=logy - logy.mean(axis=0, keepdims=True)))
    return Dataset(tuple(subjects), counts.feature_names, counts.covariate_names,
                   counts.time_origin, counts.time_scale)


def filter_features(counts: CountTable, min_prevalence: float | None = None,
                    min_rel_abundance: float | None = None,
                    min_samples: int | None = None) -> CountTable:
    """Drop low-abundance features.

    Two independent rules are available and are combined with AND when both
    are given:

    * ``min_prevalence``: keep a feature observed (count > 0) in at least this
      fraction of all samples;
    * ``min_rel_abundance`` with ``min_samples``: keep a feature whose relative
      abundance within a sample reaches the threshold in at least
      ``min_samples`` samples.
    """
    if min_prevalence is None and min_rel_abundance is None:
        raise ValidationError("no filtering rule given")
    if min_prevalence is not None and not 0.0 <= min_prevalence <= 1.0:
        raise ValidationError("min_prevalence must be in [0, 1]")
    if min_rel_abundance is not None:
        if not 0.0 <= min_rel_abundance <= 1.0:
            raise ValidationError("min_rel_abundance must be in [0, 1]")
        if min_samples is None or min_samples < 1:
            raise ValidationError("min_rel_abundance requires min_samples >= 1")
    stacked = counts.stacked()
    keep = np.ones(counts.p, dtype=bool)
    if min_prevalence is not None:
        prevalence = (stacked > 0).mean(axis=1)
        keep &= prevalence >= min_prevalence
    if min_rel_abundance is not None:
        depth = stacked.sum(axis=0, keepdims=True)
        rel = np.divide(stacked, depth, out=np.zeros_like(stacked), where=depth > 0)
        keep &= (rel >= min_rel_abundance).sum(axis=1) >= min_samples
    if not keep.any():
        raise EmptyResultError("no feature passes the filtering rule")
    names = tuple(n for n, k in zip(counts.feature_names, keep) if k)
    subjects = tuple(replace(s, Y=s.Y[keep]) for s in counts.subjects)
    return replace(counts, subjects=subjects, feature_names=names)


# ---------------------------------------------------------------------------
# CSV IO
# ---------------------------------------------------------------------------

DATA_HEADER = ["subject_id", "time", "feature", "value"]


def fmt(v) -> str:
    """Full double precision, as used in every numeric output."""
    return format(float(v), ".17g")


def _parse_float(text, path, line, what):
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"{path}:{line}: cannot parse {what} {text!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"{path}:{line}: non-finite {what} {text!r}")
    return v


def read_long_csv(path, integer: bool = False):
    """Parse a long-format ``subject_id,time,feature,value`` file.

    Returns ``(subject_ids, feature_names, records)`` where ``records`` maps a
    subject id to ``{raw_time: {feature: value}}``. Subjects and features keep
    their order of first appearance.
    """
    path = Path(path)
    subjects: dict = {}
    features: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != DATA_HEADER:
            raise DataFormatError(f"{path}:1: header must be {','.join(DATA_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            sid, t_text, feat, v_text = (c.strip() for c in row)
            if not sid or not feat:
                raise DataFormatError(f"{path}:{line}: empty subject_id or feature")
            t = _parse_float(t_text, path, line, "time")
            v = _parse_float(v_text, path, line, "value")
            if integer and (v < 0 or v != round(v)):
                raise DataFormatError(f"{path}:{line}: count must be a nonnegative integer")
            features.setdefault(feat, len(features))
            obs = subjects.setdefault(sid, {}).setdefault(t, {})
            if feat in obs:
                raise DataFormatError(
                    f"{path}:{line}: duplicate entry for subject {sid!r}, time {t_text}, "
                    f"feature {feat!r}")
            obs[feat] = v
    if not subjects:
        raise DataFormatError(f"{path}: no data rows")
    return list(subjects), list(features), subjects


def read_covariates_csv(path):
    """Parse ``subject_id,<cov1>,...``; returns (names, {subject_id: vector})."""
    path = Path(path)
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "subject_id":
            raise DataFormatError(f"{path}:1: header must start with subject_id")
        names = [h.strip() for h in header[1:]]
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            sid = row[0].strip()
            if sid in out:
                raise DataFormatError(f"{path}:{line}: duplicate subject {sid!r}")
            out[sid] = np.array([_parse_float(c, path, line, "covariate") for c in row[1:]])
    return names, out


def build_dataset(ids, features, records, covariates=None, covariate_names=None,
                  cls=Dataset, require_covariates=True) -> Dataset:
    """Assemble per-subject matrices from parsed long-format records.

    A sample (subject, time) must carry a value for every feature.
    """
    covariate_names = list(covariate_names or [])
    q = len(covariate_names)
    subjects = []
    for sid in ids:
        obs = records[sid]
        times = sorted(obs)
        Y = np.empty((len(features), len(times)))
        for j, t in enumerate(times):
            row = obs[t]
            if len(row) != len(features):
                missing = [f for f in features if f not in row]
                raise DataFormatError(
                    f"subject {sid!r} at time {t!r} is missing features {missing[:5]}")
            Y[:, j] = [row[f] for f in features]
        if covariates is not None and sid in covariates:
            x = covariates[sid]
        elif covariates is not None and require_covariates:
            raise DataFormatError(f"subject {sid!r} has no covariate row")
        else:
            x = np.zeros(0) if q == 0 else None
        if x is None:
            raise DataFormatError(f"subject {sid!r} has no covariate row")
        subjects.append(Subject(sid, x, np.array(times), Y))
    return cls(tuple(subjects), tuple(features), tuple(covariate_names))


def load_dataset(data_csv, covariates_csv=None, add_intercept: bool = False,
                 integer: bool = False, cls=Dataset) -> Dataset:
    """Read data (and optional covariates) CSVs into a dataset on raw times."""
    ids, features, records = read_long_csv(data_csv, integer=integer)
    covariates, names = None, []
    if covariates_csv is not None:
        names, covariates = read_covariates_csv(covariates_csv)
        extra = sorted(set(covariates) - set(ids))
        if extra:
            raise DataFormatError(f"covariates given for unknown subjects {extra[:5]}")
    if add_intercept:
        names = list(names) + ["intercept"]
        if covariates is None:
            covariates = {sid: np.ones(1) for sid in ids}
        else:
            covariates = {sid: np.append(x, 1.0) for sid, x in covariates.items()}
    return build_dataset(ids, features, records, covariates, names, cls=cls)


def write_long_csv(dataset: Dataset, path, raw_time: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATA_HEADER)
        for s in dataset.subjects:
            times = dataset.to_raw_time(s.times) if raw_time else s.times
            for j, t in enumerate(times):
                for b, name in enumerate(dataset.feature_names):
                    w.writerow([s.id, fmt(t), name, fmt(s.Y[b, j])])


def write_covariates_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *dataset.covariate_names])
        for s in dataset.subjects:
            w.writerow([s.id, *(fmt(v) for v in s.x)])
