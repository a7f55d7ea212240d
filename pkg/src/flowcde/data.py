"""Dataset ingestion, normalization, splitting, and synthetic generators.

Conventions fixed here:

- z-scoring uses the POPULATION (1/N) standard deviation, computed on the
  training split only; validation/test are transformed with train statistics.
- a cyclic-hour feature column expands to (sin, cos) of 2*pi*h/24 and is
  never z-scored; expanded columns keep a cyclic kind so repeated
  normalization leaves them alone.
- held-out log-likelihoods on normalized targets convert to raw target units
  by adding NormStats.log_jacobian (= -sum ln std_y).

CSV rows whose cells fail to parse are dropped and their 1-based row numbers
recorded on the dataset; file-level problems (missing column, ragged row,
empty file) raise DataError.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "Dataset",
    "NormStats",
    "encode_cyclic_hour",
    "load_csv",
    "save_csv",
    "normalize",
    "apply_stats",
    "denormalize_targets",
    "split",
    "save_split_indices",
    "load_split_indices",
    "toy_generator",
    "toy_true_log_density",
    "TOY_GENERATORS",
]

NUMERIC = "numeric"
CYCLIC_HOUR = "cyclic-hour"
CYCLIC_SIN = "cyclic-sin"
CYCLIC_COS = "cyclic-cos"
_KINDS = (NUMERIC, CYCLIC_HOUR, CYCLIC_SIN, CYCLIC_COS)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, target matrix (1 or 2 columns), and column metadata."""

    x: np.ndarray
    y: np.ndarray
    feature_names: tuple = ()
    target_names: tuple = ("y",)
    kinds: tuple = ()
    rejected_rows: tuple = ()

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if not self.feature_names:
            object.__setattr__(
                self, "feature_names", tuple(f"x{i}" for i in range(x.shape[1]))
            )
        if not self.kinds:
            object.__setattr__(self, "kinds", (NUMERIC,) * x.shape[1])
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} target rows")
        if y.shape[1] not in (1, 2):
            raise DataError(f"targets must have 1 or 2 columns, got {y.shape[1]}")
        if len(self.feature_names) != x.shape[1] or len(self.kinds) != x.shape[1]:
            raise DataError("feature names/kinds do not match the feature count")
        if len(self.target_names) != y.shape[1]:
            raise DataError("target names do not match the target count")
        bad = [k for k in self.kinds if k not in _KINDS]
        if bad:
            raise DataError(f"unknown column kinds {bad}")

    @property
    def n(self):
        return self.x.shape[0]

    def take(self, indices):
        idx = np.asarray(indices, dtype=int)
        return replace(self, x=self.x[idx], y=self.y[idx], rejected_rows=())


def encode_cyclic_hour(hours):
    """(sin, cos) of 2*pi*h/24; hour 6 maps to (1, 0)."""
    ang = 2.0 * math.pi * np.asarray(hours, dtype=float) / 24.0
    return np.sin(ang), np.cos(ang)


def _expand(ds):
    """Replace each cyclic-hour column with its (sin, cos) pair."""
    if CYCLIC_HOUR not in ds.kinds:
        return ds
    cols, names, kinds = [], [], []
    for j, (name, kind) in enumerate(zip(ds.feature_names, ds.kinds)):
        if kind == CYCLIC_HOUR:
            s, c = encode_cyclic_hour(ds.x[:, j])
            cols += [s, c]
            names += [f"{name}_sin", f"{name}_cos"]
            kinds += [CYCLIC_SIN, CYCLIC_COS]
        else:
            cols.append(ds.x[:, j])
            names.append(name)
            kinds.append(kind)
    return replace(
        ds, x=np.column_stack(cols), feature_names=tuple(names), kinds=tuple(kinds)
    )


@dataclass(frozen=True)
class NormStats:
    """Train-split moments over the expanded feature columns and targets."""

    feature_names: tuple
    kinds: tuple
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @property
    def log_jacobian(self):
        """Add this to a normalized-units log-likelihood to get raw units."""
        return -float(np.log(self.y_std).sum())


def normalize(train):
    """(normalized train, stats); population std from the train split only."""
    ds = _expand(train)
    x_mean = np.zeros(ds.x.shape[1])
    x_std = np.ones(ds.x.shape[1])
    for j, kind in enumerate(ds.kinds):
        if kind != NUMERIC:
            continue
        x_mean[j] = ds.x[:, j].mean()
        x_std[j] = ds.x[:, j].std()
        if x_std[j] <= 0:
            raise DataError(f"constant feature column {ds.feature_names[j]!r}")
    y_mean = ds.y.mean(axis=0)
    y_std = ds.y.std(axis=0)
    for t, sd in enumerate(y_std):
        if sd <= 0:
            raise DataError(f"constant target column {ds.target_names[t]!r}")
    stats = NormStats(ds.feature_names, ds.kinds, x_mean, x_std, y_mean, y_std)
    return apply_stats(stats, train), stats


def apply_stats(stats, other):
    """Transform any dataset with train statistics (no leakage by design)."""
    ds = _expand(other)
    if ds.feature_names != stats.feature_names:
        raise DataError(
            f"columns {ds.feature_names} do not match stats {stats.feature_names}"
        )
    return replace(
        ds,
        x=(ds.x - stats.x_mean) / stats.x_std,
        y=(ds.y - stats.y_mean) / stats.y_std,
    )


def denormalize_targets(stats, y):
    return np.asarray(y, dtype=float) * stats.y_std + stats.y_mean


# -- CSV ----------------------------------------------------------------------


def load_csv(path, features, targets, cyclic=()):
    """Read a numeric CSV with header; unparsable rows are dropped and their
    1-based row numbers recorded in Dataset.rejected_rows."""
    features = tuple(features)
    targets = tuple(targets)
    unknown_cyclic = [c for c in cyclic if c not in features]
    if unknown_cyclic:
        raise ConfigError(f"cyclic columns {unknown_cyclic} are not feature columns")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in features + targets if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        pos = [header.index(c) for c in features + targets]
        rows, rejected = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}"
                )
            try:
                rows.append([float(row[p]) for p in pos])
            except ValueError:
                rejected.append(lineno)
    if not rows:
        raise DataError(f"{path}: no usable data rows (rejected: {rejected})")
    mat = np.asarray(rows)
    kinds = tuple(CYCLIC_HOUR if c in cyclic else NUMERIC for c in features)
    return Dataset(
        x=mat[:, : len(features)],
        y=mat[:, len(features):],
        feature_names=features,
        target_names=targets,
        kinds=kinds,
        rejected_rows=tuple(rejected),
    )


def save_csv(path, ds):
    """Write features then targets, %.17g so a round trip is bit-exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(ds.feature_names) + list(ds.target_names))
        for i in range(ds.n):
            writer.writerow(
                [format(v, ".17g") for v in ds.x[i]]
                + [format(v, ".17g") for v in ds.y[i]]
            )


# -- splitting ------------------------------------------------------------------


def split(ds, fractions=(0.8, 0.1, 0.1), seed=0):
    """Deterministic shuffled (train, valid, test) split.

    Sizes are floor(f * N) with the remainder joining the last split; returns
    the three datasets and their row-index arrays for persistence.
    """
    if len(fractions) != 3:
        raise ConfigError("need exactly three split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be >= 0 and sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(ds.n)
    n1 = int(fractions[0] * ds.n)
    n2 = int(fractions[1] * ds.n)
    parts = (perm[:n1], perm[n1 : n1 + n2], perm[n1 + n2 :])
    return tuple(ds.take(p) for p in parts), parts


def save_split_indices(path, parts):
    train, valid, test = parts
    with open(path, "w") as fh:
        fh.write(f"# split sizes {len(train)} {len(valid)} {len(test)}\n")
        for part in parts:
            for i in part:
                fh.write(f"{int(i)}\n")


def load_split_indices(path):
    with open(path) as fh:
        header = fh.readline().split()
        if header[:3] != ["#", "split", "sizes"]:
            raise DataError(f"{path}: not a split-index file")
        sizes = [int(s) for s in header[3:6]]
        idx = [int(line) for line in fh if line.strip()]
    if len(idx) != sum(sizes):
        raise DataError(f"{path}: expected {sum(sizes)} indices, found {len(idx)}")
    out, pos = [], 0
    for s in sizes:
        out.append(np.asarray(idx[pos : pos + s], dtype=int))
        pos += s
    return tuple(out)


# -- synthetic generators ---------------------------------------------------------

TOY_GENERATORS = ("heteroscedastic-bimodal", "gaussian-shift", "spatial-two-cluster")

_LOG_2PI = math.log(2.0 * math.pi)


def _bimodal_parts(x):
    m = 0.5 + 0.25 * x**2  # branch separation grows with |x|
    s = 0.15 + 0.05 * (1.0 + np.sin(2.0 * x))  # noise scale in [0.15, 0.25]
    return m, s


def _two_cluster_parts(x):
    w = 0.35 + 0.3 * x
    c1 = np.stack([-1.0 - 0.5 * x, -0.5 + 0.2 * x], axis=-1)
    c2 = np.stack([0.8 + 0.4 * x, 0.6 - 0.3 * x], axis=-1)
    return w, c1, c2, 0.25, 0.35


def toy_true_log_density(name, x, y):
    """Closed-form generator log density; x (N,) or (N,1); y (N,) or (N,T)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float)
    if name == "heteroscedastic-bimodal":
        y = y.reshape(-1)
        m, s = _bimodal_parts(x)
        lo = -0.5 * _LOG_2PI - np.log(s)
        lp = lo - 0.5 * ((y - m) / s) ** 2
        lm = lo - 0.5 * ((y + m) / s) ** 2
        return np.logaddexp(lp, lm) - math.log(2.0)
    if name == "gaussian-shift":
        y = y.reshape(-1)
        return -0.5 * _LOG_2PI - math.log(0.1) - 0.5 * ((y - np.sin(x)) / 0.1) ** 2
    if name == "spatial-two-cluster":
        y = y.reshape(-1, 2)
        w, c1, c2, s1, s2 = _two_cluster_parts(x)
        q1 = ((y - c1) ** 2).sum(axis=1)
        q2 = ((y - c2) ** 2).sum(axis=1)
        l1 = np.log(w) - _LOG_2PI - 2 * math.log(s1) - 0.5 * q1 / s1**2
        l2 = np.log1p(-w) - _LOG_2PI - 2 * math.log(s2) - 0.5 * q2 / s2**2
        return np.logaddexp(l1, l2)
    raise ConfigError(f"unknown generator {name!r} (expected one of {TOY_GENERATORS})")


def toy_generator(name, n, seed):
    """(Dataset, true per-point log density). Deterministic under seed."""
    rng = np.random.default_rng(seed)
    if name == "heteroscedastic-bimodal":
        x = rng.uniform(-2.0, 2.0, n)
        m, s = _bimodal_parts(x)
        sign = rng.choice([-1.0, 1.0], size=n)
        y = sign * m + s * rng.standard_normal(n)
        ds = Dataset(x[:, None], y, feature_names=("x",))
    elif name == "gaussian-shift":
        x = rng.uniform(-3.0, 3.0, n)
        y = np.sin(x) + 0.1 * rng.standard_normal(n)
        ds = Dataset(x[:, None], y, feature_names=("x",))
    elif name == "spatial-two-cluster":
        x = rng.uniform(0.0, 1.0, n)
        w, c1, c2, s1, s2 = _two_cluster_parts(x)
        pick = rng.random(n) < w
        centers = np.where(pick[:, None], c1, c2)
        scales = np.where(pick, s1, s2)
        y = centers + scales[:, None] * rng.standard_normal((n, 2))
        ds = Dataset(
            x[:, None], y, feature_names=("x",), target_names=("y1", "y2")
        )
    else:
        raise ConfigError(
            f"unknown generator {name!r} (expected one of {TOY_GENERATORS})"
        )
    return ds, toy_true_log_density(name, ds.x[:, 0], ds.y)
