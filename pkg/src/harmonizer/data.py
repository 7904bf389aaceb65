"""Dataset construction and serialization.

Builds the ground-truth labeled table (synthetic generation or census CSV
ingestion), discretizes the four label columns, partitions rows into the
two user groups plus an auxiliary pool, and reads/writes every dataset
view. Each group's view publishes the two label columns describing the
*other* group's attributes and withholds its own; the withheld columns
go to a ``*.secret.csv`` sidecar used only for evaluation.
"""

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

LABEL_COLUMNS = ("p1", "u1", "p2", "u2")

# Raw census columns the labels are derived from, in label order.
LABEL_SOURCES = ("Income", "Employed", "White", "Women")

DEFAULT_THRESHOLDS = {
    "Income": 55000.0,
    "Employed": 2000.0,
    "White": 70.0,
    "Women": 2000.0,
}

# Default 16 input variables for the census ingestion; overridable via the
# column plan in the config.
DEFAULT_PLAN = (
    "TotalPop",
    "Men",
    "Hispanic",
    "Black",
    "Native",
    "Asian",
    "Pacific",
    "Poverty",
    "Professional",
    "Service",
    "Office",
    "Construction",
    "Production",
    "Drive",
    "Carpool",
    "Transit",
)

DEFAULT_SIZES = (31000, 31000, 10000)

# Label visibility per group: G1 publishes annotations of G2's attributes
# and vice versa; the auxiliary pool is fully labeled.
PUBLISHED = {
    "G1": ("p2", "u2"),
    "G2": ("p1", "u1"),
    "AUX": ("p1", "u1", "p2", "u2"),
}

BALANCE_RANGE = (0.4, 0.6)

# Class-1 fraction of every label column must land in BALANCE_RANGE;
# synthetic generation guarantees it by construction, census ingestion
# verifies it.


def feature_names(n):
    return [f"f{j:02d}" for j in range(n)]


@dataclass(eq=False)
class LabeledTable:
    """Ground-truth superset: features plus all four binary label columns."""

    ids: np.ndarray
    features: np.ndarray
    labels: dict  # name -> int array of 0/1

    def __post_init__(self):
        k = len(self.ids)
        if self.features.shape[0] != k:
            raise DataError("ids and features disagree on row count")
        if tuple(self.labels) != LABEL_COLUMNS:
            raise DataError(f"label columns must be {LABEL_COLUMNS}")
        for name, col in self.labels.items():
            if col.shape != (k,):
                raise DataError(f"label {name} has shape {col.shape}")
            if not np.isin(col, (0, 1)).all():
                raise DataError(f"label {name} contains non-binary values")
        if np.isnan(self.features).any():
            raise DataError("features contain missing values")

    @property
    def n_rows(self):
        return len(self.ids)

    @property
    def n_features(self):
        return self.features.shape[1]


@dataclass(eq=False)
class GroupView:
    """One group's slice of the table with its label visibility applied."""

    group: str
    ids: np.ndarray
    features: np.ndarray
    published: dict = field(default_factory=dict)
    hidden: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.group not in PUBLISHED:
            raise DataError(f"unknown group {self.group!r}")
        if tuple(self.published) != PUBLISHED[self.group]:
            raise DataError(
                f"{self.group} must publish {PUBLISHED[self.group]}, "
                f"got {tuple(self.published)}"
            )

    @property
    def n_rows(self):
        return len(self.ids)


@dataclass
class StandardizeStats:
    mean: np.ndarray
    sd: np.ndarray


def _check_balance(labels, where):
    lo, hi = BALANCE_RANGE
    for name, col in labels.items():
        frac = float(np.mean(col))
        if not lo <= frac <= hi:
            raise DataError(
                f"{where}: label {name} unbalanced (class-1 fraction {frac:.3f} "
                f"outside [{lo}, {hi}])"
            )


def generate_synthetic(k, n=16, seed=0, noise_ratio=0.13):
    """Gaussian feature block with four balanced hyperplane labels.

    Features are x ~ N(0, AA^T) for a random full-rank mixing matrix A.
    Each label is 1 iff w.x + noise clears the empirical median of that
    score, so every column is balanced exactly. noise_ratio scales the
    label noise relative to the score spread; the default leaves a
    held-out logistic regression around 0.95 accuracy per label.
    """
    if k < 100:
        raise ConfigError(f"need at least 100 rows, got {k}")
    if n < 4:
        raise ConfigError(f"need at least 4 features, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    mix = rng.normal(size=(n, n)) / np.sqrt(n)
    features = rng.standard_normal((k, n)) @ mix.T
    labels = {}
    for name in LABEL_COLUMNS:
        w = rng.standard_normal(n)
        score = features @ w
        score = score + rng.standard_normal(k) * (noise_ratio * score.std())
        labels[name] = (score > np.median(score)).astype(np.int64)
    table = LabeledTable(np.arange(k, dtype=np.int64), features, labels)
    _check_balance(table.labels, "synthetic table")
    return table


def discretize_labels(raw, thresholds=None):
    """Binary labels from raw columns ordered (Income, Employed, White, Women).

    Each output column is 1 iff the raw value strictly exceeds its
    threshold.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != 4:
        raise ConfigError(f"expected (k, 4) raw label sources, got {raw.shape}")
    thr = dict(DEFAULT_THRESHOLDS)
    if thresholds:
        thr.update(thresholds)
    out = np.empty_like(raw, dtype=np.int64)
    for j, source in enumerate(LABEL_SOURCES):
        out[:, j] = raw[:, j] > thr[source]
    return out


def ingest_census(csv_path, plan=None, thresholds=None, seed=0, target_rows=72000):
    """Load the census CSV, drop incomplete rows, sample down to target_rows.

    plan names the 16 input columns; the four label-source columns
    (Income, Employed, White, Women) are always required on top of it.
    """
    plan = tuple(plan) if plan else DEFAULT_PLAN
    df = pd.read_csv(csv_path)
    needed = list(plan) + list(LABEL_SOURCES)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ConfigError(
            f"{csv_path}: missing column(s) {', '.join(missing)}"
        )
    sub = df[needed].apply(pd.to_numeric, errors="coerce").dropna()
    if len(sub) < target_rows:
        raise DataError(
            f"{csv_path}: only {len(sub)} clean rows, need {target_rows}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    keep = rng.choice(len(sub), size=target_rows, replace=False)
    keep.sort()  # preserve file order
    sub = sub.iloc[keep]
    features = sub[list(plan)].to_numpy(dtype=np.float64)
    raw_sources = sub[list(LABEL_SOURCES)].to_numpy(dtype=np.float64)
    binary = discretize_labels(raw_sources, thresholds)
    labels = {name: binary[:, j] for j, name in enumerate(LABEL_COLUMNS)}
    table = LabeledTable(np.arange(target_rows, dtype=np.int64), features, labels)
    _check_balance(table.labels, str(csv_path))
    return table


def _make_view(table, group, rows):
    published = {
        name: table.labels[name][rows].copy() for name in PUBLISHED[group]
    }
    hidden_names = [c for c in LABEL_COLUMNS if c not in PUBLISHED[group]]
    hidden = {name: table.labels[name][rows].copy() for name in hidden_names}
    return GroupView(
        group=group,
        ids=table.ids[rows].copy(),
        features=table.features[rows].copy(),
        published=published,
        hidden=hidden,
    )


def partition_groups(table, seed, sizes=DEFAULT_SIZES):
    """Uniform random disjoint split into (G1, G2, AUX) of the given sizes."""
    s1, s2, s3 = sizes
    total = s1 + s2 + s3
    if table.n_rows < total:
        raise DataError(
            f"table has {table.n_rows} rows, partition needs {total}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = rng.permutation(table.n_rows)
    cuts = np.split(perm[:total], [s1, s1 + s2])
    g1_rows, g2_rows, aux_rows = (np.sort(c) for c in cuts)
    return (
        _make_view(table, "G1", g1_rows),
        _make_view(table, "G2", g2_rows),
        _make_view(table, "AUX", aux_rows),
    )


# ---------------------------------------------------------------------------
# standardization


def fit_standardizer(features):
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    sd = features.std(axis=0)
    bad = np.flatnonzero(sd <= 1e-12)
    if bad.size:
        names = ", ".join(feature_names(features.shape[1])[j] for j in bad)
        raise DataError(f"zero-variance column(s): {names}")
    return StandardizeStats(mean=mean, sd=sd)


def apply_standardizer(stats, features):
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != stats.mean.shape[0]:
        raise ConfigError(
            f"standardizer fitted on {stats.mean.shape[0]} columns, "
            f"got {features.shape[1]}"
        )
    return (features - stats.mean) / stats.sd


def invert_standardizer(stats, standardized):
    standardized = np.asarray(standardized, dtype=np.float64)
    if standardized.shape[1] != stats.mean.shape[0]:
        raise ConfigError(
            f"standardizer fitted on {stats.mean.shape[0]} columns, "
            f"got {standardized.shape[1]}"
        )
    return standardized * stats.sd + stats.mean


# ---------------------------------------------------------------------------
# CSV views

# Public view CSVs carry values at 12 significant digits; internal
# snapshots (below) are full precision.
_FLOAT_FMT = "%.12g"


def secret_path(path):
    p = str(path)
    if not p.endswith(".csv"):
        raise ConfigError(f"view path must end in .csv: {p}")
    return p[:-4] + ".secret.csv"


def write_view(path, view):
    """Public CSV ``id,f..,<published labels>,group`` plus secret sidecar."""
    names = feature_names(view.features.shape[1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + names + list(view.published) + ["group"])
        for i in range(view.n_rows):
            row = [int(view.ids[i])]
            row += [_FLOAT_FMT % v for v in view.features[i]]
            row += [int(view.published[c][i]) for c in view.published]
            row.append(view.group)
            w.writerow(row)
    if view.hidden:
        with open(secret_path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + list(view.hidden))
            for i in range(view.n_rows):
                row = [int(view.ids[i])]
                row += [int(view.hidden[c][i]) for c in view.hidden]
                w.writerow(row)


def _parse_label(value, line_no, path):
    if value not in ("0", "1"):
        raise DataError(f"{path}:{line_no}: label value {value!r} not 0/1")
    return int(value)


def read_view(path, with_secret=True):
    """Reverse of write_view; the sidecar is optional."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header[0] != "id" or header[-1] != "group":
            raise DataError(f"{path}: unexpected header {header[:3]}...")
        label_cols = [c for c in header if c in LABEL_COLUMNS]
        n_feat = len(header) - 2 - len(label_cols)
        if header[1 : 1 + n_feat] != feature_names(n_feat):
            raise DataError(f"{path}: unexpected feature columns")
        ids, feats, groups = [], [], []
        labels = {c: [] for c in label_cols}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{line_no}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            try:
                ids.append(int(row[0]))
                feats.append([float(v) for v in row[1 : 1 + n_feat]])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None
            for j, c in enumerate(label_cols):
                labels[c].append(_parse_label(row[1 + n_feat + j], line_no, path))
            groups.append(row[-1])
    if not groups:
        raise DataError(f"{path}: no data rows")
    group = groups[0]
    if any(g != group for g in groups):
        raise DataError(f"{path}: mixed group column")
    hidden = {}
    if with_secret:
        sp = secret_path(path)
        try:
            fh = open(sp, newline="")
        except FileNotFoundError:
            fh = None
        if fh is not None:
            with fh:
                reader = csv.reader(fh)
                sheader = next(reader)
                hid_cols = sheader[1:]
                hidden = {c: [] for c in hid_cols}
                for line_no, row in enumerate(reader, start=2):
                    if len(row) != len(sheader):
                        raise DataError(
                            f"{sp}:{line_no}: expected {len(sheader)} fields"
                        )
                    for j, c in enumerate(hid_cols):
                        hidden[c].append(_parse_label(row[1 + j], line_no, sp))
                hidden = {
                    c: np.array(v, dtype=np.int64) for c, v in hidden.items()
                }
    return GroupView(
        group=group,
        ids=np.array(ids, dtype=np.int64),
        features=np.array(feats, dtype=np.float64),
        published={c: np.array(v, dtype=np.int64) for c, v in labels.items()},
        hidden=hidden,
    )


def write_table(path, table):
    """Full ground-truth table: id, features, all four labels."""
    names = feature_names(table.n_features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + names + list(LABEL_COLUMNS))
        for i in range(table.n_rows):
            row = [int(table.ids[i])]
            row += [_FLOAT_FMT % v for v in table.features[i]]
            row += [int(table.labels[c][i]) for c in LABEL_COLUMNS]
            w.writerow(row)


def read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = len(header) - 1 - len(LABEL_COLUMNS)
        ids, feats = [], []
        labels = {c: [] for c in LABEL_COLUMNS}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: bad field count")
            ids.append(int(row[0]))
            feats.append([float(v) for v in row[1 : 1 + n_feat]])
            for j, c in enumerate(LABEL_COLUMNS):
                labels[c].append(_parse_label(row[1 + n_feat + j], line_no, path))
    return LabeledTable(
        np.array(ids, dtype=np.int64),
        np.array(feats, dtype=np.float64),
        {c: np.array(v, dtype=np.int64) for c, v in labels.items()},
    )


# ---------------------------------------------------------------------------
# full-precision feature snapshots (harmonization data-flow records)


def snapshot_bytes(ids, features):
    """Canonical full-precision CSV bytes of a feature matrix.

    Used both as the on-disk snapshot format and as the input to
    training-data fingerprints, so hashing a snapshot file reproduces the
    fingerprint of the array it was written from.
    """
    names = feature_names(features.shape[1])
    lines = ["id," + ",".join(names)]
    for i in range(features.shape[0]):
        lines.append(
            str(int(ids[i])) + "," + ",".join(repr(float(v)) for v in features[i])
        )
    return ("\n".join(lines) + "\n").encode("ascii")


def snapshot_fingerprint(ids, features):
    return hashlib.sha256(snapshot_bytes(ids, features)).hexdigest()


def write_snapshot(path, ids, features):
    with open(path, "wb") as fh:
        fh.write(snapshot_bytes(ids, features))


def read_snapshot(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = len(header) - 1
        ids, feats = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: bad field count")
            ids.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
    return np.array(ids, dtype=np.int64), np.array(feats, dtype=np.float64)
