"""Analyst-side evaluation: classifiers, metrics, and mutual information.

The evaluation protocol is cross-group by construction: models that
predict one group's attributes are trained on the *other* group's
released data (features plus that group's published annotations) and
tested against the target group's withheld labels. Baselines use the
same protocol on raw data, so the leakage/utility metrics compare like
with like.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma
from scipy.stats import rankdata

from . import nn
from .data import LABEL_COLUMNS, apply_standardizer, fit_standardizer
from .errors import ConfigError, DataError, MetricError

CHANCE_ACCURACY = 0.5  # all label columns are balanced binary
TRADEOFF_DELTA = 0.0001

LOGISTIC = "logistic"
FEEDFORWARD = "feedforward"

# Which attribute is private/utility for each group.
GROUP_PRIVATE = {"G1": "p1", "G2": "p2"}
GROUP_UTILITY = {"G1": "u1", "G2": "u2"}


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str
    epochs: int = 40
    learning_rate: float = 0.01
    hidden: tuple = (32, 16)
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (LOGISTIC, FEEDFORWARD):
            raise ConfigError(f"unknown classifier kind {self.kind!r}")


def default_specs(seed=0):
    return (
        ClassifierSpec(LOGISTIC, epochs=40, learning_rate=0.05, seed=seed),
        ClassifierSpec(FEEDFORWARD, epochs=50, learning_rate=1e-3, seed=seed),
    )


class Classifier:
    """A trained net plus the standardizer fitted on its training split."""

    def __init__(self, spec, stats, net):
        self.spec = spec
        self.stats = stats
        self.net = net

    def scores(self, features):
        x = apply_standardizer(self.stats, np.asarray(features, dtype=np.float64))
        return self.net.forward(x)[0].ravel()

    def predict(self, features):
        return (self.scores(features) >= 0.5).astype(np.int64)


def train_classifier(spec, features, labels):
    """Train one benchmark classifier; deterministic for a given spec."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise DataError(f"training labels contain a single class ({uniq})")
    if not np.isin(uniq, (0.0, 1.0)).all():
        raise DataError("labels must be binary 0/1")
    stats = fit_standardizer(features)
    x = apply_standardizer(stats, features)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n = x.shape[1]
    if spec.kind == LOGISTIC:
        net = nn.DenseNet.create([n, 1], [nn.SIGMOID], rng)
    else:
        dims = [n, *spec.hidden, 1]
        net = nn.DenseNet.create(
            dims, [nn.RELU] * (len(dims) - 2) + [nn.SIGMOID], rng
        )
    opt = nn.Adam(net, lr=spec.learning_rate)
    y_col = labels.reshape(-1, 1)
    for _ in range(spec.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(order), spec.batch_size):
            idx = order[start : start + spec.batch_size]
            out, cache = net.forward(x[idx])
            _, g = nn.bce(out, y_col[idx])
            grads, _ = net.backward(cache, g)
            opt.step(net, grads)
    return Classifier(spec, stats, net)


def accuracy(classifier, features, labels):
    labels = np.asarray(labels, dtype=np.int64)
    return float(np.mean(classifier.predict(features) == labels))


def auroc(scores, labels):
    """Probability a random positive outranks a random negative, ties at 1/2.

    Rank-based (Mann-Whitney); exact for ties because average ranks are
    used.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc needs at least one row of each class")
    ranks = rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class BenchmarkResult:
    accuracy: float
    auroc: float
    kind: str
    per_model: dict  # kind -> (accuracy, auroc)


def benchmark_accuracy(specs, train_features, train_labels, test_features, test_labels):
    """Train every spec, evaluate on the test split, keep the best accuracy."""
    specs = list(specs)
    if not specs:
        raise ConfigError("benchmark needs at least one classifier spec")
    best = None
    per_model = {}
    for spec in specs:
        clf = train_classifier(spec, train_features, train_labels)
        acc = accuracy(clf, test_features, test_labels)
        auc = auroc(clf.scores(test_features), test_labels)
        per_model[spec.kind] = (acc, auc)
        if best is None or acc > best.accuracy:
            best = BenchmarkResult(acc, auc, spec.kind, per_model)
    best.per_model = per_model
    return best


# ---------------------------------------------------------------------------
# mutual information


def _rank_normalize(features, seed):
    # average ranks scaled to (0, 1]; tiny jitter breaks exact duplicates
    # so k-NN radii stay meaningful. The jitter is keyed to each column's
    # content, not its position, keeping the estimate invariant to
    # feature-column permutations.
    n = features.shape[0]
    ranks = rankdata(features, axis=0, method="average") / n
    for j in range(ranks.shape[1]):
        digest = hashlib.blake2b(
            features[:, j].tobytes() + seed.to_bytes(8, "little", signed=True),
            digest_size=8,
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        ranks[:, j] += 1e-10 * rng.standard_normal(n)
    return ranks


def estimate_mi(features, label, k_neighbors=3, seed=0):
    """Mixed continuous-discrete mutual information in nats, clamped at 0.

    Nearest-neighbor estimator in the style of Ross (2014): for each row,
    the distance to its k-th neighbor *within the same label class* sets a
    radius, and the count of rows of any class inside that radius enters a
    digamma average. Distances are Chebyshev over rank-normalized feature
    columns, which also makes the estimate invariant to feature order and
    monotone rescaling.
    """
    raw = max(_estimate_mi_raw(features, label, k_neighbors, seed), 0.0)
    return raw


def _estimate_mi_raw(features, label, k_neighbors=3, seed=0):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    label = np.asarray(label, dtype=np.int64)
    n = features.shape[0]
    if n < 100:
        raise ConfigError(f"MI estimate needs at least 100 rows, got {n}")
    if label.shape != (n,):
        raise ConfigError("label must be one value per row")
    if np.ptp(features, axis=0).max() == 0:
        raise DataError("all feature rows identical; MI undefined")

    x = _rank_normalize(features, seed)
    radius = np.empty(n)
    k_all = np.empty(n)
    label_counts = np.empty(n)
    for value in np.unique(label):
        mask = label == value
        count = int(mask.sum())
        if count <= k_neighbors:
            raise DataError(
                f"label class {value} has only {count} rows, need > {k_neighbors}"
            )
        tree = cKDTree(x[mask])
        # k+1 because the query point is its own nearest neighbor
        dist, _ = tree.query(x[mask], k=k_neighbors + 1, p=np.inf)
        radius[mask] = np.nextafter(dist[:, -1], 0)
        k_all[mask] = k_neighbors
        label_counts[mask] = count

    full_tree = cKDTree(x)
    m_all = full_tree.query_ball_point(
        x, radius, p=np.inf, return_length=True
    )
    return float(
        digamma(n)
        + np.mean(digamma(k_all))
        - np.mean(digamma(label_counts))
        - np.mean(digamma(np.maximum(m_all, 1)))
    )


# ---------------------------------------------------------------------------
# leakage / utility / tradeoff metrics


def privacy_leakage(c_a, c_n, c_r=CHANCE_ACCURACY):
    """Post-sanitization accuracy normalized between chance and baseline."""
    if c_n == c_r:
        raise MetricError(
            f"leakage undefined: baseline accuracy {c_n} equals chance {c_r}"
        )
    return (c_a - c_r) / (c_n - c_r)


def utility_performance(c_a, c_n, c_r=CHANCE_ACCURACY):
    """Same normalization applied to the utility attribute."""
    if c_n == c_r:
        raise MetricError(
            f"utility performance undefined: baseline {c_n} equals chance {c_r}"
        )
    return (c_a - c_r) / (c_n - c_r)


def tradeoff(M_p, M_u, delta=TRADEOFF_DELTA):
    """Leakage per unit of retained utility; lower is better."""
    return M_p / (delta + M_u)


# ---------------------------------------------------------------------------
# cross-group tradeoff reports


@dataclass
class AttributeReport:
    c_n: float
    c_a: float
    c_r: float
    auroc_n: float
    auroc_a: float
    mi_raw: float
    mi_sanitized: float
    M: float
    best_model: str


@dataclass
class TradeoffReport:
    groups: dict  # "G1" -> {attr -> AttributeReport}
    T_g1: float
    T_g2: float
    delta: float
    seed: int

    def to_json_dict(self):
        out = {}
        for group, attrs in self.groups.items():
            out[group] = {
                attr: vars(rep).copy() for attr, rep in attrs.items()
            }
        out["T_g1"] = self.T_g1
        out["T_g2"] = self.T_g2
        out["delta"] = self.delta
        out["seed"] = self.seed
        return out

    @classmethod
    def from_json_dict(cls, payload):
        groups = {}
        for group in ("G1", "G2"):
            groups[group] = {
                attr: AttributeReport(**fields)
                for attr, fields in payload[group].items()
            }
        return cls(
            groups=groups,
            T_g1=payload["T_g1"],
            T_g2=payload["T_g2"],
            delta=payload["delta"],
            seed=payload["seed"],
        )


@dataclass
class GroupEvalData:
    """Everything needed to evaluate one target group's two attributes.

    Training rows come from the partner group (its features and its
    published annotations of this group's attributes); test rows are the
    target group's own, scored against its withheld labels.
    """

    train_raw: np.ndarray
    train_sanitized: np.ndarray
    train_labels: dict  # attr -> labels aligned with the training rows
    test_raw: np.ndarray
    test_sanitized: np.ndarray
    test_labels: dict  # attr -> withheld ground truth for the test rows


def _subsample(rng, n_rows, limit):
    if n_rows <= limit:
        return np.arange(n_rows)
    return np.sort(rng.choice(n_rows, size=limit, replace=False))


def compute_tradeoff_report(
    eval_data, specs, seed, mi_rows=10000, baselines=None, delta=TRADEOFF_DELTA
):
    """Build the full TradeoffReport for both groups.

    eval_data maps group name to GroupEvalData. baselines caches the raw
    side (c_n, auroc_n, mi_raw) keyed by (group, attr) so repeated calls,
    e.g. once per harmonization iteration, pay for it once.
    """
    if baselines is None:
        baselines = {}
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    groups = {}
    for group, ed in eval_data.items():
        attrs = {}
        for attr in ed.test_labels:
            key = (group, attr)
            if key not in baselines:
                base = benchmark_accuracy(
                    specs,
                    ed.train_raw,
                    ed.train_labels[attr],
                    ed.test_raw,
                    ed.test_labels[attr],
                )
                sub = _subsample(rng, len(ed.test_raw), mi_rows)
                mi_raw = estimate_mi(
                    ed.test_raw[sub], ed.test_labels[attr][sub], seed=seed
                )
                baselines[key] = (base.accuracy, base.auroc, mi_raw)
            c_n, auroc_n, mi_raw = baselines[key]
            bench = benchmark_accuracy(
                specs,
                ed.train_sanitized,
                ed.train_labels[attr],
                ed.test_sanitized,
                ed.test_labels[attr],
            )
            sub = _subsample(rng, len(ed.test_sanitized), mi_rows)
            mi_san = estimate_mi(
                ed.test_sanitized[sub], ed.test_labels[attr][sub], seed=seed
            )
            attrs[attr] = AttributeReport(
                c_n=c_n,
                c_a=bench.accuracy,
                c_r=CHANCE_ACCURACY,
                auroc_n=auroc_n,
                auroc_a=bench.auroc,
                mi_raw=mi_raw,
                mi_sanitized=mi_san,
                M=privacy_leakage(bench.accuracy, c_n),
                best_model=bench.kind,
            )
        groups[group] = attrs

    def group_tradeoff(group):
        m_p = groups[group][GROUP_PRIVATE[group]].M
        m_u = groups[group][GROUP_UTILITY[group]].M
        return tradeoff(m_p, m_u, delta)

    return TradeoffReport(
        groups=groups,
        T_g1=group_tradeoff("G1"),
        T_g2=group_tradeoff("G2"),
        delta=delta,
        seed=seed,
    )


def build_eval_data(g1, g2, g1_sanitized, g2_sanitized, rows=None):
    """Assemble GroupEvalData for both groups from views and sanitized features.

    rows optionally restricts each side to index arrays
    {"G1": (train_rows_of_g2, test_rows_of_g1), ...}; by default analysts
    train on all partner rows and are scored on all target rows.
    """
    out = {}
    for target, partner, t_view, p_view, t_san, p_san in (
        ("G1", "G2", g1, g2, g1_sanitized, g2_sanitized),
        ("G2", "G1", g2, g1, g2_sanitized, g1_sanitized),
    ):
        train_rows, test_rows = (
            rows[target] if rows else (np.arange(p_view.n_rows), np.arange(t_view.n_rows))
        )
        attrs = list(t_view.hidden)
        out[target] = GroupEvalData(
            train_raw=p_view.features[train_rows],
            train_sanitized=p_san[train_rows],
            train_labels={a: p_view.published[a][train_rows] for a in attrs},
            test_raw=t_view.features[test_rows],
            test_sanitized=t_san[test_rows],
            test_labels={a: t_view.hidden[a][test_rows] for a in attrs},
        )
    return out


# ---------------------------------------------------------------------------
# auxiliary-dataset adversary

AUX_ONLY = "aux_only"
AUX_PLUS_SANITIZED = "aux_plus_sanitized"
AUX_STRATEGIES = (AUX_ONLY, AUX_PLUS_SANITIZED)


def aux_adversary_eval(aux, g1, g2, g1_sanitized, g2_sanitized, specs, strategy):
    """Accuracy of an adversary that holds raw fully-labeled auxiliary rows.

    aux_only trains on the auxiliary rows alone; aux_plus_sanitized also
    appends the partner group's released data. Either way the model is
    scored on the target group's sanitized features against its withheld
    labels.
    """
    if strategy not in AUX_STRATEGIES:
        raise ConfigError(f"unknown aux strategy {strategy!r}")
    results = {}
    for target, partner_view, t_view, t_san, p_san in (
        ("G1", g2, g1, g1_sanitized, g2_sanitized),
        ("G2", g1, g2, g2_sanitized, g1_sanitized),
    ):
        attrs = {}
        for attr in t_view.hidden:
            X_tr = aux.features
            y_tr = aux.published[attr]
            if strategy == AUX_PLUS_SANITIZED:
                X_tr = np.vstack([X_tr, p_san])
                y_tr = np.concatenate([y_tr, partner_view.published[attr]])
            best = None
            for spec in specs:
                clf = train_classifier(spec, X_tr, y_tr)
                acc = accuracy(clf, t_san, t_view.hidden[attr])
                best = acc if best is None else max(best, acc)
            attrs[attr] = best
        results[target] = attrs
    return results
