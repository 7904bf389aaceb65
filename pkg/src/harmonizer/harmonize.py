"""Iterative cross-group harmonization.

Each round trains the Group 1 mechanism on the Group 2 side of the data
(raw at the first round, the previous round's sanitized snapshot after
that), sanitizes Group 1, trains the Group 2 mechanism on that fresh
snapshot, and sanitizes Group 2. Every round is checkpointed to the run
directory together with a validation tradeoff report; afterwards one
round is selected and its snapshots are joined with the published labels
into the open-access release.

Run directory layout::

    <run>/iter_<m>/pm1/            mechanism checkpoint for Group 1
    <run>/iter_<m>/pm2/            mechanism checkpoint for Group 2
    <run>/iter_<m>/g1_sanitized.csv
    <run>/iter_<m>/g2_sanitized.csv
    <run>/iter_<m>/report.json     validation TradeoffReport
    <run>/release/g1_public.csv
    <run>/release/g2_public.csv
    <run>/release/manifest.json
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import evaluation as ev
from . import mechanisms as mech
from .data import (
    GroupView,
    apply_standardizer,
    fit_standardizer,
    snapshot_fingerprint,
    write_snapshot,
    write_view,
)
from .errors import ConfigError, SelectionError, TrainingError

HOLDOUT_FRACTION = 0.2  # per-group rows reserved for iteration selection


@dataclass
class IterationRecord:
    m: int
    pm1_dir: str
    pm2_dir: str
    g1_snapshot: str  # path to the sanitized Group 1 features
    g2_snapshot: str
    g1_sanitized: np.ndarray
    g2_sanitized: np.ndarray
    pm1_train_fingerprint: str
    pm2_train_fingerprint: str
    report: ev.TradeoffReport


@dataclass
class HarmonizationRun:
    run_dir: str
    rounds: int
    variant: str
    settings: mech.TrainSettings
    seed: int
    records: list
    raw_g1_fingerprint: str
    raw_g2_fingerprint: str
    selected: int | None = None


@dataclass
class OpenAccessRelease:
    g1_view: GroupView
    g2_view: GroupView
    manifest: dict
    g1_path: str
    g2_path: str
    manifest_path: str


def _holdout_split(n_rows, rng, fraction=HOLDOUT_FRACTION):
    order = rng.permutation(n_rows)
    n_val = max(1, int(round(n_rows * fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _train_one_mechanism(
    side_features, labels_p, labels_u, train_rows, settings, variant, warm_from
):
    """Standardize on the training rows, train, return (state, stats)."""
    stats = fit_standardizer(side_features[train_rows])
    std = apply_standardizer(stats, side_features[train_rows])
    state, trace = mech.train_mechanism(
        std, labels_p[train_rows], labels_u[train_rows], settings, variant,
        init_state=warm_from,
    )
    return state, stats, trace


def run_harmonization(
    g1,
    g2,
    settings,
    rounds,
    variant,
    run_dir,
    specs=None,
    seed=None,
    cold_start=False,
    mi_rows=10000,
):
    """Execute the full T-round schedule, checkpointing every round."""
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    if variant not in mech.VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if g1.features.shape[1] != g2.features.shape[1]:
        raise ConfigError("group views disagree on feature count")
    seed = settings.seed if seed is None else seed
    specs = list(specs) if specs else list(ev.default_specs(seed=seed))
    os.makedirs(run_dir, exist_ok=True)

    split_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    g1_train, g1_val = _holdout_split(g1.n_rows, split_rng)
    g2_train, g2_val = _holdout_split(g2.n_rows, split_rng)

    raw_g1_fp = snapshot_fingerprint(g1.ids, g1.features)
    raw_g2_fp = snapshot_fingerprint(g2.ids, g2.features)

    records = []
    baselines = {}
    pm1_prev = pm2_prev = None
    pm1_input = g2.features  # raw Group 2 features at m=1
    pm1_fp = raw_g2_fp
    for m in range(1, rounds + 1):
        iter_dir = os.path.join(run_dir, f"iter_{m}")
        os.makedirs(iter_dir, exist_ok=True)
        step_settings = dataclasses.replace(
            settings, seed=seed * 1000 + m
        )
        try:
            pm1, stats1, _ = _train_one_mechanism(
                pm1_input,
                g2.published["p1"],
                g2.published["u1"],
                g2_train,
                step_settings,
                variant,
                None if cold_start else pm1_prev,
            )
            g1_sanitized = mech.sanitize(
                pm1, g1.features, stats1, step_settings, seed=seed * 1000 + m
            )
            pm2_fp = snapshot_fingerprint(g1.ids, g1_sanitized)
            pm2, stats2, _ = _train_one_mechanism(
                g1_sanitized,
                g1.published["p2"],
                g1.published["u2"],
                g1_train,
                step_settings,
                variant,
                None if cold_start else pm2_prev,
            )
            g2_sanitized = mech.sanitize(
                pm2, g2.features, stats2, step_settings, seed=seed * 1000 + m + 500
            )
        except TrainingError as exc:
            raise TrainingError(str(exc), iteration=m) from exc

        g1_snapshot = os.path.join(iter_dir, "g1_sanitized.csv")
        g2_snapshot = os.path.join(iter_dir, "g2_sanitized.csv")
        write_snapshot(g1_snapshot, g1.ids, g1_sanitized)
        write_snapshot(g2_snapshot, g2.ids, g2_sanitized)

        pm1_dir = os.path.join(iter_dir, "pm1")
        pm2_dir = os.path.join(iter_dir, "pm2")
        mech.save_mechanism(pm1, pm1_dir, step_settings, pm1_fp, m)
        mech.save_mechanism(pm2, pm2_dir, step_settings, pm2_fp, m)

        report = ev.compute_tradeoff_report(
            ev.build_eval_data(
                g1, g2, g1_sanitized, g2_sanitized,
                rows={"G1": (g2_train, g1_val), "G2": (g1_train, g2_val)},
            ),
            specs,
            seed=seed,
            mi_rows=mi_rows,
            baselines=baselines,
        )
        with open(os.path.join(iter_dir, "report.json"), "w") as fh:
            json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

        records.append(
            IterationRecord(
                m=m,
                pm1_dir=pm1_dir,
                pm2_dir=pm2_dir,
                g1_snapshot=g1_snapshot,
                g2_snapshot=g2_snapshot,
                g1_sanitized=g1_sanitized,
                g2_sanitized=g2_sanitized,
                pm1_train_fingerprint=pm1_fp,
                pm2_train_fingerprint=pm2_fp,
                report=report,
            )
        )

        # next round retrains PM1 on this round's sanitized Group 2 data
        pm1_input = g2_sanitized
        pm1_fp = snapshot_fingerprint(g2.ids, g2_sanitized)
        pm1_prev, pm2_prev = pm1, pm2

    return HarmonizationRun(
        run_dir=run_dir,
        rounds=rounds,
        variant=variant,
        settings=settings,
        seed=seed,
        records=records,
        raw_g1_fingerprint=raw_g1_fp,
        raw_g2_fingerprint=raw_g2_fp,
    )


def mean_tradeoff(report):
    return 0.5 * (report.T_g1 + report.T_g2)


def select_iteration(run, max_private_accuracy=None, min_utility_accuracy=None):
    """Pick the round to publish and record it on the run.

    Default criterion: smallest mean tradeoff across both groups, ties to
    the earlier round. Optional accuracy constraints filter rounds first;
    if nothing qualifies a SelectionError lists every round's numbers.
    """
    if not run.records:
        raise SelectionError("run has no iteration records")

    def acc(rec, group, attr):
        return rec.report.groups[group][attr].c_a

    candidates = []
    for rec in run.records:
        ok = True
        if max_private_accuracy is not None:
            ok &= acc(rec, "G1", "p1") <= max_private_accuracy
            ok &= acc(rec, "G2", "p2") <= max_private_accuracy
        if min_utility_accuracy is not None:
            ok &= acc(rec, "G1", "u1") >= min_utility_accuracy
            ok &= acc(rec, "G2", "u2") >= min_utility_accuracy
        if ok:
            candidates.append(rec)
    if not candidates:
        lines = [
            f"iter {rec.m}: private ({acc(rec, 'G1', 'p1'):.3f}, "
            f"{acc(rec, 'G2', 'p2'):.3f}), utility ({acc(rec, 'G1', 'u1'):.3f}, "
            f"{acc(rec, 'G2', 'u2'):.3f}), mean T {mean_tradeoff(rec.report):.4f}"
            for rec in run.records
        ]
        raise SelectionError(
            "no iteration satisfies the constraints:\n" + "\n".join(lines)
        )
    best = min(candidates, key=lambda rec: (mean_tradeoff(rec.report), rec.m))
    run.selected = best.m
    return best.m


def publish(run, g1, g2):
    """Join the selected round's snapshots with published labels and write them."""
    if run.selected is None:
        raise ConfigError("select_iteration must run before publish")
    rec = next(r for r in run.records if r.m == run.selected)
    release_dir = os.path.join(run.run_dir, "release")
    os.makedirs(release_dir, exist_ok=True)

    g1_view = GroupView(
        group="G1",
        ids=g1.ids.copy(),
        features=rec.g1_sanitized.copy(),
        published={k: v.copy() for k, v in g1.published.items()},
        hidden={},
    )
    g2_view = GroupView(
        group="G2",
        ids=g2.ids.copy(),
        features=rec.g2_sanitized.copy(),
        published={k: v.copy() for k, v in g2.published.items()},
        hidden={},
    )
    g1_path = os.path.join(release_dir, "g1_public.csv")
    g2_path = os.path.join(release_dir, "g2_public.csv")
    write_view(g1_path, g1_view)
    write_view(g2_path, g2_view)

    manifest = {
        "m_star": run.selected,
        "rounds": run.rounds,
        "variant": run.variant,
        "seed": run.seed,
        "settings": dataclasses.asdict(run.settings),
        "fingerprints": {
            "g1_snapshot": snapshot_fingerprint(g1.ids, rec.g1_sanitized),
            "g2_snapshot": snapshot_fingerprint(g2.ids, rec.g2_sanitized),
        },
        "tradeoff": {
            "T_g1": rec.report.T_g1,
            "T_g2": rec.report.T_g2,
        },
    }
    manifest_path = os.path.join(release_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return OpenAccessRelease(
        g1_view=g1_view,
        g2_view=g2_view,
        manifest=manifest,
        g1_path=g1_path,
        g2_path=g2_path,
        manifest_path=manifest_path,
    )
