import dataclasses
import hashlib
import json

import numpy as np
import pytest

from harmonizer import data, evaluation as ev, harmonize as hz, mechanisms as mech
from harmonizer.errors import ConfigError, SelectionError, TrainingError


def quick_settings(seed=3):
    return mech.TrainSettings(
        alpha=1.0,
        lambda_p=0.5,
        lambda_u=1.0,
        noise_sd=0.1,
        epochs=4,
        batch_size=64,
        learning_rate=1e-3,
        seed=seed,
        enc_hidden=(16,),
        bottleneck=4,
        head_hidden=(8,),
    )


def quick_specs():
    return [
        ev.ClassifierSpec(ev.LOGISTIC, epochs=15, learning_rate=0.05, seed=0),
        ev.ClassifierSpec(ev.FEEDFORWARD, epochs=15, learning_rate=2e-3, hidden=(12,), seed=0),
    ]


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    table = data.generate_synthetic(1400, n=6, seed=42)
    g1, g2, aux = data.partition_groups(table, seed=43, sizes=(600, 600, 200))
    run_dir = tmp_path_factory.mktemp("run")
    run = hz.run_harmonization(
        g1,
        g2,
        quick_settings(),
        rounds=3,
        variant=mech.UAE_PUPET,
        run_dir=str(run_dir),
        specs=quick_specs(),
        seed=7,
        mi_rows=400,
    )
    return table, g1, g2, aux, run


def file_sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# protocol bookkeeping


def test_records_and_layout(small_world):
    _, g1, g2, _, run = small_world
    assert len(run.records) == 3
    for rec in run.records:
        assert rec.g1_sanitized.shape == g1.features.shape
        assert rec.g2_sanitized.shape == g2.features.shape
        for path in (rec.g1_snapshot, rec.g2_snapshot, rec.pm1_dir, rec.pm2_dir):
            assert str(path)


def test_first_round_trains_on_raw_partner(small_world):
    _, _, g2, _, run = small_world
    rec1 = run.records[0]
    assert rec1.pm1_train_fingerprint == run.raw_g2_fingerprint
    # and only the first round does
    for rec in run.records[1:]:
        assert rec.pm1_train_fingerprint != run.raw_g2_fingerprint


def test_fingerprint_chaining(small_world):
    _, _, _, _, run = small_world
    for prev, nxt in zip(run.records, run.records[1:]):
        assert nxt.pm1_train_fingerprint == file_sha(prev.g2_snapshot)
    for rec in run.records:
        assert rec.pm2_train_fingerprint == file_sha(rec.g1_snapshot)


def test_manifests_record_fingerprints(small_world):
    _, _, _, _, run = small_world
    for rec in run.records:
        with open(f"{rec.pm1_dir}/manifest.json") as fh:
            m1 = json.load(fh)
        with open(f"{rec.pm2_dir}/manifest.json") as fh:
            m2 = json.load(fh)
        assert m1["training_data_sha256"] == rec.pm1_train_fingerprint
        assert m2["training_data_sha256"] == rec.pm2_train_fingerprint
        assert m1["iteration"] == rec.m


def test_raw_g1_never_trains_pm2(small_world):
    _, _, _, _, run = small_world
    for rec in run.records:
        assert rec.pm2_train_fingerprint != run.raw_g1_fingerprint


def test_per_iteration_reports_written(small_world):
    _, _, _, _, run = small_world
    for rec in run.records:
        path = f"{run.run_dir}/iter_{rec.m}/report.json"
        with open(path) as fh:
            payload = json.load(fh)
        back = ev.TradeoffReport.from_json_dict(payload)
        assert back.T_g1 == rec.report.T_g1


def test_single_round_runs(tmp_path):
    table = data.generate_synthetic(1400, n=5, seed=1)
    g1, g2, _ = data.partition_groups(table, seed=2, sizes=(600, 600, 200))
    run = hz.run_harmonization(
        g1, g2, quick_settings(), rounds=1, variant=mech.ALFR,
        run_dir=str(tmp_path / "r"), specs=quick_specs(), seed=5, mi_rows=300,
    )
    assert len(run.records) == 1
    assert run.records[0].pm1_train_fingerprint == run.raw_g2_fingerprint


def test_bad_rounds_rejected(tmp_path):
    table = data.generate_synthetic(700, n=5, seed=1)
    g1, g2, _ = data.partition_groups(table, seed=2, sizes=(300, 300, 100))
    with pytest.raises(ConfigError):
        hz.run_harmonization(
            g1, g2, quick_settings(), rounds=0, variant=mech.ALFR,
            run_dir=str(tmp_path / "r"),
        )


def test_training_error_carries_iteration(tmp_path, monkeypatch):
    table = data.generate_synthetic(1400, n=5, seed=1)
    g1, g2, _ = data.partition_groups(table, seed=2, sizes=(600, 600, 200))
    calls = {"n": 0}
    real = mech.train_mechanism

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] >= 3:  # blow up inside round 2
            raise TrainingError("synthetic blow-up")
        return real(*args, **kwargs)

    monkeypatch.setattr(mech, "train_mechanism", flaky)
    with pytest.raises(TrainingError, match="iteration 2"):
        hz.run_harmonization(
            g1, g2, quick_settings(), rounds=3, variant=mech.UAE_PUPET,
            run_dir=str(tmp_path / "r"), specs=quick_specs(), seed=5, mi_rows=300,
        )


# ---------------------------------------------------------------------------
# iteration selection


def attr_rep(c_a, c_n=0.9):
    return ev.AttributeReport(
        c_n=c_n, c_a=c_a, c_r=0.5, auroc_n=c_n, auroc_a=c_a,
        mi_raw=0.5, mi_sanitized=0.1, M=ev.privacy_leakage(c_a, c_n),
        best_model="logistic",
    )


def fake_run(mean_ts, priv_acc=0.6, util_acc=0.88):
    records = []
    for i, t in enumerate(mean_ts, start=1):
        report = ev.TradeoffReport(
            groups={
                "G1": {"p1": attr_rep(priv_acc), "u1": attr_rep(util_acc)},
                "G2": {"p2": attr_rep(priv_acc), "u2": attr_rep(util_acc)},
            },
            T_g1=t,
            T_g2=t,
            delta=ev.TRADEOFF_DELTA,
            seed=0,
        )
        records.append(
            hz.IterationRecord(
                m=i, pm1_dir="", pm2_dir="", g1_snapshot="", g2_snapshot="",
                g1_sanitized=np.zeros((1, 1)), g2_sanitized=np.zeros((1, 1)),
                pm1_train_fingerprint="", pm2_train_fingerprint="",
                report=report,
            )
        )
    return hz.HarmonizationRun(
        run_dir="", rounds=len(records), variant=mech.ALFR,
        settings=quick_settings(), seed=0, records=records,
        raw_g1_fingerprint="", raw_g2_fingerprint="",
    )


def test_select_minimizes_mean_tradeoff():
    run = fake_run([0.4, 0.2, 0.3])
    assert hz.select_iteration(run) == 2
    assert run.selected == 2


def test_select_tie_breaks_to_earlier():
    run = fake_run([0.3, 0.3])
    assert hz.select_iteration(run) == 1


def test_select_constraint_infeasible():
    run = fake_run([0.3, 0.2], priv_acc=0.7)
    with pytest.raises(SelectionError) as exc:
        hz.select_iteration(run, max_private_accuracy=0.55)
    assert "iter 1" in str(exc.value) and "iter 2" in str(exc.value)


def test_select_constraints_filter_then_minimize():
    run = fake_run([0.1, 0.2])
    run.records[0].report.groups["G1"]["u1"].c_a = 0.7  # fails min utility
    m = hz.select_iteration(run, min_utility_accuracy=0.8)
    assert m == 2


# ---------------------------------------------------------------------------
# publication


def test_publish_layout_and_visibility(small_world):
    _, g1, g2, _, run = small_world
    hz.select_iteration(run)
    release = hz.publish(run, g1, g2)
    header = open(release.g1_path).readline().strip().split(",")
    assert "p2" in header and "u2" in header
    assert "p1" not in header and "u1" not in header
    g1_back = data.read_view(release.g1_path)
    assert g1_back.n_rows == g1.n_rows
    assert release.manifest["m_star"] == run.selected
    rec = run.records[run.selected - 1]
    assert np.max(np.abs(g1_back.features - rec.g1_sanitized)) < 1e-9


def test_publish_is_idempotent(small_world):
    _, g1, g2, _, run = small_world
    hz.select_iteration(run)
    r1 = hz.publish(run, g1, g2)
    bytes1 = (
        open(r1.g1_path, "rb").read(),
        open(r1.g2_path, "rb").read(),
        open(r1.manifest_path, "rb").read(),
    )
    r2 = hz.publish(run, g1, g2)
    bytes2 = (
        open(r2.g1_path, "rb").read(),
        open(r2.g2_path, "rb").read(),
        open(r2.manifest_path, "rb").read(),
    )
    assert bytes1 == bytes2


def test_publish_requires_selection():
    run = fake_run([0.3])
    with pytest.raises(ConfigError):
        hz.publish(run, None, None)


def test_release_has_no_secret_sidecars(small_world, tmp_path):
    _, g1, g2, _, run = small_world
    hz.select_iteration(run)
    release = hz.publish(run, g1, g2)
    import os

    release_dir = os.path.dirname(release.g1_path)
    assert not [f for f in os.listdir(release_dir) if "secret" in f]
