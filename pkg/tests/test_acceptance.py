"""End-to-end acceptance gate.

One test per release criterion, each at its stated tolerance and budget.
Every test prints a single PASS/FAIL line with the measured numbers so a
verbose run reads as a checklist. Desk-scale federation runs are shared
through module fixtures because they dominate the wall time.
"""

import json
import time

import numpy as np
import pytest

from cflsim.augment import AugmentConfig
from cflsim.cli import EXIT_OK, main
from cflsim.experiment import (
    DatasetSpec,
    desk_profile,
    prepare_experiment,
    run_experiment,
    run_gradcheck,
    run_loss_bench,
    run_pearson_ablation,
)
from cflsim.federation import (
    ParamMessage,
    TrainConfig,
    audit_row_invariance,
    run_cfl,
    server_aggregate,
)
from cflsim.losses import LossConfig
from cflsim.mlp import flatten, init_params, parameter_count
from cflsim.numerics import RngStream
from cflsim.probe import weighted_metrics
from cflsim.silos import covariance_deviation_experiment, vertical_partition
from cflsim.data import synth_nonlinear_table

IMBALANCE_SETTINGS = ("data_size", "class_size", "mixed")


def verdict(ok: bool, name: str, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def desk_standard(tmp_path_factory):
    """Three desk-profile runs on the standard setting, seeds 0-2."""
    out = tmp_path_factory.mktemp("desk_standard")
    t0 = time.perf_counter()
    summaries = [
        run_experiment(desk_profile(seed=s, setting="standard"),
                       out / f"seed{s}")
        for s in range(3)
    ]
    return summaries, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_imbalance(tmp_path_factory):
    """Desk-profile runs for each imbalance setting, seeds 0-2."""
    out = tmp_path_factory.mktemp("desk_imbalance")
    t0 = time.perf_counter()
    summaries = {
        setting: [
            run_experiment(desk_profile(seed=s, setting=setting),
                           out / f"{setting}_seed{s}")
            for s in range(3)
        ]
        for setting in IMBALANCE_SETTINGS
    }
    return summaries, time.perf_counter() - t0


def silo_wins(summary) -> int:
    """Silos where the federated encoder beats the local-raw baseline."""
    per_silo = summary.deltas["per_silo"]
    return sum(1 for e in per_silo
               if e["cfl_vs_base1"] > e["base2_vs_base1"])


def test_01_gradient_fidelity():
    res = run_gradcheck(seed=0, d_in=12, hidden=32, embed=16, k=8, h=1e-5,
                        threshold=1e-4)
    ok = res.passed and res.max_rel_err < 1e-4 and res.seconds < 10.0
    verdict(ok, "gradient fidelity",
            f"max rel err {res.max_rel_err:.2e} over {len(res.cases)} "
            f"loss cases in {res.seconds:.1f}s")
    assert res.max_rel_err < 1e-4
    assert res.seconds < 10.0


def test_02_fedavg_algebra():
    g = np.random.default_rng(42)
    msgs = [ParamMessage(silo_id=i, round=0,
                         params=g.standard_normal(37), sample_weight=1.0)
            for i in range(5)]

    # coordinatewise mean against an explicit per-coordinate loop
    agg = server_aggregate(msgs)
    mean_err = 0.0
    for j in range(37):
        coord = sum(m.params[j] for m in msgs) / len(msgs)
        mean_err = max(mean_err, abs(agg[j] - coord))

    # permutation invariance, bit for bit
    perm = [msgs[i] for i in (3, 0, 4, 2, 1)]
    perm_same = server_aggregate(perm).tobytes() == agg.tobytes()

    # single-client identity
    solo = server_aggregate([msgs[0]])
    solo_same = solo.tobytes() == msgs[0].params.tobytes()

    # N identical clients track a single client over five rounds
    table = synth_nonlinear_table(m=48, d=6, classes=2, rng=RngStream(seed=7))
    views = vertical_partition(table, 1, 6)
    cfg = TrainConfig(hidden=8, embed=4, epochs=5, batch_size=8,
                      learning_rate=1e-3, augment=AugmentConfig(),
                      loss=LossConfig())
    single = run_cfl(views, cfg, RngStream(seed=9))
    clones = [views[0]] + [views[0].copy() for _ in range(3)]
    many = run_cfl(clones, cfg, RngStream(seed=9))
    drift = float(np.max(np.abs(flatten(many.params) - flatten(single.params))))

    ok = (mean_err <= 1e-12 and perm_same and solo_same and drift <= 1e-9)
    verdict(ok, "fedavg algebra",
            f"mean err {mean_err:.1e}, permutation bit-exact {perm_same}, "
            f"identity {solo_same}, 4-clone drift over 5 rounds {drift:.1e}")
    assert mean_err <= 1e-12
    assert perm_same and solo_same
    assert drift <= 1e-9


def test_03_covariance_bound():
    grid = (1, 5, 10, 25, 50)
    t0 = time.perf_counter()
    sums = {m: 0.0 for m in grid}
    worst_slack = -np.inf
    for s in range(20):
        points = covariance_deviation_experiment(
            50, 2.5, RngStream(seed=s, tag="covdev"),
            rows_per_silo=500, features=8, drop_rate=0.3)
        for p in points:
            worst_slack = max(worst_slack, p.deviation - p.bound)
            if p.m_silos in sums:
                sums[p.m_silos] += p.deviation
    elapsed = time.perf_counter() - t0
    means = [sums[m] / 20 for m in grid]
    decreasing = all(a > b for a, b in zip(means, means[1:]))

    ok = worst_slack <= 1e-9 and decreasing and elapsed < 30.0
    verdict(ok, "covariance bound",
            f"worst deviation-bound slack {worst_slack:.1e}, means over M "
            f"{['%.4f' % v for v in means]} decreasing {decreasing}, "
            f"{elapsed:.1f}s")
    assert worst_slack <= 1e-9
    assert decreasing
    assert elapsed < 30.0


def test_04_desk_ranking(desk_standard):
    summaries, elapsed = desk_standard
    wins = [silo_wins(s) for s in summaries]
    base1 = float(np.mean([s.mean_f1["Base1"] for s in summaries]))
    cfl = float(np.mean([s.mean_f1["CFL"] for s in summaries]))

    ok = all(w >= 4 for w in wins) and base1 >= cfl and elapsed < 300.0
    verdict(ok, "desk ranking",
            f"per-seed silo wins {wins} (need >=4/5), mean F1 pooled "
            f"{base1:.3f} >= federated {cfl:.3f}, {elapsed:.0f}s")
    for seed, w in enumerate(wins):
        assert w >= 4, f"seed {seed}: federated beat local on only {w}/5 silos"
    assert base1 >= cfl
    assert elapsed < 300.0


def test_05_imbalance_direction(desk_imbalance):
    summaries, elapsed = desk_imbalance
    margins = {}
    for setting, runs in summaries.items():
        cfl = float(np.mean([s.mean_f1["CFL"] for s in runs]))
        base2 = float(np.mean([s.mean_f1["Base2"] for s in runs]))
        margins[setting] = cfl - base2

    ok = all(m > 0.0 for m in margins.values()) and elapsed < 900.0
    detail = ", ".join(f"{k} +{v:.3f}" for k, v in margins.items())
    verdict(ok, "imbalance direction",
            f"federated-minus-local F1 margins {detail}, {elapsed:.0f}s")
    for setting, margin in margins.items():
        assert margin > 0.0, f"{setting}: federated F1 not above local raw"
    assert elapsed < 900.0


def test_06_reorder_ablation(tmp_path):
    gaps = []
    for seed in range(5):
        cfg = desk_profile(seed=seed, setting="standard")
        out = run_pearson_ablation(cfg, tmp_path / f"seed{seed}")
        gaps.append(out["with_reorder"]["CFL"] - out["without_reorder"]["CFL"])
    mean_gap = float(np.mean(gaps))

    ok = mean_gap >= -0.005
    verdict(ok, "reorder ablation",
            f"mean F1 gap with-minus-without {mean_gap:+.4f} over 5 seeds "
            f"(floor -0.005)")
    assert mean_gap >= -0.005


def test_07_similarity_speed(tmp_path):
    res = run_loss_bench(tmp_path, embed_dim=256, k=256, iters=200, seed=0)
    ok = res.ratio >= 1.0
    verdict(ok, "similarity speed",
            f"t_cos/t_dot {res.ratio:.2f} "
            f"({res.t_cos_s * 1e3:.1f}ms vs {res.t_dot_s * 1e3:.1f}ms)")
    assert res.ratio >= 1.0


def metrics_by_hand(y_true, y_pred):
    """Independent support-weighted precision/recall/F1 via plain loops."""
    labels = sorted(set(y_true) | set(y_pred))
    total = len(y_true)
    w_prec = w_rec = w_f1 = 0.0
    for c in labels:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        support = tp + fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / support if support else 0.0
        f1 = 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0
        w_prec += prec * support
        w_rec += rec * support
        w_f1 += f1 * support
    return w_prec / total, w_rec / total, w_f1 / total


def test_08_metrics_oracle():
    g = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        n = int(g.integers(1, 201))
        c = int(g.integers(1, 7))
        y_true = g.integers(0, c, size=n)
        y_pred = g.integers(0, c, size=n)
        got = weighted_metrics(y_true, y_pred)
        want = metrics_by_hand(y_true.tolist(), y_pred.tolist())
        worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))

    ok = worst <= 1e-12
    verdict(ok, "metrics oracle",
            f"max |weighted_metrics - hand loops| {worst:.1e} "
            f"over 1000 instances")
    assert worst <= 1e-12


def test_09_privacy_audit(desk_standard, desk_imbalance):
    standard, _ = desk_standard
    imbalance, _ = desk_imbalance
    expected = parameter_count(21, 256, 256)

    audits = {"standard": standard[0].privacy}
    for setting, runs in imbalance.items():
        audits[setting] = runs[0].privacy
    sizes_ok = all(a["passed"] and a["expected_count"] == expected
                   for a in audits.values())

    cfg = TrainConfig(hidden=8, embed=4, epochs=2, batch_size=8,
                      learning_rate=1e-3, augment=AugmentConfig(),
                      loss=LossConfig())
    invariant = {}
    for setting in ("standard",) + IMBALANCE_SETTINGS:
        def make(scale, _setting=setting):
            exp = desk_profile(
                seed=3, setting=_setting, n_silos=2, features_per_silo=4,
                batch_size=8, dataset=DatasetSpec(rows=160 * scale,
                                                  features=8, classes=3))
            return prepare_experiment(exp).train_views
        same, _info = audit_row_invariance(make, cfg,
                                           RngStream(seed=3, tag="audit"))
        invariant[setting] = same

    ok = sizes_ok and all(invariant.values())
    verdict(ok, "privacy audit",
            f"payload length == {expected} params in all settings "
            f"{sizes_ok}, sizes invariant under row doubling {invariant}")
    assert sizes_ok
    assert all(invariant.values())


def test_10_determinism(tmp_path):
    cfg = desk_profile(
        seed=11, n_silos=5, features_per_silo=4, encoder_size=16,
        embed_size=8, epochs=3, batch_size=32, probe_max_iter=120,
        dataset=DatasetSpec(rows=400, features=20, classes=3))
    serial = tmp_path / "serial.json"
    serial.write_text(json.dumps(cfg.to_dict()))
    parallel = tmp_path / "parallel.json"
    parallel.write_text(json.dumps(cfg.replace(parallel=True).to_dict()))

    outs = {}
    for name, path in (("s1", serial), ("s2", serial),
                       ("p1", parallel), ("p2", parallel)):
        out = tmp_path / name
        assert main(["experiment", "--config", str(path),
                     "--out", str(out)]) == EXIT_OK
        outs[name] = (out / "metrics.csv").read_bytes()

    serial_same = outs["s1"] == outs["s2"]
    parallel_same = outs["p1"] == outs["p2"]
    cross_same = outs["s1"] == outs["p1"]

    ok = serial_same and parallel_same and cross_same
    verdict(ok, "determinism",
            f"metrics bytes equal: serial {serial_same}, max-parallel "
            f"{parallel_same}, serial==parallel {cross_same}")
    assert serial_same
    assert parallel_same
    assert cross_same
