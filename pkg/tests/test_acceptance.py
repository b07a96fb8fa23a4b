"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The directional benchmark
(criterion 8) trains fifteen networks and takes a few minutes; everything
else is fast.
"""

import math

import numpy as np
import pytest

from van.benchmark import BENCHMARK_DATA, run_seed, median
from van.cli import main
from van.data import SynthConfig, make_split
from van.evaluate import TIOU_THRESHOLDS
from van.layers import PooledFeature
from van.losses import GaussianScalar, kl_regression_loss
from van.moments import MomentVector
from van.network import NetworkConfig, build, forward, param_count
from van.oracle import (
    _network_fd_error,
    check_affine_mc,
    check_kl,
    check_relu_regime,
    kl_numeric,
    standard_kl_closed_form,
)
from van.train import TrainConfig, evaluate_dataset, train


def report(num, name, ok, detail=""):
    print(f"ACCEPTANCE {num:2d} [{'PASS' if ok else 'FAIL'}] {name} {detail}".rstrip())
    assert ok, f"criterion {num} ({name}) failed: {detail}"


def test_c01_moment_propagation_exactness():
    result = check_affine_mc(n_layers=50, n_samples=100_000, seed=0)
    report(1, "affine moments match Monte Carlo within 4 SE", result.passed,
           f"worst z = {result.measured:.2f} over 50 layers")


def test_c02_relu_approximation_regime():
    rows = {r.name: r for r in check_relu_regime(grid=20)}
    asserted = rows["relu_rule_mean_err_mu_ge_3sigma"]
    clip = rows["relu_rule_clipping_regime_abs_mean_err"]
    print(f"  clipping-regime abs mean error (reported): {clip.measured:.4f}")
    report(2, "relu rule <=1% mean error for mu >= 3 sigma", asserted.passed,
           f"worst rel err = {asserted.measured:.2e}")


def test_c03_kl_identities():
    rng = np.random.default_rng(3)
    st2 = 0.01
    worst_l1 = 0.0
    for _ in range(100):
        mu_t, mu_p = rng.uniform(-3, 3, 2)
        loss = kl_regression_loss(GaussianScalar(mu_t, st2), GaussianScalar(mu_p, st2))
        worst_l1 = max(worst_l1, abs(loss - abs(mu_t - mu_p) / math.sqrt(2 * st2)))
    worst_int = 0.0
    for _ in range(100):
        q = GaussianScalar(float(rng.uniform(-3, 3)), float(rng.uniform(0.1, 9)))
        p = GaussianScalar(float(rng.uniform(-3, 3)), float(rng.uniform(0.1, 9)))
        worst_int = max(worst_int, abs(kl_numeric(q, p) - standard_kl_closed_form(q, p)))
    ok = worst_l1 <= 1e-12 and worst_int <= 1e-6
    report(3, "degenerate L1 identity (1e-12) and numeric KL (1e-6)", ok,
           f"L1 err {worst_l1:.2e}, integral err {worst_int:.2e}")


@pytest.mark.parametrize("variant", ["baseline", "van_i", "van_o", "van_p"])
def test_c04_gradient_correctness(variant):
    err = _network_fd_error(variant, seed=104, coords=100)
    report(4, f"full-loss gradient vs FD, {variant}", err <= 1e-4,
           f"worst rel err = {err:.2e} on 100 coordinates")


def test_c05_parameter_count_relationships():
    default = dict(d=64, k=3, hidden=128, classes=5)
    counts = {
        v: param_count(build(NetworkConfig(variant=v, **default), 0))
        for v in ("baseline", "van_i", "van_o", "van_p")
    }
    head = default["hidden"] * (default["classes"] + 1) * 2 + (default["classes"] + 1) * 2
    ok = (
        counts["van_p"] == counts["baseline"]
        and counts["van_i"] > 1.9 * counts["baseline"]
        and counts["van_o"] - counts["baseline"] == head
    )
    report(5, "parameter-count relationships", ok,
           f"base {counts['baseline']}, van_i {counts['van_i']}, "
           f"van_o +{counts['van_o'] - counts['baseline']}, van_p {counts['van_p']}")


def test_c06_mean_path_equivalence():
    cfg_p = NetworkConfig(variant="van_p", d=16, k=3, hidden=32, classes=4)
    cfg_b = NetworkConfig(variant="baseline", d=16, k=3, hidden=32, classes=4)
    params = build(cfg_p, 6)
    rng = np.random.default_rng(6)
    means = rng.normal(size=(1000, cfg_p.pooled_dim))
    variances = rng.uniform(0.01, 2.0, (1000, cfg_p.pooled_dim))
    feat = PooledFeature(MomentVector(means, variances), k=cfg_p.k, d=cfg_p.d)
    det_p, _ = forward(params, cfg_p, feat, mode="test")
    det_b, _ = forward(params, cfg_b, feat, mode="test")
    ok = np.array_equal(det_p.class_scores, det_b.class_scores) and np.array_equal(
        det_p.boundary_mean, det_b.boundary_mean
    )
    report(6, "van_p test mode bitwise equals baseline on 1000 inputs", ok)


def test_c07_sanity_ceiling():
    data_cfg = SynthConfig.create(
        signal=1.0, seed=7, d=64, num_classes=5,
        noise_action=1e-3, noise_background=1e-3, jitter=0.0,
        positives_per_action=1, negatives_per_sequence=2,
    )
    train_ds = make_split(data_cfg, 200, "train")
    test_ds = make_split(data_cfg, 100, "test")
    nc = NetworkConfig(variant="baseline", d=64, k=3, hidden=128, classes=5)
    params = build(nc, 7)
    tc = TrainConfig(batch_size=128, lr=0.01, iters=2000, optimizer="sgd-momentum", seed=7)
    train(params, nc, train_ds, tc)
    per_thr, _, _ = evaluate_dataset(params, nc, test_ds, steps=2)
    report(7, "noiseless zero-jitter ceiling mAP@0.5 >= 0.95 within 5K iters",
           per_thr[0.5] >= 0.95, f"mAP@0.5 = {per_thr[0.5]:.4f} after 2000 iters")


def test_c08_directional_benchmark():
    variants = ("baseline", "van_o", "van_p")
    by_variant = {v: [] for v in variants}
    per_thr_store = {v: [] for v in variants}
    for seed in range(5):
        for row in run_seed(seed, variants):
            by_variant[row.variant].append(row.avg)
            per_thr_store[row.variant].append(row.per_threshold)
    med = {v: median(by_variant[v]) for v in variants}
    print("  median avg-mAP(0.3:0.7): "
          + " ".join(f"{v}={med[v]:.4f}" for v in variants))
    print("  per-seed avg-mAP: "
          + " | ".join(f"{v}: {['%.4f' % a for a in by_variant[v]]}" for v in variants))
    # reported, not asserted: where the van_p gain concentrates
    for thr in TIOU_THRESHOLDS:
        gap = median([p[thr] for p in per_thr_store["van_p"]]) - median(
            [p[thr] for p in per_thr_store["baseline"]]
        )
        print(f"  van_p - baseline mAP gap at tIoU {thr}: {gap:+.4f}")
    ok = med["van_p"] >= med["baseline"] and med["van_o"] >= med["baseline"]
    report(8, "median-of-5 avg-mAP: van_p >= baseline and van_o >= baseline", ok,
           " ".join(f"{v}={med[v]:.4f}" for v in variants))


def test_c09_pipeline_determinism(tmp_path):
    flags = [
        "--t-min", "60", "--t-max", "90", "--len-min", "14", "--len-max", "24",
        "--train-sequences", "20", "--test-sequences", "10", "--d", "16",
        "--classes", "3", "--hidden", "24", "--k", "2", "--positives", "2",
        "--negatives", "2", "--min-proposal-len", "6",
    ]
    outputs = {}
    for run in ("one", "two"):
        base = tmp_path / run
        assert main(["gen", "--out", str(base / "data"), "--seed", "11", *flags]) == 0
        assert main(["train", "--out", str(base / "t"), "--seed", "11",
                     "--dataset", str(base / "data" / "train.vds"),
                     "--iters", "60", "--batch", "16", "--lr", "0.01", *flags]) == 0
        assert main(["eval", "--out", str(base / "e"), "--seed", "11",
                     "--dataset", str(base / "data" / "test.vds"),
                     "--checkpoint", str(base / "t" / "checkpoint.vckpt"), *flags]) == 0
        outputs[run] = [
            (base / "t" / "loss.csv").read_bytes(),
            (base / "e" / "results.csv").read_bytes(),
        ]
    report(9, "gen->train->eval twice with one seed is byte-identical",
           outputs["one"] == outputs["two"])


def test_c10_loss_surface(tmp_path):
    assert main(["plotdata", "--out", str(tmp_path)]) == 0
    lines = [l for l in (tmp_path / "loss_surface.csv").read_text().splitlines()
             if l and not l.startswith("#")]
    rows = [tuple(map(float, l.split(","))) for l in lines[1:]]
    sigma_t2 = 0.01
    sigma_t = math.sqrt(sigma_t2)
    by_s2 = {}
    for mu, s2, loss in rows:
        by_s2.setdefault(s2, {})[mu] = loss

    symmetric = all(
        grid[mu] == grid[-mu] for grid in by_s2.values() for mu in grid
    )

    monotone = True
    for s2, grid in by_s2.items():
        if s2 < sigma_t2:
            continue
        mus = sorted(m for m in grid if m >= 0)
        losses = [grid[m] for m in mus]
        monotone &= all(losses[i] < losses[i + 1] for i in range(len(losses) - 1))

    base = by_s2[sigma_t2]
    far_mus = [m for m in base if abs(m) >= 10 * sigma_t]
    attenuates = bool(far_mus) and all(
        any(by_s2[s2][m] < base[m] for s2 in by_s2 if s2 > sigma_t2) for m in far_mus
    )

    ok = symmetric and monotone and attenuates
    report(10, "loss surface: symmetry, monotone mean error, variance attenuation",
           ok, f"symmetric={symmetric} monotone={monotone} attenuates={attenuates}")
