"""Exit criteria. Each test prints one PASS/FAIL line."""

import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from conftest import make_dataset, make_params
from fedncm.benchmark import benchmark_config, benchmark_data
from fedncm.cli import metrics_csv
from fedncm.costs import budget_curve
from fedncm.data import PartitionSpec, dirichlet_partition, generate_gaussian_mixture
from fedncm.engine import (
    ExperimentConfig,
    drift_probe,
    init_server_state,
    initial_params,
    server_step,
    simulate,
)
from fedncm.headtune import aggregate_centroids, local_class_stats
from fedncm.model import (
    FT,
    LP,
    BackboneSpec,
    ModelParams,
    apply_update,
    backbone_bytes,
    features,
    flatten,
    flatten_grads,
    loss_and_grad,
    random_backbone,
    unflatten,
)

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def _report(criterion, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, f"criterion {criterion} failed: {detail}"

    return _report


def rounds_to_fraction_of_final(accs, fraction=0.9):
    target = fraction * accs[-1]
    return next(i for i, a in enumerate(accs) if a >= target)


@pytest.fixture(scope="module")
def benchmark_runs():
    """Benchmark records for FT / FedNCM+FT / FedNCM over alpha and seed."""
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        train, test = benchmark_data(seed)
        for alpha in (100.0, 0.1, 0.01):
            for method in ("ft", "fedncm_ft", "fedncm"):
                if method == "fedncm" and alpha != 0.1:
                    continue
                runs[method, alpha, seed] = simulate(benchmark_config(seed, method, alpha), train, test).records
    return runs, time.perf_counter() - start


def test_c1_fedncm_exactness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(20):
        C, d = int(rng.integers(2, 9)), int(rng.integers(2, 12))
        ds = generate_gaussian_mixture(C, d, int(rng.integers(5, 60)), float(rng.uniform(0.5, 5)), float(rng.uniform(0, 2)), seed=trial)
        widths = tuple(int(w) for w in rng.integers(2, 20, size=int(rng.integers(0, 3))))
        act = str(rng.choice(["relu", "tanh", "identity"]))
        layers = random_backbone(d, widths, act, rng)
        d_out = widths[-1] if widths else d
        params = ModelParams(layers, np.zeros((C, d_out)), np.zeros(C), d)
        shards = dirichlet_partition(ds, PartitionSpec(int(rng.integers(1, 30)), float(rng.choice([0.01, 0.1, 1, 100])), trial))
        fed = aggregate_centroids([local_class_stats(s, ds, params) for s in shards], C)
        feats = features(params, ds.X)
        for c in range(C):
            ref = feats[ds.y == c].mean(axis=0)
            err = np.linalg.norm(fed.means[c] - ref) / max(np.linalg.norm(ref), 1e-300)
            worst = max(worst, err if np.linalg.norm(ref) > 0 else np.linalg.norm(fed.means[c]))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-9 and elapsed < 10, f"max relative error {worst:.2e} over 20 triples in {elapsed:.2f}s")


def test_c2_one_round_cost_contract(report):
    train, test = benchmark_data(0)
    cfg = benchmark_config(0, "fedncm")
    res = simulate(cfg, train, test)
    led = res.ledger
    P = initial_params(cfg, train).param_count()
    K = cfg.partition.num_clients
    d_out = cfg.backbone.widths[-1]
    expected_up = sum(4 + len(np.unique(train.y[s.sample_indices])) * (8 + 4 * d_out) for s in res.shards)
    ok = (
        led.forward_passes == len(train)
        and led.backward_passes == 0
        and led.head_backward_passes == 0
        and led.bytes_down == K * P * 4
        and led.bytes_up == expected_up
        and len(res.records) == 1
    )
    report(2, ok, f"forward={led.forward_passes} (n={len(train)}), backward={led.backward_passes}, "
                  f"down={led.bytes_down} (=K*P*4={K * P * 4}), up={led.bytes_up} (stats msgs={expected_up})")


def test_c3_gradient_suite(report):
    rng = np.random.default_rng(99)
    passed = 0
    for trial in range(100):
        mode = FT if trial % 4 else LP
        act = ("tanh", "identity", "tanh", "relu")[trial % 4]
        p = make_params(rng, input_dim=3, widths=tuple(int(w) for w in rng.integers(2, 6, size=int(rng.integers(0, 3)))), num_classes=3, activation=act)
        ds = make_dataset(rng, n=8, dim=3)
        _, g = loss_and_grad(p, ds.X, ds.y, mode)
        analytic = flatten_grads(g)
        flat = flatten(p)
        start = p.backbone_param_count() if mode == LP else 0
        numeric = np.empty_like(analytic)
        for i in range(start, len(flat)):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += 1e-4
            lo[i] -= 1e-4
            numeric[i - start] = (loss_and_grad(unflatten(hi, p), ds.X, ds.y, mode)[0] - loss_and_grad(unflatten(lo, p), ds.X, ds.y, mode)[0]) / 2e-4
        ok = np.all(np.abs(analytic - numeric) <= 1e-4 * np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-6)
        passed += bool(ok)
    p = make_params(rng)
    ds = make_dataset(rng)
    before = backbone_bytes(p)
    for _ in range(50):
        p = apply_update(p, loss_and_grad(p, ds.X, ds.y, LP)[1], 0.3)
    frozen = backbone_bytes(p) == before
    report(3, passed == 100 and frozen, f"{passed}/100 finite-difference checks, LP backbone unchanged={frozen}")


def test_c4_degenerate_federation(report):
    train = generate_gaussian_mixture(4, 6, 25, 3.0, 1.0, seed=3)
    cfg = ExperimentConfig(
        method="ft", rounds=20, participation=1.0, batch_size=len(train), local_epochs=1,
        client_lr=0.1, server_opt="fedavg", server_lr=1.0,
        partition=PartitionSpec(1, 0.1), backbone=BackboneSpec((12, 6)), seed=3,
    )
    states = []
    simulate(cfg, train, train, on_round=states.append)
    params = initial_params(cfg, train)
    worst = 0.0
    for state in states:
        params = apply_update(params, loss_and_grad(params, train.X, train.y, FT)[1], cfg.client_lr)
        worst = max(worst, float(np.linalg.norm(flatten(state.global_params) - flatten(params))))
    report(4, len(states) == 20 and worst <= 1e-9, f"max per-round parameter distance {worst:.2e} over {len(states)} rounds")


def test_c5_fig1_ordering(report, benchmark_runs):
    runs, elapsed = benchmark_runs
    a_ok, b_count, ratios, ratios_total = True, 0, [], []
    for seed in SEEDS:
        ft = runs["ft", 0.1, seed]
        ncm_ft = runs["fedncm_ft", 0.1, seed]
        a_ok &= ncm_ft[0].test_accuracy > ft[0].test_accuracy
        ft_acc = [r.test_accuracy for r in ft]
        ncm_acc = [r.test_accuracy for r in ncm_ft]
        b_count += rounds_to_fraction_of_final(ncm_acc) <= rounds_to_fraction_of_final(ft_acc)
        ncm_point = budget_curve(runs["fedncm", 0.1, seed], "bytes", exclude_initial=True)[-1][0]
        ft_first = budget_curve(ft, "bytes", exclude_initial=True)[1][0]
        ratios.append(ft_first / ncm_point)
        ratios_total.append(budget_curve(ft, "bytes")[1][0] / budget_curve(runs["fedncm", 0.1, seed], "bytes")[-1][0])
    c_ok = min(ratios) >= 100
    detail = (f"(a) round-0 ordering in all seeds={a_ok}; (b) {b_count}/3 seeds; "
              f"(c) FT round-1 / FedNCM bytes beyond the shared initial download = {[round(r, 1) for r in ratios]} "
              f"(including it: {[round(r, 2) for r in ratios_total]}); runtime {elapsed:.1f}s")
    report(5, a_ok and b_count >= 2 and c_ok and elapsed < 300, detail)


def test_c6_heterogeneity_robustness(report, benchmark_runs):
    runs, _ = benchmark_runs
    drops = {}
    for method in ("ft", "fedncm_ft"):
        drops[method] = float(np.mean([runs[method, 100.0, s][-1].test_accuracy - runs[method, 0.01, s][-1].test_accuracy for s in SEEDS]))
    report(6, drops["ft"] > drops["fedncm_ft"],
           f"mean final-accuracy drop alpha 100 -> 0.01: FT {drops['ft']:.4f}, FedNCM+FT {drops['fedncm_ft']:.4f}")


def test_c7_drift_probe(report):
    wins, pairs = 0, []
    for seed in range(5):
        train, _ = benchmark_data(seed)
        tuned, rand = drift_probe(benchmark_config(seed, "fedncm_ft"), train)
        wins += tuned < rand
        pairs.append(f"{tuned:.3f}<{rand:.3f}" if tuned < rand else f"{tuned:.3f}>={rand:.3f}")
    report(7, wins >= 4, f"{wins}/5 seeds headtuned < random-head L2: {', '.join(pairs)}")


def test_c8_lp_byte_accounting(report):
    train = generate_gaussian_mixture(5, 8, 30, 3.0, 1.0, seed=8)
    results = []
    for widths in ((), (16,), (32, 12)):
        cfg = ExperimentConfig(rounds=3, batch_size=16, participation=0.5, partition=PartitionSpec(6, 0.5), backbone=BackboneSpec(widths), seed=8)
        lp = simulate(replace(cfg, method="lp"), train, train).records
        ft = simulate(replace(cfg, method="ft"), train, train).records
        params = initial_params(cfg, train)
        expected = Fraction(params.head_param_count(), params.param_count())
        for r in range(1, 4):
            lp_bytes = lp[r].cumulative_bytes_up + lp[r].cumulative_bytes_down - lp[r - 1].cumulative_bytes_up - lp[r - 1].cumulative_bytes_down
            ft_bytes = ft[r].cumulative_bytes_up + ft[r].cumulative_bytes_down - ft[r - 1].cumulative_bytes_up - ft[r - 1].cumulative_bytes_down
            results.append(Fraction(lp_bytes, ft_bytes) == expected)
    report(8, all(results), f"{sum(results)}/{len(results)} rounds match head/total exactly across 3 backbone shapes")


def test_c9_determinism(report):
    train, test = benchmark_data(1)
    cfg = benchmark_config(1, "fedncm_ft", rounds=5, server_opt="fedadam", server_lr=0.01)
    csv_a = metrics_csv(simulate(cfg, train, test).records)
    csv_b = metrics_csv(simulate(cfg, train, test).records)
    seq = simulate(cfg, train, test, workers=1).state
    par = simulate(cfg, train, test, workers=4).state
    same_state = (
        flatten(seq.global_params).tobytes() == flatten(par.global_params).tobytes()
        and seq.adam_m.tobytes() == par.adam_m.tobytes()
        and seq.adam_v.tobytes() == par.adam_v.tobytes()
        and seq.round_index == par.round_index
    )
    report(9, csv_a == csv_b and same_state, f"rerun CSV identical={csv_a == csv_b}, sequential vs 4 threads identical={same_state}")


def test_c10_fedadam_step(report):
    cfg = ExperimentConfig(server_opt="fedadam", server_lr=0.001, adam_betas=(0.9, 0.999), adam_eps=1e-8)
    params = ModelParams((), np.zeros((1, 1)), np.zeros(1), 1)
    state = init_server_state(params, LP, "fedadam")
    stepped = server_step(state, np.array([-1.0, 0.0]), cfg)
    hand = -0.001 * 1.0 / (1.0 + 1e-8)
    err = abs(stepped.global_params.head_V[0, 0] - hand)
    fixed = server_step(state, np.zeros(2), cfg)
    fixed_ok = flatten(fixed.global_params).tobytes() == flatten(params).tobytes() and not fixed.adam_m.any() and not fixed.adam_v.any()
    report(10, err <= 1e-12 and fixed_ok, f"|step - hand| = {err:.1e}, zero pseudo-gradient fixed point={fixed_ok}")
