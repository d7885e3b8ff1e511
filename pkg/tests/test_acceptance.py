"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest -m acceptance -s``. The lines are also printed when
output capture is on.
"""
import csv
import time
from pathlib import Path

import numpy as np
import pytest

from bundleflow.baselines import (ProductMenu, RochetSchedule, PriceSchedule,
                                  build_big_bundle_menu, build_small_bundle_menu,
                                  grand_bundle_menu, grand_bundle_search, product_expected_value,
                                  sampled_values, train_bundle_rochetnet, train_fixed_prices)
from bundleflow.cli import main
from bundleflow.config import RunConfig, with_section
from bundleflow.evaluation import (ablation_sweep, brute_force_menu_oracle, dsic_probe, ir_check,
                                   test_revenue as revenue_of)
from bundleflow.flow import FlowConfig, log_density_transport, vector_field
from bundleflow.menu import (BundleFlowMechanism, Menu, MenuConfig, revenue_loss, train_menu)
from bundleflow.nn import finite_diff_check
from bundleflow.flow import ode_solve, round_bundle
from bundleflow.stage1 import Stage1Config, coverage_report, train_flow
from bundleflow.valuations import (AuctionConfig, evaluate, generate_synthetic, pack, split)

from conftest import constant_field, random_valuation

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


# --- 1: oracle equivalence ------------------------------------------------

def test_criterion_1_oracle_equivalence(report):
    t0 = time.perf_counter()
    cfg = FlowConfig(euler_steps=64)
    coarse = FlowConfig(euler_steps=8)
    rng = np.random.default_rng(2024)
    worst, points, boundary, coarse_boundary, failures = 0.0, 0, 0, 0, []
    for case in range(1000):
        m, D = int(rng.integers(1, 13)), int(rng.integers(1, 17))
        vf = Stage1Config.default(m, seed=case).make_field()
        menu = Menu.init(2, D, m, 100.0, rng)
        menu.logits[:] = rng.normal(size=menu.logits.shape)
        v = random_valuation(rng, m, max_atoms=5)
        rep = brute_force_menu_oracle(menu, vf, cfg, v, rtol=1e-9)
        worst = max(worst, rep.max_rel_gap)
        points += rep.points
        boundary += len(rep.boundary)
        failures += rep.failures
        coarse_boundary += len(brute_force_menu_oracle(menu, vf, coarse, v).boundary)
    rate = boundary / points
    elapsed = time.perf_counter() - t0
    ok = not failures and worst <= 1e-9 and rate < 1e-3 and elapsed < 120
    report(1, ok, f"max rel gap {worst:.2e} (<= 1e-9), boundary {boundary}/{points} = "
                  f"{rate:.3%} (< 0.1%) at 64 Euler steps [8 steps: "
                  f"{coarse_boundary / points:.3%}], {elapsed:.0f}s (< 120s)")
    assert ok


# --- 2: gradient correctness ----------------------------------------------

def test_criterion_2_gradients(report):
    t0 = time.perf_counter()
    m, K, D = 3, 3, 2
    cfg = FlowConfig()
    worst = 0.0
    failed = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        vf = Stage1Config.default(m, seed=seed, q_width=16, q_depth=2, eta_width=16,
                                  eta_depth=1).make_field()
        for p in vf.params:
            p *= 2.0
        menu = Menu(rng.uniform(5, 40, K), rng.normal(size=(K, D)), rng.uniform(0, 1, (K, D, m)))
        batch = [random_valuation(rng, m) for _ in range(16)]
        frozen = round_bundle(ode_solve(vf, cfg, menu.means.reshape(-1, m))).reshape(K, D, m)

        def fn(params):
            return revenue_loss(Menu(*params), batch, vf, cfg, 0.05, grad=True, bundles=frozen)

        # floor 1e-5: the loss is O(10) so stencil cancellation noise is ~1e-10
        rep = finite_diff_check(fn, [p.copy() for p in menu.params], 1e-4, floor=1e-5)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failed.append(seed)
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60
    report(2, ok, f"beta/logits/mu max rel err {worst:.2e} (<= 1e-4) over 50 seeds, "
                  f"failing seeds {failed}, {elapsed:.0f}s (< 60s)")
    assert ok


# --- 3: Liouville consistency ----------------------------------------------

def integrated_divergence(vf, s0, T=1.0, n=2048, h=1e-5):
    """-integral of div phi along an RK4 trajectory, Simpson rule, FD divergence."""
    m = s0.size
    ts = np.linspace(0.0, T, n + 1)
    dt = T / n

    def phi(t, s):
        return vector_field(vf, t, s, s0)

    def div(t, s):
        tot = 0.0
        for i in range(m):
            e = np.zeros(m)
            e[i] = h
            tot += (phi(t, s + e)[i] - phi(t, s - e)[i]) / (2 * h)
        return tot

    s = s0.copy()
    vals = []
    for k, t in enumerate(ts):
        vals.append(div(t, s))
        if k < n:
            k1 = phi(t, s)
            k2 = phi(t + dt / 2, s + dt / 2 * k1)
            k3 = phi(t + dt / 2, s + dt / 2 * k2)
            k4 = phi(t + dt, s + dt * k3)
            s = s + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    vals = np.array(vals)
    simpson = dt / 3 * (vals[0] + vals[-1] + 4 * vals[1:-1:2].sum() + 2 * vals[2:-1:2].sum())
    return -simpson


def test_criterion_3_liouville(report):
    fine = FlowConfig(eta_grid=16385)
    rng = np.random.default_rng(7)
    worst = 0.0
    for case in range(12):
        m = case % 3 + 1
        vf = Stage1Config.default(m, seed=case).make_field()
        s0 = rng.uniform(0, 1, m)
        closed = log_density_transport(vf, fine, 0.0, s0)
        worst = max(worst, abs(closed - integrated_divergence(vf, s0)))
    exact = True
    for Q in ([[1.5, 2.0], [-3.0, -1.5]], [[0.0, 1.0, 0.0], [0.0, 2.0, 4.0], [1.0, 0.0, -2.0]]):
        vf = constant_field(Q, eta_w=2.0, eta_b=0.3)
        for la in (0.0, -1.25, 3.5):
            exact &= log_density_transport(vf, FlowConfig(), la, np.full(len(Q), 0.4)) == la
    ok = worst <= 1e-8 and exact
    report(3, ok, f"closed form vs integrated divergence max abs gap {worst:.2e} (<= 1e-8) "
                  f"for m <= 3; traceless Q exact: {exact}")
    assert ok


# --- 4: stage-1 coverage ---------------------------------------------------

def test_criterion_4_coverage(report):
    t0 = time.perf_counter()
    cfg = Stage1Config.default(5, seed=0, iterations=10_000, lr=5e-3)
    vf, log = train_flow(cfg)
    losses = np.array([row[1] for row in log])
    initial, final = losses[0], losses[-100:].mean()
    cov = coverage_report(vf, cfg, probe_count=10_000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = cov.reached >= 29 and final <= 0.1 * initial and elapsed < 600
    report(4, ok, f"coverage {cov.reached}/{cov.total} (>= 29), loss {final:.4g} / initial "
                  f"{initial:.4g} = {final / initial:.1%} (<= 10%), {elapsed:.0f}s (< 600s)")
    assert ok


# --- 5: DSIC / IR ---------------------------------------------------------

def test_criterion_5_dsic_ir(report):
    t0 = time.perf_counter()
    m = 10
    ac = AuctionConfig(m, 1000.0)
    train, _ = split(generate_synthetic(ac, 2000, seed=0), 0.95, seed=0)
    probe = list(generate_synthetic(ac, 2500, seed=99))
    ir_set = pack(list(generate_synthetic(ac, 10_000, seed=98)))
    fc = FlowConfig()
    vf, _ = train_flow(Stage1Config.default(m, seed=0, iterations=1000))
    menu, _ = train_menu(MenuConfig(K=32, D=4, iterations=500, eval_interval=0), vf, fc, train)
    grand_price, _, _ = grand_bundle_search(train, train)
    mechs = {"bundleflow": BundleFlowMechanism(menu, vf, fc),
             "grand": grand_bundle_menu(m, grand_price)}
    for name, build in (("big", build_big_bundle_menu), ("small", build_small_bundle_menu)):
        mechs[name] = train_fixed_prices(build(ac, 32, seed=0), train,
                                         PriceSchedule(iterations=300))
    parts, ok = [], True
    for name, mech in mechs.items():
        d = dsic_probe(mech, probe, misreport_count=4, seed=0)
        ir = ir_check(mech, ir_set)
        ok &= d.probes == 10_000 and d.pass_rate == 1.0 and d.worst_violation <= 1e-12 \
            and ir == 1.0
        parts.append(f"{name} dsic {d.pass_rate:.4f} worst {d.worst_violation:.1e} ir {ir:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    report(5, ok, "; ".join(parts) + f" ({d.probes} probes each), {elapsed:.0f}s (< 120s)")
    assert ok


# --- 6: D ablation --------------------------------------------------------

def test_criterion_6_d_ablation(report):
    t0 = time.perf_counter()
    base = RunConfig()
    base = with_section(base, "auction", m=10, v_max=1000.0, count=4000)
    base = with_section(base, "stage1", iterations=3000)
    base = with_section(base, "menu", K=64, iterations=2000)
    rows = {r["value"]: r for r in ablation_sweep("D", [1, 2, 4], base, seeds=(0, 1, 2))}
    med = {d: rows[d]["median"] for d in rows}
    elapsed = time.perf_counter() - t0
    ok = med[2] > med[1] and med[4] >= 0.95 * med[2] and elapsed < 1800
    per_seed = ", ".join(f"D={d}: {[round(x, 1) for x in rows[d]['revenues']]}" for d in rows)
    report(6, ok, f"median rev D=1 {med[1]:.2f}, D=2 {med[2]:.2f}, D=4 {med[4]:.2f} "
                  f"(need D2 > D1 and D4 >= 0.95*D2) [{per_seed}], {elapsed:.0f}s (< 1800s)")
    assert ok


# --- 7: randomization ------------------------------------------------------

def test_criterion_7_randomization(report):
    t0 = time.perf_counter()
    m = 6
    ac = AuctionConfig(m, 1000.0)
    fc = FlowConfig()
    ratios, pairs = [], []
    for seed in range(3):
        train, test = split(generate_synthetic(ac, 2000, "clusters", 3, seed=seed), 0.95, seed)
        vf, _ = train_flow(Stage1Config.default(m, seed=seed, iterations=3000))
        _, _, grand = grand_bundle_search(train, test)
        menu, _ = train_menu(MenuConfig(K=16, D=2, iterations=2000, seed=seed, eval_interval=0),
                             vf, fc, train)
        bf = revenue_of(BundleFlowMechanism(menu, vf, fc), test)
        ratios.append(bf / grand)
        pairs.append(f"{bf:.1f}/{grand:.1f}")
    med = float(np.median(ratios))
    elapsed = time.perf_counter() - t0
    ok = med >= 1.05 and elapsed < 900
    report(7, ok, f"BundleFlow/Grand-Bundle median ratio {med:.3f} (>= 1.05) "
                  f"[{', '.join(pairs)}], {elapsed:.0f}s (< 900s)")
    assert ok


# --- 8: product estimator and certification --------------------------------

def test_criterion_8_product_estimator(report):
    rng = np.random.default_rng(11)
    worst_z = 0.0
    for m in (2, 5, 10):
        vs = [random_valuation(rng, m, max_atoms=5) for _ in range(2)]
        logits = rng.normal(size=(1, m))
        p = 1 / (1 + np.exp(-logits[0]))
        draws = sampled_values(pack(vs), logits, 0.5, rng, 100_000)   # (n, 1) mean of draws
        one = np.stack([sampled_values(pack(vs), logits, 0.5, rng, 1) for _ in range(2000)])
        se_scale = one.std(axis=0, ddof=1)[:, 0] / np.sqrt(100_000)
        for i, v in enumerate(vs):
            z = abs(draws[i, 0] - product_expected_value(v, p)) / max(se_scale[i], 1e-12)
            worst_z = max(worst_z, z)
    estimator_ok = worst_z <= 3.0

    ac = AuctionConfig(5, 1000.0)
    train, test = split(generate_synthetic(ac, 2000, seed=0), 0.95, seed=0)
    res = train_bundle_rochetnet(ac, 16, train, RochetSchedule(iterations=2000))
    trained = dsic_probe(res.menu, list(test))
    flagged_ok = res.converged_binary or not trained.certified
    # snap the trained logits to their signs: a converged-binary menu of the same shape
    snapped = ProductMenu(np.where(res.menu.item_logits >= 0, 40.0, -40.0), res.menu.betas)
    binary = dsic_probe(snapped, list(test))
    exact_ok = all(product_expected_value(v, snapped.probs[k]) ==
                   pytest.approx(evaluate(v, snapped.rounded()[k]), abs=1e-9)
                   for v in list(test)[:20] for k in range(snapped.K))
    certified_ok = snapped.is_binary and binary.certified and binary.pass_rate == 1.0 and exact_ok
    ok = estimator_ok and flagged_ok and certified_ok
    p = res.menu.probs
    report(8, ok, f"sampled vs exact worst |z| {worst_z:.2f} (<= 3, 1e5 draws, m <= 10); "
                  f"trained menu binary={res.converged_binary} (max dist to {{0,1}} "
                  f"{np.minimum(p, 1 - p).max():.3f}) certified={trained.certified}; "
                  f"binary menu certified={binary.certified} pass {binary.pass_rate:.3f}")
    assert ok


# --- 9: reproducibility ----------------------------------------------------

REPRO = """run_id: repro
auction: {m: 5, v_max: 100, count: 400}
stage1: {iterations: 120, num_samples: 2000, save_interval: 50}
menu: {K: 8, D: 2, iterations: 80, eval_interval: 20, snapshot_interval: 20, save_interval: 30}
baseline: {K: 8, iterations: 60}
"""


def _tree(root: Path):
    """Relative path -> bytes; log CSVs lose their wall-time column, reports their wall time."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root).as_posix()
        if p.suffix == ".csv" and p.name.endswith("log.csv"):
            with open(p) as fh:
                rows = [r for r in csv.reader(fh)]
            keep = [i for i, h in enumerate(rows[0]) if h != "wall_ms"]
            out[rel] = [[r[i] for i in keep] for r in rows]
        elif rel.startswith("reports/"):
            import json
            d = json.loads(p.read_text())
            d.pop("wall_time_s", None)
            out[rel] = d
        else:
            out[rel] = p.read_bytes()
    return out


def test_criterion_9_reproducibility(report, tmp_path, monkeypatch):
    cfg = tmp_path / "repro.yaml"
    cfg.write_text(REPRO)
    trees = []
    for root, split_at in (("a", None), ("b", None), ("c", (50, 30))):
        monkeypatch.setenv("BUNDLEFLOW_OUT", str(tmp_path / root))
        c = ["-c", str(cfg)]
        assert main(["gen-data", *c]) == 0
        if split_at is None:
            assert main(["train-flow", *c]) == 0
            assert main(["train-menu", *c]) == 0
        else:
            assert main(["train-flow", *c, "--max-steps", str(split_at[0])]) == 0
            assert main(["train-flow", *c, "--resume"]) == 0
            assert main(["train-menu", *c, "--max-steps", str(split_at[1])]) == 0
            assert main(["train-menu", *c, "--resume"]) == 0
        for which in ("grand", "big", "rochetnet"):
            assert main(["train-baseline", *c, which]) == 0
        trees.append(_tree(tmp_path / root / "repro"))
    a, b, c = trees
    same = a == b
    resumed = a == c
    diff = sorted(k for k in set(a) | set(c) if a.get(k) != c.get(k))
    ok = same and resumed
    report(9, ok, f"{len(a)} files; fresh runs identical: {same}; "
                  f"interrupted+resumed identical: {resumed}" + (f" (differ: {diff})" if diff else ""))
    assert ok
