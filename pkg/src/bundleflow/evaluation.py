"""Revenue measurement, incentive probes, the brute-force menu oracle and exports.

A *mechanism* here is any object with ``prices`` (including the null element),
``utilities(packed)`` (what selection uses), ``true_utilities(packed)`` and
``exact``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .flow import FlowConfig, VectorField, eta, ode_solve, q_matrix
from .menu import BundleFlowMechanism, Menu, UtilityVector, menu_support, softmax, utilities
from .valuations import PackedValuations, XorValuation, evaluate, pack


def _packed(ds):
    if isinstance(ds, PackedValuations):
        return ds
    return ds.packed if hasattr(ds, "packed") else pack(list(ds))


def select(mechanism, packed, workers=1, chunk=2048):
    """Hard-argmax element index per valuation (ties to the lowest index)."""
    packed = _packed(packed)
    n = len(packed)
    if n == 0:
        return np.zeros(0, dtype=int)
    spans = [(lo, min(n, lo + chunk)) for lo in range(0, n, chunk)]

    def run(span):
        return np.argmax(mechanism.utilities(packed.subset(slice(*span))), axis=1)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    return np.concatenate(parts)


def test_revenue(mechanism, test_set, workers=1):
    """Mean payment under hard selection."""
    packed = _packed(test_set)
    if len(packed) == 0:
        return 0.0
    k = select(mechanism, packed, workers)
    return float(np.asarray(mechanism.prices)[k].sum() / len(packed))


@dataclass
class EvalReport:
    mechanism: str
    test_revenue: float
    selection_frequencies: list
    dsic_pass_rate: float
    dsic_worst_violation: float
    dsic_certified: bool
    ir_pass_rate: float
    n_test: int
    wall_time_s: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_mechanism(mechanism, test_set, misreport_count=4, seed=0, workers=1):
    t0 = time.perf_counter()
    packed = _packed(test_set)
    k = select(mechanism, packed, workers)
    size = len(mechanism.prices)
    freq = np.bincount(k, minlength=size) / max(1, len(k))
    dsic = dsic_probe(mechanism, test_set, misreport_count, seed)
    ir = ir_check(mechanism, test_set)
    rev = float(np.asarray(mechanism.prices)[k].sum() / len(k)) if len(k) else 0.0
    return EvalReport(getattr(mechanism, "name", type(mechanism).__name__), rev,
                      [float(x) for x in freq], dsic.pass_rate, dsic.worst_violation,
                      dsic.certified, ir, len(packed), time.perf_counter() - t0)


# --- incentive probes ----------------------------------------------------

MISREPORT_STYLES = ("scale", "dropout", "swap")


def misreport(v: XorValuation, rng, others=None, style=None):
    """Perturbed bid: atom price scaling U[0.5, 2], atom dropout p=0.3, or a swap."""
    style = style or MISREPORT_STYLES[rng.integers(0, 3 if others else 2)]
    if style == "scale":
        return XorValuation(v.bundles, v.prices * rng.uniform(0.5, 2.0, v.a))
    if style == "dropout":
        keep = rng.random(v.a) >= 0.3
        return XorValuation(v.bundles[keep], v.prices[keep]) if keep.any() else \
            XorValuation(np.zeros((0, v.m), np.uint8), np.zeros(0))
    if style == "swap":
        return others[int(rng.integers(0, len(others)))]
    raise ValueError(f"unknown misreport style {style!r}")


@dataclass
class DsicReport:
    pass_rate: float
    worst_violation: float
    probes: int
    violations: int
    certified: bool


def dsic_probe(mechanism, v_samples, misreport_count=4, seed=0, tol=1e-12):
    """Check u(v; choice under b) <= u(v; choice under v) for random misreports b.

    True utilities come from ``mechanism.true_utilities``; selections use the
    mechanism's own ``utilities``. A mechanism is certified only when it is
    exact and every probe passes.
    """
    samples = list(v_samples)
    if not samples:
        return DsicReport(1.0, 0.0, 0, 0, bool(mechanism.exact))
    rng = np.random.default_rng([seed, 51])
    m = samples[0].m
    packed_v = pack(samples, m)
    U = mechanism.true_utilities(packed_v)
    k_truth = select(mechanism, packed_v)
    owners, bids = [], []
    for i, v in enumerate(samples):
        for _ in range(misreport_count):
            owners.append(i)
            bids.append(misreport(v, rng, samples))
    owners = np.array(owners)
    k_bid = select(mechanism, pack(bids, m))
    gain = U[owners, k_bid] - U[owners, k_truth[owners]]
    bad = gain > tol
    worst = float(max(0.0, gain.max())) if gain.size else 0.0
    rate = 1.0 - bad.sum() / max(1, gain.size)
    return DsicReport(float(rate), worst, int(gain.size), int(bad.sum()),
                      bool(mechanism.exact) and not bad.any())


def ir_check(mechanism, v_samples, tol=1e-12):
    """Fraction of truthful bidders whose chosen element has utility >= -tol."""
    packed = _packed(v_samples)
    if len(packed) == 0:
        return 1.0
    U = mechanism.true_utilities(packed)
    k = select(mechanism, packed)
    chosen = U[np.arange(len(packed)), k]
    return float((chosen >= -tol).mean())


# --- brute-force oracle --------------------------------------------------

@dataclass
class OracleReport:
    utilities: UtilityVector
    max_rel_gap: float
    compared: int
    boundary: list = field(default_factory=list)   # (element, d) with differing bundles
    failures: list = field(default_factory=list)   # (element, fast, oracle)
    points: int = 0

    @property
    def passed(self):
        return not self.failures


def _eta_scalar(vf: VectorField, t):
    return float(vf.etanet.forward(np.array([float(t)]))[0])


def _oracle_point(vf: VectorField, etas, h, mu):
    """Transport one point with a plain loop; returns (bundle, trace)."""
    m = vf.m
    Q = vf.qnet.forward(np.asarray(mu, dtype=np.float64)).reshape(m, m)
    trace = math.fsum(Q[i, i] for i in range(m))
    s = np.array(mu, dtype=np.float64)
    for e in etas:
        s = s + (h * e) * (Q @ s)
    return np.array([1 if x >= 0.5 else 0 for x in s], dtype=np.uint8), trace


def _oracle_eta_integral(vf, cfg):
    n = cfg.eta_grid
    h = cfg.T / (n - 1)
    ys = [_eta_scalar(vf, i * h) for i in range(n)]
    return h * (math.fsum(ys) - 0.5 * (ys[0] + ys[-1]))


def brute_force_menu_oracle(menu: Menu, vf: VectorField, cfg: FlowConfig, v: XorValuation,
                            mode="normalized", refine=4, rtol=1e-9, max_m=12):
    """Independent per-point recomputation of every element value.

    Each Dirac point is transported with ``refine`` times more Euler steps,
    weights are formed with scalar math, and values with :func:`evaluate`.
    Elements whose rounded bundles differ from the fast path are logged as
    boundary cases and excluded from the comparison.
    """
    if menu.m > max_m:
        raise ValueError(f"oracle limited to m <= {max_m}")
    fast_support = menu_support(menu, vf, cfg, mode)
    fast = BundleFlowMechanism(menu, vf, cfg, mode)
    fast_vals = _fast_values(fast, v)
    steps = cfg.euler_steps * refine
    h = cfg.T / steps
    etas = [_eta_scalar(vf, k * h) for k in range(steps)]
    I = _oracle_eta_integral(vf, cfg)
    values = np.zeros(menu.size)
    report = OracleReport(None, 0.0, 0, points=menu.K * menu.D)
    for k in range(menu.K):
        logits = menu.logits[k]
        lmax = max(logits)
        raws, vals, boundary = [], [], False
        for d in range(menu.D):
            bundle, trace = _oracle_point(vf, etas, h, menu.means[k, d])
            if not np.array_equal(bundle, fast_support.bundles[k, d]):
                boundary = True
                report.boundary.append((k, d))
            if mode == "normalized":
                raws.append(math.exp(logits[d] - lmax - trace * I))
            else:
                wsum = math.fsum(math.exp(x - lmax) for x in logits)
                raws.append(math.exp(logits[d] - lmax) / wsum * math.exp(-trace * I))
            vals.append(evaluate(v, bundle))
        if mode == "normalized":
            total = math.fsum(raws)
            raws = [r / total for r in raws]
        values[k] = math.fsum(r * x for r, x in zip(raws, vals))
        if boundary:
            continue
        gap = abs(values[k] - fast_vals[k]) / max(abs(values[k]), abs(fast_vals[k]), 1e-300)
        if values[k] == fast_vals[k]:
            gap = 0.0
        report.compared += 1
        report.max_rel_gap = max(report.max_rel_gap, gap)
        if gap > rtol:
            report.failures.append((k, float(fast_vals[k]), float(values[k])))
    utils = values - menu.prices
    utils[menu.null_index] = 0.0
    report.utilities = UtilityVector(values, utils, menu.null_index)
    return report


def _fast_values(mech: BundleFlowMechanism, v):
    return utilities(mech.menu, v, mech.vf, mech.flow_cfg, mech.mode, mech.supports()).values


# --- snapshots -----------------------------------------------------------

def snapshot_iterations(total, interval):
    if interval < 1:
        raise ValueError("interval must be >= 1")
    its = list(range(interval, total + 1, interval))
    if not its or its[-1] != total:
        its.append(total)
    return its


def menu_snapshot(iteration, menu: Menu, vf, cfg, test_set, mode="normalized"):
    mech = BundleFlowMechanism(menu, vf, cfg, mode)
    sup = mech.supports()
    elements = []
    for k in range(menu.K):
        merged = {}
        for b, w in zip(sup.bundles[k], sup.weights[k]):
            key = "".join(str(int(x)) for x in b)
            merged[key] = merged.get(key, 0.0) + float(w)
        elements.append({"element": k, "price": float(menu.betas[k]),
                         "support": [{"bundle": b, "weight": w} for b, w in merged.items()],
                         "means": menu.means[k].tolist(),
                         "mixture_weights": softmax(menu.logits[k]).tolist()})
    return {"iteration": int(iteration), "test_revenue": test_revenue(mech, test_set),
            "elements": elements}


def export_snapshots(history, interval, vf, cfg, test_set, out_dir, mode="normalized"):
    """Write one JSON + CSV snapshot per selected iteration.

    ``history`` maps iteration -> Menu (or menu dict). Returns written paths.
    Files: ``{out_dir}/snapshots/{iter}.json`` and ``{iter}.csv``.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    history = {int(i): (m if isinstance(m, Menu) else Menu.from_dict(m))
               for i, m in history.items()}
    if not history:
        return []
    total = max(history)
    wanted = snapshot_iterations(total, interval)
    missing = [i for i in wanted if i not in history]
    if missing:
        raise KeyError(f"no stored menu state for iterations {missing[:5]}")
    out = Path(out_dir) / "snapshots"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for it in wanted:
        snap = menu_snapshot(it, history[it], vf, cfg, test_set, mode)
        jp = out / f"{it}.json"
        jp.write_text(json.dumps(snap, indent=1, sort_keys=True))
        cp = out / f"{it}.csv"
        with open(cp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "element", "bundle", "weight", "price", "test_revenue"])
            for el in snap["elements"]:
                for s in el["support"]:
                    w.writerow([it, el["element"], s["bundle"], repr(s["weight"]),
                                repr(el["price"]), repr(snap["test_revenue"])])
        paths.append(cp)
    return paths


def flow_field_grid(vf: VectorField, cfg: FlowConfig, items=(2, 3), base=0.5, n=11,
                    lo=-0.25, hi=1.25, t=0.0):
    """Field and transport on a 2-D lattice over two items, others fixed at ``base``.

    Rows: (x, y, phi_x, phi_y, sT_x, sT_y).
    """
    i, j = items
    xs = np.linspace(lo, hi, n)
    pts = np.full((n * n, vf.m), base, dtype=np.float64)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts[:, i] = gx.ravel()
    pts[:, j] = gy.ravel()
    Q = q_matrix(vf, pts)
    phi = float(eta(vf, t)) * np.einsum("bij,bj->bi", Q, pts)
    sT = ode_solve(vf, cfg, pts, Q=Q)
    return np.column_stack([pts[:, i], pts[:, j], phi[:, i], phi[:, j], sT[:, i], sT[:, j]])


def write_flow_grid(vf, cfg, path, **kw):
    rows = flow_field_grid(vf, cfg, **kw)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "phi_x", "phi_y", "sT_x", "sT_y"])
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
    return path


# --- ablations -----------------------------------------------------------

SWEEP_PARAMS = ("D", "K")


def ablation_sweep(param, values, base_config, seeds=(0, 1, 2)):
    """Train and evaluate one menu per (value, seed); seeds are shared across values.

    For each seed the dataset and the Stage-1 field are built once and reused
    for every value. Returns rows ``{"value", "revenues", "median"}`` in the
    order of ``values``.
    """
    from dataclasses import replace
    from .config import with_section
    from .menu import MenuTrainer
    from .pipeline import build_dataset
    from .stage1 import Stage1Trainer

    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    values = [int(v) for v in values]
    if not values:
        raise ValueError("values must be nonempty")
    revs = {v: [] for v in values}
    fc = base_config.flow_config()
    for seed in seeds:
        cfg = with_section(base_config, "auction", seed=base_config.auction.seed + seed)
        cfg = with_section(cfg, "stage1", seed=base_config.stage1.seed + seed)
        train, test = build_dataset(cfg)
        vf = Stage1Trainer(cfg.stage1_config(), fc).run()
        for v in values:
            mc = replace(cfg.menu_config(), seed=base_config.menu.seed + seed, eval_interval=0,
                         **{param: v})
            trainer = MenuTrainer(mc, vf, fc, train, None, v_max=cfg.auction.v_max)
            menu = trainer.run()
            revs[v].append(test_revenue(BundleFlowMechanism(menu, vf, fc, mc.reweight), test))
    return [{"value": v, "revenues": revs[v], "median": float(np.median(revs[v]))}
            for v in values]
