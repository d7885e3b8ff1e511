"""Stage 2: menus of mixture-of-Dirac elements pushed through a frozen flow.

Each trainable element k holds a price ``beta_k``, weight logits and D
support points ``mu_kd``. A support point is transported by the flow and
rounded to a bundle; its weight is ``w_kd * exp(-tr Q(mu_kd) * integral(eta))``.
In ``normalized`` mode the weights are renormalized per element (a proper
lottery), in ``literal`` mode they are used as is.

The null element (empty allocation, zero price) sits at the last index, so a
bidder indifferent between buying and walking away buys.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flow import (FlowConfig, NumericOverflowError, VectorField, eta_integral, ode_solve,
                   ode_solve_vjp, round_bundle)
from .nn import Adam
from .stage1 import TrainingError
from .valuations import PackedValuations, XorValuation, evaluate, expected_value, pack

REWEIGHT_MODES = ("normalized", "literal")


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class DiracMixture:
    logits: np.ndarray  # (D,)
    means: np.ndarray   # (D, m)

    @property
    def D(self):
        return self.logits.shape[0]

    @property
    def weights(self):
        return softmax(self.logits)


@dataclass
class MenuElement:
    beta: float
    mixture: Optional[DiracMixture]

    @property
    def is_null(self):
        return self.mixture is None


NULL_ELEMENT = MenuElement(0.0, None)


class Menu:
    """K trainable elements plus the null element at index K."""

    def __init__(self, betas, logits, means):
        self.betas = np.array(betas, dtype=np.float64)
        self.logits = np.array(logits, dtype=np.float64)
        self.means = np.array(means, dtype=np.float64)
        K = self.betas.shape[0]
        if self.logits.shape[0] != K or self.means.shape[:2] != self.logits.shape:
            raise ValueError("betas (K,), logits (K, D), means (K, D, m) must agree")
        if not (np.isfinite(self.betas).all() and np.isfinite(self.means).all()):
            raise ValueError("menu parameters must be finite")

    @classmethod
    def init(cls, K, D, m, v_max, rng, price_frac=0.1):
        return cls(rng.uniform(0.0, price_frac * v_max, K), np.zeros((K, D)),
                   rng.uniform(0.0, 1.0, (K, D, m)))

    @property
    def K(self):
        return self.betas.shape[0]

    @property
    def D(self):
        return self.logits.shape[1]

    @property
    def m(self):
        return self.means.shape[2]

    @property
    def null_index(self):
        return self.K

    @property
    def size(self):
        return self.K + 1

    @property
    def prices(self):
        return np.append(self.betas, 0.0)

    @property
    def params(self):
        return [self.betas, self.logits, self.means]

    def element(self, k):
        if k == self.null_index:
            return NULL_ELEMENT
        return MenuElement(float(self.betas[k]),
                           DiracMixture(self.logits[k].copy(), self.means[k].copy()))

    @property
    def elements(self):
        return [self.element(k) for k in range(self.size)]

    def copy(self):
        return Menu(self.betas.copy(), self.logits.copy(), self.means.copy())

    def to_dict(self):
        return {"K": self.K, "D": self.D, "m": self.m, "betas": self.betas.tolist(),
                "logits": self.logits.tolist(), "means": self.means.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["betas"], d["logits"], d["means"])


# --- supports ------------------------------------------------------------

@dataclass
class Support:
    """Transported support of every element: bundles (K, D, m), weights (K, D)."""
    bundles: np.ndarray
    weights: np.ndarray
    traces: np.ndarray
    eta_int: float
    s_T: np.ndarray


def _check_mode(mode):
    if mode not in REWEIGHT_MODES:
        raise ValueError(f"unknown reweight mode {mode!r}; expected {REWEIGHT_MODES}")


def liouville_weights(logits, traces, eta_int, mode="normalized"):
    """Effective weights per support point, (K, D)."""
    _check_mode(mode)
    expo = -traces * eta_int
    if mode == "normalized":
        return softmax(logits + expo, axis=-1)
    fac = np.exp(expo)
    if not np.isfinite(fac).all():
        k, d = np.argwhere(~np.isfinite(fac))[0]
        raise NumericOverflowError(f"non-finite Liouville factor for element {k}, d={d}")
    return softmax(logits, axis=-1) * fac


def compute_support(logits, means, vf: VectorField, cfg: FlowConfig, mode="normalized",
                    bundles=None):
    K, D, m = means.shape
    pts = means.reshape(K * D, m)
    Q = vf.qnet.forward(pts).reshape(K * D, m, m)
    traces = np.trace(Q, axis1=1, axis2=2).reshape(K, D)
    I = eta_integral(vf, cfg)
    s_T = ode_solve(vf, cfg, pts, Q=Q).reshape(K, D, m)
    if bundles is None:
        bundles = round_bundle(s_T)
    return Support(np.asarray(bundles, dtype=np.uint8), liouville_weights(logits, traces, I, mode),
                   traces, I, s_T)


def menu_support(menu: Menu, vf, cfg, mode="normalized"):
    return compute_support(menu.logits, menu.means, vf, cfg, mode)


def element_support(elem: MenuElement, vf: VectorField, cfg: FlowConfig, mode="normalized"):
    """List of (bundle, weight) with duplicate bundles merged, first-seen order."""
    if elem.is_null:
        return []
    mix = elem.mixture
    if mix.means.shape[1] != vf.m:
        raise ValueError(f"element has m={mix.means.shape[1]}, field has m={vf.m}")
    sup = compute_support(mix.logits[None], mix.means[None], vf, cfg, mode)
    merged = {}
    for b, w in zip(sup.bundles[0], sup.weights[0]):
        key = b.tobytes()
        if key in merged:
            merged[key] = (merged[key][0], merged[key][1] + w)
        else:
            merged[key] = (b.copy(), float(w))
    return list(merged.values())


def element_value(elem: MenuElement, v: XorValuation, vf, cfg, mode="normalized"):
    if elem.is_null:
        return 0.0
    return expected_value(v, element_support(elem, vf, cfg, mode))


# --- utilities and selection ---------------------------------------------

@dataclass
class UtilityVector:
    values: np.ndarray     # (n, K+1) or (K+1,)
    utilities: np.ndarray
    null_index: int


def _as_packed(v, m):
    if isinstance(v, PackedValuations):
        return v
    if isinstance(v, XorValuation):
        return pack([v], m)
    if hasattr(v, "packed"):
        return v.packed
    return pack(list(v), m)


def support_values(packed: PackedValuations, support: Support):
    """Values of every valuation on every support bundle, (n, K, D)."""
    K, D, m = support.bundles.shape
    return packed.values_unique(support.bundles.reshape(K * D, m)).reshape(-1, K, D)


def utilities(menu: Menu, v, vf: VectorField, cfg: FlowConfig, mode="normalized",
              support: Optional[Support] = None) -> UtilityVector:
    """Expected value minus price for every element; null column is exactly 0.

    ``v`` may be one valuation (1-D result) or a batch (2-D result).
    """
    single = isinstance(v, XorValuation)
    packed = _as_packed(v, menu.m)
    support = support if support is not None else menu_support(menu, vf, cfg, mode)
    vals = (support_values(packed, support) * support.weights[None]).sum(axis=-1)
    values = np.concatenate([vals, np.zeros((vals.shape[0], 1))], axis=1)
    utils = values - menu.prices[None, :]
    utils[:, menu.null_index] = 0.0
    if single:
        return UtilityVector(values[0], utils[0], menu.null_index)
    return UtilityVector(values, utils, menu.null_index)


def soft_select(utilvec, lam):
    """Softmax of ``lam * utilities`` along the element axis."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    u = utilvec.utilities if isinstance(utilvec, UtilityVector) else np.asarray(utilvec)
    return softmax(lam * u, axis=-1)


@dataclass
class SelectionResult:
    soft: Optional[np.ndarray]
    hard: object          # int or (n,) int array
    payment: object


def hard_select(utilvec, prices=None, lam=None):
    """Argmax utility, ties to the lowest index."""
    u = utilvec.utilities if isinstance(utilvec, UtilityVector) else np.asarray(utilvec)
    k = np.argmax(u, axis=-1)
    pay = None
    if prices is not None:
        pay = np.asarray(prices)[k]
        pay = float(pay) if np.ndim(pay) == 0 else pay
    soft = soft_select(u, lam) if lam is not None else None
    return SelectionResult(soft, int(k) if np.ndim(k) == 0 else k, pay)


def menu_payment(menu: Menu, bid, vf, cfg, mode="normalized"):
    uv = utilities(menu, bid, vf, cfg, mode)
    sel = hard_select(uv, menu.prices)
    return sel.hard, sel.payment


# --- revenue loss --------------------------------------------------------

def soft_revenue(util, prices, lam):
    """Soft revenue loss and its gradients.

    ``util`` is (n, K') including the null column; ``prices`` (K',).
    Returns ``(loss, dL/dutil, dL/dprices_direct)`` where the price gradient
    covers only the explicit price factor.
    """
    n = util.shape[0]
    z = softmax(lam * util, axis=-1)
    loss = -float((z @ prices).sum() / n)
    gz = -np.broadcast_to(prices, z.shape) / n
    gu = lam * z * (gz - (z * gz).sum(axis=-1, keepdims=True))
    gp = -z.sum(axis=0) / n
    return loss, gu, gp


def lambda_at(iteration, iterations, start=0.001, end=0.2):
    """Linear schedule over 0-based iterations."""
    if iterations <= 1:
        return end
    frac = min(1.0, iteration / (iterations - 1))
    return start + (end - start) * frac


def revenue_loss(menu: Menu, batch, vf, cfg, lam, mode="normalized", grad=False,
                 bundles=None, straight_through=False):
    """Negative mean soft-selected price over ``batch``.

    ``bundles`` (K, D, m) pins the rounded bundles, e.g. for finite-difference
    checks. With ``grad=True`` returns ``(loss, [d_betas, d_logits, d_means])``;
    no gradient passes through the rounding unless ``straight_through``.
    """
    _check_mode(mode)
    K, D, m = menu.means.shape
    packed = _as_packed(batch, m)
    if len(packed) == 0:
        raise ValueError("empty batch")
    pts = menu.means.reshape(K * D, m)
    qflat, qcache = vf.qnet.forward_cache(pts)
    Q = qflat.reshape(K * D, m, m)
    traces = np.trace(Q, axis1=1, axis2=2).reshape(K, D)
    I = eta_integral(vf, cfg)
    if bundles is None:
        bundles = round_bundle(ode_solve(vf, cfg, pts, Q=Q)).reshape(K, D, m)
    bundles = np.asarray(bundles, dtype=np.uint8)
    eff = liouville_weights(menu.logits, traces, I, mode)
    vals = packed.values_unique(bundles.reshape(K * D, m)).reshape(-1, K, D)
    u = (vals * eff[None]).sum(-1) - menu.betas[None]
    util = np.concatenate([u, np.zeros((u.shape[0], 1))], axis=1)
    loss, gu, gp = soft_revenue(util, menu.prices, lam)
    if not grad:
        return loss
    gu = gu[:, :K]
    d_betas = gp[:K] - gu.sum(axis=0)
    g_eff = np.einsum("nk,nkd->kd", gu, vals)
    if mode == "normalized":
        g_a = eff * (g_eff - (eff * g_eff).sum(-1, keepdims=True))
        d_logits = g_a
        g_tr = -I * g_a
    else:
        w = softmax(menu.logits, axis=-1)
        g_w = g_eff * np.exp(-traces * I)
        d_logits = w * (g_w - (w * g_w).sum(-1, keepdims=True))
        g_tr = -I * g_eff * eff
    up = np.zeros((K * D, m, m))
    idx = np.arange(m)
    up[:, idx, idx] = g_tr.reshape(K * D, 1)
    _, d_pts = vf.qnet.backward_cache(qcache, up.reshape(K * D, m * m))
    d_means = d_pts.reshape(K, D, m)
    if straight_through:
        g_val = gu[:, :, None] * eff[None]                      # (n, K, D)
        g_s = _value_slopes(packed, bundles, g_val)             # (K, D, m)
        d_means = d_means + ode_solve_vjp(vf, cfg, pts, g_s.reshape(K * D, m)).reshape(K, D, m)
    return loss, [d_betas, d_logits, d_means]


def _value_slopes(packed, bundles, g_val):
    """Sum over valuations of g * (v(b + i) - v(b - i)) for each item i."""
    K, D, m = bundles.shape
    flat = bundles.reshape(K * D, m)
    on = np.repeat(flat[:, None, :], m, axis=1)
    off = on.copy()
    idx = np.arange(m)
    on[:, idx, idx] = 1
    off[:, idx, idx] = 0
    v_on = packed.values_unique(on.reshape(-1, m)).reshape(-1, K * D, m)
    v_off = packed.values_unique(off.reshape(-1, m)).reshape(-1, K * D, m)
    return np.einsum("np,npi->pi", g_val.reshape(-1, K * D), v_on - v_off).reshape(K, D, m)


# --- training ------------------------------------------------------------

@dataclass(frozen=True)
class MenuConfig:
    K: int = 32
    D: int = 8
    lr: float = 0.3
    means_lr: Optional[float] = 0.0   # None: same as lr
    iterations: int = 2000
    batch_size: int = 256
    lambda_start: float = 0.001
    lambda_end: float = 0.2
    reweight: str = "normalized"
    straight_through: bool = False
    seed: int = 0
    eval_interval: int = 100
    init_price_frac: float = 0.1

    def __post_init__(self):
        if self.K < 1 or self.D < 1:
            raise ValueError("K and D must be >= 1")
        _check_mode(self.reweight)

    @staticmethod
    def default_K(m):
        """Full-scale menu size; desk-scale runs use far smaller K."""
        return 5000 if m <= 100 else 20000


@dataclass
class MenuState:
    menu: Menu
    opt: Adam
    rng_state: dict
    iteration: int = 0
    log: list = field(default_factory=list)   # (iteration, loss, lambda, test_rev|None, wall_ms)


class BundleFlowMechanism:
    """Hard-argmax mechanism over a trained menu; utilities are exact."""
    name = "bundleflow"
    exact = True

    def __init__(self, menu: Menu, vf: VectorField, flow_cfg: FlowConfig, mode="normalized"):
        self.menu, self.vf, self.flow_cfg, self.mode = menu, vf, flow_cfg, mode
        self._support = menu_support(menu, vf, flow_cfg, mode)

    @property
    def prices(self):
        return self.menu.prices

    @property
    def null_index(self):
        return self.menu.null_index

    def utilities(self, packed):
        return utilities(self.menu, packed, self.vf, self.flow_cfg, self.mode,
                         self._support).utilities

    true_utilities = utilities

    def supports(self):
        return self._support


class MenuTrainer:
    """Resumable Adam loop on (betas, logits, means); the field stays frozen."""

    def __init__(self, cfg: MenuConfig, vf: VectorField, flow_cfg: FlowConfig, train, test=None,
                 v_max=None, state: Optional[MenuState] = None):
        self.cfg, self.vf, self.flow_cfg = cfg, vf, flow_cfg
        self.train = train.packed if hasattr(train, "packed") else train
        self.test = test
        if state is None:
            if v_max is None:
                v_max = train.config.v_max
            rng = np.random.default_rng([cfg.seed, 11])
            menu = Menu.init(cfg.K, cfg.D, vf.m, v_max, rng, cfg.init_price_frac)
            mu_scale = 1.0 if cfg.means_lr is None else cfg.means_lr / cfg.lr
            state = MenuState(menu, Adam.for_params(menu.params, lr=cfg.lr,
                                                    lr_scales=[1.0, 1.0, mu_scale]),
                              np.random.default_rng([cfg.seed, 12]).bit_generator.state)
        self.state = state
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = state.rng_state

    def batch(self):
        n = len(self.train)
        if self.cfg.batch_size >= n:
            return self.train
        return self.train.subset(self._rng.choice(n, self.cfg.batch_size, replace=False))

    def test_revenue(self):
        from .evaluation import test_revenue
        mech = BundleFlowMechanism(self.state.menu, self.vf, self.flow_cfg, self.cfg.reweight)
        return test_revenue(mech, self.test)

    def run(self, iterations=None, callback=None):
        cfg, st = self.cfg, self.state
        target = cfg.iterations if iterations is None else iterations
        while st.iteration < target:
            t0 = time.perf_counter()
            lam = lambda_at(st.iteration, cfg.iterations, cfg.lambda_start, cfg.lambda_end)
            loss, grads = revenue_loss(st.menu, self.batch(), self.vf, self.flow_cfg, lam,
                                       cfg.reweight, grad=True,
                                       straight_through=cfg.straight_through)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingError("non-finite revenue loss", st.iteration + 1)
            st.opt.step(st.menu.params, grads)
            st.iteration += 1
            rev = None
            if self.test is not None and cfg.eval_interval and (
                    st.iteration % cfg.eval_interval == 0 or st.iteration == cfg.iterations):
                rev = self.test_revenue()
            st.log.append((st.iteration, loss, lam, rev, (time.perf_counter() - t0) * 1e3))
            if callback is not None:
                callback(st)
        st.rng_state = self._rng.bit_generator.state
        return st.menu

    def to_dict(self):
        st = self.state
        st.rng_state = self._rng.bit_generator.state
        return {"menu": st.menu.to_dict(), "optimizer": st.opt.to_dict(),
                "rng_state": st.rng_state, "iteration": st.iteration,
                "log": [[i, l, lam, r] for i, l, lam, r, _ in st.log]}

    @classmethod
    def from_dict(cls, cfg, vf, flow_cfg, train, test, d):
        state = MenuState(Menu.from_dict(d["menu"]), Adam.from_dict(d["optimizer"]),
                          d["rng_state"], int(d["iteration"]),
                          [(int(i), float(l), float(lam), r, 0.0) for i, l, lam, r in d["log"]])
        return cls(cfg, vf, flow_cfg, train, test, state=state)


def train_menu(cfg: MenuConfig, vf: VectorField, flow_cfg: FlowConfig, train, test=None,
               callback=None):
    """Train a menu against a frozen field; returns ``(menu, log)``."""
    trainer = MenuTrainer(cfg, vf, flow_cfg, train, test)
    menu = trainer.run(callback=callback)
    return menu, trainer.state.log
