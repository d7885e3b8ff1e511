"""Comparison mechanisms: Grand-Bundle, Big-Bundle, Small-Bundle, Bundle-RochetNet."""
from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .menu import lambda_at, soft_revenue
from .nn import Adam
from .stage1 import TrainingError
from .valuations import AuctionConfig, PackedValuations, XorValuation, evaluate, grand_bundle, pack


def _packed(ds):
    if isinstance(ds, PackedValuations):
        return ds
    if isinstance(ds, XorValuation):
        return pack([ds])
    return ds.packed if hasattr(ds, "packed") else pack(list(ds))


# --- fixed allocations ---------------------------------------------------

class FixedAllocationMenu:
    """Menu with frozen deterministic bundles and trainable prices.

    ``include_null=False`` drops the null element (a negative control for IR
    checks; never used for real mechanisms).
    """
    exact = True

    def __init__(self, allocations, prices=None, name="fixed", include_null=True):
        self.allocations = np.array(allocations, dtype=np.uint8)
        self.allocations.setflags(write=False)
        K = self.allocations.shape[0]
        self.betas = np.zeros(K) if prices is None else np.array(prices, dtype=np.float64)
        self.name = name
        self.include_null = include_null

    @property
    def K(self):
        return self.allocations.shape[0]

    @property
    def m(self):
        return self.allocations.shape[1]

    @property
    def null_index(self):
        return self.K if self.include_null else None

    @property
    def prices(self):
        return np.append(self.betas, 0.0) if self.include_null else self.betas.copy()

    def values(self, packed):
        return _packed(packed).values(self.allocations)

    def utilities(self, packed):
        u = self.values(packed) - self.betas[None, :]
        if self.include_null:
            u = np.concatenate([u, np.zeros((u.shape[0], 1))], axis=1)
        return u

    true_utilities = utilities

    def to_dict(self):
        return {"name": self.name, "allocations": self.allocations.tolist(),
                "betas": self.betas.tolist(), "include_null": self.include_null}

    @classmethod
    def from_dict(cls, d):
        return cls(d["allocations"], d["betas"], d["name"], d.get("include_null", True))


def grand_bundle_search(train_set, test_set):
    """Best posted price for the grand bundle on the training sample.

    Candidates are the distinct training grand-bundle values; the revenue of
    price p is p times the number of values >= p. Returns
    ``(price, train_revenue, test_revenue)`` with revenues as means.
    """
    train = _packed(train_set)
    test = _packed(test_set)
    m = train.m
    gv = train.values(grand_bundle(m)[None])[:, 0]
    if gv.size == 0:
        raise ValueError("empty training set")
    cands = np.unique(gv)
    sold = (gv[None, :] >= cands[:, None]).sum(axis=1)
    rev = cands * sold
    best = int(np.argmax(rev))
    price = float(cands[best])
    tv = test.values(grand_bundle(m)[None])[:, 0]
    test_rev = float(np.where(tv >= price, price, 0.0).mean()) if tv.size else 0.0
    return price, float(rev[best] / gv.size), test_rev


def grand_bundle_menu(m, price):
    return FixedAllocationMenu(grand_bundle(m)[None], [price], "grand")


def _bundles_of_size(m, k):
    out = np.zeros((math.comb(m, k), m), dtype=np.uint8)
    for i, c in enumerate(itertools.combinations(range(m), k)):
        out[i, list(c)] = 1
    return out


def _size_class_menu(m, K, order, rng):
    total = 2 ** m
    if K > total:
        warnings.warn(f"K={K} exceeds 2^m={total}; truncating", stacklevel=3)
        K = total
    chosen = [grand_bundle(m)]
    for size in order:
        if len(chosen) >= K:
            break
        if size == m:
            continue
        need = K - len(chosen)
        n_class = math.comb(m, size)
        if n_class <= need:
            chosen.extend(_bundles_of_size(m, size))
        elif n_class <= 1_000_000:
            cls_bundles = _bundles_of_size(m, size)
            pick = np.sort(rng.choice(n_class, need, replace=False))
            chosen.extend(cls_bundles[pick])
        else:
            # class too large to enumerate: sample distinct subsets directly
            seen = set()
            while len(seen) < need:
                seen.add(tuple(sorted(rng.choice(m, size, replace=False).tolist())))
            for c in sorted(seen):
                b = np.zeros(m, dtype=np.uint8)
                b[list(c)] = 1
                chosen.append(b)
    return np.array(chosen[:K], dtype=np.uint8)


def build_big_bundle_menu(config: AuctionConfig, K, seed=0):
    """Grand bundle, then sizes m-1, m-2, ...; random within the last class."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    allocs = _size_class_menu(config.m, K, range(config.m - 1, -1, -1), rng)
    return FixedAllocationMenu(allocs, name="big")


def build_small_bundle_menu(config: AuctionConfig, K, seed=0):
    """Grand bundle plus sizes 1, 2, ...; random within the last class."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    order = list(range(1, config.m)) + [0]
    allocs = _size_class_menu(config.m, K, order, rng)
    return FixedAllocationMenu(allocs, name="small")


@dataclass(frozen=True)
class PriceSchedule:
    iterations: int = 2000
    lr: float = 0.3
    lambda_start: float = 2.0
    lambda_end: float = 2.0
    batch_size: int = 256
    seed: int = 0


def train_fixed_prices(menu: FixedAllocationMenu, train_set, schedule=PriceSchedule(),
                       log=None):
    """Adam on prices only; allocations are never touched."""
    train = _packed(train_set)
    vals = menu.values(train)
    opt = Adam.for_params([menu.betas], lr=schedule.lr)
    rng = np.random.default_rng([schedule.seed, 21])
    n = vals.shape[0]
    for it in range(schedule.iterations):
        lam = lambda_at(it, schedule.iterations, schedule.lambda_start, schedule.lambda_end)
        v = vals if schedule.batch_size >= n else vals[rng.choice(n, schedule.batch_size,
                                                                   replace=False)]
        u = np.concatenate([v - menu.betas[None], np.zeros((v.shape[0], 1))], axis=1)
        loss, gu, gp = soft_revenue(u, np.append(menu.betas, 0.0), lam)
        if not np.isfinite(loss):
            raise TrainingError("non-finite revenue loss", it + 1)
        g = gp[:-1] - gu[:, :-1].sum(axis=0)
        opt.step([menu.betas], [g])
        if log is not None:
            log.append((it + 1, loss, lam))
    return menu


# --- product distributions -----------------------------------------------

def _all_bundles(m):
    idx = np.arange(2 ** m)
    return ((idx[:, None] >> np.arange(m)[None, :]) & 1).astype(np.uint8)


def product_expected_value(v: XorValuation, item_probs, max_m=20):
    """Exact expectation of v under independent item inclusion (2^m terms)."""
    p = np.asarray(item_probs, dtype=np.float64)
    m = v.m
    if p.shape != (m,):
        raise ValueError(f"item_probs must have shape ({m},)")
    if m > max_m:
        raise ValueError(f"m={m} too large for exact enumeration; use the sampling estimator")
    S = _all_bundles(m)
    probs = np.prod(np.where(S == 1, p[None], 1.0 - p[None]), axis=1)
    vals = pack([v]).values(S)[0]
    return float(probs @ vals)


def product_expected_values(packed: PackedValuations, probs, max_m=20):
    """(n, K) exact expected values for K product distributions (K, m)."""
    m = packed.m
    if m > max_m:
        raise ValueError(f"m={m} too large for exact enumeration")
    S = _all_bundles(m)
    w = np.prod(np.where(S[None] == 1, probs[:, None, :], 1.0 - probs[:, None, :]), axis=2)
    return packed.values(S) @ w.T


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def gumbel_relax(item_logits, tau, rng, shape=()):
    """Binary Gumbel-SoftMax per item.

    Two categories per item with log-probabilities (log p, log(1-p)); the
    relaxed inclusion is ``sigmoid((logit + g1 - g0) / tau)`` and the hard
    sample is its rounding. Returns ``(hard, relaxed)``.
    """
    logits = np.asarray(item_logits, dtype=np.float64)
    full = tuple(shape) + logits.shape
    g1 = rng.gumbel(size=full)
    g0 = rng.gumbel(size=full)
    score = logits + g1 - g0
    relaxed = sigmoid(score / tau)
    hard = (score >= 0).astype(np.uint8)
    return hard, relaxed


@dataclass
class GumbelSample:
    bundle: np.ndarray
    relaxed: np.ndarray
    value: float
    slopes: np.ndarray   # v(b + i) - v(b - i)
    tau: float

    def grad_logits(self, upstream=1.0):
        """Straight-through gradient of the surrogate value w.r.t. item logits."""
        return upstream * self.slopes * self.relaxed * (1.0 - self.relaxed) / self.tau


def gumbel_sample_value(v: XorValuation, item_logits, tau, rng):
    if tau <= 0:
        raise ValueError("tau must be positive")
    hard, relaxed = gumbel_relax(item_logits, tau, rng)
    m = v.m
    on = np.repeat(hard[None], m, axis=0)
    off = on.copy()
    on[np.arange(m), np.arange(m)] = 1
    off[np.arange(m), np.arange(m)] = 0
    slopes = np.array([evaluate(v, a) - evaluate(v, b) for a, b in zip(on, off)])
    return GumbelSample(hard, relaxed, evaluate(v, hard), slopes, tau)


def sampled_values(packed: PackedValuations, item_logits, tau, rng, samples, grad=False):
    """Monte-Carlo values (n, K) of product menus for a batch of valuations.

    With ``grad=True`` also returns straight-through slopes ``d value / d
    logits`` of shape (n, K, m).
    """
    n = len(packed)
    K, m = item_logits.shape
    hard, relaxed = gumbel_relax(item_logits, tau, rng, (n, samples))   # (n, S, K, m)
    flat = hard.reshape(n, samples * K, m)
    vals = packed.values_paired(flat).reshape(n, samples, K)
    est = vals.mean(axis=1)
    if not grad:
        return est
    on = np.repeat(flat[:, :, None, :], m, axis=2)
    off = on.copy()
    idx = np.arange(m)
    on[:, :, idx, idx] = 1
    off[:, :, idx, idx] = 0
    v_on = packed.values_paired(on.reshape(n, -1, m)).reshape(n, samples, K, m)
    v_off = packed.values_paired(off.reshape(n, -1, m)).reshape(n, samples, K, m)
    slope = (v_on - v_off) * relaxed * (1.0 - relaxed) / tau
    return est, slope.mean(axis=1)


class ProductMenu:
    """Bundle-RochetNet menu: per-item inclusion logits per element."""

    name = "rochetnet"

    def __init__(self, item_logits, betas, tau=1.0, samples=8, seed=0, binary_tol=1e-3):
        self.item_logits = np.array(item_logits, dtype=np.float64)
        self.betas = np.array(betas, dtype=np.float64)
        self.tau = tau
        self.samples = samples
        self.seed = seed
        self.binary_tol = binary_tol

    @property
    def K(self):
        return self.betas.shape[0]

    @property
    def m(self):
        return self.item_logits.shape[1]

    @property
    def probs(self):
        return sigmoid(self.item_logits)

    @property
    def null_index(self):
        return self.K

    @property
    def prices(self):
        return np.append(self.betas, 0.0)

    @property
    def is_binary(self):
        p = self.probs
        return bool(np.all(np.minimum(p, 1.0 - p) <= self.binary_tol))

    @property
    def exact(self):
        return self.is_binary

    def rounded(self):
        return (self.probs >= 0.5).astype(np.uint8)

    def utilities(self, packed):
        """Exact on binary menus; Gumbel-sample estimates otherwise."""
        packed = _packed(packed)
        if self.is_binary:
            vals = packed.values(self.rounded())
        else:
            rng = np.random.default_rng([self.seed, 31, len(packed)])
            vals = sampled_values(packed, self.item_logits, self.tau, rng, self.samples)
        u = vals - self.betas[None]
        return np.concatenate([u, np.zeros((u.shape[0], 1))], axis=1)

    def true_utilities(self, packed):
        packed = _packed(packed)
        if self.is_binary:
            vals = packed.values(self.rounded())
        elif packed.m <= 20:
            vals = product_expected_values(packed, self.probs)
        else:
            rng = np.random.default_rng([self.seed, 32])
            vals = sampled_values(packed, self.item_logits, self.tau, rng, 256)
        u = vals - self.betas[None]
        return np.concatenate([u, np.zeros((u.shape[0], 1))], axis=1)

    def to_dict(self):
        return {"name": self.name, "item_logits": self.item_logits.tolist(),
                "betas": self.betas.tolist(), "tau": self.tau, "samples": self.samples,
                "seed": self.seed, "binary_tol": self.binary_tol}

    @classmethod
    def from_dict(cls, d):
        return cls(d["item_logits"], d["betas"], d["tau"], d["samples"], d["seed"],
                   d.get("binary_tol", 1e-3))


@dataclass(frozen=True)
class RochetSchedule:
    iterations: int = 2000
    lr: float = 0.05
    lam: float = 20.0
    tau_start: float = 1.0
    tau_end: float = 0.1
    samples: int = 8
    batch_size: int = 128
    seed: int = 0
    init_price_frac: float = 0.1


@dataclass
class RochetResult:
    menu: ProductMenu
    converged_binary: bool
    log: list = field(default_factory=list)


def train_bundle_rochetnet(config: AuctionConfig, K, train_set, schedule=RochetSchedule()):
    """Revenue training of a product-distribution menu with Gumbel samples.

    The temperature anneals geometrically from ``tau_start`` to ``tau_end``.
    The result reports whether every item probability ended within the
    binary tolerance of 0 or 1, the condition for exact (DSIC) utilities.
    """
    train = _packed(train_set)
    rng = np.random.default_rng([schedule.seed, 41])
    logits = rng.normal(0.0, 1.0, (K, config.m))
    betas = rng.uniform(0.0, schedule.init_price_frac * config.v_max, K)
    opt = Adam.for_params([betas, logits], lr=schedule.lr)
    n = len(train)
    log = []
    iters = schedule.iterations
    for it in range(iters):
        t0 = time.perf_counter()
        frac = it / max(1, iters - 1)
        tau = schedule.tau_start * (schedule.tau_end / schedule.tau_start) ** frac
        batch = train if schedule.batch_size >= n else train.subset(
            rng.choice(n, schedule.batch_size, replace=False))
        vals, slope = sampled_values(batch, logits, tau, rng, schedule.samples, grad=True)
        u = np.concatenate([vals - betas[None], np.zeros((vals.shape[0], 1))], axis=1)
        loss, gu, gp = soft_revenue(u, np.append(betas, 0.0), schedule.lam)
        if not np.isfinite(loss):
            raise TrainingError("non-finite revenue loss", it + 1)
        g_beta = gp[:-1] - gu[:, :-1].sum(axis=0)
        g_logits = np.einsum("nk,nki->ki", gu[:, :-1], slope)
        opt.step([betas, logits], [g_beta, g_logits])
        log.append((it + 1, loss, tau, (time.perf_counter() - t0) * 1e3))
    menu = ProductMenu(logits, betas, tau=schedule.tau_end, samples=schedule.samples,
                       seed=schedule.seed)
    return RochetResult(menu, menu.is_binary, log)
