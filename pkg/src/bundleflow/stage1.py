"""Stage 1: fit the vector field with a rectified-flow objective.

Initial points come from a fixed Gaussian mixture; each target is the point
rounded to the nearest bundle plus small Gaussian jitter, so the 2^m-component
target mixture is never enumerated.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .flow import FlowConfig, VectorField, q_hidden_sizes, round_bundle, transport_bundles
from .nn import Adam


class TrainingError(RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class Stage1Config:
    weights: tuple
    means: tuple          # D rows of length m
    sigmas: tuple
    sigma_z: float = 0.05
    batch_size: int = 128
    iterations: int = 10_000
    lr: float = 5e-3
    seed: int = 0
    num_samples: int = 20_000
    q_width: int = 128
    q_depth: int = 3
    eta_width: int = 128
    eta_depth: int = 2

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if len(self.means) != len(w) or len(self.sigmas) != len(w):
            raise ValueError("weights, means and sigmas must have the same length")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("component stdevs must be positive")
        if self.sigma_z <= 0:
            raise ValueError("sigma_z must be positive")

    @property
    def m(self):
        return len(self.means[0])

    @property
    def D(self):
        return len(self.weights)

    @classmethod
    def default(cls, m, seed=0, D=8, sigma=0.3, **kw):
        """Equal-weight mixture with means drawn uniformly in the unit cube."""
        rng = np.random.default_rng([seed, 7])
        means = rng.uniform(0.0, 1.0, (D, m))
        return cls(weights=tuple([1.0 / D] * D),
                   means=tuple(tuple(float(x) for x in row) for row in means),
                   sigmas=tuple([float(sigma)] * D), seed=seed, **kw)

    def make_field(self, rng=None):
        rng = rng if rng is not None else np.random.default_rng([self.seed, 1])
        q_hidden = q_hidden_sizes(self.m, self.q_width, self.q_depth)
        return VectorField.create(self.m, rng, q_hidden, [self.eta_width] * self.eta_depth)


def sample_initial(cfg: Stage1Config, rng, n):
    comp = rng.choice(cfg.D, size=n, p=np.asarray(cfg.weights))
    means = np.asarray(cfg.means)[comp]
    sig = np.asarray(cfg.sigmas)[comp][:, None]
    return means + sig * rng.standard_normal((n, cfg.m))


@dataclass
class PairBatch:
    s0: np.ndarray
    sT: np.ndarray
    t: np.ndarray
    st: np.ndarray

    def __len__(self):
        return self.s0.shape[0]


def make_pairs(s0, sigma_z, rng, T=1.0, t=None):
    s0 = np.atleast_2d(np.asarray(s0, dtype=np.float64))
    target = round_bundle(s0).astype(np.float64)
    sT = target + sigma_z * rng.standard_normal(s0.shape)
    if t is None:
        t = rng.uniform(0.0, T, s0.shape[0])
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (s0.shape[0],)).copy()
    st = t[:, None] / T * sT + (1.0 - t[:, None] / T) * s0
    return PairBatch(s0, sT, t, st)


def sample_training_pair(cfg: Stage1Config, rng, n=1, T=1.0):
    """Draw ``n`` (s0, sT, t, st) tuples as a :class:`PairBatch`."""
    return make_pairs(sample_initial(cfg, rng, n), cfg.sigma_z, rng, T)


def flow_loss(vf: VectorField, batch: PairBatch, grad=False):
    """Mean over the batch of ||(sT - s0) - phi(t, st)||^2.

    With ``grad=True`` returns ``(loss, grads)`` aligned with ``vf.params``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    B, m = batch.s0.shape
    qflat, qcache = vf.qnet.forward_cache(batch.s0)
    Q = qflat.reshape(B, m, m)
    e, ecache = vf.etanet.forward_cache(batch.t[:, None])
    e = e[:, 0]
    Qs = np.einsum("bij,bj->bi", Q, batch.st)
    r = (batch.sT - batch.s0) - e[:, None] * Qs
    loss = float((r * r).sum() / B)
    if not grad:
        return loss
    G = -2.0 * r / B
    g_eta = (G * Qs).sum(axis=1)[:, None]
    g_Q = e[:, None, None] * G[:, :, None] * batch.st[:, None, :]
    qgrads, _ = vf.qnet.backward_cache(qcache, g_Q.reshape(B, m * m), need_input=False)
    egrads, _ = vf.etanet.backward_cache(ecache, g_eta, need_input=False)
    return loss, qgrads + egrads


@dataclass
class Stage1State:
    vf: VectorField
    opt: Adam
    rng_state: dict
    iteration: int = 0
    log: list = field(default_factory=list)   # (iteration, loss, wall_ms)


class Stage1Trainer:
    """Resumable Adam loop over the flow loss."""

    def __init__(self, cfg: Stage1Config, flow_cfg: FlowConfig = FlowConfig(),
                 state: Optional[Stage1State] = None):
        self.cfg = cfg
        self.flow_cfg = flow_cfg
        self.pool = sample_initial(cfg, np.random.default_rng([cfg.seed, 0]), cfg.num_samples)
        if state is None:
            vf = cfg.make_field()
            state = Stage1State(vf, Adam.for_params(vf.params, lr=cfg.lr),
                                np.random.default_rng([cfg.seed, 2]).bit_generator.state)
        self.state = state
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = state.rng_state

    def next_batch(self):
        idx = self._rng.integers(0, self.pool.shape[0], self.cfg.batch_size)
        return make_pairs(self.pool[idx], self.cfg.sigma_z, self._rng, self.flow_cfg.T)

    def run(self, iterations=None, callback=None):
        target = self.cfg.iterations if iterations is None else iterations
        st = self.state
        while st.iteration < target:
            t0 = time.perf_counter()
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = flow_loss(st.vf, self.next_batch(), grad=True)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingError("non-finite flow loss", st.iteration + 1)
            st.opt.step(st.vf.params, grads)
            st.iteration += 1
            st.log.append((st.iteration, loss, (time.perf_counter() - t0) * 1e3))
            if callback is not None:
                callback(st)
        st.rng_state = self._rng.bit_generator.state
        return st.vf

    def to_dict(self):
        st = self.state
        st.rng_state = self._rng.bit_generator.state
        return {"vector_field": st.vf.to_dict(), "optimizer": st.opt.to_dict(),
                "rng_state": st.rng_state, "iteration": st.iteration,
                "log": [[i, l] for i, l, _ in st.log]}

    @classmethod
    def from_dict(cls, cfg, flow_cfg, d):
        state = Stage1State(VectorField.from_dict(d["vector_field"]),
                            Adam.from_dict(d["optimizer"]), d["rng_state"], int(d["iteration"]),
                            [(int(i), float(l), 0.0) for i, l in d.get("log", [])])
        return cls(cfg, flow_cfg, state)


def train_flow(cfg: Stage1Config, flow_cfg: FlowConfig = FlowConfig(), callback=None):
    """Train a fresh vector field; returns ``(vf, log)``."""
    trainer = Stage1Trainer(cfg, flow_cfg)
    vf = trainer.run(callback=callback)
    return vf, trainer.state.log


@dataclass
class CoverageReport:
    fraction: float
    reached: int
    total: int
    histogram: dict   # bundle string "0101..." -> count
    probe_count: int


def coverage_report(vf: VectorField, cfg: Stage1Config, flow_cfg: FlowConfig = FlowConfig(),
                    probe_count=10_000, seed=0, probes=None, max_m=20):
    """Fraction of the 2^m bundles reached by transporting mixture samples."""
    m = vf.m
    if m > max_m:
        raise ValueError(f"m={m} too large to enumerate 2^m bundles (limit {max_m}); "
                         "sample bundle statistics instead")
    if probes is None:
        probes = sample_initial(cfg, np.random.default_rng([seed, 3]), probe_count)
    probes = np.atleast_2d(probes)
    bundles = transport_bundles(vf, flow_cfg, probes)
    keys, counts = np.unique(bundles, axis=0, return_counts=True)
    hist = {"".join(str(int(x)) for x in k): int(c) for k, c in zip(keys, counts)}
    total = 2 ** m
    return CoverageReport(len(hist) / total, len(hist), total, hist, probes.shape[0])


def with_iterations(cfg: Stage1Config, iterations):
    return replace(cfg, iterations=iterations)
