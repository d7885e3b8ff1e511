"""Structured vector field ``phi(t, s) = eta(t) * Q(s0) @ s`` and its transport.

Because ``Q`` depends only on the starting point ``s0``, the divergence is
``eta(t) * tr Q(s0)`` and the log-density change over ``[0, T]`` is
``-tr Q(s0) * integral(eta)``, a scalar quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DenseNet, DimensionError


class NumericOverflowError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    T: float = 1.0
    euler_steps: int = 8
    eta_grid: int = 33

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")
        if self.eta_grid < 2:
            raise ValueError("eta_grid must be >= 2")


def q_hidden_sizes(m, width=128, depth=3):
    sizes = [width] * depth
    if m > 100:
        sizes[-1] = 256
    return sizes


class VectorField:
    def __init__(self, qnet: DenseNet, etanet: DenseNet):
        m = qnet.input_dim
        if qnet.output_dim != m * m:
            raise DimensionError(f"Q net outputs {qnet.output_dim}, need m*m={m * m}")
        if etanet.input_dim != 1 or etanet.output_dim != 1:
            raise DimensionError("eta net must map R -> R")
        self.qnet = qnet
        self.etanet = etanet

    @classmethod
    def create(cls, m, rng=None, q_hidden=None, eta_hidden=(128, 128)):
        rng = rng if rng is not None else np.random.default_rng(0)
        q_hidden = list(q_hidden) if q_hidden is not None else q_hidden_sizes(m)
        qnet = DenseNet([m, *q_hidden, m * m], rng)
        etanet = DenseNet([1, *eta_hidden, 1], rng)
        return cls(qnet, etanet)

    @property
    def m(self):
        return self.qnet.input_dim

    @property
    def params(self):
        return self.qnet.params + self.etanet.params

    def copy(self):
        return VectorField(self.qnet.copy(), self.etanet.copy())

    def to_dict(self):
        return {"m": self.m, "qnet": self.qnet.to_dict(), "etanet": self.etanet.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(DenseNet.from_dict(d["qnet"]), DenseNet.from_dict(d["etanet"]))


def q_matrix(vf: VectorField, s0):
    """Q(s0) reshaped row-major; (m,) -> (m, m), (B, m) -> (B, m, m)."""
    s0 = np.asarray(s0, dtype=np.float64)
    m = vf.m
    if s0.shape[-1] != m or s0.ndim not in (1, 2):
        raise DimensionError(f"s0 shape {s0.shape}, expected (..., {m})")
    out = vf.qnet.forward(s0)
    return out.reshape(s0.shape[:-1] + (m, m))


def eta(vf: VectorField, t):
    """eta(t) for scalar or 1-D ``t``."""
    t = np.asarray(t, dtype=np.float64)
    out = vf.etanet.forward(t.reshape(-1, 1))[:, 0]
    return out.reshape(t.shape)


def vector_field(vf: VectorField, t, s_t, s0):
    s_t = np.asarray(s_t, dtype=np.float64)
    Q = q_matrix(vf, s0)
    if s_t.shape != Q.shape[:-1]:
        raise DimensionError(f"s_t shape {s_t.shape} does not match Q {Q.shape}")
    return float(eta(vf, t)) * np.einsum("...ij,...j->...i", Q, s_t)


def divergence(vf: VectorField, t, s0):
    Q = q_matrix(vf, s0)
    return float(eta(vf, t)) * np.trace(Q, axis1=-2, axis2=-1)


def eta_integral(vf: VectorField, cfg: FlowConfig, t0=0.0, t1=None):
    """Trapezoidal rule for the integral of eta on ``eta_grid`` uniform nodes."""
    t1 = cfg.T if t1 is None else t1
    ts = np.linspace(t0, t1, cfg.eta_grid)
    ys = eta(vf, ts)
    h = (t1 - t0) / (cfg.eta_grid - 1)
    return float(h * (ys.sum() - 0.5 * (ys[0] + ys[-1])))


def euler_etas(vf: VectorField, cfg: FlowConfig, t0=0.0, t1=None):
    """Left-endpoint eta values and the step size for the Euler grid."""
    t1 = cfg.T if t1 is None else t1
    h = (t1 - t0) / cfg.euler_steps
    ts = t0 + h * np.arange(cfg.euler_steps)
    return eta(vf, ts), h


def ode_solve(vf: VectorField, cfg: FlowConfig, s0, trajectory=False, Q=None, t0=0.0,
              t1=None):
    """Forward Euler ``s <- s + h * eta(t_k) * Q(s0) @ s`` with Q frozen at s0.

    Accepts (m,) or (B, m). Returns ``s_T`` or ``(s_T, traj)`` where ``traj``
    holds the ``euler_steps + 1`` states including ``s0``. ``Q`` may be
    supplied to pin the matrix.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    if s0.shape[-1] != vf.m or s0.ndim not in (1, 2):
        raise DimensionError(f"s0 shape {s0.shape}, expected (..., {vf.m})")
    Q = q_matrix(vf, s0) if Q is None else np.asarray(Q, dtype=np.float64)
    etas, h = euler_etas(vf, cfg, t0, t1)
    s = s0.copy()
    traj = [s.copy()] if trajectory else None
    for k in range(cfg.euler_steps):
        with np.errstate(over="ignore", invalid="ignore"):
            s = s + (h * etas[k]) * np.einsum("...ij,...j->...i", Q, s)
        if not np.isfinite(s).all():
            raise NumericOverflowError(f"non-finite state at Euler step {k + 1}")
        if trajectory:
            traj.append(s.copy())
    if trajectory:
        return s, traj
    return s


def ode_solve_vjp(vf: VectorField, cfg: FlowConfig, s0, upstream):
    """Gradient of ``<upstream, s_T>`` with respect to ``s0``.

    Includes both the direct linear path and the dependence of Q on s0.
    Batched: s0 and upstream are (B, m).
    """
    s0 = np.atleast_2d(np.asarray(s0, dtype=np.float64))
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64)).copy()
    m = vf.m
    qflat, cache = vf.qnet.forward_cache(s0)
    Q = qflat.reshape(-1, m, m)
    _, traj = ode_solve(vf, cfg, s0, trajectory=True, Q=Q)
    etas, h = euler_etas(vf, cfg)
    dQ = np.zeros_like(Q)
    for k in range(cfg.euler_steps - 1, -1, -1):
        c = h * etas[k]
        dQ += c * g[:, :, None] * traj[k][:, None, :]
        g = g + c * np.einsum("bij,bi->bj", Q, g)
    _, gin = vf.qnet.backward_cache(cache, dQ.reshape(-1, m * m))
    return g + gin


def log_density_transport(vf: VectorField, cfg: FlowConfig, log_alpha0, s0, t0=0.0, t1=None):
    """log alpha_T(s_T) = log alpha_0(s0) - tr Q(s0) * integral(eta)."""
    tr = np.trace(q_matrix(vf, s0), axis1=-2, axis2=-1)
    return log_alpha0 - tr * eta_integral(vf, cfg, t0, t1)


def round_bundle(s_T):
    """Entry-wise indicator ``s >= 0.5`` as a uint8 bundle."""
    s_T = np.asarray(s_T, dtype=np.float64)
    if not np.isfinite(s_T).all():
        raise NumericOverflowError("cannot round a non-finite bundle variable")
    return (s_T >= 0.5).astype(np.uint8)


def transport_bundles(vf: VectorField, cfg: FlowConfig, s0):
    """Round the transported points: (B, m) -> (B, m) uint8."""
    return round_bundle(ode_solve(vf, cfg, s0))
