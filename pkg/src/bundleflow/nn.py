"""Small dense tanh networks with hand-written reverse mode, plus Adam.

Everything is float64. A network maps (B, in) -> (B, out); hidden layers use
tanh and the output layer is affine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    pass


class DenseNet:
    def __init__(self, sizes, rng=None, weights=None):
        """``sizes`` = [in, hidden..., out]. ``weights`` overrides the init."""
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if weights is not None:
            self.layers = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64))
                           for W, b in weights]
            for (W, b), n_in, n_out in zip(self.layers, self.sizes[:-1], self.sizes[1:]):
                if W.shape != (n_in, n_out) or b.shape != (n_out,):
                    raise DimensionError(f"layer shape {W.shape}/{b.shape} != ({n_in},{n_out})")
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            self.layers.append((rng.uniform(-bound, bound, (n_in, n_out)), np.zeros(n_out)))

    @classmethod
    def zeros(cls, sizes):
        return cls(sizes, weights=[(np.zeros((a, b)), np.zeros(b))
                                   for a, b in zip(sizes[:-1], sizes[1:])])

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        return self.sizes[-1]

    @property
    def params(self):
        """Flat list [W0, b0, W1, b1, ...]; arrays are live views."""
        return [p for layer in self.layers for p in layer]

    def set_params(self, params):
        it = iter(params)
        self.layers = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64))
                       for W, b in zip(it, it)]

    def copy(self):
        return DenseNet(self.sizes, weights=[(W.copy(), b.copy()) for W, b in self.layers])

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(f"input shape {x.shape}, expected (..., {self.input_dim})")
        return X, single

    def forward(self, x):
        X, single = self._as_batch(x)
        h = X
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
        return h[0] if single else h

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass keeping layer inputs for :meth:`backward_cache`."""
        X, single = self._as_batch(x)
        acts = [X]
        h = X
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        out = acts[-1]
        return (out[0] if single else out), (acts, single)

    def backward_cache(self, cache, upstream, need_input=True):
        """Vector-Jacobian products, summed over the batch.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned with
        :attr:`params`.
        """
        acts, single = cache
        G = np.asarray(upstream, dtype=np.float64)
        G = G[None, :] if single else G
        if G.shape != acts[-1].shape:
            raise DimensionError(f"upstream shape {G.shape}, expected {acts[-1].shape}")
        grads = [None] * (2 * len(self.layers))
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            W, _ = self.layers[i]
            if i < last:
                G = G * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ G
            grads[2 * i + 1] = G.sum(axis=0)
            if i > 0 or need_input:
                G = G @ W.T
        gin = None
        if need_input:
            gin = G[0] if single else G
        return grads, gin

    def backward(self, x, upstream):
        _, cache = self.forward_cache(x)
        return self.backward_cache(cache, upstream)

    def to_dict(self):
        return {"sizes": self.sizes,
                "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["sizes"], weights=[(l["W"], l["b"]) for l in d["layers"]])

    def operator_norm_bound(self):
        return float(np.prod([np.linalg.norm(W, 2) for W, _ in self.layers]))


def forward(net: DenseNet, x):
    return net.forward(x)


def backward(net: DenseNet, x, upstream):
    return net.backward(x, upstream)


class Adam:
    """Bias-corrected Adam over a list of arrays, updated in place."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step_count = 0

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.shape(p) for p in params], **kw)

    def step(self, params, grads):
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise DimensionError("parameter/gradient list length mismatch")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v, scale in zip(params, grads, self.m, self.v, self.lr_scales):
            if np.shape(p) != m.shape or np.shape(g) != m.shape:
                raise DimensionError(f"shape mismatch {np.shape(p)} / {np.shape(g)} vs {m.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * scale) * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def to_dict(self):
        return {"lr": self.lr, "lr_scales": self.lr_scales, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step_count,
                "m": [x.tolist() for x in self.m], "v": [x.tolist() for x in self.v]}

    @classmethod
    def from_dict(cls, d):
        opt = cls([np.shape(x) for x in d["m"]], d["lr"], d["beta1"], d["beta2"], d["eps"],
                  d.get("lr_scales"))
        opt.m = [np.array(x, dtype=np.float64) for x in d["m"]]
        opt.v = [np.array(x, dtype=np.float64) for x in d["v"]]
        opt.step_count = int(d["step"])
        return opt


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple  # (param index, flat index)
    analytic: float
    numeric: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def finite_diff_check(loss_fn, params, tolerance=1e-4, h=1e-5, floor=1e-6, max_entries=None,
                      rng=None):
    """Compare analytic gradients against central differences.

    ``loss_fn(params) -> (loss, grads)``; ``params`` is a list of arrays that
    is perturbed in place and restored. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` subsamples large arrays.
    """
    _, grads = loss_fn(params)
    grads = [np.array(g, dtype=np.float64) for g in grads]
    worst = (0.0, (0, 0), 0.0, 0.0)
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            lp, _ = loss_fn(params)
            flat[j] = orig - h
            lm, _ = loss_fn(params)
            flat[j] = orig
            num = (lp - lm) / (2 * h)
            ana = grads[pi].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst[0]:
                worst = (err, (pi, int(j)), float(ana), float(num))
    return GradCheckReport(worst[0], worst[1], worst[2], worst[3], tolerance)
