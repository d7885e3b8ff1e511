"""XOR valuations: data model, synthetic generation, CATS import, evaluation.

A valuation is a list of atoms ``(bundle, price)``; the value of a bundle ``S``
is the largest price among atoms whose bundle is contained in ``S`` (0 when
no atom fits).
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CatsParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CatsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AuctionConfig:
    m: int
    v_max: float = 100.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"m must be a positive integer, got {self.m!r}")
        if not self.v_max > 0:
            raise ConfigError(f"v_max must be positive, got {self.v_max!r}")


def as_bundle(bits, m=None) -> np.ndarray:
    """Validate and return a 0/1 uint8 vector."""
    arr = np.asarray(bits)
    if arr.ndim != 1:
        raise DimensionError(f"bundle must be 1-D, got shape {arr.shape}")
    if m is not None and arr.shape[0] != m:
        raise DimensionError(f"bundle has length {arr.shape[0]}, expected {m}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("bundle entries must be 0 or 1")
    return arr.astype(np.uint8)


def grand_bundle(m):
    return np.ones(m, dtype=np.uint8)


class XorAtom(NamedTuple):
    bundle: np.ndarray
    price: float


class XorValuation:
    """An XOR bid. ``bundles`` is (a, m) 0/1, ``prices`` is (a,)."""

    def __init__(self, bundles, prices, v_max=None):
        bundles = np.atleast_2d(np.asarray(bundles, dtype=np.uint8))
        prices = np.asarray(prices, dtype=np.float64).reshape(-1)
        if bundles.shape[0] != prices.shape[0]:
            raise DimensionError("one price per atom bundle required")
        if not np.isin(bundles, (0, 1)).all():
            raise ValueError("atom bundles must be 0/1")
        if (prices < 0).any() or not np.isfinite(prices).all():
            raise ValueError("atom prices must be finite and nonnegative")
        if v_max is not None and (prices > v_max).any():
            raise ValueError(f"atom price exceeds v_max={v_max}")
        empty = bundles.sum(axis=1) == 0
        if (prices[empty] > 0).any():
            raise ValueError("empty-bundle atoms must have price 0")
        self.bundles = bundles
        self.prices = prices

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple], m, v_max=None):
        atoms = list(atoms)
        if not atoms:
            return cls(np.zeros((0, m), np.uint8), np.zeros(0), v_max)
        bundles = np.stack([as_bundle(b, m) for b, _ in atoms])
        return cls(bundles, [p for _, p in atoms], v_max)

    @property
    def m(self):
        return self.bundles.shape[1]

    @property
    def a(self):
        return self.bundles.shape[0]

    @property
    def atoms(self):
        return [XorAtom(b.copy(), float(p)) for b, p in zip(self.bundles, self.prices)]

    def __call__(self, S):
        return evaluate(self, S)

    def __eq__(self, other):
        return (isinstance(other, XorValuation)
                and np.array_equal(self.bundles, other.bundles)
                and np.array_equal(self.prices, other.prices))

    def __repr__(self):
        parts = ", ".join(
            f"({{{','.join(str(i) for i in np.flatnonzero(b))}}}, {p:g})"
            for b, p in zip(self.bundles, self.prices))
        return f"XorValuation(m={self.m}, [{parts}])"

    def to_record(self):
        return {"m": int(self.m),
                "atoms": [{"bundle": [int(x) for x in b], "price": float(p)}
                          for b, p in zip(self.bundles, self.prices)]}

    @classmethod
    def from_record(cls, rec):
        m = int(rec["m"])
        return cls.from_atoms(((a["bundle"], a["price"]) for a in rec["atoms"]), m)


def evaluate(v: XorValuation, S) -> float:
    """Max price over atoms contained in ``S``; 0 when none fits."""
    S = np.asarray(S)
    if S.ndim != 1 or S.shape[0] != v.m:
        raise DimensionError(f"bundle has shape {S.shape}, valuation has m={v.m}")
    if v.a == 0:
        return 0.0
    fits = (v.bundles <= (S != 0)).all(axis=1)
    return float(v.prices[fits].max()) if fits.any() else 0.0


def expected_value(v: XorValuation, support: Sequence[tuple]) -> float:
    """Sum of ``p * v(S)`` over an explicit finite support."""
    total = 0.0
    mass = 0.0
    for S, p in support:
        if p < 0:
            raise ValueError(f"negative probability {p}")
        mass += p
        total += p * evaluate(v, S)
    if mass > 1 + 1e-9:
        raise ValueError(f"support mass {mass} exceeds 1")
    return total


class PackedValuations(NamedTuple):
    """Bit-packed batch of valuations for the kernels."""
    atoms: np.ndarray   # (n, A, W) uint64
    prices: np.ndarray  # (n, A)
    m: int

    def values(self, bundles):
        """(n, B) values on a shared (B, m) bundle array."""
        bundles = np.asarray(bundles)
        if bundles.ndim != 2 or bundles.shape[1] != self.m:
            raise DimensionError(f"bundles must be (B, {self.m})")
        return kernels.evaluate_shared(self.atoms, self.prices, kernels.pack_bits(bundles))

    def values_unique(self, bundles):
        """Like :meth:`values` but evaluates each distinct bundle once."""
        bundles = np.asarray(bundles, dtype=np.uint8)
        packed = kernels.pack_bits(bundles)
        uniq, inverse = np.unique(packed, axis=0, return_inverse=True)
        vals = kernels.evaluate_shared(self.atoms, self.prices, uniq)
        return vals[:, inverse.reshape(-1)]

    def values_paired(self, bundles):
        """(n, B) values where valuation i is evaluated on ``bundles[i]`` (n, B, m)."""
        bundles = np.asarray(bundles)
        if bundles.ndim != 3 or bundles.shape[0] != self.atoms.shape[0]:
            raise DimensionError("paired bundles must be (n, B, m)")
        return kernels.evaluate_paired(self.atoms, self.prices, kernels.pack_bits(bundles))

    def subset(self, idx):
        return PackedValuations(self.atoms[idx], self.prices[idx], self.m)

    def __len__(self):
        return self.atoms.shape[0]


def pack(samples: Sequence[XorValuation], m=None) -> PackedValuations:
    if m is None:
        if not samples:
            raise ValueError("cannot infer m from an empty sample list")
        m = samples[0].m
    A = max([1] + [v.a for v in samples])
    W = kernels.words_for(m)
    atoms = np.zeros((len(samples), A, W), dtype=np.uint64)
    prices = np.zeros((len(samples), A))
    for i, v in enumerate(samples):
        if v.m != m:
            raise DimensionError(f"sample {i} has m={v.m}, expected {m}")
        if v.a:
            atoms[i, :v.a] = kernels.pack_bits(v.bundles)
            prices[i, :v.a] = v.prices
    return PackedValuations(atoms, prices, m)


@dataclass
class ValuationDataset:
    config: AuctionConfig
    samples: list
    split: str = "train"
    source: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, v in enumerate(self.samples):
            if v.m != self.config.m:
                raise DimensionError(f"sample {i} has m={v.m}, dataset m={self.config.m}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @cached_property
    def packed(self) -> PackedValuations:
        return pack(self.samples, self.config.m)

    def grand_values(self):
        if not self.samples:
            return np.zeros(0)
        return self.packed.values(grand_bundle(self.config.m)[None, :])[:, 0]

    def with_samples(self, samples, split=None):
        return ValuationDataset(self.config, list(samples), split or self.split,
                                self.source, dict(self.meta))


# --- synthetic generation ------------------------------------------------

DISTRIBUTIONS = ("uniform", "normal", "clusters")


def _item_base(rng, dist, v_max, m, size):
    if dist == "uniform":
        return rng.uniform(0.0, 1.0, size) * v_max / m
    return rng.normal(v_max / (2 * m), v_max / (6 * m), size)


def generate_synthetic(config: AuctionConfig, count: int, dist="uniform", max_atoms=5,
                       seed=0, inclusion=0.3) -> ValuationDataset:
    """CATS-like synthetic XOR valuations.

    Each sample draws 1..max_atoms atoms; an atom includes each item
    independently with probability ``inclusion`` (at least one item), and is
    priced ``|bundle| * base`` with a per-atom base drawn from ``dist``,
    clamped into [0, v_max].
    """
    if dist not in DISTRIBUTIONS:
        raise ConfigError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")
    if dist == "clusters":
        return generate_clusters(config, count, max_atoms, seed)
    if count < 1:
        raise ConfigError("count must be >= 1")
    if max_atoms < 1:
        raise ConfigError("max_atoms must be >= 1")
    m, v_max = config.m, config.v_max
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        a = int(rng.integers(1, max_atoms + 1))
        bundles = (rng.random((a, m)) < inclusion).astype(np.uint8)
        forced = rng.integers(0, m, a)
        for j in np.flatnonzero(bundles.sum(axis=1) == 0):
            bundles[j, forced[j]] = 1
        base = _item_base(rng, dist, v_max, m, a)
        prices = np.clip(bundles.sum(axis=1) * base, 0.0, v_max)
        samples.append(XorValuation(bundles, prices))
    return ValuationDataset(config, samples, "train", "synthetic",
                            {"dist": dist, "max_atoms": max_atoms, "seed": seed,
                             "inclusion": inclusion})


def generate_clusters(config: AuctionConfig, count: int, max_atoms=3, seed=0,
                      high=(0.5, 0.7), low=(0.15, 0.25)) -> ValuationDataset:
    """Two equally likely clusters wanting disjoint halves of the items.

    Cluster 0 values the first ceil(m/2) items at ``v_max * U(high)``, cluster 1
    values the rest at ``v_max * U(low)``. Extra atoms are random sub-bundles of
    the own half, priced below the half pro rata. Selling both halves
    separately beats any single grand-bundle price.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    m, v_max = config.m, config.v_max
    if m < 2:
        raise ConfigError("clusters need m >= 2")
    rng = np.random.default_rng(seed)
    cut = (m + 1) // 2
    halves = [np.arange(cut), np.arange(cut, m)]
    samples = []
    for _ in range(count):
        c = int(rng.integers(0, 2))
        items = halves[c]
        lo, hi = high if c == 0 else low
        full = rng.uniform(lo, hi) * v_max
        rows = [np.zeros(m, np.uint8)]
        rows[0][items] = 1
        prices = [full]
        for _ in range(int(rng.integers(0, max_atoms))):
            pick = items[rng.random(items.size) < 0.5]
            if pick.size == 0 or pick.size == items.size:
                continue
            b = np.zeros(m, np.uint8)
            b[pick] = 1
            rows.append(b)
            prices.append(full * pick.size / items.size * rng.uniform(0.5, 1.0))
        samples.append(XorValuation(np.array(rows), np.array(prices)))
    return ValuationDataset(config, samples, "train", "synthetic",
                            {"dist": "clusters", "max_atoms": max_atoms, "seed": seed,
                             "high": list(high), "low": list(low)})


def split(ds: ValuationDataset, train_fraction=0.95, seed=0):
    """Deterministic shuffled split; train gets floor(n * fraction) samples."""
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * train_fraction))
    train = ds.with_samples([ds.samples[i] for i in order[:n_train]], "train")
    test = ds.with_samples([ds.samples[i] for i in order[n_train:]], "test")
    return train, test


# --- JSON-lines format ---------------------------------------------------

def save_jsonl(ds: ValuationDataset, path):
    """One valuation record per line plus a ``.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for v in ds.samples:
            fh.write(json.dumps(v.to_record(), separators=(",", ":")) + "\n")
    meta = {"m": ds.config.m, "v_max": ds.config.v_max, "split": ds.split,
            "source": ds.source, "count": len(ds), **{"meta": ds.meta}}
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_jsonl(path) -> ValuationDataset:
    path = Path(path)
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(XorValuation.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CatsParseError(f"bad record in {path}: {exc}", lineno) from exc
    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text())
    m = meta.get("m") or (samples[0].m if samples else None)
    if m is None:
        raise CatsFormatError(f"{path}: empty dataset without metadata; cannot infer m")
    v_max = meta.get("v_max") or max([1.0] + [float(v.prices.max(initial=0)) for v in samples])
    return ValuationDataset(AuctionConfig(int(m), float(v_max)), samples,
                            meta.get("split", "train"), meta.get("source", str(path)),
                            meta.get("meta", {}))


# --- CATS import ---------------------------------------------------------

_HEADER = re.compile(r"^(goods|bids|dummy)\s+(\d+)\s*$", re.IGNORECASE)


def _parse_cats(path):
    header = {}
    bids = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            hm = _HEADER.match(line)
            if hm:
                header[hm.group(1).lower()] = int(hm.group(2))
                continue
            tokens = line.split()
            if tokens[-1] != "#":
                raise CatsParseError(f"bid line missing terminal '#': {line!r}", lineno)
            tokens = tokens[:-1]
            if len(tokens) < 2:
                raise CatsParseError(f"bid line needs an id and a price: {line!r}", lineno)
            try:
                int(tokens[0])
                price = float(tokens[1])
                goods = [int(t) for t in tokens[2:]]
            except ValueError as exc:
                raise CatsParseError(f"non-numeric field in {line!r}", lineno) from exc
            if "goods" not in header:
                raise CatsParseError("bid line before 'goods' header", lineno)
            bids.append((lineno, price, goods))
    if "goods" not in header:
        raise CatsFormatError(f"{path}: missing 'goods' header")
    return header, bids


def load_cats(path, v_max=None) -> ValuationDataset:
    """Import one CATS instance as a single-bidder XOR valuation.

    Goods numbered ``>= goods`` are dummy goods tagging bids of one bidder.
    The bidder owning the lowest-numbered dummy good present is extracted and
    its dummy goods are dropped from the bundles.
    """
    header, bids = _parse_cats(path)
    m = header["goods"]
    if m < 1:
        raise CatsFormatError(f"{path}: goods must be positive")
    for lineno, price, goods in bids:
        bad = [g for g in goods if g < 0 or g >= m + header.get("dummy", 0)]
        if bad and header.get("dummy") is not None:
            raise CatsParseError(f"good ids {bad} out of range", lineno)
        if price < 0:
            raise CatsParseError(f"negative price {price}", lineno)
    if not bids:
        cfg = AuctionConfig(m, v_max or 1.0)
        return ValuationDataset(cfg, [], "train", f"cats:{path}")
    dummies = sorted({g for _, _, goods in bids for g in goods if g >= m})
    if not dummies:
        raise CatsFormatError(f"{path}: no dummy goods; cannot identify a bidder")
    chosen = dummies[0]
    atoms = []
    for _, price, goods in bids:
        if chosen in goods:
            bits = np.zeros(m, dtype=np.uint8)
            bits[[g for g in goods if g < m]] = 1
            atoms.append((bits, price))
    top = max(p for _, p in atoms)
    cfg = AuctionConfig(m, v_max if v_max is not None else max(top, 1e-12))
    val = XorValuation.from_atoms(atoms, m, cfg.v_max)
    return ValuationDataset(cfg, [val], "train", f"cats:{path}", {"dummy_good": chosen})


def load_cats_many(paths, v_max=None) -> ValuationDataset:
    """Concatenate single-bidder extractions from several CATS files."""
    paths = sorted(str(p) for p in paths)
    if not paths:
        raise CatsFormatError("no CATS files given")
    parts = [load_cats(p) for p in paths]
    ms = {p.config.m for p in parts}
    if len(ms) != 1:
        raise DimensionError(f"CATS files disagree on goods count: {sorted(ms)}")
    samples = [s for p in parts for s in p.samples]
    top = max([1e-12] + [float(s.prices.max(initial=0)) for s in samples])
    cfg = AuctionConfig(ms.pop(), v_max if v_max is not None else top)
    return ValuationDataset(cfg, samples, "train", "cats:" + os.path.commonpath(paths))


def save_cats(v: XorValuation, path, bidder_dummy=0):
    """Write one valuation as a CATS file tagged with a single dummy good."""
    dummy = v.m + bidder_dummy
    lines = [f"goods {v.m}", f"bids {v.a}", f"dummy {bidder_dummy + 1}", ""]
    for i, (b, p) in enumerate(zip(v.bundles, v.prices)):
        goods = "\t".join(str(g) for g in np.flatnonzero(b))
        lines.append(f"{i}\t{float(p)!r}\t{goods}\t{dummy}\t#")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, v_max=None) -> ValuationDataset:
    """Dispatch on extension: ``.jsonl`` canonical, anything else CATS text."""
    p = Path(path)
    if p.is_dir():
        return load_cats_many(sorted(p.glob("*.txt")), v_max)
    if p.suffix == ".jsonl":
        return load_jsonl(p)
    return load_cats(p, v_max)
