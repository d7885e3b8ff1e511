"""Run configuration: nested YAML sections, dotted overrides, validation.

Every section is a flat dataclass. Unknown keys and bad values raise
:class:`ConfigError` naming the offending field, e.g. ``auction.distribution``.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .baselines import PriceSchedule, RochetSchedule
from .flow import FlowConfig
from .menu import REWEIGHT_MODES, MenuConfig
from .stage1 import Stage1Config
from .valuations import AuctionConfig, ConfigError

OUT_ENV = "BUNDLEFLOW_OUT"
DISTRIBUTIONS = ("uniform", "normal", "clusters")
BASELINES = ("grand", "big", "small", "rochetnet")


class ConfigParseError(ValueError):
    pass


@dataclass
class AuctionSection:
    m: int = 10
    v_max: float = 1000.0
    distribution: str = "uniform"
    max_atoms: int = 5
    count: int = 4000
    train_fraction: float = 0.95
    seed: int = 0
    cats: Optional[str] = None     # CATS file or directory to import instead
    data: Optional[str] = None     # existing JSONL dataset to split


@dataclass
class Stage1Section:
    D: int = 8
    sigma: float = 0.3
    sigma_z: float = 0.05
    iterations: int = 10_000
    lr: float = 5e-3
    batch_size: int = 128
    num_samples: int = 20_000
    seed: int = 0
    save_interval: int = 1000


@dataclass
class FlowSection:
    T: float = 1.0
    euler_steps: int = 8
    eta_grid: int = 33


@dataclass
class MenuSection:
    K: int = 64
    D: int = 8
    lr: float = 0.3
    means_lr: Optional[float] = 0.0
    iterations: int = 2000
    batch_size: int = 256
    lambda_start: float = 0.001
    lambda_end: float = 0.2
    reweight: str = "normalized"
    straight_through: bool = False
    seed: int = 0
    eval_interval: int = 100
    save_interval: int = 500
    snapshot_interval: int = 100
    init_price_frac: float = 0.1


@dataclass
class BaselineSection:
    which: str = "grand"
    K: int = 64
    seed: int = 0
    iterations: int = 2000
    lr: float = 0.3
    lam: float = 2.0
    batch_size: int = 256
    rochet_lr: float = 0.05
    rochet_lam: float = 20.0
    tau_start: float = 1.0
    tau_end: float = 0.1
    samples: int = 8


@dataclass
class EvalSection:
    misreports: int = 4
    seed: int = 0
    workers: int = 1


@dataclass
class RunConfig:
    run_id: str = "run"
    out_root: Optional[str] = None
    auction: AuctionSection = field(default_factory=AuctionSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    flow: FlowSection = field(default_factory=FlowSection)
    menu: MenuSection = field(default_factory=MenuSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # --- paths -------------------------------------------------------
    @property
    def run_dir(self) -> Path:
        root = self.out_root or os.environ.get(OUT_ENV) or "runs"
        return Path(root) / self.run_id

    # --- builders ----------------------------------------------------
    def auction_config(self):
        return AuctionConfig(self.auction.m, self.auction.v_max)

    def flow_config(self):
        f = self.flow
        return FlowConfig(f.T, f.euler_steps, f.eta_grid)

    def stage1_config(self):
        s = self.stage1
        return Stage1Config.default(self.auction.m, seed=s.seed, D=s.D, sigma=s.sigma,
                                    sigma_z=s.sigma_z, batch_size=s.batch_size,
                                    iterations=s.iterations, lr=s.lr,
                                    num_samples=s.num_samples)

    def menu_config(self):
        c = self.menu
        return MenuConfig(K=c.K, D=c.D, lr=c.lr, means_lr=c.means_lr, iterations=c.iterations,
                          batch_size=c.batch_size, lambda_start=c.lambda_start,
                          lambda_end=c.lambda_end, reweight=c.reweight,
                          straight_through=c.straight_through, seed=c.seed,
                          eval_interval=c.eval_interval, init_price_frac=c.init_price_frac)

    def price_schedule(self):
        b = self.baseline
        return PriceSchedule(b.iterations, b.lr, b.lam, b.lam, b.batch_size, b.seed)

    def rochet_schedule(self):
        b = self.baseline
        return RochetSchedule(b.iterations, b.rochet_lr, b.rochet_lam, b.tau_start, b.tau_end,
                              b.samples, min(b.batch_size, 128), b.seed)

    def to_dict(self):
        return asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


SECTIONS = {"auction": AuctionSection, "stage1": Stage1Section, "flow": FlowSection,
            "menu": MenuSection, "baseline": BaselineSection, "eval": EvalSection}
_TOP = {"run_id": str, "out_root": (str, type(None))}


def _coerce(name, typ, value):
    """Coerce a YAML scalar to the declared field type."""
    opt = isinstance(typ, str) and typ.startswith("Optional")
    base = typ.replace("Optional[", "").rstrip("]") if isinstance(typ, str) else typ.__name__
    if value is None:
        if opt:
            return None
        raise ConfigError(f"{name}: value required")
    try:
        if base == "bool":
            if isinstance(value, bool):
                return value
            raise TypeError
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {base}, got {value!r}") from None
    return value


def _section_from(name, cls, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
    kw = {k: _coerce(f"{name}.{k}", known[k].type, v) for k, v in data.items()}
    return cls(**kw)


def from_dict(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    kw = {}
    for key, value in data.items():
        if key in SECTIONS:
            kw[key] = _section_from(key, SECTIONS[key], value)
        elif key == "run_id":
            kw[key] = _coerce(key, "str", value)
        elif key == "out_root":
            kw[key] = _coerce(key, "Optional[str]", value)
        else:
            raise ConfigError(f"{key}: unknown field")
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def apply_overrides(data, overrides):
    """Apply ``a.b=value`` strings (values parsed as YAML scalars)."""
    data = dict(data or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw) if raw != "" else None
        except yaml.YAMLError as e:
            raise ConfigError(f"{key}: cannot parse value {raw!r}") from e
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, dict) else {}
            node[p] = child
            node = child
        node[parts[-1]] = value
    return data


def load(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigParseError(f"{path}: {e}") from e
    return from_dict(apply_overrides(data, overrides))


def _check(cond, name, msg):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def validate(cfg: RunConfig):
    a, s, f, m, b, e = cfg.auction, cfg.stage1, cfg.flow, cfg.menu, cfg.baseline, cfg.eval
    _check(bool(cfg.run_id) and "/" not in cfg.run_id, "run_id", "must be a plain name")
    _check(a.m >= 1, "auction.m", "must be >= 1")
    _check(a.v_max > 0, "auction.v_max", "must be positive")
    _check(a.distribution in DISTRIBUTIONS, "auction.distribution",
           f"must be one of {DISTRIBUTIONS}, got {a.distribution!r}")
    _check(a.max_atoms >= 1, "auction.max_atoms", "must be >= 1")
    _check(a.count >= 2, "auction.count", "must be >= 2")
    _check(0.0 < a.train_fraction < 1.0, "auction.train_fraction", "must be in (0, 1)")
    _check(s.D >= 1, "stage1.D", "must be >= 1")
    _check(s.sigma > 0, "stage1.sigma", "must be positive")
    _check(s.sigma_z > 0, "stage1.sigma_z", "must be positive")
    _check(s.iterations >= 1, "stage1.iterations", "must be >= 1")
    _check(s.lr > 0, "stage1.lr", "must be positive")
    _check(s.batch_size >= 1, "stage1.batch_size", "must be >= 1")
    _check(s.save_interval >= 1, "stage1.save_interval", "must be >= 1")
    _check(f.T > 0, "flow.T", "must be positive")
    _check(f.euler_steps >= 1, "flow.euler_steps", "must be >= 1")
    _check(f.eta_grid >= 2, "flow.eta_grid", "must be >= 2")
    # K counts trainable elements; with the null element the menu has K + 1 >= 2
    _check(m.K >= 1, "menu.K", "must be >= 1 (menu size K + 1 >= 2 with the null element)")
    _check(m.D >= 1, "menu.D", "must be >= 1")
    _check(m.lr > 0, "menu.lr", "must be positive")
    _check(m.means_lr is None or m.means_lr >= 0, "menu.means_lr", "must be >= 0")
    _check(m.iterations >= 1, "menu.iterations", "must be >= 1")
    _check(m.lambda_start >= 0 and m.lambda_end >= 0, "menu.lambda_end",
           "softmax temperatures must be >= 0")
    _check(m.reweight in REWEIGHT_MODES, "menu.reweight", f"must be one of {REWEIGHT_MODES}")
    _check(m.save_interval >= 1, "menu.save_interval", "must be >= 1")
    _check(m.snapshot_interval >= 1, "menu.snapshot_interval", "must be >= 1")
    _check(m.eval_interval >= 0, "menu.eval_interval", "must be >= 0")
    _check(b.which in BASELINES, "baseline.which", f"must be one of {BASELINES}")
    _check(b.K >= 1, "baseline.K", "must be >= 1")
    _check(b.tau_start > 0 and b.tau_end > 0, "baseline.tau_end", "must be positive")
    _check(b.samples >= 1, "baseline.samples", "must be >= 1")
    _check(e.misreports >= 1, "eval.misreports", "must be >= 1")
    _check(e.workers >= 1, "eval.workers", "must be >= 1")
    return cfg


def with_section(cfg: RunConfig, section, **kw) -> RunConfig:
    return validate(replace(cfg, **{section: replace(getattr(cfg, section), **kw)}))
