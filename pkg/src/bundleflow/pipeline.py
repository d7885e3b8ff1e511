"""Run-directory workflow shared by the CLI and the ablation driver.

Layout under ``{out_root}/{run_id}``::

    config.yaml                 effective config
    data/{train,test}.jsonl
    flow/checkpoint.json        flow/log.csv
    menu/checkpoint.json        menu/log.csv   menu/states/{iter}.json
    baseline/{which}.json       baseline/{which}_log.csv
    reports/{name}.json
    snapshots/{iter}.{json,csv} snapshots/flow_grid.csv
    sweep/{param}.csv
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import checkpoint
from .baselines import (FixedAllocationMenu, ProductMenu, build_big_bundle_menu,
                        build_small_bundle_menu, grand_bundle_menu, grand_bundle_search,
                        train_bundle_rochetnet, train_fixed_prices)
from .config import RunConfig
from .flow import VectorField
from .menu import BundleFlowMechanism, Menu, MenuTrainer
from .stage1 import Stage1Trainer
from .valuations import (ConfigError, generate_synthetic, load_cats, load_dataset, load_jsonl,
                         save_jsonl, split)


def write_effective_config(cfg: RunConfig, where=None):
    d = Path(where) if where is not None else cfg.run_dir
    d.mkdir(parents=True, exist_ok=True)
    p = d / "config.yaml"
    p.write_text(cfg.dump())
    return p


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


# --- data ----------------------------------------------------------------

def data_paths(cfg: RunConfig):
    d = cfg.run_dir / "data"
    return d / "train.jsonl", d / "test.jsonl"


def build_dataset(cfg: RunConfig):
    a = cfg.auction
    ac = cfg.auction_config()
    if a.cats:
        ds = load_cats(a.cats, v_max=a.v_max) if Path(a.cats).is_file() else \
            load_dataset(a.cats, v_max=a.v_max)
        if ds.config.m != a.m:
            raise ConfigError(f"auction.m: config says {a.m}, CATS data has m={ds.config.m}")
    elif a.data:
        ds = load_dataset(a.data, v_max=a.v_max)
        if ds.config.m != a.m:
            raise ConfigError(f"auction.m: config says {a.m}, dataset has m={ds.config.m}")
    else:
        ds = generate_synthetic(ac, a.count, a.distribution, a.max_atoms, seed=a.seed)
    return split(ds, a.train_fraction, a.seed)


def gen_data(cfg: RunConfig):
    train, test = build_dataset(cfg)
    p_train, p_test = data_paths(cfg)
    save_jsonl(train, p_train)
    save_jsonl(test, p_test)
    write_effective_config(cfg)
    return train, test


def load_data(cfg: RunConfig, create=True):
    """Train/test sets of the run, generating them on first use."""
    p_train, p_test = data_paths(cfg)
    if p_train.is_file() and p_test.is_file():
        train, test = load_jsonl(p_train), load_jsonl(p_test)
        if train.config.m != cfg.auction.m:
            raise ConfigError(f"auction.m: config says {cfg.auction.m}, "
                              f"run data has m={train.config.m}")
        return train, test
    if not create:
        raise FileNotFoundError(f"dataset not found: {p_train}")
    return gen_data(cfg)


# --- stage 1 -------------------------------------------------------------

def flow_paths(cfg: RunConfig):
    d = cfg.run_dir / "flow"
    return d / "checkpoint.json", d / "log.csv"


def _flow_meta(cfg: RunConfig, trainer: Stage1Trainer):
    f = cfg.flow
    vf = trainer.state.vf
    return {"m": vf.m, "T": f.T, "euler_steps": f.euler_steps, "eta_grid": f.eta_grid,
            "q_sizes": vf.qnet.sizes, "eta_sizes": vf.etanet.sizes,
            "iteration": trainer.state.iteration}


def save_flow(cfg: RunConfig, trainer: Stage1Trainer):
    ck, log = flow_paths(cfg)
    checkpoint.save(ck, "flow", trainer.to_dict(), _flow_meta(cfg, trainer))
    write_csv(log, ["iteration", "loss", "wall_ms"], trainer.state.log)
    return ck


def train_flow(cfg: RunConfig, resume=False, max_steps=None):
    """Train (or resume) Stage 1, checkpointing every ``stage1.save_interval``."""
    s1 = cfg.stage1_config()
    fc = cfg.flow_config()
    ck, _ = flow_paths(cfg)
    if resume and ck.is_file():
        payload, _ = checkpoint.load(ck, "flow")
        trainer = Stage1Trainer.from_dict(s1, fc, payload)
    else:
        trainer = Stage1Trainer(s1, fc)
    write_effective_config(cfg)
    stop = s1.iterations if max_steps is None else min(s1.iterations, max_steps)
    every = cfg.stage1.save_interval

    def hook(st):
        if st.iteration % every == 0 and st.iteration < stop:
            save_flow(cfg, trainer)

    trainer.run(stop, callback=hook)
    save_flow(cfg, trainer)
    return trainer


def load_flow(cfg: RunConfig, path=None):
    ck = Path(path) if path is not None else flow_paths(cfg)[0]
    payload, meta = checkpoint.load(ck, "flow")
    vf = VectorField.from_dict(payload["vector_field"])
    if vf.m != cfg.auction.m:
        raise ConfigError(f"auction.m: config says {cfg.auction.m}, flow checkpoint has m={vf.m}")
    return vf, meta


# --- stage 2 -------------------------------------------------------------

def menu_paths(cfg: RunConfig):
    d = cfg.run_dir / "menu"
    return d / "checkpoint.json", d / "log.csv", d / "states"


def _rel(cfg: RunConfig, path):
    """Path relative to the run directory when inside it, so runs are relocatable."""
    path = Path(path)
    try:
        return path.resolve().relative_to(cfg.run_dir.resolve()).as_posix()
    except ValueError:
        return str(path)


def _resolve(cfg: RunConfig, ref):
    p = Path(ref)
    return p if p.is_absolute() else cfg.run_dir / p


def save_menu(cfg: RunConfig, trainer: MenuTrainer, flow_ck):
    ck, log, _ = menu_paths(cfg)
    menu = trainer.state.menu
    meta = {"K": menu.K, "D": menu.D, "m": menu.m, "flow_checkpoint": _rel(cfg, flow_ck),
            "reweight": cfg.menu.reweight, "iteration": trainer.state.iteration,
            "snapshot_interval": cfg.menu.snapshot_interval}
    checkpoint.save(ck, "menu", trainer.to_dict(), meta)
    write_csv(log, ["iteration", "loss", "lambda", "test_revenue", "wall_ms"], trainer.state.log)
    return ck


def save_menu_state(cfg: RunConfig, iteration, menu: Menu):
    _, _, states = menu_paths(cfg)
    return checkpoint.save(states / f"{iteration}.json", "menu_state", menu.to_dict(),
                           {"iteration": int(iteration)})


def train_menu(cfg: RunConfig, resume=False, max_steps=None, flow_path=None):
    flow_ck = Path(flow_path) if flow_path is not None else flow_paths(cfg)[0]
    if not flow_ck.is_file():
        raise FileNotFoundError(f"Stage-1 checkpoint not found: {flow_ck} (run train-flow first)")
    vf, _ = load_flow(cfg, flow_ck)
    train, test = load_data(cfg)
    mc = cfg.menu_config()
    fc = cfg.flow_config()
    ck, _, _ = menu_paths(cfg)
    if resume and ck.is_file():
        payload, _ = checkpoint.load(ck, "menu")
        trainer = MenuTrainer.from_dict(mc, vf, fc, train, test, payload)
    else:
        trainer = MenuTrainer(mc, vf, fc, train, test, v_max=cfg.auction.v_max)
        save_menu_state(cfg, 0, trainer.state.menu)
    write_effective_config(cfg)
    stop = mc.iterations if max_steps is None else min(mc.iterations, max_steps)
    snap, every = cfg.menu.snapshot_interval, cfg.menu.save_interval

    def hook(st):
        if st.iteration % snap == 0 or st.iteration == mc.iterations:
            save_menu_state(cfg, st.iteration, st.menu)
        if st.iteration % every == 0 and st.iteration < stop:
            save_menu(cfg, trainer, flow_ck)

    trainer.run(stop, callback=hook)
    save_menu(cfg, trainer, flow_ck)
    return trainer, vf, train, test


def load_menu_mechanism(cfg: RunConfig, path=None):
    ck = Path(path) if path is not None else menu_paths(cfg)[0]
    payload, meta = checkpoint.load(ck, "menu")
    vf, _ = load_flow(cfg, _resolve(cfg, meta["flow_checkpoint"]))
    menu = Menu.from_dict(payload["menu"])
    return BundleFlowMechanism(menu, vf, cfg.flow_config(), meta.get("reweight", "normalized"))


def menu_history(cfg: RunConfig):
    _, _, states = menu_paths(cfg)
    if not states.is_dir():
        raise FileNotFoundError(f"no stored menu states under {states}")
    out = {}
    for p in states.glob("*.json"):
        payload, meta = checkpoint.load(p, "menu_state")
        out[int(meta["iteration"])] = Menu.from_dict(payload)
    return out


# --- baselines -----------------------------------------------------------

def baseline_path(cfg: RunConfig, which):
    return cfg.run_dir / "baseline" / f"{which}.json"


def train_baseline(cfg: RunConfig, which=None):
    which = which or cfg.baseline.which
    train, test = load_data(cfg)
    ac = cfg.auction_config()
    b = cfg.baseline
    log, info = [], {}
    if which == "grand":
        price, train_rev, test_rev = grand_bundle_search(train, test)
        mech = grand_bundle_menu(ac.m, price)
        info = {"price": price, "train_revenue": train_rev, "test_revenue": test_rev}
    elif which in ("big", "small"):
        build = build_big_bundle_menu if which == "big" else build_small_bundle_menu
        mech = build(ac, b.K, seed=b.seed)
        train_fixed_prices(mech, train, cfg.price_schedule(), log)
        write_csv(cfg.run_dir / "baseline" / f"{which}_log.csv",
                  ["iteration", "loss", "lambda"], log)
    elif which == "rochetnet":
        res = train_bundle_rochetnet(ac, b.K, train, cfg.rochet_schedule())
        mech = res.menu
        info = {"converged_binary": res.converged_binary}
        write_csv(cfg.run_dir / "baseline" / f"{which}_log.csv",
                  ["iteration", "loss", "tau", "wall_ms"], res.log)
    else:
        raise ConfigError(f"baseline.which: unknown baseline {which!r}")
    write_effective_config(cfg)
    checkpoint.save(baseline_path(cfg, which), "baseline", mech.to_dict(),
                    {"which": which, "m": ac.m, **info})
    return mech, test


def load_baseline(path):
    payload, meta = checkpoint.load(path, "baseline")
    if meta.get("which") == "rochetnet":
        return ProductMenu.from_dict(payload)
    return FixedAllocationMenu.from_dict(payload)


def load_mechanism(cfg: RunConfig, path):
    kind = checkpoint.peek_kind(path)
    if kind == "menu":
        return load_menu_mechanism(cfg, path)
    if kind == "baseline":
        return load_baseline(path)
    raise checkpoint.CheckpointError(f"{path}: cannot evaluate a {kind!r} checkpoint")


# --- evaluation ----------------------------------------------------------

def evaluate(cfg: RunConfig, path, name=None):
    from .evaluation import evaluate_mechanism
    mech = load_mechanism(cfg, path)
    _, test = load_data(cfg, create=False)
    report = evaluate_mechanism(mech, test, cfg.eval.misreports, cfg.eval.seed,
                                cfg.eval.workers)
    name = name or getattr(mech, "name", "mechanism")
    out = cfg.run_dir / "reports" / f"{name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    return report, out


def export_snapshots(cfg: RunConfig, interval=None):
    from .evaluation import export_snapshots as _export, write_flow_grid
    stored = cfg.menu.snapshot_interval
    interval = stored if interval is None else interval
    if interval < 1 or interval % stored != 0:
        raise ConfigError(f"menu.snapshot_interval: export interval {interval} must be a "
                          f"positive multiple of the stored interval {stored}")
    vf, _ = load_flow(cfg)
    _, test = load_data(cfg, create=False)
    history = menu_history(cfg)
    history.pop(0, None)
    paths = _export(history, interval, vf, cfg.flow_config(), test, cfg.run_dir,
                    cfg.menu.reweight)
    if vf.m >= 2:
        write_flow_grid(vf, cfg.flow_config(), cfg.run_dir / "snapshots" / "flow_grid.csv",
                        items=(0, 1))
    return paths


def sweep(cfg: RunConfig, param, values, seeds=(0, 1, 2)):
    from .evaluation import ablation_sweep
    table = ablation_sweep(param, values, cfg, seeds)
    out = cfg.run_dir / "sweep" / f"{param}.csv"
    header = [param, "median_revenue"] + [f"seed_{s}" for s in seeds]
    write_csv(out, header, [[r["value"], r["median"]] + r["revenues"] for r in table])
    write_effective_config(cfg)
    return table, out
