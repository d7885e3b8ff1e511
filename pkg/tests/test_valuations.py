import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bundleflow.valuations import (AuctionConfig, CatsFormatError, CatsParseError, ConfigError,
                                   DimensionError, ValuationDataset, XorValuation, as_bundle,
                                   evaluate, expected_value, generate_clusters,
                                   generate_synthetic, load_cats, load_cats_many, load_dataset,
                                   load_jsonl, pack, save_cats, save_jsonl, split)

from conftest import random_valuation


def v_of(atoms, m):
    return XorValuation.from_atoms([(np.isin(np.arange(m), list(S)).astype(int), p)
                                    for S, p in atoms], m)


def bits(S, m):
    return np.isin(np.arange(m), list(S)).astype(np.uint8)


# --- evaluate ------------------------------------------------------------

def test_empty_bundle_is_zero():
    assert evaluate(v_of([({1}, 5)], 3), bits([], 3)) == 0.0


def test_max_over_contained_atoms():
    v = v_of([({1}, 5), ({1, 2}, 8)], 3)
    assert evaluate(v, bits({1, 2}, 3)) == 8.0


def test_max_price_not_largest_bundle():
    v = v_of([({1}, 10), ({1, 2}, 8)], 3)
    assert evaluate(v, bits({1, 2}, 3)) == 10.0


def test_length_mismatch_raises():
    with pytest.raises(DimensionError):
        evaluate(v_of([({0}, 1)], 3), np.ones(4))


def test_atom_invariants():
    with pytest.raises(ValueError):
        XorValuation([[1, 0]], [-1.0])
    with pytest.raises(ValueError):
        XorValuation([[0, 0]], [2.0])
    with pytest.raises(ValueError):
        XorValuation([[1, 0]], [200.0], v_max=100.0)
    with pytest.raises(ValueError):
        as_bundle([0, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_evaluate_matches_brute_force_and_is_monotone(m, seed):
    rng = np.random.default_rng(seed)
    v = random_valuation(rng, m, max_atoms=5)
    S = (rng.random(m) < 0.5).astype(np.uint8)
    best = 0.0
    for r in range(1, v.a + 1):
        for combo in itertools.combinations(range(v.a), r):
            for j in combo:
                if all(S[i] >= v.bundles[j, i] for i in range(m)):
                    best = max(best, v.prices[j])
    assert evaluate(v, S) == best
    T = S | (rng.random(m) < 0.5).astype(np.uint8)
    assert evaluate(v, S) <= evaluate(v, T)
    assert pack([v]).values(S[None])[0, 0] == best


# --- expected_value ------------------------------------------------------

def test_expected_value_examples():
    v = v_of([({1}, 4), ({2}, 2)], 3)
    S = bits({1}, 3)
    assert expected_value(v, [(S, 1.0)]) == evaluate(v, S)
    assert expected_value(v, []) == 0.0
    assert expected_value(v, [(bits({1}, 3), 0.5), (bits({2}, 3), 0.5)]) == 3.0


def test_expected_value_rejects_negative_probability():
    with pytest.raises(ValueError):
        expected_value(v_of([({0}, 1)], 2), [(bits({0}, 2), -0.1)])


# --- generation ----------------------------------------------------------

def test_generation_deterministic():
    cfg = AuctionConfig(5, 100.0)
    a = generate_synthetic(cfg, 3, "uniform", 5, seed=7)
    b = generate_synthetic(cfg, 3, "uniform", 5, seed=7)
    assert a.samples == b.samples


@pytest.mark.parametrize("dist", ["uniform", "normal", "clusters"])
def test_generated_prices_clamped(dist):
    cfg = AuctionConfig(8, 50.0)
    ds = generate_synthetic(cfg, 300, dist, 5, seed=3)
    for v in ds:
        assert 1 <= v.a <= 5
        assert (v.prices >= 0).all() and (v.prices <= cfg.v_max).all()
        assert (v.bundles.sum(axis=1) >= 1).all()


def test_unknown_distribution():
    with pytest.raises(ConfigError, match="distribution"):
        generate_synthetic(AuctionConfig(3), 2, "pareto")


def reference_grand_mean(m, v_max, max_atoms, n, seed, inclusion=0.3):
    """Independent vectorized simulation of the normal generator's grand-bundle value."""
    rng = np.random.default_rng(seed)
    a = rng.integers(1, max_atoms + 1, n)
    B = rng.random((n, max_atoms, m)) < inclusion
    empty = ~B.any(axis=2)
    forced = rng.integers(0, m, (n, max_atoms))
    B[empty, forced[empty]] = True
    base = rng.normal(v_max / (2 * m), v_max / (6 * m), (n, max_atoms))
    price = np.clip(B.sum(axis=2) * base, 0, v_max)
    price[np.arange(max_atoms)[None, :] >= a[:, None]] = 0.0
    return price.max(axis=1).mean()


def test_normal_generator_grand_mean():
    m, v_max = 10, 100.0
    ds = generate_synthetic(AuctionConfig(m, v_max), 1000, "normal", 5, seed=1)
    g = ds.grand_values()
    ref = reference_grand_mean(m, v_max, 5, 400_000, seed=99)
    se = g.std(ddof=1) / np.sqrt(g.size)
    assert abs(g.mean() - ref) <= 3 * se


def test_normal_generator_per_item_base():
    m, v_max = 10, 100.0
    ds = generate_synthetic(AuctionConfig(m, v_max), 2000, "normal", 5, seed=2)
    base = np.concatenate([v.prices / v.bundles.sum(axis=1) for v in ds])
    se = base.std(ddof=1) / np.sqrt(base.size)
    assert abs(base.mean() - v_max / (2 * m)) <= 3 * se


def test_clusters_disjoint_halves():
    ds = generate_clusters(AuctionConfig(6, 100.0), 200, seed=0)
    for v in ds:
        low = v.bundles[:, :3].any()
        high = v.bundles[:, 3:].any()
        assert low != high


# --- split ---------------------------------------------------------------

def test_split_sizes_and_determinism():
    ds = generate_synthetic(AuctionConfig(4), 100, seed=0)
    tr, te = split(ds, 0.95, seed=1)
    assert (len(tr), len(te)) == (95, 5)
    tr2, te2 = split(ds, 0.95, seed=1)
    assert tr.samples == tr2.samples and te.samples == te2.samples
    ids = {id(v) for v in tr} & {id(v) for v in te}
    assert not ids


def test_split_floor_rule():
    ds = generate_synthetic(AuctionConfig(4), 1, seed=0)
    tr, te = split(ds, 0.95)
    assert (len(tr), len(te)) == (0, 1)


def test_split_rejects_bad_fraction():
    ds = generate_synthetic(AuctionConfig(4), 4, seed=0)
    with pytest.raises(ConfigError):
        split(ds, 1.0)


# --- file formats --------------------------------------------------------

def test_jsonl_roundtrip(tmp_path):
    ds = generate_synthetic(AuctionConfig(6, 10.0), 20, seed=4)
    save_jsonl(ds, tmp_path / "d.jsonl")
    back = load_jsonl(tmp_path / "d.jsonl")
    assert back.samples == ds.samples
    assert back.config == ds.config
    assert load_dataset(tmp_path / "d.jsonl").samples == ds.samples


def test_jsonl_bad_record(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"m": 2, "atoms": [{"bundle": [1, 0], "price": 1}]}\n{"m": 2\n')
    with pytest.raises(CatsParseError) as e:
        load_jsonl(p)
    assert e.value.line == 2


CATS_TEXT = """% generated
goods 10
bids 2
dummy 1

0\t5\t1\t10\t#
1\t8\t1\t2\t10\t#
"""


def test_cats_example(tmp_path):
    p = tmp_path / "inst.txt"
    p.write_text(CATS_TEXT)
    ds = load_cats(p)
    assert len(ds) == 1 and ds.config.m == 10
    v = ds[0]
    assert v == v_of([({1}, 5.0), ({1, 2}, 8.0)], 10)
    assert ds.source.startswith("cats:")


def test_cats_lowest_dummy_chosen(tmp_path):
    p = tmp_path / "inst.txt"
    p.write_text("goods 3\nbids 3\ndummy 2\n0 5 0 4 #\n1 7 1 3 #\n2 9 1 2 3 #\n")
    ds = load_cats(p)
    assert ds.meta["dummy_good"] == 3
    assert ds[0] == v_of([({1}, 7.0), ({1, 2}, 9.0)], 3)


def test_cats_empty_bids(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("goods 4\nbids 0\ndummy 0\n")
    assert len(load_cats(p)) == 0


def test_cats_missing_hash_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("goods 4\nbids 1\ndummy 1\n0 5 1 4\n")
    with pytest.raises(CatsParseError) as e:
        load_cats(p)
    assert e.value.line == 4 and "line 4" in str(e.value)


def test_cats_no_dummy_is_format_error(tmp_path):
    p = tmp_path / "nd.txt"
    p.write_text("goods 4\nbids 1\n0 5 1 2 #\n")
    with pytest.raises(CatsFormatError):
        load_cats(p)


def test_cats_save_load_roundtrip(tmp_path, rng):
    for i in range(10):
        v = random_valuation(rng, 7)
        save_cats(v, tmp_path / f"{i}.txt")
        assert load_cats(tmp_path / f"{i}.txt")[0] == v
    many = load_cats_many(sorted(tmp_path.glob("*.txt")))
    assert len(many) == 10
    assert len(load_dataset(tmp_path)) == 10


def test_dataset_rejects_mixed_m():
    with pytest.raises(DimensionError):
        ValuationDataset(AuctionConfig(3), [v_of([({0}, 1)], 4)])
