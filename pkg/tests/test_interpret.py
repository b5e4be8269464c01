from __future__ import annotations

import itertools
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circformer import interpret as IP
from circformer import tensor as T
from circformer.datasets import one_hot_encode
from circformer.model import CircFormerMoE, ModelConfig


def linear_model(w):
    """logits[b, l] = sum_{i,c} x[b, i, c] w[i, c] at every position l."""
    wt = T.Tensor(w, dtype=np.float64)

    def f(x):
        total = T.sum(T.sum(x * wt, axis=-1), axis=-1, keepdims=True)  # [1, 1]
        return T.reshape(total, (1, 1))
    return f


def test_saliency_of_linear_model_is_abs_weight_sum():
    w = np.random.default_rng(0).normal(size=(11, 5))
    x = one_hot_encode("ACGTNACGTNA").astype(np.float64)
    np.testing.assert_array_equal(IP.saliency_map(linear_model(w), x), np.abs(w).sum(axis=1))


def test_saliency_on_real_model_matches_finite_differences():
    cfg = ModelConfig(species=("s",), embed_dim=8, conv_blocks=1, kernel_size=3, dilations=(1,),
                      attn_blocks=1, heads=2, random_features=8, activation="gelu")
    model = CircFormerMoE(cfg, dtype=np.float64)
    x = one_hot_encode("ACGTTGCAACG").astype(np.float64)
    sal = IP.saliency_map(model, x, "s", target=4)
    eps = 1e-6
    ref = np.zeros(len(x))
    for i, c in itertools.product(range(len(x)), range(5)):
        hi, lo = x.copy(), x.copy()
        hi[i, c] += eps
        lo[i, c] -= eps
        d = (model.forward_ssd(hi[None], "s").data[0, 4] - model.forward_ssd(lo[None], "s").data[0, 4]) / (2 * eps)
        ref[i] += abs(d)
    np.testing.assert_allclose(sal, ref, rtol=1e-5, atol=1e-9)


def test_saliency_ssp_and_errors():
    cfg = ModelConfig(species=("s",), embed_dim=8, conv_blocks=1, kernel_size=3, dilations=(1,),
                      attn_blocks=1, heads=2, random_features=8)
    model = CircFormerMoE(cfg)
    x = one_hot_encode("ACGMMMMMACG", ("A", "C", "G", "T", "N", "M"))
    assert IP.saliency_map(model, x, "s", task="ssp").shape == (11,)
    with pytest.raises(IndexError):
        IP.saliency_map(model, one_hot_encode("ACG"), "s", target=7)
    with pytest.raises(ValueError):
        IP.saliency_map(model, np.zeros((2, 3, 5)), "s")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 5).map(lambda r: 2 * r + 1))
def test_average_saliency_oracle(n, length):
    rng = np.random.default_rng(n * 31 + length)
    maps = [rng.random(length) for _ in range(n)]
    ref = [sum(m[i] for m in maps) / n for i in range(length)]
    np.testing.assert_allclose(IP.average_saliency(maps), ref, atol=1e-12)


def test_average_saliency_rejects_bad_input():
    with pytest.raises(ValueError):
        IP.average_saliency([])
    with pytest.raises(ValueError):
        IP.average_saliency([np.ones(3), np.ones(5)])


def test_profile_tsv_round_trip(tmp_path):
    prof = IP.SaliencyProfile(np.array([0.5, 1.0, 0.25]), "sp1", 7, {"window": 3})
    prof.write_tsv(tmp_path / "s.tsv")
    back = IP.read_saliency_tsv(tmp_path / "s.tsv")
    np.testing.assert_array_equal(back.values, prof.values)
    assert (back.species, back.n_sequences, back.radius) == ("sp1", 7, 1)
    with pytest.raises(ValueError):
        IP.SaliencyProfile(np.ones(4))


def test_logo_rows_and_brute_force():
    seqs = ["ACGTA", "AANTT"]
    maps = [np.array([1.0, 2, 3, 4, 5]), np.array([0.5, 0.5, 9, 1, 1])]
    logo = IP.saliency_logo(seqs, maps, radius=2)
    acc = np.zeros((5, 4))
    for s, m in zip(seqs, maps):
        for i, b in enumerate(s):
            if b in "ACGT":
                acc[i, "ACGT".index(b)] += m[i]
    np.testing.assert_allclose(logo.weights, acc / acc.sum(1, keepdims=True))
    np.testing.assert_allclose(logo.weights.sum(1), 1.0, atol=1e-12)


def test_logo_zero_rows_and_svg(tmp_path):
    logo = IP.saliency_logo(["NNN"], [np.ones(3)], radius=1)
    assert not logo.weights.any()
    svg = IP.saliency_logo(["ACG"], [np.ones(3)], radius=1).to_svg()
    assert svg.startswith("<svg") and svg.count("<text") == 4
    logo.write_tsv(tmp_path / "l.tsv")
    assert (tmp_path / "l.tsv").read_text().splitlines()[0] == "position\twA\twC\twG\twT"


def test_window_conventions():
    assert IP.window_bounds(100, 100, "inclusive") == (50, 151)
    assert IP.window_bounds(100, 100, "half-open") == (50, 150)
    assert IP.window_length(100, "inclusive") == 101
    with pytest.raises(ValueError):
        IP.window_bounds(0, 10, "open")


def test_polyat_scan_examples():
    seq = "G" * 50 + "AAAAA" + "G" * 50
    assert IP.polyat_scan(seq, 50, window=10)
    assert not IP.polyat_scan(seq, 2, window=10)
    assert IP.polyat_scan("TTTTTGG", 6, window=20)
    with pytest.raises(IndexError):
        IP.polyat_scan(seq, 500)


def brute_probability(n, k):
    hits = sum(1 for s in itertools.product("ACGT", repeat=n) if IP.has_polyat("".join(s), k))
    return hits / 4 ** n


@pytest.mark.parametrize("n, k", [(5, 5), (7, 3), (6, 2), (4, 1), (3, 4), (0, 2)])
def test_exact_dp_matches_enumeration(n, k):
    assert IP.exact_polyat_probability(n, k) == pytest.approx(brute_probability(n, k), abs=1e-15)


def test_exact_dp_closed_forms():
    assert IP.exact_polyat_probability(5, 5) == pytest.approx(2 / 1024)
    for n in (1, 10, 50):
        assert IP.exact_polyat_probability(n, 1) == pytest.approx(1 - 0.5 ** n)


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="ACGT", max_size=40), st.integers(1, 6))
def test_regex_agrees_with_substring_check(s, k):
    assert bool(IP.polyat_regex(k).search(s)) == IP.has_polyat(s, k)
    assert IP.has_polyat(s, k) == bool(re.search(f"(A{{{k}}}|T{{{k}}})", s))


def test_monte_carlo_is_seeded_and_close():
    a = IP.polyat_random_baseline(30, 4, trials=20_000, seed=1)
    assert a == IP.polyat_random_baseline(30, 4, trials=20_000, seed=1)
    exact = IP.exact_polyat_probability(30, 4)
    assert abs(a - exact) < 4 * IP.binomial_half_width(exact, 20_000)


def test_polyat_enrichment_counts():
    from circformer.genome_io import GenomeRecord
    recs = {"c": GenomeRecord("c", "G" * 20 + "TTTTTT" + "G" * 40)}
    assert IP.polyat_enrichment(recs, [("c", 22), ("c", 60)], window=10) == (1, 2)
