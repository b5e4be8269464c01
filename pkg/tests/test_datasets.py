from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circformer import datasets as D
from circformer.genome_io import CircRnaAnnotation, GenomeRecord, extract_window


def _toy(seed=0, n=300, species=("s1", "s2")):
    rng = np.random.default_rng(seed)
    genomes, anns = {}, []
    for sp in species:
        genomes[sp] = {"c1": GenomeRecord("c1", "".join(rng.choice(list("ACGT"), n)))}
        for j, (a, b) in enumerate([(40, 90), (120, 200), (210, 260)]):
            anns.append(CircRnaAnnotation(sp, "c1", a, b, f"{sp}_{j}"))
    return genomes, anns


def test_one_hot_columns():
    x = D.one_hot_encode("ACGTN")
    assert x.shape == (5, 5)
    np.testing.assert_array_equal(x, np.eye(5))
    with pytest.raises(ValueError):
        D.one_hot_encode("ACx")
    m = D.one_hot_encode("AM", D.SSP_ALPHABET)
    assert m.shape == (2, 6) and m[1, 5] == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 200), max_size=20, unique=True), st.integers(0, 200), st.integers(0, 30))
def test_labels_in_window_oracle(sites, center, radius):
    sites = sorted(sites)
    ref = tuple(s - center + radius for s in sites if abs(s - center) <= radius)
    assert D.labels_in_window(sites, center, radius) == ref


def test_ssd_dataset_windows_and_labels():
    genomes, anns = _toy()
    samples, man = D.build_ssd_dataset(genomes, anns, window=41, neg_per_pos_window=0.5, seed=3)
    sites = {sp: sorted({s for a in anns if a.species == sp for s in (a.site_a, a.site_b)}) for sp in genomes}
    for s in samples:
        assert len(s.window) == 41
        assert s.window == extract_window(genomes[s.species]["c1"], s.center, 20)
        ref = tuple(p - s.center + 20 for p in sites[s.species] if abs(p - s.center) <= 20)
        assert s.label_positions == ref
    pos = [s for s in samples if s.center in sites[s.species]]
    assert len(pos) == 12
    neg = [s for s in samples if s not in pos]
    assert all(not s.label_positions for s in neg)
    assert Counter(s.species for s in neg) == {"s1": 3, "s2": 3}
    total = sum(len(s.window) for s in samples)
    npos = sum(len(s.label_positions) for s in samples)
    assert man.ratio == pytest.approx((total - npos) / npos)


def test_ssd_dataset_is_seeded():
    genomes, anns = _toy()
    a, _ = D.build_ssd_dataset(genomes, anns, 41, 0.5, seed=1)
    b, _ = D.build_ssd_dataset(genomes, anns, 41, 0.5, seed=1)
    c, _ = D.build_ssd_dataset(genomes, anns, 41, 0.5, seed=2)
    assert a == b and a != c


def test_ssd_rejects_even_window_and_missing_chrom():
    genomes, anns = _toy()
    with pytest.raises(D.DatasetError):
        D.build_ssd_dataset(genomes, anns, window=40)
    with pytest.raises(D.DatasetError):
        D.build_ssd_dataset({"s1": {}}, [anns[0]], window=41)


def test_ssp_dataset_structure():
    genomes, anns = _toy()
    samples, man = D.build_ssp_dataset(genomes, anns, context=21, neg_ratio=2, seed=0)
    assert man.species_counts == {"s1": {"positives": 3, "negatives": 6}, "s2": {"positives": 3, "negatives": 6}}
    positives = {(a.species, a.site_a, a.site_b) for a in anns}
    for s in samples:
        assert len(s.sequence) == 2 * 21 + 5
        assert s.sequence[21:26] == "MMMMM"
        rec = genomes[s.species]["c1"]
        assert s.sequence == extract_window(rec, s.site_a, 10) + "MMMMM" + extract_window(rec, s.site_b, 10)
        assert s.site_a < s.site_b
        assert ((s.species, s.site_a, s.site_b) in positives) == bool(s.label)
    assert man.ratio == pytest.approx(2.0)


def test_ssp_needs_two_circrnas():
    genomes, anns = _toy()
    with pytest.raises(D.DatasetError):
        D.build_ssp_dataset(genomes, anns[:1], context=21)


def test_manifest_round_trip(tmp_path):
    genomes, anns = _toy()
    samples, man = D.build_ssd_dataset(genomes, anns, 41, 0.5, seed=0)
    D.write_dataset(tmp_path, samples, man)
    back, man2 = D.read_dataset(tmp_path)
    assert [(s.species, s.window, s.label_positions) for s in samples] == \
           [(s.species, s.window, s.label_positions) for s in back]
    assert man2.task == "SSD" and man2.params["window"] == 41
    assert man2.ratio == pytest.approx(man.ratio, abs=1e-4)


def test_split_samples_partitions():
    parts = D.split_samples(list(range(100)), (0.8, 0.1, 0.1), seed=0)
    assert [len(p) for p in parts] == [80, 10, 10]
    assert sorted(sum(parts, [])) == list(range(100))
    with pytest.raises(ValueError):
        D.split_samples([1], (0.5, 0.4))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 25), min_size=1, max_size=4), st.integers(1, 4), st.integers(0, 5))
def test_balanced_batches_property(sizes, quota, seed):
    pools = {f"sp{i}": [(f"sp{i}", j) for j in range(n)] for i, n in enumerate(sizes)}
    it = D.BalancedBatchIterator(pools, quota * len(sizes), seed)
    batches = list(it.epoch(0))
    assert len(batches) == math.ceil(max(sizes) / quota)
    seen = Counter()
    for batch in batches:
        assert Counter(sp for sp, _ in batch) == {sp: quota for sp in pools}
        seen.update(batch)
    for sp, pool in pools.items():
        counts = [seen[x] for x in pool]
        # without replacement: every sample drawn before any repeats
        assert max(counts) - min(counts) <= 1
    assert list(it.epoch(0)) == batches


def test_balanced_batch_size_checks():
    with pytest.raises(ValueError):
        D.BalancedBatchIterator({"a": [1], "b": [2]}, 3)
    with pytest.raises(ValueError):
        D.BalancedBatchIterator({"a": [1], "b": []}, 2)
