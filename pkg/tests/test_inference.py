from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circformer import datasets, inference as I, synthetic, training
from circformer.genome_io import GenomeRecord
from circformer.model import CircFormerMoE, ModelConfig, RoutingError, predict_proba


def _model(species=("s",), **kw):
    return CircFormerMoE(ModelConfig(species=species, embed_dim=8, conv_blocks=1, kernel_size=3,
                                     dilations=(1,), attn_blocks=1, heads=2, random_features=8, **kw),
                         dtype=np.float64)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.integers(1, 60), st.data())
def test_window_starts_cover_everything(length, window, data):
    stride = data.draw(st.one_of(st.none(), st.integers(1, window)))
    starts = I.window_starts(length, window, stride)
    covered = np.zeros(length, bool)
    for s in starts:
        assert 0 <= s
        covered[s:s + window] = True
    assert covered.all()
    assert starts == sorted(set(starts))


def test_default_stride_overlap():
    assert I.default_stride(5001) == 5001 - 1667
    assert I.default_stride(1) == 1


def test_sliding_window_matches_brute_force_mean():
    model = _model()
    rng = np.random.default_rng(0)
    seq = "".join(rng.choice(list("ACGT"), 157))
    window, stride = 31, 11
    track = I.sliding_window_predict(model, GenomeRecord("c", seq), "s", window, stride, batch_size=3)
    sums, counts = np.zeros(len(seq)), np.zeros(len(seq))
    for s in I.window_starts(len(seq), window, stride):
        x = datasets.one_hot_batch([seq[s:s + window]], datasets.SSD_ALPHABET, np.float64)
        p = predict_proba(model.forward_ssd(x, "s"))[0]
        sums[s:s + window] += p
        counts[s:s + window] += 1
    np.testing.assert_allclose(track.probs, sums / counts, atol=1e-12)
    np.testing.assert_array_equal(track.coverage, counts)
    assert track.chrom == "c" and track.meta["overlap"] == 20


def test_sliding_window_short_sequence_padded():
    track = I.sliding_window_predict(_model(), "ACG", "s", window=9)
    assert len(track) == 3 and np.all(track.coverage == 1)


def test_sliding_window_unknown_species():
    with pytest.raises(RoutingError):
        I.sliding_window_predict(_model(), "ACGT", "other", window=3)


def _brute_peaks(p, thr):
    out = []
    n = len(p)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and p[j + 1] == p[i]:
            j += 1
        left = p[i - 1] if i else -np.inf
        right = p[j + 1] if j + 1 < n else -np.inf
        if p[i] > max(left, right, thr):
            out.append((i, float(p[i])))
        i = j + 1
    return out


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 6), max_size=30), st.integers(0, 6))
def test_detect_peaks_oracle(vals, thr):
    p = np.array(vals, dtype=float) / 6
    assert I.detect_peaks(p, thr / 6) == _brute_peaks(p, thr / 6)


def test_detect_peaks_plateau_and_separation():
    p = np.array([0.1, 0.9, 0.9, 0.2, 0.8, 0.1, 0.95])
    assert I.detect_peaks(p, 0.5) == [(1, 0.9), (4, 0.8), (6, 0.95)]
    assert I.detect_peaks(p, 0.5, min_separation=3) == [(1, 0.9), (6, 0.95)]


def test_top_k_select_ties():
    assert I.top_k_select([(5, 0.5), (2, 0.5), (9, 0.7)], 2) == [9, 2]
    assert I.top_k_select([(1, 0.3)], 4) == [1]
    with pytest.raises(ValueError):
        I.top_k_select([], -1)


@given(st.lists(st.integers(0, 300), max_size=15, unique=True), st.integers(1, 300))
def test_pair_candidates_oracle(sites, span):
    ref = sorted((a, b) for a in sites for b in sites if 0 < b - a <= span)
    assert sorted(I.pair_candidates(sites, span)) == ref


def test_track_io_round_trip(tmp_path):
    probs = np.array([0.0, 0.25, 0.123456789, 1.0])
    track = I.PredictionTrack("chrX", probs, np.ones(4, int), {"window": 3})
    I.write_track_tsv(tmp_path / "t.tsv", [track])
    np.testing.assert_allclose(I.read_track_tsv(tmp_path / "t.tsv")["chrX"], probs, atol=5e-7)
    I.write_track_binary(tmp_path / "t.bin", track)
    back = I.read_track_binary(tmp_path / "t.bin")
    assert back.chrom == "chrX"
    np.testing.assert_array_equal(back.probs, probs.astype(np.float32))
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        I.read_track_binary(tmp_path / "x.bin")


def test_calls_recover_planted_pairs():
    corpus = synthetic.plant_corpus(n_species=1, genome_length=8000, n_circ=5, span=(200, 1500),
                                    n_families=4, seed=0)
    sp = corpus.species[0]
    ssd, _ = datasets.build_ssd_dataset(corpus.genomes, corpus.annotations, 101, 3.0, 0)
    # no positional encoding: the detector must not key on the window center
    cfg = ModelConfig(species=(sp,), embed_dim=16, conv_blocks=2, dilations=(1, 2), attn_blocks=1,
                      heads=2, random_features=16, positional_encoding=False, seed=0)
    ssd_model = CircFormerMoE(cfg)
    training.fit(ssd_model, ssd, training.TrainConfig("ssd", epochs=40, batch_size=4, lr=5e-3,
                                                      pos_weight=20, pos_weight_epochs=30))
    ssp, _ = datasets.build_ssp_dataset(corpus.genomes, corpus.annotations, 101, 4, 0)
    ssp_model = training.build_ssp_model(ssd_model)
    # the pairing cue is a cross-half interaction; the loss plateaus for a few
    # dozen epochs before it is picked up
    training.fit(ssp_model, ssp, training.TrainConfig("ssp", epochs=100, batch_size=5, lr=3e-3,
                                                      pos_weight=4, pos_weight_epochs=100))
    calls = I.call_circrnas(ssd_model, corpus.genomes[sp], sp,
                            I.CallConfig(window=101, context=101, max_span=2000, min_separation=5),
                            ssp_model=ssp_model)
    truth = {(a.site_a, a.site_b) for a in corpus.annotations}
    assert len(truth & {(c.site_a, c.site_b) for c in calls}) >= 4
