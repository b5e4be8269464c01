"""Genome-scale prediction: overlap-averaged windows, peaks, pairing, calls."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datasets import SSD_ALPHABET, SSP_ALPHABET, one_hot_batch, ssp_sequence
from .genome_io import GenomeRecord, padded_slice
from .model import CircFormerMoE, RoutingError, predict_proba

TRACK_MAGIC = b"CFTK"
TRACK_VERSION = 1


@dataclass
class PredictionTrack:
    chrom: str
    probs: np.ndarray
    coverage: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.probs)


@dataclass(frozen=True, order=True)
class CircRnaCall:
    chrom: str
    site_a: int
    site_b: int
    pair_score: float
    score_a: float
    score_b: float


def default_stride(window: int) -> int:
    """Windows overlap by ceil(W/3)."""
    return max(1, window - math.ceil(window / 3))


def window_starts(length: int, window: int, stride: int | None = None) -> list[int]:
    """Left edges of the scan; a final right-aligned window covers the tail."""
    stride = stride or default_stride(window)
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def sliding_window_predict(model: CircFormerMoE, sequence: str | GenomeRecord, species: str,
                           window: int = 5001, stride: int | None = None,
                           batch_size: int = 8, chrom: str | None = None) -> PredictionTrack:
    """Mean SSD probability per position over every covering window."""
    if species not in model.config.species:
        raise RoutingError(f"species {species!r} not in model; known: {list(model.config.species)}")
    if isinstance(sequence, GenomeRecord):
        chrom = chrom or sequence.id
        sequence = sequence.sequence
    stride = stride or default_stride(window)
    n = len(sequence)
    starts = window_starts(n, window, stride)
    total = np.zeros(n, dtype=np.float64)
    coverage = np.zeros(n, dtype=np.int64)
    # windows are reduced in start order so the sum is schedule independent
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        x = one_hot_batch([padded_slice(sequence, s, s + window) for s in chunk],
                          SSD_ALPHABET, model.dtype)
        probs = predict_proba(model.forward_ssd(x, species))
        for s, p in zip(chunk, probs):
            stop = min(s + window, n)
            total[s:stop] += p[:stop - s]
            coverage[s:stop] += 1
    meta = {"window": window, "stride": stride, "overlap": window - stride, "species": species}
    return PredictionTrack(chrom or "", total / np.maximum(coverage, 1), coverage, meta)


def detect_peaks(track, threshold: float = 0.5, min_separation: int = 1) -> list[tuple[int, float]]:
    """Local maxima above ``threshold`` (plateaus -> leftmost index).

    Candidates are accepted greedily by descending probability (ties -> lower
    index); a candidate closer than ``min_separation`` to an accepted peak is
    dropped.  Returned sorted by position.
    """
    probs = np.asarray(track.probs if isinstance(track, PredictionTrack) else track, dtype=np.float64)
    n = len(probs)
    if n == 0:
        return []
    # run-length encode plateaus
    change = np.flatnonzero(np.diff(probs) != 0) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [n]))
    vals = probs[starts]
    left = np.concatenate(([-np.inf], vals[:-1]))
    right = np.concatenate((vals[1:], [-np.inf]))
    keep = (vals > left) & (vals > right) & (vals > threshold)
    cand = [(int(s), float(v)) for s, v in zip(starts[keep], vals[keep])]
    if min_separation > 1:
        cand.sort(key=lambda t: (-t[1], t[0]))
        accepted: list[tuple[int, float]] = []
        taken = np.zeros(n, dtype=bool)
        for pos, val in cand:
            lo, hi = max(0, pos - min_separation + 1), min(n, pos + min_separation)
            if taken[lo:hi].any():
                continue
            taken[pos] = True
            accepted.append((pos, val))
        cand = accepted
    return sorted(cand)


def top_k_select(peaks: Sequence[tuple[int, float]], k: int) -> list[int]:
    """Positions of the k most probable peaks (ties -> lower position)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    ranked = sorted(peaks, key=lambda t: (-t[1], t[0]))
    return [p for p, _ in ranked[:k]]


def pair_candidates(sites: Sequence[int], max_span: int = 100_000) -> list[tuple[int, int]]:
    """All pairs (a, b) with 0 < b - a <= max_span."""
    sites = sorted(sites)
    out = []
    for i, a in enumerate(sites):
        for b in sites[i + 1:]:
            if b - a > max_span:
                break
            if b > a:
                out.append((a, b))
    return out


@dataclass
class CallConfig:
    window: int = 5001
    stride: int | None = None
    peak_threshold: float = 0.5
    min_separation: int = 1
    max_span: int = 100_000
    context: int = 1001
    pair_threshold: float = 0.5
    batch_size: int = 8


def score_pairs(model: CircFormerMoE, record: GenomeRecord, species: str,
                pairs: Sequence[tuple[int, int]], context: int, batch_size: int = 8) -> np.ndarray:
    scores = np.zeros(len(pairs), dtype=np.float64)
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        x = one_hot_batch([ssp_sequence(record, a, b, context) for a, b in chunk],
                          SSP_ALPHABET, model.dtype)
        scores[i:i + len(chunk)] = predict_proba(model.forward_ssp(x, species))
    return scores


def call_circrnas(model: CircFormerMoE, genome: Mapping[str, GenomeRecord] | Iterable[GenomeRecord],
                  species: str, config: CallConfig | None = None,
                  ssp_model: CircFormerMoE | None = None) -> list[CircRnaCall]:
    """Detect sites, pair them within ``max_span`` and keep pairs the SSP head accepts.

    ``ssp_model`` scores pairs when the SSD and SSP heads live in separate
    fine-tuned models; by default ``model`` does both.
    """
    config = config or CallConfig()
    ssp_model = ssp_model or model
    for m in (model, ssp_model):
        if species not in m.config.species:
            raise RoutingError(f"species {species!r} not in model; known: {list(m.config.species)}")
    records = genome.values() if isinstance(genome, Mapping) else genome
    calls = []
    for rec in sorted(records, key=lambda r: r.id):
        track = sliding_window_predict(model, rec, species, config.window, config.stride,
                                       config.batch_size)
        peaks = detect_peaks(track, config.peak_threshold, config.min_separation)
        if not peaks:
            continue
        peak_prob = dict(peaks)
        pairs = pair_candidates([p for p, _ in peaks], config.max_span)
        if not pairs:
            continue
        scores = score_pairs(ssp_model, rec, species, pairs, config.context, config.batch_size)
        for (a, b), s in zip(pairs, scores):
            if s > config.pair_threshold:
                calls.append(CircRnaCall(rec.id, a, b, float(s), peak_prob[a], peak_prob[b]))
    return sorted(calls, key=lambda c: (c.chrom, c.site_a, c.site_b))


# ---------------------------------------------------------------- output formats

def write_track_tsv(path, tracks: Iterable[PredictionTrack]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tracks:
            for meta_key in sorted(t.meta):
                fh.write(f"# {t.chrom} {meta_key}={t.meta[meta_key]}\n")
            for pos, p in enumerate(t.probs):
                fh.write(f"{t.chrom}\t{pos}\t{p:.6f}\n")


def read_track_tsv(path) -> dict[str, np.ndarray]:
    vals: dict[str, list[float]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            chrom, pos, p = line.rstrip("\n").split("\t")
            lst = vals.setdefault(chrom, [])
            if int(pos) != len(lst):
                raise ValueError(f"{path}: positions for {chrom} are not contiguous at {pos}")
            lst.append(float(p))
    return {c: np.array(v) for c, v in vals.items()}


def write_track_binary(path, track: PredictionTrack) -> None:
    name = track.chrom.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TRACK_MAGIC + struct.pack("<I", TRACK_VERSION))
        fh.write(struct.pack("<I", len(name)) + name)
        fh.write(struct.pack("<I", len(track.probs)))
        fh.write(np.asarray(track.probs, dtype="<f4").tobytes())


def read_track_binary(path) -> PredictionTrack:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TRACK_MAGIC:
        raise ValueError(f"{path}: not a binary track")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != TRACK_VERSION:
        raise ValueError(f"{path}: unsupported track version {version}")
    (nlen,) = struct.unpack("<I", raw[8:12])
    chrom = raw[12:12 + nlen].decode("utf-8")
    off = 12 + nlen
    (n,) = struct.unpack("<I", raw[off:off + 4])
    probs = np.frombuffer(raw[off + 4:off + 4 + 4 * n], dtype="<f4").astype(np.float64)
    if len(probs) != n:
        raise ValueError(f"{path}: truncated track")
    return PredictionTrack(chrom, probs, np.ones(n, dtype=np.int64))


def write_calls(path, calls: Iterable[CircRnaCall]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in calls:
            fh.write(f"{c.chrom}\t{c.site_a}\t{c.site_b}\t{c.pair_score:.6f}\t"
                     f"{c.score_a:.6f}\t{c.score_b:.6f}\n")
