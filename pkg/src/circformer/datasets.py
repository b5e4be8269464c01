"""SSD / SSP dataset construction, one-hot encoding and balanced batching.

Genomes are passed as ``{species: {chrom: GenomeRecord}}``.
"""

from __future__ import annotations

import bisect
import logging
import math
import os
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .genome_io import CircRnaAnnotation, GenomeRecord, extract_window

log = logging.getLogger(__name__)

SSD_ALPHABET = ("A", "C", "G", "T", "N")
SSP_ALPHABET = ("A", "C", "G", "T", "N", "M")
SPACER = "MMMMM"

Genomes = Mapping[str, Mapping[str, GenomeRecord]]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SsdSample:
    species: str
    window: str
    label_positions: tuple[int, ...]
    chrom: str = ""
    center: int = -1

    def labels(self) -> np.ndarray:
        y = np.zeros(len(self.window), dtype=np.float32)
        y[list(self.label_positions)] = 1.0
        return y


@dataclass(frozen=True)
class SspSample:
    species: str
    sequence: str
    label: int
    chrom: str = ""
    site_a: int = -1
    site_b: int = -1


@dataclass
class DatasetManifest:
    task: str
    seed: int
    params: dict[str, float | int | str] = field(default_factory=dict)
    species_counts: dict[str, dict[str, float | int]] = field(default_factory=dict)
    ratio: float = float("nan")

    def to_text(self) -> str:
        lines = [f"task = {self.task}", f"seed = {self.seed}"]
        lines += [f"{k} = {v}" for k, v in sorted(self.params.items())]
        lines.append(f"ratio = {self.ratio:.4f}")
        cols = sorted({c for row in self.species_counts.values() for c in row})
        lines.append("")
        lines.append("[species]")
        lines.append("\t".join(["species"] + cols))
        for sp in sorted(self.species_counts):
            row = self.species_counts[sp]
            lines.append("\t".join([sp] + [_fmt(row[c]) for c in cols]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        head, _, table = text.partition("[species]")
        kv = {}
        for line in head.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
        man = cls(task=kv.pop("task"), seed=int(kv.pop("seed")))
        man.ratio = float(kv.pop("ratio"))
        man.params = {k: _parse_scalar(v) for k, v in kv.items()}
        rows = [r.split("\t") for r in table.strip().splitlines()]
        if rows:
            cols = rows[0][1:]
            for r in rows[1:]:
                man.species_counts[r[0]] = {c: _parse_scalar(v) for c, v in zip(cols, r[1:])}
        return man


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _parse_scalar(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


# ---------------------------------------------------------------- encoding

_TABLES: dict[tuple[str, ...], np.ndarray] = {}


def _lookup(alphabet: Sequence[str]) -> np.ndarray:
    key = tuple(alphabet)
    if key not in _TABLES:
        table = np.full(256, -1, dtype=np.int16)
        for i, ch in enumerate(key):
            table[ord(ch)] = i
        _TABLES[key] = table
    return _TABLES[key]


def encode_indices(sequence: str, alphabet: Sequence[str]) -> np.ndarray:
    codes = np.frombuffer(sequence.encode("latin-1", errors="replace"), dtype=np.uint8)
    idx = _lookup(alphabet)[codes]
    bad = np.flatnonzero(idx < 0)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"character {sequence[i]!r} at position {i} not in alphabet {tuple(alphabet)}")
    return idx


def one_hot_encode(sequence: str, alphabet: Sequence[str] = SSD_ALPHABET,
                   dtype=np.float32) -> np.ndarray:
    """[len(sequence), len(alphabet)] indicator matrix."""
    idx = encode_indices(sequence, alphabet)
    out = np.zeros((len(sequence), len(alphabet)), dtype=dtype)
    out[np.arange(len(sequence)), idx] = 1
    return out


def one_hot_batch(sequences: Sequence[str], alphabet: Sequence[str] = SSD_ALPHABET,
                  dtype=np.float32) -> np.ndarray:
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ValueError(f"batch sequences have unequal lengths {sorted(lengths)}")
    (length,) = lengths
    idx = np.stack([encode_indices(s, alphabet) for s in sequences])
    out = np.zeros((len(sequences), length, len(alphabet)), dtype=dtype)
    np.put_along_axis(out, idx[..., None].astype(np.intp), 1, axis=2)
    return out


# ---------------------------------------------------------------- SSD

def _species_rng(seed: int, species: str) -> np.random.Generator:
    # keyed by name so a species' samples do not depend on which others are built
    return np.random.default_rng([seed, zlib.crc32(species.encode("utf-8"))])


def _sites_by_chrom(annotations: Sequence[CircRnaAnnotation]) -> dict[str, list[int]]:
    by_chrom: dict[str, set[int]] = defaultdict(set)
    for a in annotations:
        by_chrom[a.chrom].update((a.site_a, a.site_b))
    return {c: sorted(s) for c, s in by_chrom.items()}


def _select_species(annotations, species):
    by_species: dict[str, list[CircRnaAnnotation]] = defaultdict(list)
    for a in annotations:
        by_species[a.species].append(a)
    wanted = sorted(by_species) if species is None else list(species)
    for sp in wanted:
        if sp not in by_species:
            raise DatasetError(f"no annotations for species {sp!r}")
    return wanted, by_species


def _check_genome(genomes: Genomes, sp: str, anns: Sequence[CircRnaAnnotation]):
    if sp not in genomes:
        raise DatasetError(f"no genome supplied for species {sp!r}")
    for a in anns:
        rec = genomes[sp].get(a.chrom)
        if rec is None:
            raise DatasetError(f"{a.circ_id}: unknown chromosome {a.chrom!r}")
        if not 0 <= a.site_a < a.site_b < len(rec):
            raise DatasetError(f"{a.circ_id}: sites ({a.site_a}, {a.site_b}) out of range")


def _free_center_intervals(length: int, sites: list[int], radius: int) -> list[tuple[int, int]]:
    """Half-open center ranges whose window holds no annotated site."""
    free, cur = [], 0
    for s in sites:
        lo, hi = s - radius, s + radius + 1
        if lo > cur:
            free.append((cur, min(lo, length)))
        cur = max(cur, hi)
        if cur >= length:
            break
    if cur < length:
        free.append((cur, length))
    return [(a, b) for a, b in free if b > a]


def labels_in_window(sorted_sites: list[int], center: int, radius: int) -> tuple[int, ...]:
    lo = bisect.bisect_left(sorted_sites, center - radius)
    hi = bisect.bisect_right(sorted_sites, center + radius)
    return tuple(s - (center - radius) for s in sorted_sites[lo:hi])


def build_ssd_dataset(genomes: Genomes, annotations: Sequence[CircRnaAnnotation],
                      window: int = 5001, neg_per_pos_window: float = 0.5, seed: int = 0,
                      species: Sequence[str] | None = None,
                      ) -> tuple[list[SsdSample], DatasetManifest]:
    """One window per distinct splice site plus sampled site-free windows.

    Labels list every annotated site inside the window, not only the center.
    """
    if window < 1 or window % 2 == 0:
        raise DatasetError(f"window length must be odd and positive, got {window}")
    radius = (window - 1) // 2
    wanted, by_species = _select_species(annotations, species)
    samples: list[SsdSample] = []
    man = DatasetManifest("SSD", seed, {"window": window,
                                        "neg_per_pos_window": neg_per_pos_window})
    for sp in wanted:
        anns = by_species[sp]
        _check_genome(genomes, sp, anns)
        rng = _species_rng(seed, sp)
        sites = _sites_by_chrom(anns)
        positives = []
        for chrom in sorted(sites):
            rec = genomes[sp][chrom]
            for c in sites[chrom]:
                positives.append(SsdSample(sp, extract_window(rec, c, radius),
                                           labels_in_window(sites[chrom], c, radius), chrom, c))
        n_neg = math.ceil(neg_per_pos_window * len(positives))
        negatives = _sample_negative_windows(genomes[sp], sites, radius, n_neg, rng, sp)
        sp_samples = positives + negatives
        samples.extend(sp_samples)
        n_pos_positions = sum(len(s.label_positions) for s in sp_samples)
        man.species_counts[sp] = {
            "samples": len(sp_samples), "positive_windows": len(positives),
            "negative_windows": len(negatives), "positive_positions": n_pos_positions,
            "np_ratio": np_ratio(sp_samples) if n_pos_positions else float("nan"),
        }
    man.ratio = np_ratio(samples)
    return samples, man


def _sample_negative_windows(genome: Mapping[str, GenomeRecord], sites, radius, n, rng, sp):
    if n <= 0:
        return []
    spans = []
    for chrom in sorted(genome):
        rec = genome[chrom]
        for lo, hi in _free_center_intervals(len(rec), sites.get(chrom, []), radius):
            spans.append((chrom, lo, hi))
    total = sum(hi - lo for _, lo, hi in spans)
    if total == 0:
        log.warning("species %s: genome too short for any site-free window; no negatives", sp)
        return []
    if total < n:
        log.warning("species %s: only %d site-free centers, wanted %d", sp, total, n)
        n = total
    picks = np.sort(rng.choice(total, size=n, replace=False))
    offsets = np.cumsum([0] + [hi - lo for _, lo, hi in spans])
    out = []
    for p in picks:
        j = int(np.searchsorted(offsets, p, side="right")) - 1
        chrom, lo, _ = spans[j]
        c = lo + int(p - offsets[j])
        out.append(SsdSample(sp, extract_window(genome[chrom], c, radius), (), chrom, c))
    return out


def np_ratio(samples: Sequence[SsdSample]) -> float:
    """(negative positions) / (positive positions) over all windows."""
    total = sum(len(s.window) for s in samples)
    pos = sum(len(s.label_positions) for s in samples)
    if pos == 0:
        raise DatasetError("N/P ratio undefined: no positive label positions")
    return (total - pos) / pos


# ---------------------------------------------------------------- SSP

def ssp_sequence(record: GenomeRecord, site_a: int, site_b: int, context: int) -> str:
    """context(lower site) + spacer + context(higher site)."""
    if context < 1 or context % 2 == 0:
        raise DatasetError(f"context length must be odd and positive, got {context}")
    r = (context - 1) // 2
    lo, hi = sorted((site_a, site_b))
    return extract_window(record, lo, r) + SPACER + extract_window(record, hi, r)


def _ssp_pair_sequence(genome, s1, s2, context):
    (c1, p1), (c2, p2) = sorted((s1, s2))
    r = (context - 1) // 2
    return extract_window(genome[c1], p1, r) + SPACER + extract_window(genome[c2], p2, r)


def build_ssp_dataset(genomes: Genomes, annotations: Sequence[CircRnaAnnotation],
                      context: int = 1001, neg_ratio: float = 10.0, seed: int = 0,
                      species: Sequence[str] | None = None, max_attempts: int = 100,
                      ) -> tuple[list[SspSample], DatasetManifest]:
    """Positive pairs from annotations; negatives join sites of two different circRNAs.

    Negatives are drawn with replacement and never coincide with a positive
    pair or join a site to itself.
    """
    if context < 1 or context % 2 == 0:
        raise DatasetError(f"context length must be odd and positive, got {context}")
    if neg_ratio <= 0:
        raise DatasetError("neg_ratio must be positive")
    wanted, by_species = _select_species(annotations, species)
    man = DatasetManifest("SSP", seed, {"context": context, "neg_ratio": neg_ratio})
    samples: list[SspSample] = []
    for sp in wanted:
        anns = sorted(by_species[sp])
        _check_genome(genomes, sp, anns)
        if len(anns) < 2:
            raise DatasetError(f"species {sp!r} has fewer than 2 circRNAs; cannot build negatives")
        genome = genomes[sp]
        pos_pairs = {((a.chrom, a.site_a), (a.chrom, a.site_b)) for a in anns}
        positives = [SspSample(sp, ssp_sequence(genome[a.chrom], a.site_a, a.site_b, context),
                               1, a.chrom, a.site_a, a.site_b) for a in anns]
        n_neg = math.floor(neg_ratio * len(positives))
        rng = _species_rng(seed, sp)
        negatives = []
        attempts = 0
        while len(negatives) < n_neg:
            attempts += 1
            if attempts > max_attempts * max(n_neg, 1):
                raise DatasetError(f"species {sp!r}: could not draw {n_neg} valid negative pairs")
            u, v = rng.choice(len(anns), size=2, replace=False)
            su, sv = anns[u], anns[v]
            s1 = (su.chrom, (su.site_a, su.site_b)[rng.integers(2)])
            s2 = (sv.chrom, (sv.site_a, sv.site_b)[rng.integers(2)])
            pair = tuple(sorted((s1, s2)))
            if s1 == s2 or pair in pos_pairs:
                continue
            (c1, p1), (c2, p2) = pair
            negatives.append(SspSample(sp, _ssp_pair_sequence(genome, s1, s2, context), 0,
                                       c1 if c1 == c2 else f"{c1}|{c2}", p1, p2))
        samples.extend(positives + negatives)
        man.species_counts[sp] = {"positives": len(positives), "negatives": len(negatives)}
    n_pos = sum(s.label for s in samples)
    man.ratio = (len(samples) - n_pos) / n_pos
    man.params["sequence_length"] = 2 * context + len(SPACER)
    return samples, man


# ---------------------------------------------------------------- splitting / batching

def split_samples(samples: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded uniform split into len(fractions) parts."""
    if not math.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(len(samples))
    bounds = np.round(np.cumsum((0,) + tuple(fractions)) * len(samples)).astype(int)
    return [[samples[i] for i in order[bounds[j]:bounds[j + 1]]] for j in range(len(fractions))]


def group_by_species(samples: Sequence) -> dict[str, list]:
    out: dict[str, list] = defaultdict(list)
    for s in samples:
        out[s.species].append(s)
    return dict(sorted(out.items()))


class BalancedBatchIterator:
    """Batches holding ``batch_size / S`` samples from each of S species.

    Each species pool is consumed without replacement and reshuffled when it
    runs dry.  An epoch lasts until the largest pool has been seen once.
    """

    def __init__(self, pools: Mapping[str, Sequence], batch_size: int, seed: int = 0,
                 batches_per_epoch: int | None = None):
        self.species = sorted(pools)
        s = len(self.species)
        if s == 0:
            raise ValueError("no species pools given")
        if batch_size < s:
            raise ValueError(f"batch_size {batch_size} smaller than species count {s}")
        if batch_size % s:
            raise ValueError(f"batch_size {batch_size} not divisible by species count {s}")
        for sp in self.species:
            if not pools[sp]:
                raise ValueError(f"empty pool for species {sp!r}")
        self.pools = {sp: list(pools[sp]) for sp in self.species}
        self.quota = batch_size // s
        self.seed = seed
        largest = max(len(p) for p in self.pools.values())
        self.batches_per_epoch = batches_per_epoch or math.ceil(largest / self.quota)

    def epoch(self, index: int = 0) -> Iterator[list]:
        rng = np.random.default_rng([self.seed, index])
        orders = {sp: list(rng.permutation(len(self.pools[sp]))) for sp in self.species}
        for _ in range(self.batches_per_epoch):
            batch = []
            for sp in self.species:
                pool, order = self.pools[sp], orders[sp]
                for _ in range(self.quota):
                    if not order:
                        order.extend(rng.permutation(len(pool)))
                    batch.append(pool[order.pop(0)])
            yield batch

    def __iter__(self):
        return self.epoch(0)


def balanced_batch_iterator(pools, batch_size, seed=0, epoch: int = 0):
    return BalancedBatchIterator(pools, batch_size, seed).epoch(epoch)


# ---------------------------------------------------------------- serialization

def write_ssd(path, samples: Sequence[SsdSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(f"{s.species}\t{s.window}\t{','.join(map(str, s.label_positions))}\n")


def read_ssd(path) -> list[SsdSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            sp, window, labels = line.rstrip("\n").split("\t")
            out.append(SsdSample(sp, window, tuple(int(x) for x in labels.split(",") if x)))
    return out


def write_ssp(path, samples: Sequence[SspSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(f"{s.species}\t{s.sequence}\t{s.label}\n")


def read_ssp(path) -> list[SspSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            sp, seq, label = line.rstrip("\n").split("\t")
            out.append(SspSample(sp, seq, int(label)))
    return out


def write_dataset(out_dir, samples, manifest: DatasetManifest) -> str:
    os.makedirs(out_dir, exist_ok=True)
    name = "ssd.tsv" if manifest.task == "SSD" else "ssp.tsv"
    path = os.path.join(out_dir, name)
    (write_ssd if manifest.task == "SSD" else write_ssp)(path, samples)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(manifest.to_text())
    return path


def read_dataset(data_dir):
    with open(os.path.join(data_dir, "manifest.txt"), encoding="utf-8") as fh:
        man = DatasetManifest.from_text(fh.read())
    if man.task == "SSD":
        return read_ssd(os.path.join(data_dir, "ssd.tsv")), man
    return read_ssp(os.path.join(data_dir, "ssp.tsv")), man
