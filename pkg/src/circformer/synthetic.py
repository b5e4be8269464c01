"""Synthetic genomes with planted circRNAs for desk-scale experiments.

Each species gets one random chromosome.  Every planted circRNA has

* species-specific 8-mer site motifs, a donor motif at ``site_a`` and an
  acceptor motif at ``site_b`` (site at motif index 4), the signal for
  splice-site detection;
* a flanking repeat: a noisy tandem repeat of one family's unit upstream
  of ``site_a`` and another copy of the same family downstream of
  ``site_b``, the way paired repeats in flanking introns favour
  back-splicing.  Sites of different circRNAs usually carry different
  families, which is what separates true pairs from shuffled ones.  The
  default four families are homopolymer tracts; more add dinucleotide
  repeats such as (AC)n.

With ``conflicting=True`` each genome also carries decoy copies of the other
species' motifs away from any site, so a motif that marks a site in one
species is noise in another.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .genome_io import CircRnaAnnotation, GenomeRecord, reverse_complement

BASES = np.array(list("ACGT"))
MOTIF_OFFSET = 4
TAG_GAP = 8  # bases between the site and the near edge of its flanking repeat


@dataclass
class PlantedCorpus:
    genomes: dict[str, dict[str, GenomeRecord]]
    annotations: list[CircRnaAnnotation]
    motifs: dict[str, tuple[str, str]]  # species -> (donor, acceptor)
    families: list[str]
    decoys: dict[str, list[int]] = field(default_factory=dict)

    @property
    def species(self) -> list[str]:
        return sorted(self.genomes)


def random_kmers(rng: np.random.Generator, n: int, k: int, exclude=()) -> list[str]:
    out: list[str] = []
    banned = set(exclude)
    while len(out) < n:
        s = "".join(rng.choice(BASES, k))
        rc = reverse_complement(s)
        if s in banned or rc in banned or s == rc:
            continue
        out.append(s)
        banned.update((s, rc))
    return out


HOMOPOLYMERS = ("A", "C", "G", "T")
# (AC)n reads the same as (CA)n, so one unit per class
DINUCLEOTIDES = ("AC", "AG", "AT", "CG", "CT", "GT")
REPEAT_FAMILIES = HOMOPOLYMERS + DINUCLEOTIDES


def repeat_units(rng: np.random.Generator, n: int) -> list[str]:
    """``n`` distinct low-complexity units: homopolymers first, then dinucleotides."""
    if not 1 <= n <= len(REPEAT_FAMILIES):
        raise ValueError(f"between 1 and {len(REPEAT_FAMILIES)} repeat families")
    return ([HOMOPOLYMERS[i] for i in rng.permutation(4)]
            + [DINUCLEOTIDES[i] for i in rng.permutation(6)])[:n]


def tandem(unit: str, length: int, rng: np.random.Generator, noise: float = 0.0) -> list[str]:
    """``length`` bases of ``unit`` repeated from a random phase; each base is
    replaced by a uniform random base with probability ``noise``."""
    phase = int(rng.integers(len(unit)))
    out = np.array(list((unit * (length // len(unit) + 2))[phase:phase + length]))
    swap = rng.random(length) < noise
    out[swap] = rng.choice(BASES, int(swap.sum()))
    return list(out)


def plant_corpus(n_species: int = 3, genome_length: int = 200_000, n_circ: int = 100,
                 motif_len: int = 8, span: tuple[int, int] = (60, 5000), n_families: int = 4,
                 conflicting: bool = False, n_decoys: int | None = None, seed: int = 0,
                 repeat_len: int = 40, repeat_noise: float = 0.05,
                 species_names=None) -> PlantedCorpus:
    rng = np.random.default_rng(seed)
    names = list(species_names or [f"sp{i}" for i in range(n_species)])
    kmers = random_kmers(rng, 2 * len(names), motif_len)
    motifs = {sp: (kmers[2 * i], kmers[2 * i + 1]) for i, sp in enumerate(names)}
    families = repeat_units(rng, n_families)
    genomes, annotations, decoys = {}, [], {}
    margin = 200
    for sp in names:
        seq = rng.choice(BASES, genome_length)
        occupied = np.zeros(genome_length, dtype=bool)
        placed = []
        guard = 0
        while len(placed) < n_circ:
            guard += 1
            if guard > 1000 * n_circ:
                raise RuntimeError("could not place circRNAs; genome too small")
            length = int(rng.integers(span[0], span[1] + 1))
            a = int(rng.integers(margin, genome_length - length - margin))
            b = a + length
            # footprint: flanking repeat + motif around each site
            lo_a, hi_a = a - TAG_GAP - repeat_len - 2, a + motif_len
            lo_b, hi_b = b - motif_len, b + TAG_GAP + repeat_len + 2
            if occupied[lo_a:hi_a].any() or occupied[lo_b:hi_b].any():
                continue
            occupied[lo_a:hi_a] = True
            occupied[lo_b:hi_b] = True
            placed.append((a, b))
        for j, (a, b) in enumerate(sorted(placed)):
            for s, motif in zip((a, b), motifs[sp]):
                seq[s - MOTIF_OFFSET:s - MOTIF_OFFSET + motif_len] = list(motif)
            unit = families[int(rng.integers(len(families)))]
            seq[a - TAG_GAP - repeat_len:a - TAG_GAP] = tandem(unit, repeat_len, rng, repeat_noise)
            seq[b + TAG_GAP:b + TAG_GAP + repeat_len] = tandem(unit, repeat_len, rng, repeat_noise)
            annotations.append(CircRnaAnnotation(sp, "chr1", a, b, f"{sp}_circ{j}"))
        if conflicting:
            others = [m for o in names if o != sp for m in motifs[o]]
            count = n_decoys if n_decoys is not None else n_circ
            spots = []
            while len(spots) < count * len(others):
                p = int(rng.integers(margin, genome_length - margin))
                if occupied[p - motif_len - 2:p + motif_len + 2].any():
                    continue
                occupied[p - motif_len - 2:p + motif_len + 2] = True
                spots.append(p)
            for i, p in enumerate(spots):
                seq[p - MOTIF_OFFSET:p - MOTIF_OFFSET + motif_len] = list(others[i % len(others)])
            decoys[sp] = sorted(spots)
        genomes[sp] = {"chr1": GenomeRecord("chr1", "".join(seq))}
    return PlantedCorpus(genomes, sorted(annotations), motifs, families, decoys)


def split_circrnas(annotations, fractions=(0.8, 0.2), seed: int = 0):
    """Split annotations per species by circRNA, so held-out pairs are unseen."""
    by_sp: dict[str, list] = {}
    for a in annotations:
        by_sp.setdefault(a.species, []).append(a)
    parts = [[] for _ in fractions]
    rng = np.random.default_rng(seed)
    for sp in sorted(by_sp):
        anns = by_sp[sp]
        order = rng.permutation(len(anns))
        bounds = np.round(np.cumsum((0,) + tuple(fractions)) * len(anns)).astype(int)
        for j in range(len(fractions)):
            parts[j].extend(anns[i] for i in order[bounds[j]:bounds[j + 1]])
    return [sorted(p) for p in parts]
