"""FASTA and circRNA annotation parsing, plus padded window extraction."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Mapping, TextIO

NUCLEOTIDES = "ACGTN"
_NORMALIZE = {c: c for c in "ACGT"}
_COMPLEMENT = str.maketrans("ACGTN", "TGCAN")


class ParseError(ValueError):
    """Malformed FASTA input; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class AnnotationError(ValueError):
    """One or more annotation rows failed validation."""

    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        detail = "; ".join(f"row {row}: {msg}" for row, msg in problems)
        super().__init__(f"{len(problems)} invalid annotation row(s): {detail}")


@dataclass(frozen=True)
class GenomeRecord:
    id: str
    sequence: str

    def __len__(self) -> int:
        return len(self.sequence)


@dataclass(frozen=True, order=True)
class CircRnaAnnotation:
    species: str
    chrom: str
    site_a: int
    site_b: int
    circ_id: str


@dataclass(frozen=True, order=True)
class SpliceSite:
    species: str
    chrom: str
    pos: int


def normalize_sequence(seq: str) -> str:
    """Uppercase and map anything outside A/C/G/T to N."""
    seq = seq.upper()
    if all(c in _NORMALIZE for c in seq):
        return seq
    return "".join(c if c in _NORMALIZE else "N" for c in seq)


def _as_stream(source) -> TextIO:
    return io.StringIO(source) if isinstance(source, str) else source


def parse_fasta(source: str | TextIO) -> list[GenomeRecord]:
    """Parse FASTA text (a string or an open text stream).

    Header ids are the first whitespace-delimited token after '>'.
    """
    records: list[GenomeRecord] = []
    seen: set[str] = set()
    cur_id, cur_line, chunks = None, 0, []

    def flush():
        if cur_id is None:
            return
        if not chunks:
            raise ParseError(f"empty sequence for header {cur_id!r}", cur_line)
        records.append(GenomeRecord(cur_id, normalize_sequence("".join(chunks))))

    for lineno, raw in enumerate(_as_stream(source), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            fields = line[1:].split()
            if not fields:
                raise ParseError("header without an identifier", lineno)
            cur_id, cur_line, chunks = fields[0], lineno, []
            if cur_id in seen:
                raise ParseError(f"duplicate record id {cur_id!r}", lineno)
            seen.add(cur_id)
        else:
            if cur_id is None:
                raise ParseError("sequence data before the first header", lineno)
            chunks.append(line)
    flush()
    return records


def format_fasta(records: Iterable[GenomeRecord], width: int = 60) -> str:
    out = []
    for rec in records:
        out.append(f">{rec.id}\n")
        for i in range(0, len(rec.sequence), width):
            out.append(rec.sequence[i:i + width] + "\n")
    return "".join(out)


def read_fasta(path) -> list[GenomeRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_fasta(fh)


def genome_index(records: Iterable[GenomeRecord]) -> dict[str, GenomeRecord]:
    return {r.id: r for r in records}


def parse_annotations(source: str | TextIO,
                      genome: Mapping[str, int | GenomeRecord] | None = None,
                      ) -> list[CircRnaAnnotation]:
    """Parse the 5-column TSV: species, chrom, site_a, site_b, circ_id.

    ``genome`` maps chromosome id to its length (or record); when given, rows
    on unknown chromosomes or beyond the chromosome end are rejected.  All
    row problems are collected and raised together.
    """
    lengths = None
    if genome is not None:
        lengths = {k: (len(v) if isinstance(v, GenomeRecord) else int(v))
                   for k, v in genome.items()}
    rows: list[CircRnaAnnotation] = []
    problems: list[tuple[int, str]] = []
    seen: set[tuple] = set()
    for lineno, raw in enumerate(_as_stream(source), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            problems.append((lineno, f"expected 5 tab-separated fields, got {len(fields)}"))
            continue
        species, chrom, a_txt, b_txt, circ_id = (f.strip() for f in fields)
        try:
            a, b = int(a_txt), int(b_txt)
        except ValueError:
            problems.append((lineno, f"non-integer position ({a_txt!r}, {b_txt!r})"))
            continue
        if a < 0:
            problems.append((lineno, "position out of range (negative site_a)"))
            continue
        if a >= b:
            problems.append((lineno, "site_a ≥ site_b"))
            continue
        if lengths is not None:
            if chrom not in lengths:
                problems.append((lineno, f"unknown chromosome {chrom!r}"))
                continue
            if b >= lengths[chrom]:
                problems.append((lineno, f"position out of range ({b} ≥ length {lengths[chrom]})"))
                continue
        key = (species, chrom, a, b)
        if key in seen:
            problems.append((lineno, f"duplicate annotation {key}"))
            continue
        seen.add(key)
        rows.append(CircRnaAnnotation(species, chrom, a, b, circ_id))
    if problems:
        raise AnnotationError(problems)
    return rows


def read_annotations(path, genome=None) -> list[CircRnaAnnotation]:
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(fh, genome)


def format_annotations(annotations: Iterable[CircRnaAnnotation]) -> str:
    return "".join(f"{a.species}\t{a.chrom}\t{a.site_a}\t{a.site_b}\t{a.circ_id}\n"
                   for a in annotations)


def splice_sites(annotations: Iterable[CircRnaAnnotation]) -> list[SpliceSite]:
    """Distinct sites (both ends of every circRNA), sorted."""
    sites = set()
    for a in annotations:
        sites.add(SpliceSite(a.species, a.chrom, a.site_a))
        sites.add(SpliceSite(a.species, a.chrom, a.site_b))
    return sorted(sites)


def padded_slice(sequence: str, start: int, stop: int) -> str:
    """sequence[start:stop] with out-of-range positions filled by 'N'."""
    n = len(sequence)
    if stop <= start:
        return ""
    left = max(0, min(stop, 0) - start)
    right = max(0, stop - max(start, n))
    lo, hi = max(start, 0), min(stop, n)
    return "N" * left + (sequence[lo:hi] if lo < hi else "") + "N" * right


def extract_window(record: GenomeRecord | str, center: int, radius: int) -> str:
    """Bases center-radius .. center+radius inclusive, 'N'-padded at the ends."""
    seq = record.sequence if isinstance(record, GenomeRecord) else record
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if not 0 <= center < len(seq):
        raise IndexError(f"center {center} outside sequence of length {len(seq)}")
    return padded_slice(seq, center - radius, center + radius + 1)


def reverse_complement(seq: str) -> str:
    return seq.translate(_COMPLEMENT)[::-1]
