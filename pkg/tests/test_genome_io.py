from __future__ import annotations

import io

import pytest
from hypothesis import given, settings, strategies as st

from circformer.genome_io import (AnnotationError, CircRnaAnnotation, GenomeRecord, ParseError,
                                  extract_window, format_annotations, format_fasta, normalize_sequence,
                                  padded_slice, parse_annotations, parse_fasta, reverse_complement,
                                  splice_sites)

bases = st.text(alphabet="ACGTN", min_size=1, max_size=200)


def test_parse_fasta_multiline_and_header_token():
    recs = parse_fasta(">chr1 some description\nACGT\nac\n\n>chr2\nNNnx\n")
    assert recs == [GenomeRecord("chr1", "ACGTAC"), GenomeRecord("chr2", "NNNN")]


def test_parse_fasta_accepts_stream():
    assert parse_fasta(io.StringIO(">a\nAC\n"))[0].sequence == "AC"


@pytest.mark.parametrize("text, line", [
    ("ACGT\n>a\nAC\n", 1),
    (">a\nAC\n>a\nGG\n", 3),
    (">a\n>b\nAC\n", 1),
    (">\nAC\n", 1),
])
def test_parse_fasta_errors_carry_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_fasta(text)
    assert err.value.line == line


def test_normalize_sequence():
    assert normalize_sequence("acgtRYk") == "ACGTNNN"


@settings(max_examples=50, deadline=None)
@given(st.lists(bases, min_size=1, max_size=4), st.integers(1, 80))
def test_fasta_round_trip(seqs, width):
    recs = [GenomeRecord(f"r{i}", s) for i, s in enumerate(seqs)]
    assert parse_fasta(format_fasta(recs, width)) == recs


def test_parse_annotations_valid_and_comments():
    text = "# header\nsp\tchr1\t10\t50\tc1\n\nsp\tchr1\t60\t90\tc2\n"
    anns = parse_annotations(text, {"chr1": 100})
    assert anns == [CircRnaAnnotation("sp", "chr1", 10, 50, "c1"), CircRnaAnnotation("sp", "chr1", 60, 90, "c2")]
    assert parse_annotations(format_annotations(anns)) == anns


def test_parse_annotations_collects_every_problem():
    text = ("sp\tchr1\t10\t5\tbad_order\n"
            "sp\tchr1\tx\t5\tnot_int\n"
            "sp\tchr9\t1\t5\tunknown\n"
            "sp\tchr1\t1\t500\tbeyond\n"
            "sp\tchr1\t1\t5\n"
            "sp\tchr1\t1\t5\tok\n"
            "sp\tchr1\t1\t5\tdup\n")
    with pytest.raises(AnnotationError) as err:
        parse_annotations(text, {"chr1": GenomeRecord("chr1", "A" * 100)})
    assert [ln for ln, _ in err.value.problems] == [1, 2, 3, 4, 5, 7]


def test_splice_sites_dedupe():
    anns = [CircRnaAnnotation("s", "c", 1, 9, "a"), CircRnaAnnotation("s", "c", 9, 20, "b")]
    assert [s.pos for s in splice_sites(anns)] == [1, 9, 20]


def test_extract_window_pads_with_n():
    assert extract_window("ACGTA", 0, 2) == "NNACG"
    assert extract_window(GenomeRecord("x", "ACGTA"), 4, 2) == "GTANN"
    with pytest.raises(IndexError):
        extract_window("ACG", 3, 1)


@settings(max_examples=100, deadline=None)
@given(bases, st.data())
def test_extract_window_oracle(seq, data):
    center = data.draw(st.integers(0, len(seq) - 1))
    radius = data.draw(st.integers(0, 30))
    ref = "".join(seq[i] if 0 <= i < len(seq) else "N" for i in range(center - radius, center + radius + 1))
    assert extract_window(seq, center, radius) == ref


@settings(max_examples=50, deadline=None)
@given(bases, st.integers(-60, 220), st.integers(0, 60))
def test_padded_slice_oracle(seq, start, width):
    ref = "".join(seq[i] if 0 <= i < len(seq) else "N" for i in range(start, start + width))
    assert padded_slice(seq, start, start + width) == ref


@given(bases)
def test_reverse_complement_involution(seq):
    assert reverse_complement(reverse_complement(seq)) == seq
    assert reverse_complement("AACGT") == "ACGTT"
