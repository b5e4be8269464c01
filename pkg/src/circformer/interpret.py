"""Gradient saliency, species-averaged profiles, logos and polyA/T scans.

Saliency is the gradient of one scalar prediction with respect to the
one-hot input, abs-summed over channels: ``S_i = sum_j |dy/dx_ij|``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOGO_BASES = "ACGT"
LOGO_COLORS = {"A": "#109648", "C": "#255c99", "G": "#f7b32b", "T": "#d62839"}


# ---------------------------------------------------------------- saliency

@dataclass
class SaliencyProfile:
    values: np.ndarray
    species: str = ""
    n_sequences: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) % 2 == 0:
            raise ValueError("a saliency profile has odd length 2R+1")
        if np.any(self.values < 0):
            raise ValueError("saliency values are non-negative")

    @property
    def radius(self) -> int:
        return len(self.values) // 2

    @property
    def center_index(self) -> int:
        return self.radius

    def offsets(self) -> np.ndarray:
        return np.arange(-self.radius, self.radius + 1)

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# species = {self.species}\n# n_sequences = {self.n_sequences}\n")
            for k in sorted(self.meta):
                fh.write(f"# {k} = {self.meta[k]}\n")
            fh.write("offset\tsaliency\n")
            for off, v in zip(self.offsets(), self.values):
                fh.write(f"{off}\t{v:.8g}\n")


def read_saliency_tsv(path) -> SaliencyProfile:
    meta, offs, vals = {}, [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                meta[k.strip()] = v.strip()
            elif line.strip() and not line.startswith("offset"):
                o, v = line.split("\t")
                offs.append(int(o))
                vals.append(float(v))
    species = meta.pop("species", "")
    n = int(meta.pop("n_sequences", 1))
    return SaliencyProfile(np.array(vals), species, n, meta)


def _scalar_target(out: Tensor, target, task: str) -> Tensor:
    if out.size == 1:
        return T.reshape(out, ()) if out.ndim else out
    flat = T.reshape(out, (out.size,))
    if task == "ssp":
        raise ValueError("SSP target expects one logit per input")
    pos = out.shape[-1] // 2 if target is None else int(target)
    if not -out.shape[-1] <= pos < out.shape[-1]:
        raise IndexError(f"target position {pos} outside output of length {out.shape[-1]}")
    return flat[pos % out.shape[-1]]


def saliency_map(model, x, species: str | None = None, target: int | None = None,
                 task: str = "ssd") -> np.ndarray:
    """``S_i = sum_j |dy/dx_ij|`` for one input window ``x`` [L, C].

    ``y`` is the SSD logit at ``target`` (default: the center position) or,
    with ``task="ssp"``, the pairing logit.  ``model`` may be a
    :class:`~circformer.model.CircFormerMoE` or any callable mapping a
    [1, L, C] tensor to logits.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError("saliency_map takes one window at a time")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a one-hot window [L, C], got shape {arr.shape}")
    dtype = getattr(model, "dtype", None) or T.default_dtype()
    xt = Tensor(arr[None], requires_grad=True, dtype=dtype)
    if hasattr(model, "forward_ssd"):
        out = model.forward_ssp(xt, species) if task == "ssp" else model.forward_ssd(xt, species)
    else:
        out = model(xt)
    y = _scalar_target(out, target, task)
    T.backward(y)
    if xt.grad is None:
        return np.zeros(arr.shape[0])
    return np.abs(xt.grad[0].astype(np.float64)).sum(axis=-1)


def average_saliency(maps: Sequence) -> np.ndarray:
    """Elementwise mean of equal-length saliency maps."""
    arrs = [np.asarray(m, dtype=np.float64) for m in maps]
    if not arrs:
        raise ValueError("average_saliency needs at least one map")
    n = len(arrs[0])
    if any(a.shape != (n,) for a in arrs):
        raise ValueError("saliency maps have ragged lengths")
    return np.mean(np.stack(arrs), axis=0)


def species_profile(model, windows: Sequence[str], species: str, alphabet=None,
                    target: int | None = None) -> SaliencyProfile:
    """Average center-site saliency over ``windows`` (strings of odd length)."""
    from .datasets import SSD_ALPHABET, one_hot_encode
    alphabet = alphabet or SSD_ALPHABET
    maps = [saliency_map(model, one_hot_encode(w, alphabet), species, target) for w in windows]
    return SaliencyProfile(average_saliency(maps), species, len(maps))


# ---------------------------------------------------------------- logos

@dataclass
class LogoMatrix:
    weights: np.ndarray  # [2R+1, 4] over A, C, G, T

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != 4 or len(self.weights) % 2 == 0:
            raise ValueError("logo weights must be [2R+1, 4]")

    @property
    def radius(self) -> int:
        return len(self.weights) // 2

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("position\twA\twC\twG\twT\n")
            for off, row in zip(range(-self.radius, self.radius + 1), self.weights):
                fh.write(f"{off}\t" + "\t".join(f"{v:.8g}" for v in row) + "\n")

    def to_svg(self, height: int = 120, col_width: int = 10) -> str:
        """Stacked letters, heights proportional to the normalized weights."""
        n = len(self.weights)
        w = n * col_width
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height + 20}" '
                 f'viewBox="0 0 {w} {height + 20}">']
        for i, row in enumerate(self.weights):
            y = float(height)
            for j in np.argsort(row, kind="stable"):
                h = row[j] * height
                if h <= 0:
                    continue
                base = LOGO_BASES[j]
                # glyph of font-size 1 scaled to the column box
                parts.append(f'<text x="0" y="0" font-family="monospace" font-weight="bold" '
                             f'font-size="1" fill="{LOGO_COLORS[base]}" '
                             f'transform="translate({i * col_width:.2f},{y:.2f}) '
                             f'scale({col_width * 1.6:.2f},{h * 1.35:.2f})">{base}</text>')
                y -= h
        mid = self.radius * col_width + col_width / 2
        parts.append(f'<line x1="{mid}" y1="{height}" x2="{mid}" y2="{height + 8}" stroke="black"/>')
        parts.append(f'<text x="{mid}" y="{height + 18}" font-size="9" text-anchor="middle">0</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def saliency_logo(sequences: Sequence[str], maps: Sequence, radius: int = 50,
                  center: int | None = None) -> LogoMatrix:
    """Per-base saliency sums within ``radius`` of the center, rows normalized to 1.

    ``center`` defaults to the middle of each sequence.  'N' contributes to no
    base; all-zero rows stay zero.
    """
    if len(sequences) != len(maps):
        raise ValueError("one saliency map per sequence")
    acc = np.zeros((2 * radius + 1, 4))
    lut = {b: i for i, b in enumerate(LOGO_BASES)}
    for seq, m in zip(sequences, maps):
        m = np.asarray(m, dtype=np.float64)
        if len(m) != len(seq):
            raise ValueError("sequence and saliency map lengths differ")
        c = len(seq) // 2 if center is None else center
        for p in range(-radius, radius + 1):
            i = c + p
            if 0 <= i < len(seq):
                j = lut.get(seq[i].upper())
                if j is not None:
                    acc[p + radius, j] += m[i]
    totals = acc.sum(axis=1, keepdims=True)
    weights = np.divide(acc, totals, out=np.zeros_like(acc), where=totals > 0)
    return LogoMatrix(weights)


# ---------------------------------------------------------------- polyA/T

WINDOW_CONVENTIONS = ("inclusive", "half-open")


def window_bounds(site: int, window: int = 100, convention: str = "inclusive") -> tuple[int, int]:
    """Half-open [start, stop) of the scan window around ``site``.

    "inclusive": site +/- window/2, i.e. window+1 bases for even windows.
    "half-open": exactly ``window`` bases starting window/2 upstream.
    """
    half = window // 2
    if convention == "inclusive":
        return site - half, site + half + 1
    if convention == "half-open":
        return site - half, site - half + window
    raise ValueError(f"unknown window convention {convention!r}; use one of {WINDOW_CONVENTIONS}")


def window_length(window: int = 100, convention: str = "inclusive") -> int:
    a, b = window_bounds(0, window, convention)
    return b - a


def has_polyat(s: str, min_run: int = 5) -> bool:
    s = s.upper()
    return ("A" * min_run in s) or ("T" * min_run in s)


def polyat_scan(sequence: str, site: int, window: int = 100, min_run: int = 5,
                convention: str = "inclusive") -> bool:
    """True iff the window around ``site`` holds >= ``min_run`` consecutive A or T.

    The window is clipped at the sequence ends.
    """
    if not 0 <= site < len(sequence):
        raise IndexError(f"site {site} outside sequence of length {len(sequence)}")
    if min_run < 1:
        raise ValueError("min_run must be >= 1")
    start, stop = window_bounds(site, window, convention)
    return has_polyat(sequence[max(0, start):min(len(sequence), stop)], min_run)


def polyat_regex(min_run: int = 5) -> re.Pattern:
    return re.compile(f"A{{{min_run},}}|T{{{min_run},}}")


def exact_polyat_probability(window: int, min_run: int = 5) -> float:
    """P(i.i.d. uniform string of ``window`` bases has an A- or T-run >= min_run).

    Dynamic program over run-length states (A-run 1..k-1, T-run 1..k-1,
    other) with an absorbing success state.
    """
    if window < 0 or min_run < 1:
        raise ValueError("window >= 0 and min_run >= 1 required")
    k = min_run
    a = np.zeros(k)  # a[j]: current A-run length j (1..k-1), index 0 unused
    t = np.zeros(k)
    other = 1.0  # empty prefix behaves like "last base not A/T"
    done = 0.0
    for _ in range(window):
        na, nt = np.zeros(k), np.zeros(k)
        live = other + a.sum() + t.sum()
        # next base A: A-run extends, everything else starts a new A run
        start_a = 0.25 * (other + t.sum())
        start_t = 0.25 * (other + a.sum())
        ext_a, ext_t = 0.25 * a, 0.25 * t
        if k == 1:
            done += 0.5 * live
        else:
            na[1] = start_a
            nt[1] = start_t
            na[2:] += ext_a[1:k - 1]
            nt[2:] += ext_t[1:k - 1]
            done += ext_a[k - 1] + ext_t[k - 1]
        other = 0.5 * live
        a, t = na, nt
    return float(done)


def polyat_random_baseline(window: int, min_run: int = 5, trials: int = 100_000,
                           seed: int = 0, chunk: int = 20_000) -> float:
    """Monte Carlo fraction of uniform random ``window``-base strings with a polyA/T run."""
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        bases = rng.integers(0, 4, size=(n, window), dtype=np.int8)
        hit = np.zeros(n, dtype=bool)
        for code in (0, 3):  # A, T
            c = np.cumsum(np.pad(bases == code, ((0, 0), (1, 0))), axis=1, dtype=np.int32)
            if window >= min_run:
                hit |= ((c[:, min_run:] - c[:, :-min_run]) == min_run).any(axis=1)
        hits += int(hit.sum())
        done += n
    return hits / trials


def binomial_half_width(p: float, n: int, z: float = 1.96) -> float:
    """Normal-approximation half-width of a binomial proportion interval."""
    return z * math.sqrt(max(p * (1 - p), 0.0) / n)


def polyat_enrichment(records, sites: Iterable[tuple[str, int]], window: int = 100,
                      min_run: int = 5, convention: str = "inclusive") -> tuple[int, int]:
    """(hits, total) of polyA/T-positive windows over (chrom, pos) sites."""
    hits = total = 0
    for chrom, pos in sites:
        seq = records[chrom].sequence if hasattr(records[chrom], "sequence") else records[chrom]
        hits += polyat_scan(seq, pos, window, min_run, convention)
        total += 1
    return hits, total
