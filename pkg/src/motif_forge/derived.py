"""Search-based support motifs: SAX bucketing, merging, medoids, matching.

Distances are Euclidean between per-window z-normalized values. Windows whose
standard deviation is at most ``min_std`` are treated as flat: they never seed
a motif and normalize to the zero vector when matched.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .signal import SaxConfig, sax_words, window_matrix, znormalize

DEFAULT_LENGTHS = (8, 12, 16)
DEFAULT_SAX = SaxConfig(alphabet_size=5, paa_width=2)


@dataclass(frozen=True)
class DerivedMotif:
    id: int
    representative: np.ndarray
    sax_word: tuple
    support: int
    context_tag: Optional[int] = None

    @property
    def length(self) -> int:
        return len(self.representative)

    def to_dict(self):
        return {
            "id": self.id,
            "length": self.length,
            "representative": [float(v) for v in self.representative],
            "sax_word": [int(s) for s in self.sax_word],
            "support": self.support,
            "context_tag": self.context_tag,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), np.asarray(d["representative"], dtype=float),
                   tuple(d["sax_word"]), int(d["support"]), d.get("context_tag"))


@dataclass(frozen=True)
class Occurrence:
    motif_id: int
    segment: int
    offset: int
    distance: float


def save_motifs(motifs, path):
    with open(path, "w") as fh:
        json.dump([m.to_dict() for m in motifs], fh, indent=1)
        fh.write("\n")


def load_motifs(path):
    with open(path) as fh:
        return [DerivedMotif.from_dict(d) for d in json.load(fh)]


def _seg_values(seg):
    return np.asarray(seg.values if hasattr(seg, "values") else seg, dtype=float)


def _greedy_deoverlap(offsets, dists, length):
    """Accept candidates left to right; an accepted window blocks overlaps."""
    keep = []
    next_free = -1
    for off, d in zip(offsets, dists):
        if off >= next_free:
            keep.append((int(off), float(d)))
            next_free = off + length
    return keep


def _match(rep, values, radius, min_std, allowed=None):
    length = len(rep)
    if length > len(values):
        return []
    rep_z, _ = znormalize(rep[None, :], min_std)
    wz, _ = znormalize(window_matrix(values, length, 1), min_std)
    d = np.sqrt(((wz - rep_z[0]) ** 2).sum(axis=1))
    ok = d <= radius
    if allowed is not None:
        ok &= allowed[: len(ok)]
    offsets = np.flatnonzero(ok)
    return _greedy_deoverlap(offsets, d[offsets], length)


def match_motif(motif: DerivedMotif, segment, radius: float, min_std: float = 0.0,
                segment_index: int = 0) -> list[Occurrence]:
    """Non-overlapping occurrences of ``motif`` within ``radius``, sorted by offset."""
    values = _seg_values(segment)
    rep = np.asarray(motif.representative, dtype=float)
    return [Occurrence(motif.id, segment_index, off, d)
            for off, d in _match(rep, values, radius, min_std)]


def _merge_buckets(words, sizes, hamming_merge):
    """Seed-centred greedy merge: biggest unassigned bucket absorbs every
    unassigned bucket within ``hamming_merge`` symbols of its own word."""
    order = sorted(range(len(words)), key=lambda i: (-sizes[i], words[i]))
    arr = np.array(words)
    assigned = np.full(len(words), -1)
    groups = []
    for i in order:
        if assigned[i] >= 0:
            continue
        ham = (arr != arr[i]).sum(axis=1)
        members = np.flatnonzero((ham <= hamming_merge) & (assigned < 0))
        assigned[members] = len(groups)
        groups.append((i, members))
    return groups


def _medoid(z, block=2048):
    """Index of the row with least total Euclidean distance to all rows;
    ties go to the first row. Also returns mean distance to the medoid."""
    n = len(z)
    totals = np.zeros(n)
    sq = (z ** 2).sum(axis=1)
    for a in range(0, n, block):
        g = sq[a:a + block, None] + sq[None, :] - 2.0 * z[a:a + block] @ z.T
        totals[a:a + block] = np.sqrt(np.maximum(g, 0.0)).sum(axis=1)
    best = int(np.argmin(totals))
    return best, totals[best] / n


def _support_threshold(min_support, n_windows):
    if isinstance(min_support, float) and 0 < min_support < 1:
        return max(1, int(np.ceil(min_support * n_windows)))
    return int(min_support)


def _discover_length(values_list, masks, length, min_support, radius, sax, hamming_merge,
                     min_std):
    blocks, seg_of, off_of, allowed = [], [], [], []
    for si, values in enumerate(values_list):
        if len(values) < length:
            continue
        mat = window_matrix(values, length, 1)
        blocks.append(mat)
        seg_of.append(np.full(len(mat), si))
        off_of.append(np.arange(len(mat)))
        allowed.append(masks[si][: len(mat)] if masks is not None else np.ones(len(mat), bool))
    if not blocks:
        return []
    raw = np.concatenate(blocks)
    seg_of, off_of, allowed = map(np.concatenate, (seg_of, off_of, allowed))
    z, flat = znormalize(raw, min_std)
    # non-overlapping window capacity, the denominator of a relative support
    starts, stops = _true_runs(allowed)
    capacity = 0
    for a, b in zip(starts, stops):
        # runs never cross segments because offsets restart at 0 per segment
        for si in np.unique(seg_of[a:b]):
            n = int((seg_of[a:b] == si).sum())
            capacity += (n + length - 1) // length
    threshold = _support_threshold(min_support, capacity)

    live = np.flatnonzero(~flat & allowed)
    if len(live) == 0:
        return []
    words = sax_words(raw[live], sax.alphabet_size, sax.paa_width)
    buckets: dict[tuple, list[int]] = {}
    for row, w in zip(live, map(tuple, words)):
        buckets.setdefault(w, []).append(row)
    bwords = list(buckets)
    sizes = [len(buckets[w]) for w in bwords]
    candidates = []
    for seed, members in _merge_buckets(bwords, sizes, hamming_merge):
        rows_in = np.sort(np.concatenate([buckets[bwords[m]] for m in members]))
        if len(rows_in) < threshold:
            continue
        med, _ = _medoid(z[rows_in])
        row = rows_in[med]
        d = np.sqrt(((z - z[row]) ** 2).sum(axis=1))
        hits = np.flatnonzero((d <= radius) & allowed)
        occ = []
        for si in np.unique(seg_of[hits]):
            h = hits[seg_of[hits] == si]
            occ.extend((int(si), off, dd) for off, dd in _greedy_deoverlap(off_of[h], d[h], length))
        if len(occ) < threshold:
            continue
        candidates.append(dict(rep=raw[row].copy(), z=z[row],
                               word=tuple(int(s) for s in bwords[seed]), support=len(occ),
                               tight=float(np.mean([o[2] for o in occ])),
                               key=(int(seg_of[row]), int(off_of[row])), occ=occ))
    # trivial matches: a candidate whose occurrences mostly overlap those of a
    # tighter-fitting candidate is a shifted copy of it
    candidates.sort(key=lambda c: (c["tight"], -c["support"], c["key"]))
    kept, covered = [], {}
    for c in candidates:
        hits = sum(1 for si, off, _ in c["occ"] if _overlaps(covered.get(si), off, length))
        if hits * 2 > len(c["occ"]):
            continue
        kept.append(c)
        for si, off, _ in c["occ"]:
            covered.setdefault(si, []).append(off)
    # radius suppression, greedy by descending support
    kept.sort(key=lambda c: (-c["support"], c["tight"], c["key"]))
    accepted = []
    for c in kept:
        if all(np.linalg.norm(c["z"] - a["z"]) > radius for a in accepted):
            accepted.append(c)
    return accepted


def _true_runs(mask):
    padded = np.concatenate([[False], np.asarray(mask, bool), [False]]).astype(np.int8)
    d = np.diff(padded)
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def _overlaps(offsets, off, length):
    if not offsets:
        return False
    arr = np.asarray(offsets)
    return bool(np.any(np.abs(arr - off) < length))


def _run(segments, masks, lengths, min_support, radius, sax, hamming_merge, min_std,
         context_tag=None, first_id=0):
    if len(segments) == 0:
        raise ValueError("no segments to search")
    lengths = sorted(set(int(l) for l in lengths))
    if not lengths:
        raise ValueError("at least one motif length is required")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    for l in lengths:
        if l % sax.paa_width:
            raise ValueError(f"length {l} is not divisible by paa_width {sax.paa_width}")
    values_list = [_seg_values(s) for s in segments]
    motifs = []
    for l in lengths:
        for c in _discover_length(values_list, masks, l, min_support, radius, sax,
                                  hamming_merge, min_std):
            motifs.append(DerivedMotif(first_id + len(motifs), c["rep"], c["word"],
                                       c["support"], context_tag))
    return motifs


def discover_derived(segments: Sequence, lengths=DEFAULT_LENGTHS, min_support=10,
                     radius: float = 0.75, sax: SaxConfig = DEFAULT_SAX,
                     hamming_merge: int = 1, min_std: float = 0.0) -> list[DerivedMotif]:
    """Find support motifs of each length in ``lengths``.

    ``min_support`` is an occurrence count, or a fraction in (0, 1) of the
    number of non-overlapping windows available. Support of an emitted motif is
    its ``match_motif`` count over ``segments``.
    """
    return _run(segments, None, lengths, min_support, radius, sax, hamming_merge, min_std)


def _context_masks(labels, length, context):
    """Window starts whose whole window lies inside ``context``."""
    inside = np.asarray(labels) == context
    n = len(inside) - length + 1
    if n <= 0:
        return np.zeros(0, bool)
    return window_matrix(inside.astype(float), length, 1).min(axis=1) > 0


def discover_in_context(segments: Sequence, context_labelings: Sequence, lengths=DEFAULT_LENGTHS,
                        min_support=10, radius: float = 0.75, sax: SaxConfig = DEFAULT_SAX,
                        hamming_merge: int = 1, min_std: float = 0.0,
                        n_contexts: Optional[int] = None) -> list[DerivedMotif]:
    """Run discovery separately inside each context; motifs carry their context.

    ``context_labelings`` holds one per-sample label sequence (array or an
    object with ``labels``) per segment.
    """
    if len(segments) != len(context_labelings):
        raise ValueError("need one context labeling per segment")
    labels = [np.asarray(getattr(c, "labels", c)) for c in context_labelings]
    for seg, lab in zip(segments, labels):
        if len(lab) != len(_seg_values(seg)):
            raise ValueError("context labels must be per-sample")
    if n_contexts is None:
        n_contexts = int(max(int(l.max()) for l in labels if len(l))) + 1
    lengths = sorted(set(int(l) for l in lengths))
    motifs = []
    for c in range(n_contexts):
        found = []
        for l in lengths:
            masks = [_context_masks(lab, l, c) for lab in labels]
            if not any(m.any() for m in masks):
                continue
            found.extend(_run(segments, masks, [l], min_support, radius, sax, hamming_merge,
                              min_std, context_tag=c, first_id=len(motifs) + len(found)))
        motifs.extend(found)
    return motifs


def match_in_context(motif: DerivedMotif, segment, context_labels, radius: float,
                     min_std: float = 0.0, segment_index: int = 0) -> list[Occurrence]:
    """Occurrences lying wholly inside the motif's own context."""
    values = _seg_values(segment)
    rep = np.asarray(motif.representative, dtype=float)
    allowed = None
    if motif.context_tag is not None:
        allowed = _context_masks(np.asarray(getattr(context_labels, "labels", context_labels)),
                                 len(rep), motif.context_tag)
    return [Occurrence(motif.id, segment_index, off, d)
            for off, d in _match(rep, values, radius, min_std, allowed)]
