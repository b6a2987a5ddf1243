import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motif_forge.derived import (
    DerivedMotif, discover_derived, discover_in_context, load_motifs, match_in_context,
    match_motif, save_motifs,
)
from motif_forge.signal import DaySegment, SaxConfig, znormalize

from planted import SHAPE_A, SHAPE_B, contextual_dataset, planted_dataset, znorm


def seg(values):
    return DaySegment("p", 0, np.asarray(values, dtype=float))


def brute_matches(rep, values, radius):
    """Every offset within radius, then left-to-right de-overlap."""
    l = len(rep)
    rz = znormalize(np.asarray(rep)[None])[0][0]
    hits = []
    for off in range(len(values) - l + 1):
        wz = znormalize(np.asarray(values[off:off + l])[None])[0][0]
        d = float(np.sqrt(((wz - rz) ** 2).sum()))
        if d <= radius:
            hits.append((off, d))
    kept, free = [], -1
    for off, d in hits:
        if off >= free:
            kept.append((off, d))
            free = off + l
    return kept


def test_single_planted_pattern_gives_one_motif():
    segs, places = planted_dataset([SHAPE_A], 50, seed=1)
    motifs = discover_derived(segs, [8], min_support=10)
    assert len(motifs) == 1
    m = motifs[0]
    assert np.linalg.norm(znorm(m.representative) - znorm(SHAPE_A)) < 1e-9
    assert m.support >= 50 and m.length == 8


def test_unsatisfiable_support_gives_nothing():
    segs, _ = planted_dataset([SHAPE_A], 5, n_segments=2, seed=0)
    assert discover_derived(segs, [8], min_support=10_000) == []


def test_mirrored_patterns_are_distinct_motifs():
    segs, _ = planted_dataset([SHAPE_A, -SHAPE_A], 25, seed=2)
    motifs = discover_derived(segs, [8], min_support=10, radius=0.5)
    assert len(motifs) == 2
    reps = sorted(tuple(np.round(znorm(m.representative), 6)) for m in motifs)
    assert reps == sorted([tuple(np.round(znorm(SHAPE_A), 6)), tuple(np.round(znorm(-SHAPE_A), 6))])


def test_support_recomputable_by_matching():
    segs, _ = planted_dataset([SHAPE_A, SHAPE_B], 20, n_segments=10, seed=3)
    motifs = discover_derived(segs, [8, 12], min_support=8)
    assert motifs
    for m in motifs:
        assert m.support >= 8
        assert m.support == sum(len(match_motif(m, s, 0.75)) for s in segs)


def test_lengths_must_divide_paa_width():
    segs, _ = planted_dataset([SHAPE_A], 5, n_segments=2)
    with pytest.raises(ValueError):
        discover_derived(segs, [9], sax=SaxConfig(5, 2))
    with pytest.raises(ValueError):
        discover_derived([], [8])
    with pytest.raises(ValueError):
        discover_derived(segs, [])


def test_match_exact_self_match():
    rng = np.random.default_rng(0)
    x = rng.normal(size=100)
    rep = x[40:48].copy()
    occ = match_motif(DerivedMotif(0, rep, (), 1), seg(x), radius=0.0)
    assert [(o.offset, o.distance) for o in occ] == [(40, 0.0)]


def test_constant_segment_has_no_matches():
    occ = match_motif(DerivedMotif(0, SHAPE_A, (), 1), seg([5.0] * 50), radius=0.5)
    assert occ == []


def test_planted_pattern_found_at_its_offsets():
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, 200)
    for off in (10, 100):
        x[off:off + 8] = SHAPE_A + rng.normal(0, 0.02, 8)
    occ = match_motif(DerivedMotif(0, SHAPE_A, (), 1), seg(x), radius=0.3)
    assert [o.offset for o in occ] == [10, 100]
    assert [(o.offset, pytest.approx(o.distance)) for o in occ] == brute_matches(SHAPE_A, x, 0.3)


@given(st.integers(0, 10_000), st.floats(0.2, 3.0))
@settings(max_examples=50, deadline=None)
def test_match_agrees_with_brute_force(seed, radius):
    rng = np.random.default_rng(seed)
    x = np.cumsum(rng.normal(size=80))
    rep = rng.normal(size=8)
    occ = match_motif(DerivedMotif(0, rep, (), 1), seg(x), radius)
    expect = brute_matches(rep, x, radius)
    assert [o.offset for o in occ] == [o for o, _ in expect]
    assert np.allclose([o.distance for o in occ], [d for _, d in expect])
    offs = [o.offset for o in occ]
    assert all(b - a >= 8 for a, b in zip(offs, offs[1:]))


def test_single_context_equals_contextless():
    segs, _ = planted_dataset([SHAPE_A, SHAPE_B], 20, n_segments=10, seed=4)
    plain = discover_derived(segs, [8, 12], min_support=8)
    labels = [np.zeros(len(s.values), dtype=int) for s in segs]
    ctx = discover_in_context(segs, labels, [8, 12], min_support=8)
    assert len(plain) == len(ctx)
    for a, b in zip(plain, ctx):
        assert b.context_tag == 0 and a.context_tag is None
        assert a.id == b.id and a.support == b.support and a.sax_word == b.sax_word
        assert np.array_equal(a.representative, b.representative)


def test_context_motif_found_with_absolute_support():
    segs, labels, _ = contextual_dataset(seed=0)
    motifs = discover_in_context(segs, labels, [8], min_support=10)
    in_ctx = [m for m in motifs if m.context_tag == 1]
    assert len(in_ctx) == 1
    assert np.linalg.norm(znorm(in_ctx[0].representative) - znorm(SHAPE_A)) < 1e-9
    assert in_ctx[0].support == 12


def test_disjoint_patterns_per_context():
    rng = np.random.default_rng(9)
    data = rng.normal(size=(10, 288))
    labels = np.zeros((10, 288), dtype=int)
    labels[:, 144:] = 1
    for s in range(10):
        for off in (10, 60, 110):
            data[s, off:off + 8] = SHAPE_A
        for off in (160, 210, 260):
            data[s, off:off + 8] = SHAPE_B
    segs = [DaySegment(f"p{s}", 0, row) for s, row in enumerate(data)]
    motifs = discover_in_context(segs, list(labels), [8], min_support=10)
    tags = sorted((m.context_tag, bool(np.allclose(znorm(m.representative), znorm(SHAPE_A))))
                  for m in motifs)
    assert tags == [(0, True), (1, False)]
    b = [m for m in motifs if m.context_tag == 1][0]
    assert np.allclose(znorm(b.representative), znorm(SHAPE_B))
    assert len(match_in_context(b, segs[0], labels[0], 0.75)) == 3
    assert match_in_context(b, segs[0], np.zeros(288, int), 0.75) == []


def test_empty_context_yields_no_motifs():
    segs, _ = planted_dataset([SHAPE_A], 30, n_segments=5, seed=0)
    labels = [np.zeros(288, dtype=int) for _ in segs]
    motifs = discover_in_context(segs, labels, [8], min_support=10, n_contexts=2)
    assert all(m.context_tag == 0 for m in motifs)


def test_motif_json_round_trip(tmp_path):
    segs, _ = planted_dataset([SHAPE_A], 30, n_segments=5, seed=0)
    motifs = discover_derived(segs, [8], min_support=10)
    save_motifs(motifs, tmp_path / "m.json")
    back = load_motifs(tmp_path / "m.json")
    assert [m.to_dict() for m in back] == [m.to_dict() for m in motifs]


def test_discovery_is_deterministic():
    segs, _ = planted_dataset([SHAPE_A, SHAPE_B], 20, n_segments=8, seed=6)
    a = discover_derived(segs, [8, 12, 16], min_support=6)
    b = discover_derived(segs, [8, 12, 16], min_support=6)
    assert [m.to_dict() for m in a] == [m.to_dict() for m in b]
