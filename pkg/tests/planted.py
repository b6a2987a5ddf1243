"""Planted-motif fixtures: known shapes inserted into noise at known offsets."""
import numpy as np

from motif_forge.signal import DaySegment

SHAPE_A = np.array([0.0, 1.5, 3.0, 1.5, 0.0, -1.5, -3.0, -1.5])
SHAPE_B = np.array([-3.0, -3.0, 0.0, 3.0, 3.0, 3.0, 0.0, -3.0])


def free_offsets(rng, n_segments, seg_len, length, count, taken=None, allowed=None):
    """``count`` non-overlapping (segment, offset) slots with a 2-sample margin."""
    taken = taken if taken is not None else {}
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 100_000:
            raise RuntimeError("could not place all copies")
        s = int(rng.integers(n_segments))
        off = int(rng.integers(0, seg_len - length + 1))
        if allowed is not None and not allowed(s, off, length):
            continue
        busy = taken.setdefault(s, [])
        if any(off < b + l + 2 and b < off + length + 2 for b, l in busy):
            continue
        busy.append((off, length))
        out.append((s, off))
    return out


def planted_dataset(shapes, copies, n_segments=20, seg_len=288, noise=1.0, seed=0):
    """Noise segments with each shape planted ``copies`` times.

    Returns ``(segments, placements)`` with ``placements[k]`` the
    (segment, offset) list of shape ``k``.
    """
    rng = np.random.default_rng(seed)
    data = rng.normal(0.0, noise, size=(n_segments, seg_len))
    taken = {}
    placements = []
    for shape in shapes:
        slots = free_offsets(rng, n_segments, seg_len, len(shape), copies, taken)
        for s, off in slots:
            data[s, off:off + len(shape)] = shape
        placements.append(slots)
    segs = [DaySegment(f"p{i}", 0, row) for i, row in enumerate(data)]
    return segs, placements


def contextual_dataset(shape=SHAPE_A, total=30, in_context=12, n_segments=20, seg_len=288,
                       ctx_span=(120, 168), noise=1.0, seed=0):
    """One shape planted ``total`` times, ``in_context`` of them wholly inside
    a per-segment context-1 span; returns ``(segments, labels, placements)``."""
    rng = np.random.default_rng(seed)
    data = rng.normal(0.0, noise, size=(n_segments, seg_len))
    lo, hi = ctx_span
    labels = np.zeros((n_segments, seg_len), dtype=np.int64)
    labels[:, lo:hi] = 1
    inside = lambda s, off, l: lo <= off and off + l <= hi
    outside = lambda s, off, l: off + l <= lo or off >= hi
    taken = {}
    a = free_offsets(rng, n_segments, seg_len, len(shape), in_context, taken, inside)
    b = free_offsets(rng, n_segments, seg_len, len(shape), total - in_context, taken, outside)
    for s, off in a + b:
        data[s, off:off + len(shape)] = shape
    segs = [DaySegment(f"p{i}", 0, row) for i, row in enumerate(data)]
    return segs, list(labels), (a, b)


def znorm(x):
    x = np.asarray(x, dtype=float)
    return (x - x.mean()) / x.std()
