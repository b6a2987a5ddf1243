"""Two-stage context discovery: an expert rise rule, HMM hidden states, and
clusters of motif frequencies within context windows."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from ._kmeans import kmeans

VARIANCE_FLOOR = 1e-4


@dataclass(frozen=True)
class ContextSequence:
    labels: np.ndarray
    resolution: Union[str, int] = "sample"
    n_contexts: int = 2

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.n_contexts < 1:
            raise ValueError("n_contexts must be >= 1")

    def per_sample(self, length: Optional[int] = None) -> np.ndarray:
        if self.resolution == "sample":
            return self.labels
        out = np.repeat(self.labels, int(self.resolution))
        if length is not None:
            out = np.concatenate([out, np.full(max(0, length - len(out)), out[-1] if len(out) else 0)])[:length]
        return out


def to_window_resolution(seq: ContextSequence, l_c: int) -> ContextSequence:
    """Majority vote over each full window of ``l_c`` samples; ties go to the
    smaller context."""
    labels = seq.per_sample()
    n = len(labels) // l_c
    votes = [np.bincount(labels[i * l_c:(i + 1) * l_c], minlength=seq.n_contexts)
             for i in range(n)]
    return ContextSequence(np.array([int(np.argmax(v)) for v in votes], dtype=np.int64), l_c,
                           seq.n_contexts)


def write_context_csv(sequences, path, segment_ids=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "index", "context"])
        for k, seq in enumerate(sequences):
            sid = segment_ids[k] if segment_ids is not None else k
            for i, c in enumerate(seq.labels):
                w.writerow([sid, i, int(c)])


def _values(segment):
    return np.asarray(segment.values if hasattr(segment, "values") else segment, dtype=float)


# ---------------------------------------------------------------------------
# expert rule


def expert_context(segment, k: int = 6, tau: float = 10.0, W: int = 6) -> ContextSequence:
    """Post-meal rule: context 1 where the mean of the last ``k`` successive
    differences reaches ``tau``, dilated by ``W`` samples on each side.

    The mean of ``k`` successive differences telescopes to
    ``(x[t] - x[t-k]) / k``. Samples ``t < k`` have no full history and default
    to context 0 unless reached by dilation.
    """
    x = _values(segment)
    n = len(x)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < {n}")
    rise = np.full(n, -np.inf)
    rise[k:] = (x[k:] - x[:-k]) / k
    trig = rise >= tau
    out = np.zeros(n, dtype=np.int64)
    for t in np.flatnonzero(trig):
        out[max(0, t - W): t + W + 1] = 1
    return ContextSequence(out, "sample", 2)


# ---------------------------------------------------------------------------
# HMM


@dataclass(frozen=True)
class HmmModel:
    """Gaussian-emission HMM over per-sample (value, first difference)
    features standardized with the stored dataset statistics."""

    start: np.ndarray
    trans: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("start", "trans", "means", "variances", "feature_mean", "feature_std"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if abs(self.start.sum() - 1) > 1e-9 or np.any(np.abs(self.trans.sum(axis=1) - 1) > 1e-9):
            raise ValueError("start and transition rows must sum to one")

    @property
    def n_states(self) -> int:
        return len(self.start)

    def features(self, segment) -> np.ndarray:
        return (_raw_features(_values(segment)) - self.feature_mean) / self.feature_std

    def log_emission(self, F) -> np.ndarray:
        return _log_emission(F, self.means, self.variances)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("start", "trans", "means", "variances", "feature_mean", "feature_std")} | {
                    "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls(d["start"], d["trans"], d["means"], d["variances"], d["feature_mean"],
                   d["feature_std"], d.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _raw_features(x):
    return np.column_stack([x, np.diff(x, prepend=x[:1])])


def _log_emission(F, means, variances):
    d = F[:, None, :] - means[None, :, :]
    return -0.5 * (np.log(2 * np.pi * variances)[None] + d ** 2 / variances[None]).sum(axis=2)


def _forward_backward(logB, log_start, log_trans):
    """Scaled forward-backward for a batch of equal-length sequences.

    ``logB`` has shape (S, T, K). Returns per-step posteriors (S, T, K),
    summed pairwise posteriors (K, K) and the total log-likelihood.
    """
    S, T, K = logB.shape
    shift = logB.max(axis=2, keepdims=True)
    B = np.exp(logB - shift)
    A = np.exp(log_trans)
    alpha = np.empty((S, T, K))
    scale = np.empty((S, T))
    a = np.exp(log_start)[None, :] * B[:, 0]
    scale[:, 0] = a.sum(axis=1)
    alpha[:, 0] = a / scale[:, 0, None]
    for t in range(1, T):
        a = (alpha[:, t - 1] @ A) * B[:, t]
        scale[:, t] = a.sum(axis=1)
        alpha[:, t] = a / scale[:, t, None]
    beta = np.empty((S, T, K))
    beta[:, T - 1] = 1.0
    xi = np.zeros((K, K))
    for t in range(T - 2, -1, -1):
        bb = B[:, t + 1] * beta[:, t + 1]
        xi += np.einsum("si,ij,sj->ij", alpha[:, t] / 1.0, A, bb / scale[:, t + 1, None])
        beta[:, t] = (bb @ A.T) / scale[:, t + 1, None]
    post = alpha * beta
    post /= post.sum(axis=2, keepdims=True)
    ll = float(np.log(scale).sum() + shift.sum())
    return post, xi, ll


def _batches(feats):
    by_len = {}
    for i, F in enumerate(feats):
        by_len.setdefault(len(F), []).append(i)
    return [np.stack([feats[i] for i in idx]) for _, idx in sorted(by_len.items())]


def hmm_fit(segments: Sequence, n_states: int, seed: int = 0, max_iter: int = 500,
            tol: float = 1e-6, variance_floor: float = VARIANCE_FLOOR) -> HmmModel:
    """Baum-Welch on per-sample (value, difference) features.

    The log-likelihood trace is stored in ``meta["trace"]`` and checked to be
    non-decreasing.
    """
    raw = [_raw_features(_values(s)) for s in segments]
    allf = np.concatenate(raw)
    fmean, fstd = allf.mean(axis=0), allf.std(axis=0)
    if np.any(fstd <= 0):
        raise ValueError("a feature has zero variance; cannot fit an HMM")
    feats = [(F - fmean) / fstd for F in raw]
    X = np.concatenate(feats)
    if n_states == 1:
        return HmmModel([1.0], [[1.0]], X.mean(axis=0, keepdims=True),
                        np.maximum(X.var(axis=0, keepdims=True), variance_floor), fmean, fstd,
                        {"trace": [], "iterations": 0})
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    rng = np.random.default_rng(seed)
    centers, labels = kmeans(X, n_states, rng, n_init=3)
    means = centers
    variances = np.array([X[labels == k].var(axis=0) if (labels == k).sum() > 1 else X.var(axis=0)
                          for k in range(n_states)])
    variances = np.maximum(variances, variance_floor)
    start = np.full(n_states, 1.0 / n_states)
    trans = np.full((n_states, n_states), 0.1 / n_states) + 0.9 * np.eye(n_states)
    batches = _batches(feats)
    trace, prev = [], -np.inf
    converged = False
    for it in range(max_iter):
        with np.errstate(divide="ignore"):
            ls, lt = np.log(start), np.log(trans)
        ll = 0.0
        g0 = np.zeros(n_states)
        xi = np.zeros((n_states, n_states))
        w = np.zeros(n_states)
        s1 = np.zeros((n_states, X.shape[1]))
        s2 = np.zeros((n_states, X.shape[1]))
        for Fb in batches:
            S, T, D = Fb.shape
            logB = _log_emission(Fb.reshape(-1, D), means, variances).reshape(S, T, n_states)
            post, xib, llb = _forward_backward(logB, ls, lt)
            ll += llb
            g0 += post[:, 0].sum(axis=0)
            xi += xib
            pf = post.reshape(-1, n_states)
            Ff = Fb.reshape(-1, D)
            w += pf.sum(axis=0)
            s1 += pf.T @ Ff
            s2 += pf.T @ Ff ** 2
        if ll < prev - 1e-9 * max(1.0, abs(prev)):
            raise RuntimeError(f"Baum-Welch log-likelihood decreased: {prev} -> {ll}")
        trace.append(ll)
        if it > 0 and abs(ll - prev) <= tol * abs(prev):
            converged = True
            break
        prev = ll
        start = g0 / g0.sum()
        rows = xi.sum(axis=1, keepdims=True)
        trans = np.where(rows > 0, xi / np.where(rows > 0, rows, 1.0), trans)
        ok = w > 1e-10
        safe = np.where(ok, w, 1.0)[:, None]
        means = np.where(ok[:, None], s1 / safe, means)
        variances = np.where(ok[:, None], np.maximum(s2 / safe - (s1 / safe) ** 2, variance_floor),
                             variances)
    trans = trans / trans.sum(axis=1, keepdims=True)
    return HmmModel(start / start.sum(), trans, means, variances, fmean, fstd,
                    {"trace": trace, "iterations": len(trace), "converged": converged,
                     "seed": seed})


def viterbi(log_start, log_trans, logB):
    """Most probable state path; ties go to the smaller state id."""
    T, K = logB.shape
    delta = log_start + logB[0]
    back = np.empty((T, K), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + log_trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(K)] + logB[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(delta.max())


def path_log_prob(log_start, log_trans, logB, path):
    lp = log_start[path[0]] + logB[0, path[0]]
    for t in range(1, len(path)):
        lp += log_trans[path[t - 1], path[t]] + logB[t, path[t]]
    return float(lp)


def hmm_decode(model: HmmModel, segment) -> ContextSequence:
    with np.errstate(divide="ignore"):
        ls, lt = np.log(model.start), np.log(model.trans)
    path, _ = viterbi(ls, lt, model.log_emission(model.features(segment)))
    return ContextSequence(path, "sample", model.n_states)


# ---------------------------------------------------------------------------
# motif-topic context


def _labels_of(lab):
    return np.asarray(getattr(lab, "labels", getattr(lab, "motifs", lab)), dtype=np.int64)


def motif_topic_context(labelings: Sequence, l_c: int, l_m: int, n_c: int, seed: int = 0,
                        n_motifs: Optional[int] = None, max_reseeds: int = 10):
    """Cluster smoothed motif-frequency vectors of context windows.

    Returns ``(gamma, sequences)``: ``gamma`` holds the normalized cluster
    centroids (n_c, M+1) and each sequence labels the full context windows of
    one labeling with the multinomial maximum-likelihood context.
    """
    if l_c % l_m:
        raise ValueError("l_c must be a multiple of l_m")
    labels = [_labels_of(l) for l in labelings]
    if not labels:
        raise ValueError("no labelings given")
    ratio = l_c // l_m
    n_comp = (n_motifs + 1) if n_motifs is not None else int(max(l.max() for l in labels if len(l))) + 1
    counts, per = [], []
    for z in labels:
        n = len(z) // ratio
        per.append(n)
        c = np.zeros((n, n_comp))
        if n:
            rows = np.repeat(np.arange(n), ratio)
            np.add.at(c, (rows, z[: n * ratio]), 1.0)
        counts.append(c)
    counts = np.concatenate(counts)
    if len(counts) < n_c:
        raise ValueError(f"need at least {n_c} context windows, got {len(counts)}")
    freq = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + n_comp)
    rng = np.random.default_rng(seed)
    degenerate = False
    if n_c == 1:
        tot = counts.sum(axis=0)
        gamma = ((tot + 1.0) / (tot.sum() + n_comp))[None, :]
    else:
        for _ in range(max_reseeds):
            centers, assign = kmeans(freq, n_c, rng)
            if len(np.unique(assign)) == n_c:
                break
        else:
            degenerate = True
            centers = np.repeat(freq.mean(axis=0, keepdims=True), n_c, axis=0)
        gamma = centers / centers.sum(axis=1, keepdims=True)
    ll = counts @ np.log(gamma).T
    ctx = np.argmax(ll, axis=1)
    if degenerate:
        ctx[:] = 0
    out, start = [], 0
    for n in per:
        out.append(ContextSequence(ctx[start:start + n], l_c, n_c))
        start += n
    return gamma, out
