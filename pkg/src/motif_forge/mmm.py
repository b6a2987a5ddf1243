"""Motif mixture model: a diagonal Gaussian mixture over tiled windows with a
broad, position-independent background component (label 0).

Inputs are expected in standardized units; the variance floor is expressed in
those units.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from ._kmeans import kmeans
from .signal import tile

LOG2PI = np.log(2 * np.pi)
VARIANCE_FLOOR = 1e-4


@dataclass(frozen=True)
class MotifModel:
    """Mixture weights ``gamma`` (background first), motif means/variances of
    shape (M, l_m) and scalar background mean/variance."""

    gamma: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    bg_mean: float
    bg_var: float
    variance_floor: float = VARIANCE_FLOOR
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float)
        means = np.atleast_2d(np.array(self.means, dtype=float))
        variances = np.atleast_2d(np.array(self.variances, dtype=float))
        if means.shape != variances.shape or len(gamma) != len(means) + 1:
            raise ValueError("inconsistent MotifModel dimensions")
        if np.any(gamma < 0) or abs(gamma.sum() - 1) > 1e-9:
            raise ValueError("gamma must be a probability vector")
        if variances.min() < self.variance_floor * (1 - 1e-12) or self.bg_var < self.variance_floor:
            raise ValueError("variances below the floor")
        if self.bg_var < variances.max() * (1 - 1e-12):
            raise ValueError("background variance must dominate motif variances")
        for name, a in (("gamma", gamma), ("means", means), ("variances", variances)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_motifs(self) -> int:
        return self.means.shape[0]

    @property
    def motif_length(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, X: np.ndarray) -> np.ndarray:
        return component_logpdf(X, self.means, self.variances, self.bg_mean, self.bg_var)

    def to_dict(self):
        return {
            "gamma": self.gamma.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "bg_mean": self.bg_mean,
            "bg_var": self.bg_var,
            "l_m": self.motif_length,
            "variance_floor": self.variance_floor,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["gamma"], d["means"], d["variances"], d["bg_mean"], d["bg_var"],
                   d.get("variance_floor", VARIANCE_FLOOR), d.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class MotifLabeling:
    labels: np.ndarray
    segment: Optional[object] = None


def component_logpdf(X, means, variances, bg_mean, bg_var):
    """(n, M+1) log densities; column 0 is the background."""
    X = np.atleast_2d(X)
    l = X.shape[1]
    inv = 1.0 / variances
    quad = (X ** 2) @ inv.T - 2.0 * X @ (means * inv).T + (means ** 2 * inv).sum(axis=1)
    motif = -0.5 * (l * LOG2PI + np.log(variances).sum(axis=1) + quad)
    bg = -0.5 * (l * (LOG2PI + np.log(bg_var)) + ((X - bg_mean) ** 2).sum(axis=1) / bg_var)
    return np.column_stack([bg, motif])


def _log_weights(gamma):
    with np.errstate(divide="ignore"):
        return np.log(gamma)


def windows_of(segments, l_m) -> np.ndarray:
    """Stack the tiled windows of all segments into one (n, l_m) array."""
    blocks = [tile(s.values if hasattr(s, "values") else s, l_m) for s in segments]
    blocks = [b for b in blocks if len(b)]
    if not blocks:
        return np.empty((0, l_m))
    return np.concatenate(blocks)


@dataclass
class EMConfig:
    tol: float = 1e-6
    max_iters: int = 500
    n_init: int = 1
    variance_floor: float = VARIANCE_FLOOR
    # split-and-merge rounds after EM: each tries merging two overlapping
    # motifs while splitting a broad one, kept only if the likelihood rises
    split_merge: int = 0
    split_merge_tries: int = 5


def _init_params(X, M, rng, floor, cap):
    centers, labels = kmeans(X, M, rng)
    means = centers.copy()
    variances = np.empty_like(means)
    counts = np.bincount(labels, minlength=M).astype(float)
    for k in range(M):
        members = X[labels == k]
        variances[k] = members.var(axis=0) if len(members) > 1 else cap
    variances = np.clip(variances, floor, cap)
    gamma = np.concatenate([[0.05], 0.95 * counts / counts.sum()])
    return gamma, means, variances


def _em(X, M, rng, cfg, init=None):
    n, l = X.shape
    floor = cfg.variance_floor
    global_mean = float(X.mean())
    global_var = max(float(X.var()), floor)
    if init is None:
        gamma, means, variances = _init_params(X, M, rng, floor, global_var)
        bg_mean, bg_var = global_mean, global_var
    else:
        gamma, means, variances, bg_mean, bg_var = init
    trace = []
    prev = -np.inf
    converged = False
    for it in range(cfg.max_iters):
        logp = component_logpdf(X, means, variances, bg_mean, bg_var) + _log_weights(gamma)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        if not np.isfinite(ll):
            raise FloatingPointError("non-finite log-likelihood during EM")
        if ll < prev - 1e-9 * max(1.0, abs(prev)):
            raise RuntimeError(f"EM log-likelihood decreased at iteration {it}: {prev} -> {ll}")
        trace.append(ll)
        if it > 0 and abs(ll - prev) <= cfg.tol * abs(prev):
            converged = True
            break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        gamma = nk / nk.sum()
        alive = nk[1:] > 1e-10
        r = resp[:, 1:]
        s1 = r.T @ X
        s2 = r.T @ (X ** 2)
        safe = np.where(alive, nk[1:], 1.0)[:, None]
        new_means = s1 / safe
        new_vars = s2 / safe - new_means ** 2
        means = np.where(alive[:, None], new_means, means)
        # box constraint keeps the background the broadest component
        variances = np.where(alive[:, None], np.clip(new_vars, floor, global_var), variances)
        if nk[0] > 1e-10:
            r0 = resp[:, 0]
            bg_mean = float(r0 @ X.sum(axis=1) / (l * nk[0]))
            bg_var = float(r0 @ ((X - bg_mean) ** 2).sum(axis=1) / (l * nk[0]))
            bg_var = max(bg_var, global_var)
    return gamma, means, variances, bg_mean, bg_var, trace, converged


def _gauss_ll(n, s1, s2, floor):
    """Maximized diagonal Gaussian log-likelihood from sufficient statistics."""
    n = np.maximum(n, 1e-12)
    var = np.maximum(s2 / n[..., None] - (s1 / n[..., None]) ** 2, floor)
    return -0.5 * n * (np.log(2 * np.pi * var).sum(axis=-1) + var.shape[-1])


def _split_merge_candidates(X, fit, rng, cfg):
    """Ranked (split k, merge i, j) moves scored on hard assignments."""
    gamma, means, variances, bg_mean, bg_var = fit[:5]
    M = len(means)
    labels = np.argmax(component_logpdf(X, means, variances, bg_mean, bg_var)
                       + _log_weights(gamma), axis=1) - 1
    n = np.bincount(labels[labels >= 0], minlength=M).astype(float)
    s1 = np.zeros_like(means)
    s2 = np.zeros_like(means)
    np.add.at(s1, labels[labels >= 0], X[labels >= 0])
    np.add.at(s2, labels[labels >= 0], X[labels >= 0] ** 2)
    floor = cfg.variance_floor
    one = _gauss_ll(n, s1, s2, floor)
    halves = {}
    gain = np.full(M, -np.inf)
    for k in range(M):
        members = X[labels == k]
        if len(members) < 4:
            continue
        centers, lab = kmeans(members, 2, rng)
        if len(np.unique(lab)) < 2:
            continue
        parts = [members[lab == h] for h in (0, 1)]
        ll = sum(_gauss_ll(np.array(len(p), float), p.sum(0), (p ** 2).sum(0), floor) for p in parts)
        gain[k] = ll - one[k]
        halves[k] = parts
    loss = one[:, None] + one[None, :] - _gauss_ll(n[:, None] + n[None, :], s1[:, None] + s1[None],
                                                     s2[:, None] + s2[None], floor)
    moves = []
    for k in halves:
        for i in range(M):
            for j in range(i + 1, M):
                if k not in (i, j):
                    moves.append((gain[k] - loss[i, j], k, i, j))
    moves.sort(key=lambda m: (-m[0], m[1], m[2], m[3]))
    return moves[:cfg.split_merge_tries], halves


def _apply_move(fit, move, halves, cfg, global_var):
    gamma, means, variances, bg_mean, bg_var = (np.array(a, dtype=float) if np.ndim(a) else a
                                                for a in fit[:5])
    _, k, i, j = move
    wi, wj = gamma[i + 1], gamma[j + 1]
    w = max(wi + wj, 1e-12)
    mean = (wi * means[i] + wj * means[j]) / w
    var = (wi * (variances[i] + means[i] ** 2) + wj * (variances[j] + means[j] ** 2)) / w - mean ** 2
    means[i], variances[i], gamma[i + 1] = mean, var, wi + wj
    a, b = halves[k]
    wk = gamma[k + 1]
    for slot, part in ((k, a), (j, b)):
        means[slot] = part.mean(axis=0)
        variances[slot] = part.var(axis=0)
        gamma[slot + 1] = wk * len(part) / (len(a) + len(b))
    variances = np.clip(variances, cfg.variance_floor, global_var)
    return gamma / gamma.sum(), means, variances, bg_mean, bg_var


def _split_merge(X, best, rng, cfg):
    """Escape merged or wasted components (split-and-merge EM)."""
    global_var = max(float(X.var()), cfg.variance_floor)
    optima = [best[5][-1]]
    for _ in range(cfg.split_merge):
        moves, halves = _split_merge_candidates(X, best, rng, cfg)
        improved = False
        for move in moves:
            out = _em(X, len(best[1]), rng, cfg, init=_apply_move(best, move, halves, cfg, global_var))
            if out[5][-1] > best[5][-1] + cfg.tol * abs(best[5][-1]):
                best = out
                optima.append(out[5][-1])
                improved = True
                break
        if not improved:
            break
    return best, optima


def fit_mmm(segments: Sequence, M: int, l_m: int, cfg: Optional[EMConfig] = None,
            seed: int = 0) -> MotifModel:
    """Fit the motif mixture by EM over the tiled ``l_m``-windows of ``segments``.

    With ``cfg.n_init > 1`` the best of several k-means++ initializations is
    kept, then refined by ``cfg.split_merge`` split-and-merge rounds. The
    returned model carries the log-likelihood trace of its final EM run in
    ``meta["trace"]`` and the optimum after each accepted move in
    ``meta["split_merge"]``.
    """
    cfg = cfg or EMConfig()
    if M < 1:
        raise ValueError("M must be >= 1")
    X = windows_of(segments, l_m)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite values in input")
    if len(X) < M + 1:
        raise ValueError(f"need at least {M + 1} windows, got {len(X)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, cfg.n_init)):
        out = _em(X, M, rng, cfg)
        if best is None or out[5][-1] > best[5][-1]:
            best = out
    optima = [best[5][-1]]
    if cfg.split_merge > 0 and M > 2:
        best, optima = _split_merge(X, best, rng, cfg)
    gamma, means, variances, bg_mean, bg_var, trace, converged = best
    gamma = gamma / gamma.sum()
    meta = {"seed": seed, "iterations": len(trace), "log_likelihood": trace[-1],
            "converged": converged, "trace": trace, "n_windows": int(len(X)),
            "global_var": max(float(X.var()), cfg.variance_floor), "split_merge": optima}
    return MotifModel(gamma, means, variances, bg_mean, bg_var, cfg.variance_floor, meta)


def mmm_log_likelihood(model: MotifModel, segment) -> float:
    X = windows_of([segment], model.motif_length)
    if len(X) == 0:
        return 0.0
    logp = model.component_logpdf(X) + _log_weights(model.gamma)
    return float(logsumexp(logp, axis=1).sum())


def assign_motifs(model: MotifModel, segment) -> MotifLabeling:
    """Maximum-likelihood motif per tiled window; ties go to the smaller id."""
    X = windows_of([segment], model.motif_length)
    if len(X) == 0:
        return MotifLabeling(np.zeros(0, dtype=np.int64), segment)
    logp = model.component_logpdf(X) + _log_weights(model.gamma)
    return MotifLabeling(np.argmax(logp, axis=1), segment)


def sample_windows(means, variances, bg_mean, bg_var, labels, rng):
    l = means.shape[1]
    out = np.empty((len(labels), l))
    bg = labels == 0
    out[bg] = rng.normal(bg_mean, np.sqrt(bg_var), size=(int(bg.sum()), l))
    m = ~bg
    idx = labels[m] - 1
    out[m] = rng.normal(means[idx], np.sqrt(variances[idx]))
    return out


def sample_mmm(model: MotifModel, n_windows: int, rng):
    """Draw ``n_windows`` labels from gamma and their observations.

    Returns ``(values, MotifLabeling)`` with ``values`` of length
    ``n_windows * l_m``.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    rng = np.random.default_rng(rng)
    labels = rng.choice(len(model.gamma), size=n_windows, p=model.gamma)
    X = sample_windows(model.means, model.variances, model.bg_mean, model.bg_var, labels, rng)
    return X.reshape(-1), MotifLabeling(labels)
