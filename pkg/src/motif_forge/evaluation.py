"""Day-level features from labelings, prediction tasks, patient-aware splits,
L2 logistic regression and AUC scoring."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit

LAMBDA_GRID = tuple(10.0 ** k for k in range(-3, 4))
REPRESENTATIONS = ("motifs", "motifs_context", "motifs_noise", "derived_counts",
                   "derived_contextual_counts")


# ---------------------------------------------------------------------------
# AUC


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied pairs) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# tasks and events


@dataclass(frozen=True)
class TaskSpec:
    event: str = "hypo"
    horizon: str = "long"
    hypo_level: float = 70.0
    hyper_level: float = 180.0
    event_min_duration: int = 3
    long_hyper_min_events: int = 2
    short_horizon: int = 8
    short_grid: int = 8

    def __post_init__(self):
        if self.event not in ("hypo", "hyper") or self.horizon not in ("long", "short"):
            raise ValueError(f"unknown task {self.event}/{self.horizon}")
        if not self.hypo_level < self.hyper_level:
            raise ValueError("hypo_level must be below hyper_level")
        if min(self.event_min_duration, self.short_horizon, self.short_grid,
               self.long_hyper_min_events) < 1:
            raise ValueError("durations and counts must be >= 1")

    @property
    def name(self) -> str:
        return f"{self.event}_{self.horizon}"


def label_events(values, task: TaskSpec) -> list[tuple[int, int]]:
    """Maximal runs of at least ``event_min_duration`` samples beyond the
    task's threshold, as half-open ``(start, stop)`` index pairs."""
    x = np.asarray(getattr(values, "values", values), dtype=float)
    hit = x < task.hypo_level if task.event == "hypo" else x > task.hyper_level
    padded = np.concatenate([[0], hit.astype(np.int8), [0]])
    d = np.diff(padded)
    starts, stops = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return [(int(a), int(b)) for a, b in zip(starts, stops) if b - a >= task.event_min_duration]


def long_outcome(next_day_values, task: TaskSpec) -> bool:
    n = len(label_events(next_day_values, task))
    return n >= (1 if task.event == "hypo" else task.long_hyper_min_events)


# ---------------------------------------------------------------------------
# tokens and features


@dataclass(frozen=True)
class Tokens:
    """Labelled windows of one segment: start sample, length, motif id and
    context id (or -1 when the labeling has no context)."""

    starts: np.ndarray
    lengths: np.ndarray
    motifs: np.ndarray
    contexts: np.ndarray
    background: np.ndarray

    @property
    def ends(self) -> np.ndarray:
        return self.starts + self.lengths


def tokens_of(labeling, l_m: Optional[int] = None, motifs=None) -> Tokens:
    """Normalize a labeling into :class:`Tokens`.

    Accepts a contextual labeling (``contexts``/``motifs``), a motif labeling
    or label array (needs ``l_m``), or a list of derived-motif occurrences
    (``motifs`` maps id to motif, supplying length and context tag).
    """
    if hasattr(labeling, "contexts") and hasattr(labeling, "motifs"):
        z = np.asarray(labeling.motifs, dtype=np.int64)
        lm = labeling.l_m
        return Tokens(np.arange(len(z)) * lm, np.full(len(z), lm), z,
                      labeling.motif_contexts().astype(np.int64), z == 0)
    if isinstance(labeling, (list, tuple)) and (not labeling or hasattr(labeling[0], "motif_id")):
        if motifs is None and labeling:
            raise ValueError("derived occurrences need the motif table")
        ids = np.array([o.motif_id for o in labeling], dtype=np.int64)
        starts = np.array([o.offset for o in labeling], dtype=np.int64)
        lengths = np.array([motifs[i].length for i in ids], dtype=np.int64)
        ctx = np.array([-1 if motifs[i].context_tag is None else motifs[i].context_tag
                        for i in ids], dtype=np.int64)
        order = np.lexsort((ids, starts))
        return Tokens(starts[order], lengths[order], ids[order], ctx[order],
                      np.zeros(len(ids), dtype=bool))
    z = np.asarray(getattr(labeling, "labels", labeling), dtype=np.int64)
    if l_m is None:
        raise ValueError("l_m is required for plain motif labels")
    return Tokens(np.arange(len(z)) * l_m, np.full(len(z), l_m), z, np.full(len(z), -1), z == 0)


def feature_columns(tokens: Tokens, representation: str, n_motifs: int, n_c: int = 1,
                    noise=None) -> np.ndarray:
    """Column index of each token under ``representation``.

    ``n_motifs`` is the number of motif ids (the background counts as one
    for model labelings). ``noise`` supplies the per-token noise category
    for ``motifs_noise``.
    """
    if representation in ("motifs", "derived_counts"):
        return tokens.motifs
    if representation in ("motifs_context", "derived_contextual_counts"):
        if np.any(tokens.contexts < 0):
            raise ValueError(f"{representation} needs context labels")
        return tokens.motifs * n_c + tokens.contexts
    if representation == "motifs_noise":
        if noise is None:
            raise ValueError("motifs_noise needs noise draws")
        return tokens.motifs * n_c + np.asarray(noise, dtype=np.int64)
    raise ValueError(f"unknown representation {representation!r}")


def n_columns(representation, n_motifs, n_c):
    return n_motifs if representation in ("motifs", "derived_counts") else n_motifs * n_c


def noise_draws(tokens: Tokens, cardinality: int, rng, block: Optional[int] = None):
    """Uniform categories independent of the data; one draw per block of
    ``block`` samples (a context window) when given, else per token."""
    if block:
        n_blocks = int(tokens.starts.max(initial=-1) // block) + 1
        per_block = rng.integers(0, cardinality, size=n_blocks)
        return per_block[tokens.starts // block]
    return rng.integers(0, cardinality, size=len(tokens.starts))


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    columns: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=bool)
        self.groups = np.asarray(self.groups)
        if not (len(self.X) == len(self.y) == len(self.groups)):
            raise ValueError("X, y and groups differ in length")
        if self.X.ndim != 2 or self.X.shape[1] != len(self.columns):
            raise ValueError("column names do not match X")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("missing or non-finite feature values")

    def __len__(self):
        return len(self.y)

    def subset(self, rows) -> "FeatureMatrix":
        meta = {k: (np.asarray(v)[rows] if isinstance(v, np.ndarray) and len(v) == len(self) else v)
                for k, v in self.meta.items()}
        return FeatureMatrix(self.X[rows], self.y[rows], self.groups[rows], self.columns, meta)


def column_names(representation, n_motifs, n_c):
    if representation in ("motifs", "derived_counts"):
        return [f"m{z}" for z in range(n_motifs)]
    tag = "n" if representation == "motifs_noise" else "c"
    return [f"m{z}_{tag}{c}" for z in range(n_motifs) for c in range(n_c)]


def featurize(labelings: Sequence, representation: str, n_motifs: int, n_c: int = 1,
              noise_cardinality: Optional[int] = None, rng=None, y=None, groups=None,
              l_m: Optional[int] = None, motif_table=None, noise_block: Optional[int] = None
              ) -> FeatureMatrix:
    """One row of counts per labeling.

    ``n_motifs`` counts every motif id including the background when the
    labeling has one. ``motifs_noise`` pairs each motif with a uniform
    category of ``noise_cardinality`` (default ``n_c``) values.
    """
    rng = np.random.default_rng(rng)
    card = noise_cardinality or n_c
    width = n_columns(representation, n_motifs, card if representation == "motifs_noise" else n_c)
    X = np.zeros((len(labelings), width))
    for r, lab in enumerate(labelings):
        tok = lab if isinstance(lab, Tokens) else tokens_of(lab, l_m, motif_table)
        noise = noise_draws(tok, card, rng, noise_block) if representation == "motifs_noise" else None
        cols = feature_columns(tok, representation, n_motifs,
                               card if representation == "motifs_noise" else n_c, noise)
        X[r] = np.bincount(cols, minlength=width)[:width]
    y = np.zeros(len(labelings), dtype=bool) if y is None else y
    groups = np.arange(len(labelings)) if groups is None else groups
    names = column_names(representation, n_motifs,
                         card if representation == "motifs_noise" else n_c)
    return FeatureMatrix(X, y, groups, names, {"representation": representation})


def _day_number(seg):
    day = getattr(seg, "day", None)
    return day.toordinal() if day is not None else seg.day_index


def make_task_rows(segments: Sequence, tokens: Sequence, task: TaskSpec, cols: Sequence,
                   n_cols: int, column_names_: Optional[list] = None,
                   recent_window: int = 8) -> FeatureMatrix:
    """Rows for one prediction task from day segments and their tokens.

    ``cols[k]`` gives the feature column of each token of ``segments[k]``.
    Long horizon: one row per day followed by a retained next day, with
    counts over that day. Short horizon: days are joined into runs of
    consecutive days; prediction times fall every ``short_grid`` samples once
    a full day of history exists, features count tokens lying wholly in the
    preceding day and the label is an event onset within ``short_horizon``
    samples. ``meta["recent"]`` flags rows with a non-background token
    ending within ``recent_window`` samples of the prediction time.
    """
    by_patient: dict = {}
    for k, seg in enumerate(segments):
        by_patient.setdefault(seg.patient_id, []).append(k)
    rows, ys, groups, keys, recent = [], [], [], [], []
    for pid in sorted(by_patient):
        idx = sorted(by_patient[pid], key=lambda k: _day_number(segments[k]))
        runs, cur = [], [idx[0]]
        for a, b in zip(idx, idx[1:]):
            if _day_number(segments[b]) == _day_number(segments[a]) + 1:
                cur.append(b)
            else:
                runs.append(cur)
                cur = [b]
        runs.append(cur)
        for run in runs:
            day_len = len(segments[run[0]].values)
            values = np.concatenate([segments[k].values for k in run])
            starts = np.concatenate([tokens[k].starts + i * day_len for i, k in enumerate(run)])
            ends = np.concatenate([tokens[k].ends + i * day_len for i, k in enumerate(run)])
            col = np.concatenate([np.asarray(cols[k], dtype=np.int64) for k in run])
            bg = np.concatenate([tokens[k].background for k in run])
            if task.horizon == "long":
                for i in range(len(run) - 1):
                    lo, hi = i * day_len, (i + 1) * day_len
                    sel = (starts >= lo) & (ends <= hi)
                    rows.append(np.bincount(col[sel], minlength=n_cols)[:n_cols])
                    ys.append(long_outcome(values[hi:hi + day_len], task))
                    groups.append(pid)
                    keys.append((pid, _day_number(segments[run[i]]), hi))
                    recent.append(bool(np.any(sel & ~bg & (ends > hi - recent_window))))
            else:
                onsets = np.array([a for a, _ in label_events(values, task)], dtype=np.int64)
                for t in range(day_len, len(values) - task.short_horizon + 1, task.short_grid):
                    sel = (starts >= t - day_len) & (ends <= t)
                    rows.append(np.bincount(col[sel], minlength=n_cols)[:n_cols])
                    ys.append(bool(np.any((onsets >= t) & (onsets < t + task.short_horizon))))
                    groups.append(pid)
                    keys.append((pid, _day_number(segments[run[t // day_len - 1]]), t))
                    recent.append(bool(np.any(sel & ~bg & (ends > t - recent_window))))
    names = column_names_ or [f"f{j}" for j in range(n_cols)]
    X = np.array(rows, dtype=float).reshape(len(rows), n_cols)
    return FeatureMatrix(X, np.array(ys, dtype=bool), np.array(groups, dtype=object), names,
                         {"keys": keys, "recent": np.array(recent, dtype=bool), "task": task.name})


# ---------------------------------------------------------------------------
# splits


def patient_aware_split(groups, test_fraction: float, rng, y=None, max_redraws: int = 100):
    """Partition patients so the test side's row count is closest to
    ``test_fraction`` of all rows; returns ``(train_rows, test_rows)``.

    Patients are shuffled and a prefix is taken, keeping at least one
    patient per side. With ``y`` given, draws whose test or train side has a
    single class are redrawn.
    """
    groups = np.asarray(getattr(groups, "groups", groups))
    if y is None and hasattr(groups, "y"):
        y = groups.y
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    patients, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    if len(patients) < 2:
        raise ValueError("patient-aware split needs at least two patients")
    rng = np.random.default_rng(rng)
    target = test_fraction * len(groups)
    for _ in range(max_redraws):
        order = rng.permutation(len(patients))
        cum = np.cumsum(counts[order])[:-1]
        k = int(np.argmin(np.abs(cum - target))) + 1
        test_p = np.zeros(len(patients), dtype=bool)
        test_p[order[:k]] = True
        test = test_p[inverse]
        if y is None or (len(np.unique(np.asarray(y)[test])) == 2
                         and len(np.unique(np.asarray(y)[~test])) == 2):
            break
    return np.flatnonzero(~test), np.flatnonzero(test)


def group_folds(groups, n_folds, rng):
    """Patient-aware folds: shuffled patients dealt into ``n_folds`` groups."""
    patients = np.unique(groups)
    n_folds = min(n_folds, len(patients))
    order = rng.permutation(len(patients))
    folds = np.array_split(patients[order], n_folds)
    return [np.flatnonzero(np.isin(groups, f)) for f in folds]


# ---------------------------------------------------------------------------
# logistic regression


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    intercept: float
    mean: np.ndarray
    scale: np.ndarray
    lam: float
    degenerate: bool = False
    iterations: int = 0

    def decision(self, X) -> np.ndarray:
        if self.degenerate:
            return np.zeros(len(X))
        return ((np.asarray(X, dtype=float) - self.mean) / self.scale) @ self.weights + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        if self.degenerate:
            return np.full(len(X), 0.5)
        return expit(self.decision(X))


def logistic_loss(w, b, Z, y, lam) -> float:
    """Mean negative log-likelihood plus ``lam / 2 * |w|^2``."""
    f = Z @ w + b
    ll = np.where(y, log_expit(f), log_expit(-f))
    return float(-ll.mean() + 0.5 * lam * w @ w)


def _newton(Z, y, lam, tol=1e-6, max_iter=200):
    n, d = Z.shape
    A = np.column_stack([Z, np.ones(n)])
    theta = np.zeros(d + 1)
    yf = y.astype(float)
    reg = np.full(d + 1, lam)
    reg[-1] = 0.0
    loss = logistic_loss(theta[:-1], theta[-1], Z, y, lam)
    history = [loss]
    for it in range(max_iter):
        p = expit(A @ theta)
        grad = A.T @ (p - yf) / n + reg * theta
        if np.linalg.norm(grad) < tol:
            break
        W = p * (1 - p)
        H = (A.T * W) @ A / n + np.diag(reg) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(H, grad)
        t, slope = 1.0, float(grad @ step)
        while True:
            cand = theta - t * step
            new = logistic_loss(cand[:-1], cand[-1], Z, y, lam)
            if new <= loss - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if new > loss:
            break
        theta, loss = cand, new
        history.append(loss)
    return theta[:-1], float(theta[-1]), history


def fit_logistic(X, y, lam: float, tol: float = 1e-6) -> LinearModel:
    """L2 logistic regression on standardized features (train statistics)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=bool)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    if y.all() or not y.any():
        return LinearModel(np.zeros(X.shape[1]), 0.0, mean, scale, lam, degenerate=True)
    Z = (X - mean) / scale
    w, b, hist = _newton(Z, y, lam, tol)
    return LinearModel(w, b, mean, scale, lam, iterations=len(hist) - 1)


def _safe_auc(scores, y):
    y = np.asarray(y, dtype=bool)
    if y.all() or not y.any():
        return None
    return auc(scores, y)


def fit_linear_classifier(X, y, groups, lambda_grid=LAMBDA_GRID, inner_folds: int = 3,
                          seed=0) -> LinearModel:
    """Choose lambda by mean patient-aware inner-fold AUC (ties go to the
    larger lambda), then refit on every training row."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=bool)
    groups = np.asarray(groups)
    grid = sorted(float(l) for l in lambda_grid)
    if y.all() or not y.any():
        return fit_logistic(X, y, grid[-1])
    if len(grid) == 1 or len(np.unique(groups)) < 2:
        return fit_logistic(X, y, grid[-1] if len(grid) == 1 else grid[len(grid) // 2])
    folds = group_folds(groups, inner_folds, np.random.default_rng(seed))
    scores = []
    for lam in grid:
        vals = []
        for f in folds:
            train = np.setdiff1d(np.arange(len(y)), f)
            model = fit_logistic(X[train], y[train], lam)
            a = _safe_auc(model.decision(X[f]), y[f])
            if a is not None:
                vals.append(a)
        scores.append(np.mean(vals) if vals else -np.inf)
    scores = np.array(scores)
    best = max(i for i in range(len(grid)) if scores[i] == scores.max())
    return fit_logistic(X, y, grid[best])


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, method, task, aucs, **extra):
        aucs = [float(a) for a in aucs]
        std = float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0
        self.rows.append(dict(method=method, task=task, mean_auc=float(np.mean(aucs)),
                              std_auc=std, n_splits=len(aucs), aucs=aucs, **extra))

    def get(self, method, task=None, **match):
        """First row for ``method`` (and ``task``) whose extra keys equal ``match``."""
        for r in self.rows:
            if (r["method"] == method and (task is None or r["task"] == task)
                    and all(r.get(k) == v for k, v in match.items())):
                return r
        raise KeyError((method, task, match))

    def mean(self, method, task=None, **match) -> float:
        return self.get(method, task, **match)["mean_auc"]

    def paired_test(self, a, b, task=None, alternative="greater", **match):
        """Paired t-test of per-split AUCs of method ``a`` against ``b``."""
        x = np.array(self.get(a, task, **match)["aucs"])
        y = np.array(self.get(b, task, **match)["aucs"])
        return stats.ttest_rel(x, y, alternative=alternative)

    def _summary_keys(self):
        extra = sorted({k for r in self.rows for k in r} - {"method", "task", "mean_auc", "std_auc",
                                                          "n_splits", "aucs"})
        return ["method", "task"] + extra + ["mean_auc", "std_auc", "n_splits"]

    def to_csv(self, path):
        keys = self._summary_keys()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([_fmt(r.get(k, "")) for k in keys])

    def to_split_csv(self, path):
        keys = [k for k in self._summary_keys() if k not in ("mean_auc", "std_auc", "n_splits")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys + ["split", "auc"])
            for r in self.rows:
                for i, a in enumerate(r["aucs"]):
                    w.writerow([_fmt(r.get(k, "")) for k in keys] + [i, repr(a)])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"meta": self.meta, "rows": self.rows}, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["rows"], d.get("meta", {}))


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def split_rng(seed, split_index):
    return np.random.default_rng([int(seed), int(split_index)])


def _one_split(methods, y, groups, split_index, test_fraction, seed, lambda_grid, inner_folds):
    rng = split_rng(seed, split_index)
    train, test = patient_aware_split(groups, test_fraction, rng, y=y)
    if np.intersect1d(groups[train], groups[test]).size:
        raise AssertionError("patient leaked across the split")
    inner_seed = int(rng.integers(2**31))
    out = {}
    for name, X in methods.items():
        model = fit_linear_classifier(X[train], y[train], groups[train], lambda_grid,
                                      inner_folds, inner_seed)
        a = _safe_auc(model.decision(X[test]), y[test])
        out[name] = 0.5 if a is None else a
    return out


def run_experiment(methods: Mapping[str, np.ndarray], y, groups, task: str = "task",
                   n_splits: int = 25, test_fraction: float = 0.25, seed: int = 0,
                   lambda_grid=LAMBDA_GRID, inner_folds: int = 3, n_jobs: int = 1,
                   results: Optional[ResultsTable] = None, **extra) -> ResultsTable:
    """Score each representation over ``n_splits`` shared patient-aware splits.

    Split ``i`` is drawn from a stream seeded by ``(seed, i)`` and used by
    every method, so per-split AUCs are paired. Results do not depend on
    ``n_jobs``.
    """
    y = np.asarray(y, dtype=bool)
    groups = np.asarray(groups)
    methods = {k: np.asarray(getattr(v, "X", v), dtype=float) for k, v in methods.items()}
    for k, X in methods.items():
        if len(X) != len(y):
            raise ValueError(f"{k}: feature rows do not match labels")
    args = (test_fraction, seed, lambda_grid, inner_folds)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            per = list(ex.map(lambda i: _one_split(methods, y, groups, i, *args), range(n_splits)))
    else:
        per = [_one_split(methods, y, groups, i, *args) for i in range(n_splits)]
    results = results if results is not None else ResultsTable(meta={"seed": seed})
    for name in methods:
        results.add(name, task, [p[name] for p in per], **extra)
    return results
