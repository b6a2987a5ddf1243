"""Synthetic datasets drawn from a known CMMM, with outcomes that depend on
the (motif, context) pairs each signal contains."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .cmmm import CmmmModel, ContextualLabeling, default_alpha_floor, sample_cmmm

WINDOWS_PER_SIGNAL = 4


def random_cmmm(M: int = 20, l_m: int = 8, l_c: int = 72, n_c: int = 2, seed: int = 0,
                motif_var: float = 0.1, bg_var: float = 2.0, variance_cap: float = 1.0,
                alpha_floor: Optional[float] = None) -> CmmmModel:
    """A ground-truth model with well separated motifs and distinct contexts.

    Motif means are standard normal per position, Γ rows are Dirichlet(1)
    and α is Dirichlet(1) conditioned on the ordering/floor constraints.
    """
    rng = np.random.default_rng(seed)
    floor = default_alpha_floor(n_c) if alpha_floor is None else alpha_floor
    for _ in range(100_000):
        alpha = np.sort(rng.dirichlet(np.ones(n_c)))[::-1]
        if alpha.min() >= floor:
            break
    else:
        raise ValueError("alpha_floor leaves no room under the ordering constraint")
    gamma = rng.dirichlet(np.ones(M + 1), size=n_c)
    means = rng.standard_normal((M, l_m))
    variances = np.full((M, l_m), motif_var)
    return CmmmModel(alpha, gamma, means, variances, 0.0, bg_var, l_c, floor,
                     variance_cap=variance_cap, meta={"seed": seed})


def contextual_scores(labelings, v) -> np.ndarray:
    """Sum of v over every (motif, context) window pair, background included."""
    return np.array([float(v[lab.motifs, lab.motif_contexts()].sum()) for lab in labelings])


@dataclass
class SimDataset:
    true_model: CmmmModel
    signals: np.ndarray
    truth: list
    v: np.ndarray
    beta: float
    scores: np.ndarray
    p: np.ndarray
    y: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    def groups(self) -> np.ndarray:
        return np.arange(self.n_signals)

    def relabel(self, beta: float, seed: Optional[int] = None) -> "SimDataset":
        """Same signals and v, outcomes redrawn at another beta."""
        seed = self.seed if seed is None else seed
        p, y = _outcomes(self.scores, beta, seed)
        return SimDataset(self.true_model, self.signals, self.truth, self.v, beta, self.scores,
                          p, y, seed, dict(self.meta, beta=beta))

    def save(self, directory):
        save_sim_dataset(self, directory)


def _outcomes(scores, beta, seed):
    p = expit(beta * scores)
    u = np.random.default_rng([seed, 1 << 20]).random(len(scores))
    return p, u < p


def gen_sim_dataset(true_model: CmmmModel, n_signals: int, windows_per_signal: int = WINDOWS_PER_SIGNAL,
                    beta: float = 1.0, seed: int = 0, v: Optional[np.ndarray] = None) -> SimDataset:
    """Draw signals, their true labels and outcomes.

    ``v`` is drawn from the master stream before any signal; signal ``i``
    uses its own stream seeded by ``(seed, i)`` and outcome draws use a
    separate stream, so changing ``beta`` leaves the signals untouched.
    """
    if n_signals < 1:
        raise ValueError("n_signals must be >= 1")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    rng = np.random.default_rng(seed)
    if v is None:
        v = rng.uniform(-1.0, 1.0, size=(true_model.n_motifs + 1, true_model.n_c))
    v = np.asarray(v, dtype=float)
    if v.shape != (true_model.n_motifs + 1, true_model.n_c):
        raise ValueError("v must have shape (M+1, n_c)")
    signals, truth = [], []
    for i in range(n_signals):
        values, lab = sample_cmmm(true_model, windows_per_signal, np.random.default_rng([seed, i]))
        signals.append(values)
        truth.append(lab)
    scores = contextual_scores(truth, v)
    p, y = _outcomes(scores, beta, seed)
    return SimDataset(true_model, np.array(signals), truth, v, float(beta), scores, p, y, seed,
                      {"windows_per_signal": windows_per_signal})


def count_features(motifs_list, n_motifs, contexts_list=None, n_c=1) -> np.ndarray:
    """Per-row counts of motif ids, or of (motif, context) pairs when
    contexts are given (column = motif * n_c + context)."""
    n_comp = n_motifs + 1
    width = n_comp * (n_c if contexts_list is not None else 1)
    out = np.zeros((len(motifs_list), width))
    for r, z in enumerate(motifs_list):
        z = np.asarray(z, dtype=np.int64)
        col = z if contexts_list is None else z * n_c + np.asarray(contexts_list[r], dtype=np.int64)
        out[r] = np.bincount(col, minlength=width)
    return out


def oracle_features(sim: SimDataset, kind: str) -> np.ndarray:
    """Counts of the true motif labels or true (motif, context) pairs."""
    m = sim.true_model
    z = [lab.motifs for lab in sim.truth]
    if kind == "motifs":
        return count_features(z, m.n_motifs)
    if kind == "motifs_context":
        return count_features(z, m.n_motifs, [lab.motif_contexts() for lab in sim.truth], m.n_c)
    raise ValueError(f"unknown oracle kind {kind!r}")


# ---------------------------------------------------------------------------
# persistence


def save_sim_dataset(sim: SimDataset, directory):
    os.makedirs(directory, exist_ok=True)
    m = sim.true_model
    with open(os.path.join(directory, "signals.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["signal_id", "index", "value"])
        for i, row in enumerate(sim.signals):
            for t, x in enumerate(row):
                w.writerow([i, t, repr(float(x))])
    with open(os.path.join(directory, "truth.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["signal_id", "motif_window", "context_window", "context", "motif"])
        for i, lab in enumerate(sim.truth):
            ctx = lab.motif_contexts()
            for j, z in enumerate(lab.motifs):
                w.writerow([i, j, j // m.ratio, int(ctx[j]), int(z)])
    with open(os.path.join(directory, "v.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["motif", "context", "value"])
        for z in range(sim.v.shape[0]):
            for c in range(sim.v.shape[1]):
                w.writerow([z, c, repr(float(sim.v[z, c]))])
    with open(os.path.join(directory, "outcomes.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["signal_id", "score", "probability", "y"])
        for i in range(sim.n_signals):
            w.writerow([i, repr(float(sim.scores[i])), repr(float(sim.p[i])), int(sim.y[i])])
    m.save(os.path.join(directory, "true_model.json"))
    manifest = {"seed": sim.seed, "beta": sim.beta, "n_signals": sim.n_signals,
                "M": m.n_motifs, "l_m": m.l_m, "l_c": m.l_c, "n_c": m.n_c,
                "windows_per_signal": sim.meta.get("windows_per_signal", WINDOWS_PER_SIGNAL)}
    with open(os.path.join(directory, "simulation.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_sim_dataset(directory) -> SimDataset:
    with open(os.path.join(directory, "simulation.json")) as fh:
        manifest = json.load(fh)
    m = CmmmModel.load(os.path.join(directory, "true_model.json"))
    n = manifest["n_signals"]
    rows = _read_csv(os.path.join(directory, "signals.csv"))
    length = len(rows) // n
    signals = np.array([float(r["value"]) for r in rows]).reshape(n, length)
    truth_rows = _read_csv(os.path.join(directory, "truth.csv"))
    per = len(truth_rows) // n
    z = np.array([int(r["motif"]) for r in truth_rows]).reshape(n, per)
    c = np.array([int(r["context"]) for r in truth_rows]).reshape(n, per)[:, ::m.ratio]
    truth = [ContextualLabeling(c[i], z[i], m.l_m, m.l_c) for i in range(n)]
    v = np.zeros((m.n_motifs + 1, m.n_c))
    for r in _read_csv(os.path.join(directory, "v.csv")):
        v[int(r["motif"]), int(r["context"])] = float(r["value"])
    out = _read_csv(os.path.join(directory, "outcomes.csv"))
    scores = np.array([float(r["score"]) for r in out])
    p = np.array([float(r["probability"]) for r in out])
    y = np.array([r["y"] == "1" for r in out])
    return SimDataset(m, signals, truth, v, manifest["beta"], scores, p, y, manifest["seed"],
                      {"windows_per_signal": manifest["windows_per_signal"]})
