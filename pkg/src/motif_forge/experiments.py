"""Representation comparison on simulated data: oracle counts, joint CMMM
labels, contextless labels, noise tuples and two-stage motif-topic contexts."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .cmmm import CmmmModel, ContextualLabeling, assign_contextual, fit_cmmm
from .context import motif_topic_context
from .evaluation import LAMBDA_GRID, ResultsTable, featurize, run_experiment
from .simgen import SimDataset, oracle_features

SIM_METHODS = ("oracle_motifs", "oracle_motifs_context", "joint", "two_stage", "motifs",
               "motifs_noise")


def fit_sim_model(sim: SimDataset, M: int, n_c: int, n_samples: int = 2000, burn_in: int = 1000,
                  seed: int = 0, **kw):
    m = sim.true_model
    return fit_cmmm(list(sim.signals), M, m.l_m, m.l_c, n_c, n_samples, burn_in, seed, **kw)


def simulation_features(sim: SimDataset, model: CmmmModel, seed: int = 0,
                        methods: Sequence[str] = SIM_METHODS) -> dict:
    """Feature matrices (one row per signal) for each requested method.

    Every signal is labelled by maximum likelihood under ``model``; the
    contextless and noise representations reuse those motif labels.
    """
    labs = [assign_contextual(model, x) for x in sim.signals]
    n_comp = model.n_motifs + 1
    out = {}
    rng = np.random.default_rng([seed, 7])
    for name in methods:
        if name == "oracle_motifs":
            out[name] = oracle_features(sim, "motifs")
        elif name == "oracle_motifs_context":
            out[name] = oracle_features(sim, "motifs_context")
        elif name == "joint":
            out[name] = featurize(labs, "motifs_context", n_comp, model.n_c).X
        elif name == "motifs":
            out[name] = featurize(labs, "motifs", n_comp).X
        elif name == "motifs_noise":
            out[name] = featurize(labs, "motifs_noise", n_comp, model.n_c, rng=rng,
                                  noise_block=model.l_c).X
        elif name == "two_stage":
            _, ctx = motif_topic_context([l.motifs for l in labs], model.l_c, model.l_m,
                                         model.n_c, seed=seed, n_motifs=model.n_motifs)
            two = [ContextualLabeling(c.labels, l.motifs, model.l_m, model.l_c)
                   for c, l in zip(ctx, labs)]
            out[name] = featurize(two, "motifs_context", n_comp, model.n_c).X
        else:
            raise ValueError(f"unknown method {name!r}")
    return out


def beta_sweep(sim: SimDataset, features: dict, betas: Sequence[float], n_splits: int = 25,
               test_fraction: float = 0.25, seed: int = 0, lambda_grid=LAMBDA_GRID,
               inner_folds: int = 3, n_jobs: int = 1,
               results: Optional[ResultsTable] = None) -> ResultsTable:
    """Evaluate fixed features against outcomes redrawn at each beta."""
    results = results if results is not None else ResultsTable(meta={"seed": seed})
    for beta in betas:
        relabeled = sim.relabel(float(beta))
        run_experiment(features, relabeled.y, sim.groups(), task="sim", n_splits=n_splits,
                       test_fraction=test_fraction, seed=seed, lambda_grid=lambda_grid,
                       inner_folds=inner_folds, n_jobs=n_jobs, results=results,
                       beta=float(beta))
    return results
