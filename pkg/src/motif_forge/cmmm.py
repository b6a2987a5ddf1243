"""Contextual motif mixture model (CMMM).

Each context window of ``l_c`` samples draws a context from ``alpha``; each of
its ``l_c / l_m`` motif windows then draws a motif from that context's row of
``gamma`` (column 0 is the background) and observations from the shared motif
Gaussians.

Inference is MCMC over ``(c, z, alpha, gamma, theta)``:

* ``c`` and ``z``: Metropolized Gibbs with a uniform proposal over the other
  categories. Given the rest of the state the ``c_i`` (and the ``z_j``) are
  conditionally independent, so each block is updated in one vectorized pass.
* ``alpha`` and each ``gamma_c``: random-walk Metropolis on additive-logratio
  coordinates of the simplex with Gaussian proposals.
* ``theta``: preconditioned MALA with a dual-averaged step size (default), or
  exact conditional Gibbs draws (``theta_kernel="gibbs"``).

Label switching between contexts is removed by potentials requiring ``alpha``
to be non-increasing and bounded below by ``alpha_floor``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from .mmm import EMConfig, LOG2PI, VARIANCE_FLOOR, component_logpdf, fit_mmm, sample_windows
from .signal import tile

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Priors:
    """Dirichlet concentrations, Normal prior on means, Inverse-Gamma prior on
    variances (all in standardized units)."""

    a_alpha: float = 1.0
    a_gamma: float = 1.0
    mu0: float = 0.0
    tau2: float = 100.0
    var_shape: float = 2.0
    var_scale: float = 1.0


def default_alpha_floor(n_c: int) -> float:
    return 1.0 / (2 * n_c)


def _ro(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CmmmModel:
    alpha: np.ndarray
    gamma: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    bg_mean: float
    bg_var: float
    l_c: int
    alpha_floor: Optional[float] = None
    priors: Priors = Priors()
    variance_floor: float = VARIANCE_FLOOR
    variance_cap: float = np.inf
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        alpha, gamma = _ro(self.alpha), _ro(np.atleast_2d(self.gamma))
        means, variances = _ro(np.atleast_2d(self.means)), _ro(np.atleast_2d(self.variances))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        if self.alpha_floor is None:
            object.__setattr__(self, "alpha_floor", default_alpha_floor(len(alpha)))
        n_c = len(alpha)
        if gamma.shape != (n_c, means.shape[0] + 1) or means.shape != variances.shape:
            raise ValueError("inconsistent CmmmModel dimensions")
        if self.l_c % self.l_m:
            raise ValueError("l_c must be a multiple of l_m")
        if abs(alpha.sum() - 1) > 1e-9 or np.any(np.abs(gamma.sum(axis=1) - 1) > 1e-9):
            raise ValueError("alpha and gamma rows must sum to one")
        if np.any(np.diff(alpha) > 1e-12) or alpha.min() < self.alpha_floor - 1e-12:
            raise ValueError("alpha must be non-increasing and above alpha_floor")
        if not theta_ok(variances, self.bg_var, self.variance_floor, self.variance_cap):
            raise ValueError("variances violate floor/cap constraints")

    @property
    def n_c(self) -> int:
        return len(self.alpha)

    @property
    def n_motifs(self) -> int:
        return self.means.shape[0]

    @property
    def l_m(self) -> int:
        return self.means.shape[1]

    @property
    def ratio(self) -> int:
        return self.l_c // self.l_m

    def to_dict(self):
        return {
            "n_c": self.n_c, "M": self.n_motifs, "l_m": self.l_m, "l_c": self.l_c,
            "alpha": self.alpha.tolist(), "gamma": self.gamma.tolist(),
            "means": self.means.tolist(), "variances": self.variances.tolist(),
            "bg_mean": float(self.bg_mean), "bg_var": float(self.bg_var),
            "alpha_floor": self.alpha_floor, "priors": vars(self.priors),
            "variance_floor": self.variance_floor,
            "variance_cap": None if np.isinf(self.variance_cap) else self.variance_cap,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        cap = d.get("variance_cap")
        return cls(d["alpha"], d["gamma"], d["means"], d["variances"], d["bg_mean"],
                   d["bg_var"], d["l_c"], d.get("alpha_floor"), Priors(**d.get("priors", {})),
                   d.get("variance_floor", VARIANCE_FLOOR), np.inf if cap is None else cap,
                   d.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ContextualLabeling:
    contexts: np.ndarray
    motifs: np.ndarray
    l_m: int
    l_c: int

    def __post_init__(self):
        c = np.asarray(self.contexts, dtype=np.int64)
        z = np.asarray(self.motifs, dtype=np.int64)
        if len(z) != len(c) * (self.l_c // self.l_m):
            raise ValueError("motif labels must tile the context windows")
        object.__setattr__(self, "contexts", c)
        object.__setattr__(self, "motifs", z)

    def motif_contexts(self) -> np.ndarray:
        """Context of each motif window."""
        return np.repeat(self.contexts, self.l_c // self.l_m)


def theta_ok(variances, bg_var, floor, cap):
    """Motif variances in [floor, cap]; the background variance at least cap
    (or at least every motif variance when there is no cap)."""
    variances = np.asarray(variances)
    bg_lo = cap if np.isfinite(cap) else variances.max(initial=floor)
    return bool(np.all(variances >= floor * (1 - 1e-12)) and np.all(variances <= cap)
                and bg_var >= max(floor, bg_lo) * (1 - 1e-12))


def alpha_ok(alpha, floor):
    return bool(np.all(np.diff(alpha) <= 0) and alpha.min() >= floor)


class CmmmData:
    """Tiled motif windows grouped into context windows, plus their sums."""

    def __init__(self, segments: Sequence, l_m: int, l_c: int):
        if l_c % l_m:
            raise ValueError("l_c must be a multiple of l_m")
        self.l_m, self.l_c, self.ratio = l_m, l_c, l_c // l_m
        blocks, per_segment = [], []
        for s in segments:
            ctx = tile(s.values if hasattr(s, "values") else s, l_c)
            per_segment.append(len(ctx))
            blocks.append(ctx.reshape(-1, l_m))
        self.per_segment = np.array(per_segment, dtype=np.int64)
        self.X = np.concatenate(blocks) if blocks else np.empty((0, l_m))
        if not np.all(np.isfinite(self.X)):
            raise ValueError("non-finite values in input")
        self.X2 = self.X ** 2
        self.row_sum = self.X.sum(axis=1)
        self.row_sq = self.X2.sum(axis=1)

    @property
    def n_ctx(self) -> int:
        return int(self.per_segment.sum())

    @property
    def n_windows(self) -> int:
        return len(self.X)

    def split(self, values):
        """Split a per-context-window array into per-segment pieces."""
        return np.split(values, np.cumsum(self.per_segment)[:-1])


class DualAveraging:
    """Step-size adaptation toward a target acceptance probability."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.log_eps = np.log(eps0)
        self.mu = np.log(10 * eps0)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_prob):
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_eps = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1 - eta) * self.log_eps_bar

    @property
    def final(self):
        return float(np.exp(self.log_eps_bar)) if self.m else float(np.exp(self.log_eps))


@dataclass
class SamplerState:
    c: np.ndarray
    z: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    bg_mean: float
    bg_var: float
    l_c: int
    alpha_floor: float
    priors: Priors = Priors()
    variance_floor: float = VARIANCE_FLOOR
    variance_cap: float = np.inf
    theta_kernel: str = "mala"
    adapting: bool = True
    iteration: int = 0
    rng: Optional[np.random.Generator] = None
    accepts: dict = field(default_factory=dict)
    proposals: dict = field(default_factory=dict)
    simplex_scale: dict = field(default_factory=dict)
    mala: Optional[DualAveraging] = None
    mala_eps: float = 0.1

    @property
    def n_c(self):
        return len(self.alpha)

    @property
    def n_comp(self):
        return self.gamma.shape[1]

    def acceptance_rates(self):
        return {k: self.accepts[k] / self.proposals[k] for k in self.proposals
                if self.proposals[k]}

    def model(self, meta=None) -> CmmmModel:
        return CmmmModel(self.alpha.copy(), self.gamma.copy(), self.means.copy(),
                         self.variances.copy(), self.bg_mean, self.bg_var, self.l_c,
                         self.alpha_floor, self.priors, self.variance_floor,
                         self.variance_cap, meta or {})

    @classmethod
    def from_model(cls, model: CmmmModel, c, z, rng=None, theta_kernel="mala"):
        return cls(np.asarray(c, np.int64).copy(), np.asarray(z, np.int64).copy(),
                   model.alpha.copy(), model.gamma.copy(), model.means.copy(),
                   model.variances.copy(), float(model.bg_mean), float(model.bg_var),
                   model.l_c, model.alpha_floor, model.priors, model.variance_floor,
                   model.variance_cap, theta_kernel, rng=np.random.default_rng(rng))

    def _count(self, name, accepted, proposed):
        self.accepts[name] = self.accepts.get(name, 0) + int(accepted)
        self.proposals[name] = self.proposals.get(name, 0) + int(proposed)


# ---------------------------------------------------------------------------
# joint density


def _log_dirichlet(p, a):
    p = np.atleast_2d(p)
    k = p.shape[1]
    with np.errstate(divide="ignore"):
        return float((gammaln(k * a) - k * gammaln(a) + (a - 1) * np.log(p).sum(axis=1)).sum())


def _log_theta_prior(means, variances, bg_mean, bg_var, pr: Priors):
    mu = np.concatenate([np.ravel(means), [bg_mean]])
    var = np.concatenate([np.ravel(variances), [bg_var]])
    lp = -0.5 * (np.log(2 * np.pi * pr.tau2) + (mu - pr.mu0) ** 2 / pr.tau2)
    a, b = pr.var_shape, pr.var_scale
    lp_var = a * np.log(b) - gammaln(a) - (a + 1) * np.log(var) - b / var
    return float(lp.sum() + lp_var.sum())


def _suff_stats(data: CmmmData, z, n_comp):
    """Per-component window counts and positionwise sums given motif labels."""
    l = data.l_m
    n = np.bincount(z, minlength=n_comp).astype(float)
    s1 = np.empty((n_comp, l))
    s2 = np.empty((n_comp, l))
    for p in range(l):
        s1[:, p] = np.bincount(z, weights=data.X[:, p], minlength=n_comp)
        s2[:, p] = np.bincount(z, weights=data.X2[:, p], minlength=n_comp)
    return n, s1, s2


def _data_term(n, s1, s2, means, variances, bg_mean, bg_var):
    l = means.shape[1]
    q = s2[1:] - 2 * means * s1[1:] + n[1:, None] * means ** 2
    motif = -0.5 * (n[1:, None] * (LOG2PI + np.log(variances)) + q / variances)
    t1, t2 = s1[0].sum(), s2[0].sum()
    q0 = t2 - 2 * bg_mean * t1 + n[0] * l * bg_mean ** 2
    bg = -0.5 * (n[0] * l * (LOG2PI + np.log(bg_var)) + q0 / bg_var)
    return float(motif.sum() + bg)


def _check_dims(state, data: CmmmData):
    if state.l_c != data.l_c or state.means.shape[1] != data.l_m:
        raise ValueError("state window lengths do not match the data")
    if len(state.c) != data.n_ctx or len(state.z) != data.n_windows:
        raise ValueError("state label counts do not match the data")


def cmmm_joint_log_prob(state: SamplerState, data: CmmmData) -> float:
    """log p(alpha) + log p(gamma) + log p(theta) + log p(c|alpha)
    + log p(z|gamma, c) + log p(x|theta, z), or -inf when a constraint fails."""
    _check_dims(state, data)
    if not alpha_ok(state.alpha, state.alpha_floor):
        return -np.inf
    if not theta_ok(state.variances, state.bg_var, state.variance_floor, state.variance_cap):
        return -np.inf
    pr = state.priors
    lp = _log_dirichlet(state.alpha, pr.a_alpha) + _log_dirichlet(state.gamma, pr.a_gamma)
    lp += _log_theta_prior(state.means, state.variances, state.bg_mean, state.bg_var, pr)
    if data.n_windows:
        lp += float(np.log(state.alpha)[state.c].sum())
        ctx_of = np.repeat(state.c, data.ratio)
        lp += float(np.log(state.gamma)[ctx_of, state.z].sum())
        n, s1, s2 = _suff_stats(data, state.z, state.n_comp)
        lp += _data_term(n, s1, s2, state.means, state.variances, state.bg_mean, state.bg_var)
    return lp


# ---------------------------------------------------------------------------
# categorical kernel


def uniform_proposal(current, k, rng):
    """Uniform draw among the ``k - 1`` categories other than ``current``."""
    return (current + 1 + rng.integers(0, k - 1, size=np.shape(current))) % k


def metropolized_step(logp, current, rng):
    """One Metropolized Gibbs update per row of ``logp`` (rows independent).

    Returns ``(new_labels, n_accepted)``.
    """
    n, k = logp.shape
    if k < 2 or n == 0:
        return current, 0
    prop = uniform_proposal(current, k, rng)
    rows = np.arange(n)
    log_ratio = logp[rows, prop] - logp[rows, current]
    accept = np.log(rng.random(n)) < log_ratio
    return np.where(accept, prop, current), int(accept.sum())


def metropolized_transition_matrix(logp_row):
    """Exact transition matrix of :func:`metropolized_step` for one variable."""
    logp_row = np.asarray(logp_row, dtype=float)
    k = len(logp_row)
    T = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                T[i, j] = min(1.0, np.exp(logp_row[j] - logp_row[i])) / (k - 1)
        T[i, i] = 1.0 - T[i].sum()
    return T


def _update_z(state, data, loglik):
    ctx_of = np.repeat(state.c, data.ratio)
    logp = np.log(state.gamma)[ctx_of] + loglik
    state.z, acc = metropolized_step(logp, state.z, state.rng)
    state._count("z", acc, len(state.z))


def _pair_counts(rows, cols, n_rows, n_cols):
    flat = np.bincount(rows * n_cols + cols, minlength=n_rows * n_cols)
    return flat.reshape(n_rows, n_cols).astype(float)


def _context_counts(state, data):
    return _pair_counts(np.repeat(np.arange(data.n_ctx), data.ratio), state.z, data.n_ctx,
                        state.n_comp)


def _update_c(state, data):
    if state.n_c < 2 or data.n_ctx == 0:
        return
    logp = np.log(state.alpha)[None, :] + _context_counts(state, data) @ np.log(state.gamma).T
    state.c, acc = metropolized_step(logp, state.c, state.rng)
    state._count("c", acc, len(state.c))


# ---------------------------------------------------------------------------
# simplex kernels


def _alr(p):
    return np.log(p[:-1]) - np.log(p[-1])


def _inv_alr(eta):
    return np.exp(np.concatenate([eta, [0.0]]) - logsumexp(np.concatenate([eta, [0.0]])))


def _simplex_target(p, counts, a, floor=None):
    """Log density on logratio coordinates: Dirichlet(a) x multinomial counts x
    Jacobian, with optional ordering/floor potentials."""
    if floor is not None and not alpha_ok(p, floor):
        return -np.inf
    return float(((a - 1 + counts + 1) * np.log(p)).sum())


def _simplex_step(state, name, p, counts, a, floor=None):
    k = len(p)
    if k < 2:
        return p
    rng = state.rng
    scale = state.simplex_scale.setdefault(name, 1.0)
    sd = scale * np.sqrt(1.0 / (counts[:-1] + a) + 1.0 / (counts[-1] + a))
    eta = _alr(p)
    new = _inv_alr(eta + sd * rng.standard_normal(k - 1))
    log_ratio = _simplex_target(new, counts, a, floor) - _simplex_target(p, counts, a, floor)
    accept = np.log(rng.random()) < log_ratio
    state._count(name.split(":")[0], accept, 1)
    if state.adapting:
        rate = min(1.0, np.exp(min(log_ratio, 0.0))) if np.isfinite(log_ratio) else 0.0
        step = (state.iteration + 1) ** -0.6
        state.simplex_scale[name] = float(np.exp(np.log(scale) + step * (rate - 0.3)))
    return new if accept else p


def _update_alpha(state, data):
    counts = np.bincount(state.c, minlength=state.n_c).astype(float)
    state.alpha = _simplex_step(state, "alpha", state.alpha, counts, state.priors.a_alpha,
                                state.alpha_floor)


def _update_gamma(state, data):
    counts = _pair_counts(np.repeat(state.c, data.ratio), state.z, state.n_c, state.n_comp)
    gamma = state.gamma.copy()
    for c in range(state.n_c):
        gamma[c] = _simplex_step(state, f"gamma:{c}", gamma[c], counts[c], state.priors.a_gamma)
    state.gamma = gamma


# ---------------------------------------------------------------------------
# theta kernels


def _theta_vec(state):
    return np.concatenate([state.means.ravel(), np.log(state.variances).ravel(),
                           [state.bg_mean, np.log(state.bg_var)]])


def _theta_unpack(vec, shape):
    k = int(np.prod(shape))
    means = vec[:k].reshape(shape)
    variances = np.exp(vec[k:2 * k]).reshape(shape)
    return means, variances, float(vec[2 * k]), float(np.exp(vec[2 * k + 1]))


def _theta_logp_grad(vec, shape, stats_, state):
    """Log conditional of theta on (mean, log-variance) coordinates and its
    gradient; the log-variance Jacobian is included."""
    n, s1, s2 = stats_
    pr = state.priors
    a, b = pr.var_shape, pr.var_scale
    means, variances, bg_mean, bg_var = _theta_unpack(vec, shape)
    if not theta_ok(variances, bg_var, state.variance_floor, state.variance_cap):
        return -np.inf, None
    l = shape[1]
    nm = n[1:, None]
    q = s2[1:] - 2 * means * s1[1:] + nm * means ** 2
    inv = 1.0 / variances
    lp = (-0.5 * (nm * np.log(variances) + q * inv)).sum()
    lp += (-0.5 * (means - pr.mu0) ** 2 / pr.tau2 - a * np.log(variances) - b * inv).sum()
    g_mu = (s1[1:] - nm * means) * inv - (means - pr.mu0) / pr.tau2
    g_lv = -0.5 * nm + 0.5 * q * inv - a + b * inv
    t1, t2, n0 = s1[0].sum(), s2[0].sum(), n[0] * l
    q0 = t2 - 2 * bg_mean * t1 + n0 * bg_mean ** 2
    lp += -0.5 * (n0 * np.log(bg_var) + q0 / bg_var)
    lp += -0.5 * (bg_mean - pr.mu0) ** 2 / pr.tau2 - a * np.log(bg_var) - b / bg_var
    g_bm = (t1 - n0 * bg_mean) / bg_var - (bg_mean - pr.mu0) / pr.tau2
    g_bv = -0.5 * n0 + 0.5 * q0 / bg_var - a + b / bg_var
    grad = np.concatenate([g_mu.ravel(), g_lv.ravel(), [g_bm, g_bv]])
    return float(lp), grad


def _theta_precond(stats_, state, shape):
    """Diagonal inverse-curvature scales; depend only on z and x."""
    n, s1, s2 = stats_
    l = shape[1]
    nm = n[1:, None]
    safe = np.maximum(nm, 1.0)
    emp = np.clip(s2[1:] / safe - (s1[1:] / safe) ** 2, state.variance_floor,
                  min(state.variance_cap, 1e6))
    emp = np.where(nm > 1, emp, min(state.variance_cap, state.priors.var_scale))
    pr = state.priors
    prec_mu = nm / emp + 1.0 / pr.tau2
    prec_lv = np.broadcast_to(0.5 * nm + pr.var_shape, shape)
    n0 = n[0] * l
    emp0 = max(state.variance_floor, (s2[0].sum() / max(n0, 1)) - (s1[0].sum() / max(n0, 1)) ** 2)
    if n0 < 2:
        emp0 = pr.var_scale
    prec = np.concatenate([prec_mu.ravel(), prec_lv.ravel(),
                           [n0 / emp0 + 1.0 / pr.tau2, 0.5 * n0 + pr.var_shape]])
    return 1.0 / prec


def _mala_update(state, data):
    shape = state.means.shape
    stats_ = _suff_stats(data, state.z, state.n_comp)
    D = _theta_precond(stats_, state, shape)
    sqrtD = np.sqrt(D)
    if state.mala is None:
        state.mala = DualAveraging(state.mala_eps, target=0.574)
    eps = float(np.exp(state.mala.log_eps)) if state.adapting else state.mala_eps
    x = _theta_vec(state)
    lp_x, g_x = _theta_logp_grad(x, shape, stats_, state)
    rng = state.rng
    mean_fwd = x + 0.5 * eps ** 2 * D * g_x
    y = mean_fwd + eps * sqrtD * rng.standard_normal(len(x))
    lp_y, g_y = _theta_logp_grad(y, shape, stats_, state)
    if np.isfinite(lp_y):
        mean_bwd = y + 0.5 * eps ** 2 * D * g_y
        log_q_fwd = -0.5 * (((y - mean_fwd) / (eps * sqrtD)) ** 2).sum()
        log_q_bwd = -0.5 * (((x - mean_bwd) / (eps * sqrtD)) ** 2).sum()
        log_ratio = lp_y - lp_x + log_q_bwd - log_q_fwd
    else:
        log_ratio = -np.inf
    accept = np.log(rng.random()) < log_ratio
    state._count("theta", accept, 1)
    if state.adapting:
        prob = float(np.exp(min(0.0, log_ratio))) if np.isfinite(log_ratio) else 0.0
        state.mala.update(prob)
        state.mala_eps = state.mala.final
    if accept:
        state.means, state.variances, state.bg_mean, state.bg_var = _theta_unpack(y, shape)


def _trunc_invgamma(shape, scale, lo, hi, rng):
    """Inverse-Gamma(shape, scale) draws truncated to [lo, hi], elementwise."""
    shape, scale = np.broadcast_arrays(np.asarray(shape, float), np.asarray(scale, float))
    dist = stats.gamma(shape, scale=1.0 / scale)  # precision = 1 / variance
    with np.errstate(divide="ignore"):
        p_lo = dist.cdf(1.0 / hi)
        p_hi = dist.cdf(1.0 / lo)
    u = p_lo + (p_hi - p_lo) * rng.random(shape.shape)
    prec = dist.ppf(u)
    bad = ~np.isfinite(prec) | (prec <= 0) | (p_hi - p_lo <= 0)
    if np.any(bad):
        # all mass numerically on one side: use the bound nearer the bulk
        bulk = shape / scale
        near = np.where(np.abs(bulk - 1.0 / hi) < np.abs(bulk - 1.0 / lo), 1.0 / hi, 1.0 / lo)
        prec = np.where(bad, near, prec)
    return np.clip(1.0 / prec, lo, hi)


def _gibbs_theta(state, data):
    n, s1, s2 = _suff_stats(data, state.z, state.n_comp)
    pr = state.priors
    rng = state.rng
    l = state.means.shape[1]
    nm = n[1:, None]
    prec = nm / state.variances + 1.0 / pr.tau2
    mean = (s1[1:] / state.variances + pr.mu0 / pr.tau2) / prec
    means = mean + rng.standard_normal(mean.shape) / np.sqrt(prec)
    q = np.maximum(s2[1:] - 2 * means * s1[1:] + nm * means ** 2, 0.0)
    finite_cap = np.isfinite(state.variance_cap)
    hi = state.variance_cap if finite_cap else state.bg_var
    variances = _trunc_invgamma(pr.var_shape + nm / 2, pr.var_scale + q / 2,
                                state.variance_floor, hi, rng)
    n0 = n[0] * l
    t1, t2 = s1[0].sum(), s2[0].sum()
    prec0 = n0 / state.bg_var + 1.0 / pr.tau2
    bg_mean = (t1 / state.bg_var + pr.mu0 / pr.tau2) / prec0 + rng.standard_normal() / np.sqrt(prec0)
    q0 = max(t2 - 2 * bg_mean * t1 + n0 * bg_mean ** 2, 0.0)
    lo = max(state.variance_floor, state.variance_cap if finite_cap else variances.max())
    bg_var = float(_trunc_invgamma(pr.var_shape + n0 / 2, pr.var_scale + q0 / 2, lo, np.inf,
                                   rng))
    state.means, state.variances = means, variances
    state.bg_mean, state.bg_var = float(bg_mean), bg_var
    state._count("theta", 1, 1)


def _loglik(state, data):
    return component_logpdf(data.X, state.means, state.variances, state.bg_mean, state.bg_var)


UPDATE_BLOCKS = ("z", "c", "gamma", "alpha", "theta")


def mcmc_sweep(state: SamplerState, data: CmmmData, rng=None, update=UPDATE_BLOCKS):
    """One pass over every variable block; ``update`` restricts the blocks
    (used to hold parameters fixed in tests)."""
    if rng is not None:
        state.rng = rng
    if state.rng is None:
        state.rng = np.random.default_rng()
    if "z" in update and data.n_windows:
        _update_z(state, data, _loglik(state, data))
    if "c" in update:
        _update_c(state, data)
    if "gamma" in update:
        _update_gamma(state, data)
    if "alpha" in update:
        _update_alpha(state, data)
    if "theta" in update:
        if state.theta_kernel == "gibbs":
            _gibbs_theta(state, data)
        else:
            _mala_update(state, data)
    state.iteration += 1
    return state


# ---------------------------------------------------------------------------
# fitting


@dataclass
class CmmmFit:
    model: CmmmModel
    labelings: list
    trace: np.ndarray
    acceptance: dict
    samples: dict


def _project_alpha(alpha, floor):
    alpha = np.sort(np.asarray(alpha, float))[::-1]
    for _ in range(len(alpha) + 1):
        low = alpha < floor
        if not low.any():
            break
        free = ~low
        alpha = np.where(low, floor, alpha)
        excess = alpha.sum() - 1.0
        alpha[free] -= excess * alpha[free] / alpha[free].sum()
    return np.sort(alpha / alpha.sum())[::-1]


def initial_state(data: CmmmData, M: int, n_c: int, seed: int, *, priors=Priors(),
                  alpha_floor=None, theta_kernel="mala", em_cfg=None, mmm_model=None):
    """Start from an MMM fit; contexts from clustering motif-frequency
    vectors of the context windows."""
    from .context import motif_topic_context

    rng = np.random.default_rng(seed)
    em_cfg = em_cfg or EMConfig(n_init=3, split_merge=10)
    windows = data.X
    if mmm_model is None:
        mmm_model = fit_mmm([windows.ravel()], M, data.l_m, em_cfg, seed=int(rng.integers(2**31)))
    z = np.argmax(component_logpdf(windows, mmm_model.means, mmm_model.variances,
                                   mmm_model.bg_mean, mmm_model.bg_var)
                  + np.log(np.maximum(mmm_model.gamma, 1e-300)), axis=1)
    alpha_floor = default_alpha_floor(n_c) if alpha_floor is None else alpha_floor
    n_comp = M + 1
    if n_c > 1:
        _, ctx = motif_topic_context([z], data.l_c, data.l_m, n_c, seed=int(rng.integers(2**31)),
                                     n_motifs=M)
        c = ctx[0].labels.astype(np.int64)
    else:
        c = np.zeros(data.n_ctx, dtype=np.int64)
    freq = np.bincount(c, minlength=n_c).astype(float)
    order = np.argsort(-freq, kind="stable")
    remap = np.empty(n_c, dtype=np.int64)
    remap[order] = np.arange(n_c)
    c = remap[c]
    alpha = _project_alpha((freq[order] + 1) / (freq.sum() + n_c), alpha_floor)
    counts = _pair_counts(np.repeat(c, data.ratio), z, n_c, n_comp)
    gamma = (counts + 1.0) / (counts + 1.0).sum(axis=1, keepdims=True)
    cap = mmm_model.meta.get("global_var") or float(windows.var())
    cap = max(cap, mmm_model.variances.max())
    state = SamplerState(c, z.astype(np.int64), alpha, gamma, mmm_model.means.copy(),
                         mmm_model.variances.copy(), float(mmm_model.bg_mean),
                         float(max(mmm_model.bg_var, cap)), data.l_c, alpha_floor, priors,
                         mmm_model.variance_floor, cap, theta_kernel,
                         rng=np.random.default_rng(rng.integers(2**63)))
    return state


def _mode(counts):
    return np.argmax(counts, axis=1)


def run_chain(state: SamplerState, data: CmmmData, n_samples: int, burn_in: int,
              progress=None):
    """Advance a chain ``n_samples`` sweeps and collect post-burn-in summaries."""
    if burn_in >= n_samples:
        raise ValueError("burn_in must be smaller than n_samples")
    trace = np.empty(n_samples)
    keep = n_samples - burn_in
    alpha_s = np.empty((keep, state.n_c))
    gamma_s = np.empty((keep,) + state.gamma.shape)
    means_s = np.empty((keep,) + state.means.shape)
    vars_s = np.empty((keep,) + state.variances.shape)
    bg_s = np.empty((keep, 2))
    c_counts = np.zeros((data.n_ctx, state.n_c))
    z_counts = np.zeros((data.n_windows, state.n_comp))
    rows_c, rows_z = np.arange(data.n_ctx), np.arange(data.n_windows)
    post_acc, post_prop = {}, {}
    for it in range(n_samples):
        state.adapting = it < burn_in
        if it == burn_in:
            post_acc, post_prop = dict(state.accepts), dict(state.proposals)
        mcmc_sweep(state, data)
        trace[it] = cmmm_joint_log_prob(state, data)
        if it >= burn_in:
            k = it - burn_in
            alpha_s[k], gamma_s[k] = state.alpha, state.gamma
            means_s[k], vars_s[k] = state.means, state.variances
            bg_s[k] = state.bg_mean, state.bg_var
            c_counts[rows_c, state.c] += 1
            z_counts[rows_z, state.z] += 1
        if progress is not None:
            progress(it, trace[it])
    after = {k: (state.accepts[k] - post_acc.get(k, 0)) / max(1, state.proposals[k] - post_prop.get(k, 0))
             for k in state.proposals}
    samples = dict(alpha=alpha_s, gamma=gamma_s, means=means_s, variances=vars_s, bg=bg_s)
    return trace, samples, _mode(c_counts), _mode(z_counts), after


def fit_cmmm(segments: Sequence, M: int, l_m: int, l_c: int, n_c: int, n_samples: int = 2000,
             burn_in: int = 1000, seed: int = 0, *, priors: Priors = Priors(),
             alpha_floor: Optional[float] = None, theta_kernel: str = "mala",
             em_cfg: Optional[EMConfig] = None, progress=None) -> CmmmFit:
    """Fit the CMMM by MCMC and return point estimates and training labels.

    Continuous parameters are posterior means over the post-burn-in sweeps;
    labels are per-variable posterior modes.
    """
    data = CmmmData(segments, l_m, l_c)
    if data.n_ctx < n_c:
        raise ValueError(f"need at least {n_c} context windows, got {data.n_ctx}")
    state = initial_state(data, M, n_c, seed, priors=priors, alpha_floor=alpha_floor,
                          theta_kernel=theta_kernel, em_cfg=em_cfg)
    trace, samples, c_mode, z_mode, acc = run_chain(state, data, n_samples, burn_in, progress)
    tuned = ("alpha", "gamma", "theta") if theta_kernel == "mala" else ("alpha", "gamma")
    for name in tuned:
        rate = acc.get(name)
        if rate is not None and not 0.01 < rate < 0.99:
            warnings.warn(f"{name} acceptance rate {rate:.3f} after burn-in; check tuning")
    alpha = _project_alpha(samples["alpha"].mean(axis=0), state.alpha_floor)
    gamma = samples["gamma"].mean(axis=0)
    gamma /= gamma.sum(axis=1, keepdims=True)
    means = samples["means"].mean(axis=0)
    variances = samples["variances"].mean(axis=0)
    bg_mean, bg_var = samples["bg"].mean(axis=0)
    meta = {"seed": seed, "n_samples": n_samples, "burn_in": burn_in,
            "theta_kernel": theta_kernel, "acceptance": acc,
            "final_log_prob": float(trace[-1])}
    model = CmmmModel(alpha, gamma, means, variances, float(bg_mean), float(bg_var), l_c,
                      state.alpha_floor, priors, state.variance_floor, state.variance_cap, meta)
    labelings = [ContextualLabeling(cs, zs, l_m, l_c)
                 for cs, zs in zip(data.split(c_mode),
                                   np.split(z_mode, np.cumsum(data.per_segment * data.ratio)[:-1]))]
    return CmmmFit(model, labelings, trace, acc, samples)


# ---------------------------------------------------------------------------
# held-out labeling, likelihood and sampling


def _window_loglik(model: CmmmModel, values):
    ctx = tile(np.asarray(values, dtype=float), model.l_c)
    X = ctx.reshape(-1, model.l_m)
    ll = component_logpdf(X, model.means, model.variances, model.bg_mean, model.bg_var)
    return len(ctx), ll.reshape(len(ctx), model.ratio, -1)


def assign_contextual(model: CmmmModel, segment) -> ContextualLabeling:
    """Exact maximum-likelihood contexts and motifs for one segment.

    For each context window and candidate context the best motif of every
    motif window is chosen independently; the context with the largest total
    wins (ties to the smaller id), then its motifs are kept.
    """
    values = segment.values if hasattr(segment, "values") else segment
    n_ctx, ll = _window_loglik(model, values)
    with np.errstate(divide="ignore"):
        logg = np.log(model.gamma)
    # (n_ctx, ratio, n_c, M+1)
    scores = ll[:, :, None, :] + logg[None, None, :, :]
    best_z = np.argmax(scores, axis=3)
    totals = np.take_along_axis(scores, best_z[..., None], axis=3)[..., 0].sum(axis=1)
    c = np.argmax(totals, axis=1)
    z = best_z[np.arange(n_ctx)[:, None], np.arange(model.ratio)[None, :], c[:, None]]
    return ContextualLabeling(c, z.reshape(-1), model.l_m, model.l_c)


def cmmm_log_likelihood(model: CmmmModel, segment) -> float:
    """Marginal log-likelihood of a segment with labels summed out."""
    values = segment.values if hasattr(segment, "values") else segment
    n_ctx, ll = _window_loglik(model, values)
    if n_ctx == 0:
        return 0.0
    with np.errstate(divide="ignore"):
        logg, loga = np.log(model.gamma), np.log(model.alpha)
    per_window = logsumexp(ll[:, :, None, :] + logg[None, None], axis=3)  # (n, r, n_c)
    return float(logsumexp(per_window.sum(axis=1) + loga[None, :], axis=1).sum())


def sample_cmmm(model: CmmmModel, n_context_windows: int, rng):
    """Run the generative process; returns ``(values, ContextualLabeling)``."""
    if n_context_windows < 1:
        raise ValueError("n_context_windows must be >= 1")
    rng = np.random.default_rng(rng)
    c = rng.choice(model.n_c, size=n_context_windows, p=model.alpha)
    ctx_of = np.repeat(c, model.ratio)
    cum = np.cumsum(model.gamma, axis=1)
    u = rng.random(len(ctx_of))
    z = np.minimum((u[:, None] >= cum[ctx_of]).sum(axis=1), model.n_motifs)
    X = sample_windows(model.means, model.variances, model.bg_mean, model.bg_var, z, rng)
    return X.reshape(-1), ContextualLabeling(c, z, model.l_m, model.l_c)
