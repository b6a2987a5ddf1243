import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.stats import multivariate_normal

from motif_forge.mmm import (
    EMConfig, MotifModel, assign_motifs, fit_mmm, mmm_log_likelihood, sample_mmm,
)
from motif_forge.signal import DaySegment


def seg(values):
    return DaySegment("p", 0, np.asarray(values, dtype=float).reshape(-1))


def model(gamma, means, variances=None, bg_mean=0.0, bg_var=None):
    means = np.asarray(means, dtype=float)
    variances = np.ones_like(means) if variances is None else np.asarray(variances, float)
    bg_var = float(variances.max()) if bg_var is None else bg_var
    return MotifModel(np.asarray(gamma, float), means, variances, bg_mean, bg_var)


def brute_ll(m, X):
    total = 0.0
    for x in X:
        dens = m.gamma[0] * multivariate_normal.pdf(x, np.full(len(x), m.bg_mean), m.bg_var)
        for z in range(m.n_motifs):
            dens += m.gamma[z + 1] * multivariate_normal.pdf(x, m.means[z], np.diag(m.variances[z]))
        total += np.log(dens)
    return total


# --- model invariants ------------------------------------------------------


def test_model_rejects_bad_gamma_and_variances():
    with pytest.raises(ValueError):
        model([0.5, 0.6], [[0, 0]])
    with pytest.raises(ValueError):
        model([0.5, 0.5], [[0, 0]], [[1e-6, 1.0]], bg_var=1.0)
    with pytest.raises(ValueError):
        model([0.5, 0.5], [[0, 0]], [[2.0, 2.0]], bg_var=1.0)


def test_model_json_round_trip(tmp_path):
    m = model([0.2, 0.3, 0.5], [[0, 1], [2, 3]], [[0.5, 0.6], [0.7, 0.8]], 1.0, 2.0)
    m.save(tmp_path / "m.json")
    back = MotifModel.load(tmp_path / "m.json")
    assert np.array_equal(back.means, m.means) and np.array_equal(back.gamma, m.gamma)
    assert back.bg_var == m.bg_var


# --- log-likelihood --------------------------------------------------------


def test_window_at_mean_unit_variance():
    mu = np.array([[0.3, -1.0, 2.0, 0.5]])
    m = model([0.0, 1.0], mu)
    assert mmm_log_likelihood(m, seg(mu)) == pytest.approx(-2 * np.log(2 * np.pi), abs=1e-12)


def test_likelihood_ignores_window_order():
    rng = np.random.default_rng(0)
    m = model([0.2, 0.5, 0.3], rng.normal(size=(2, 4)), bg_var=3.0)
    X = rng.normal(size=(6, 4))
    a = mmm_log_likelihood(m, seg(X))
    b = mmm_log_likelihood(m, seg(X[::-1]))
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_likelihood_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    gamma = rng.dirichlet(np.ones(3))
    variances = rng.uniform(0.2, 1.0, size=(2, 3))
    m = model(gamma, rng.normal(size=(2, 3)), variances, rng.normal(), 1.5)
    X = rng.normal(size=(2, 3))
    assert mmm_log_likelihood(m, seg(X)) == pytest.approx(brute_ll(m, X), abs=1e-10)


def test_tail_shorter_than_window_is_dropped():
    m = model([0.5, 0.5], [[0.0, 0.0]])
    a = mmm_log_likelihood(m, seg([0.1, 0.2, 0.3, 0.4]))
    b = mmm_log_likelihood(m, seg([0.1, 0.2, 0.3, 0.4, 9.0]))
    assert a == b


# --- assignment ------------------------------------------------------------


def test_window_at_second_mean_labelled_two():
    mu = np.array([[0.0] * 4, [5.0] * 4])
    m = model([0.1, 0.45, 0.45], mu, np.full((2, 4), 0.1), bg_var=10.0)
    assert assign_motifs(m, seg(mu[1])).labels.tolist() == [2]


def test_background_wins_when_its_weight_dominates():
    mu = np.array([[0.0, 0.0]])
    m = model([0.999, 0.001], mu, [[1.0, 1.0]], bg_var=1.2)
    x = np.array([0.5, -0.5])
    lp_bg = np.log(0.999) + multivariate_normal.logpdf(x, [0, 0], 1.2)
    lp_1 = np.log(0.001) + multivariate_normal.logpdf(x, [0, 0], 1.0)
    assert lp_bg > lp_1
    assert assign_motifs(m, seg(x)).labels.tolist() == [0]


def test_far_windows_absorbed_by_background():
    mu = np.array([[0.0] * 4, [1.0] * 4])
    m = model([0.1, 0.45, 0.45], mu, np.full((2, 4), 0.01), bg_var=25.0)
    X = np.random.default_rng(1).normal(10.0, 1.0, size=(20, 4))
    assert assign_motifs(m, seg(X)).labels.tolist() == [0] * 20


def test_ties_go_to_smaller_id():
    mu = np.array([[1.0, 1.0], [1.0, 1.0]])
    m = model([0.0, 0.5, 0.5], mu)
    assert assign_motifs(m, seg([1.0, 1.0])).labels.tolist() == [1]


def test_labeling_length():
    m = model([0.5, 0.5], [[0.0] * 8])
    assert len(assign_motifs(m, seg(np.zeros(288))).labels) == 36


# --- sampling --------------------------------------------------------------


def test_one_hot_gamma_gives_constant_labels():
    m = model([0.0, 1.0, 0.0], [[0.0] * 4, [3.0] * 4])
    _, lab = sample_mmm(m, 50, 0)
    assert lab.labels.tolist() == [1] * 50


def test_label_frequencies_concentrate():
    gamma = np.array([0.2, 0.5, 0.3])
    mu = np.array([[0.0] * 4, [20.0] * 4])
    m = model(gamma, mu, np.full((2, 4), 1e-4), bg_mean=-20.0, bg_var=1e-4)
    n = 5000
    values, lab = sample_mmm(m, n, 7)
    freq = np.bincount(lab.labels, minlength=3) / n
    assert np.all(np.abs(freq - gamma) < 3 / np.sqrt(n))
    assert np.mean(assign_motifs(m, seg(values)).labels == lab.labels) == 1.0


def test_sampling_is_seeded():
    m = model([0.3, 0.7], [[0.0, 1.0]], bg_var=2.0)
    a = sample_mmm(m, 20, 3)
    b = sample_mmm(m, 20, 3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].labels, b[1].labels)


def test_recovery_at_separated_configuration():
    rng = np.random.default_rng(2)
    mu = rng.normal(0, 3, size=(4, 8))
    m = model([0.1, 0.3, 0.2, 0.2, 0.2], mu, np.full((4, 8), 0.01), bg_var=9.0)
    values, lab = sample_mmm(m, 2000, 4)
    acc = np.mean(assign_motifs(m, seg(values)).labels == lab.labels)
    assert acc >= 0.99


# --- fitting ---------------------------------------------------------------


def test_single_gaussian_mean_recovered():
    rng = np.random.default_rng(0)
    X = rng.normal(2.0, 1.0, size=(400, 4))
    m = fit_mmm([seg(X)], 1, 4, seed=0)
    # whichever component dominates, the mixture mean matches the sample mean
    comp_means = np.vstack([np.full(4, m.bg_mean), m.means])
    mix_mean = m.gamma @ comp_means
    se = X.std(axis=0, ddof=1) / np.sqrt(len(X))
    assert np.all(np.abs(mix_mean - X.mean(axis=0)) < 3 * se)


def test_full_sized_model_shape():
    X = np.random.default_rng(0).normal(size=(40, 288))
    m = fit_mmm([seg(r) for r in X], 20, 8, EMConfig(max_iters=20), seed=0)
    assert m.means.shape == (20, 8) and len(m.gamma) == 21


def test_two_planted_shapes_recovered():
    rng = np.random.default_rng(3)
    shapes = np.array([[0, 2, 4, 2, 0, -2, -4, -2], [-4, -4, 0, 4, 4, 4, 0, -4]], float)
    labels = rng.integers(0, 2, size=600)
    X = shapes[labels] + rng.normal(0, 0.3, size=(600, 8))
    m = fit_mmm([seg(X)], 2, 8, EMConfig(n_init=3), seed=1)
    cost = ((m.means[:, None, :] - shapes[None]) ** 2).sum(axis=2)
    r, c = linear_sum_assignment(cost)
    assert np.max(np.abs(m.means[r] - shapes[c])) < 0.15
    assert np.allclose(np.sort(m.gamma[1:]), np.sort(np.bincount(labels) / 600), atol=0.02)


def test_em_trace_is_monotone_and_model_valid():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(30, 288))
    m = fit_mmm([seg(r) for r in X], 5, 8, seed=2)
    trace = np.array(m.meta["trace"])
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))
    assert m.bg_var >= m.variances.max()
    assert abs(m.gamma.sum() - 1) < 1e-9


def test_fit_is_deterministic():
    X = np.random.default_rng(6).normal(size=(10, 96))
    a = fit_mmm([seg(r) for r in X], 3, 8, seed=4)
    b = fit_mmm([seg(r) for r in X], 3, 8, seed=4)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.gamma, b.gamma)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_mmm([seg(np.zeros(16))], 2, 8)
    with pytest.raises(ValueError):
        fit_mmm([seg([np.nan] * 80)], 2, 8)
    with pytest.raises(ValueError):
        fit_mmm([seg(np.zeros(80))], 0, 8)


# --- split and merge -------------------------------------------------------


def three_clusters(rng, n=300):
    centers = np.array([[4.0, 4.0, 0.0, 0.0], [0.0, 0.0, 4.0, 4.0], [-4.0, 4.0, -4.0, 4.0]])
    X = np.concatenate([c + rng.normal(0, 0.3, (n, 4)) for c in centers])
    return centers, X


def test_split_merge_escapes_a_merged_start():
    from motif_forge.mmm import _em, _split_merge

    rng = np.random.default_rng(0)
    centers, X = three_clusters(rng)
    cfg = EMConfig(split_merge=5)
    # cluster 0 covered twice, clusters 1 and 2 shared by one broad component
    means = np.array([centers[0] + 0.05, centers[0] - 0.05, (centers[1] + centers[2]) / 2])
    variances = np.array([[0.1] * 4, [0.1] * 4, [X.var()] * 4])
    init = (np.array([0.01, 0.33, 0.33, 0.33]), means, variances, 0.0, float(X.var()))
    stuck = _em(X, 3, rng, cfg, init=init)
    err = lambda m: np.abs(np.sort(m, axis=0) - np.sort(centers, axis=0)).max()
    assert err(stuck[1]) > 1.0
    best, optima = _split_merge(X, stuck, rng, cfg)
    assert err(best[1]) < 0.1
    assert len(optima) >= 2 and np.all(np.diff(optima) > 0)
    assert np.all(np.diff(best[5]) >= -1e-9 * np.abs(best[5][:-1]))


def test_split_merge_never_lowers_the_optimum():
    rng = np.random.default_rng(1)
    _, X = three_clusters(rng, 100)
    segs = [seg(X.ravel())]
    plain = fit_mmm(segs, 4, 4, EMConfig(), seed=3)
    refined = fit_mmm(segs, 4, 4, EMConfig(split_merge=5), seed=3)
    assert refined.meta["log_likelihood"] >= plain.meta["log_likelihood"]
    assert refined.meta["split_merge"][0] == plain.meta["log_likelihood"]
