import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffuae import numerics as nx
from diffuae.data import (
    AnalyticDenoiser,
    NearestCenter,
    QuadraticClassifier,
    UniformClassifier,
    load_dataset_csv,
    make_ring_mixture,
    ring_centers,
    save_dataset_csv,
)
from diffuae.diffusion import ConfigError, NULL_LABEL, make_schedule

SCHED = make_schedule("linear", 200, 1e-4 * 5, 0.02 * 5)


def gaussian_mixture_logpdf(x, means, var, weights):
    # independent reference: log sum_k w_k N(x; m_k, var I)
    D = x.shape[-1]
    d2 = ((x[None, :] - means) ** 2).sum(axis=1)
    terms = np.log(weights) - 0.5 * d2 / var - 0.5 * D * np.log(2 * np.pi * var)
    m = terms.max()
    return m + np.log(np.exp(terms - m).sum())


def fd_score(f, x, h=1e-6):
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def test_ring_geometry_and_layout():
    ds = make_ring_mixture(K=6, n=50, radius=3.0, gamma=0.1, seed=2)
    np.testing.assert_allclose(np.linalg.norm(ds.centers, axis=1), 3.0)
    assert len(ds) == 300 and ds.dim == 2 and ds.num_classes == 6
    np.testing.assert_array_equal(ds.class_counts(), [50] * 6)
    np.testing.assert_array_equal(ds.y[:50], 0)
    spread = ds.x[ds.y == 1] - ds.centers[1]
    assert abs(spread.std() - 0.1) < 0.02


def test_dataset_is_seeded():
    a = make_ring_mixture(seed=5)
    b = make_ring_mixture(seed=5)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.x.tobytes() != make_ring_mixture(seed=6).x.tobytes()
    with pytest.raises(ConfigError):
        make_ring_mixture(K=1)


def test_csv_round_trip(tmp_path):
    ds = make_ring_mixture(K=3, n=20, seed=1)
    save_dataset_csv(ds, tmp_path / "d.csv")
    back = load_dataset_csv(tmp_path / "d.csv")
    assert back.x.tobytes() == ds.x.tobytes()
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.centers, ds.centers)
    assert back.gamma == ds.gamma
    (tmp_path / "d.csv.meta.json").unlink()
    est = load_dataset_csv(tmp_path / "d.csv")
    np.testing.assert_allclose(est.centers, ds.centers, atol=0.15)


@given(t=st.integers(1, 200), y=st.integers(0, 4), seed=st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_conditional_epsilon_is_scaled_score(t, y, seed):
    centers = ring_centers(5, 2.0)
    den = AnalyticDenoiser(centers, 0.3, SCHED)
    ab = SCHED.alpha_bar[t]
    var = ab * 0.09 + 1 - ab
    x = np.random.default_rng(seed).standard_normal(2) * 2
    f = lambda v: gaussian_mixture_logpdf(v, np.sqrt(ab) * centers[[y]], var, np.ones(1))
    expect = -np.sqrt(1 - ab) * fd_score(f, x)
    np.testing.assert_allclose(den.epsilon(x[None], t, [y])[0], expect, atol=1e-6)


@given(t=st.integers(1, 200), seed=st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_unconditional_epsilon_is_mixture_score(t, seed):
    centers = ring_centers(5, 2.0)
    w = np.array([0.1, 0.2, 0.3, 0.15, 0.25])
    den = AnalyticDenoiser(centers, 0.3, SCHED, weights=w)
    ab = SCHED.alpha_bar[t]
    var = ab * 0.09 + 1 - ab
    x = np.random.default_rng(seed).standard_normal(2) * 2
    f = lambda v: gaussian_mixture_logpdf(v, np.sqrt(ab) * centers, var, w)
    expect = -np.sqrt(1 - ab) * fd_score(f, x)
    np.testing.assert_allclose(den.epsilon(x[None], t, [NULL_LABEL])[0], expect, atol=1e-6)


def test_denoiser_rejects_bad_labels_and_gamma():
    den = AnalyticDenoiser(ring_centers(3, 1.0), 0.2, SCHED)
    with pytest.raises(ValueError):
        den.epsilon(np.zeros((1, 2)), 5, [3])
    with pytest.raises(ValueError):
        den.epsilon(np.zeros((1, 2)), 5, [-2])
    with pytest.raises(ConfigError):
        AnalyticDenoiser(ring_centers(3, 1.0), 0.0, SCHED)


@given(seed=st.integers(0, 10_000), tau=st.floats(0.1, 2.0))
@settings(max_examples=50, deadline=None)
def test_quadratic_grad_three_routes_agree(seed, tau):
    rng = np.random.default_rng(seed)
    clf = QuadraticClassifier(rng.standard_normal((4, 3)), tau)
    x = rng.standard_normal((5, 3))
    y = rng.integers(0, 4, size=5)
    closed = clf.log_prob_grad(x, y)
    auto = nx.grad(lambda t: nx.total(nx.pick(nx.log_softmax(clf.logits_tensor(t)), y)), x)
    np.testing.assert_allclose(auto, closed, atol=1e-9)
    for i in range(5):
        fd = fd_score(lambda v: clf.log_prob(v[None])[0, y[i]], x[i].copy())
        np.testing.assert_allclose(closed[i], fd, atol=1e-5)


def test_quadratic_log_prob_normalised_and_argmax_is_nearest():
    clf = QuadraticClassifier(ring_centers(8, 2.0))
    x = np.random.default_rng(0).standard_normal((100, 2)) * 3
    np.testing.assert_allclose(np.exp(clf.log_prob(x)).sum(axis=1), 1.0)
    np.testing.assert_array_equal(clf.predict(x), NearestCenter(clf.centers).predict(x))
    with pytest.raises(ValueError):
        QuadraticClassifier(clf.centers, tau=0.0)


def test_uniform_classifier():
    u = UniformClassifier(4)
    x = np.ones((3, 2))
    np.testing.assert_allclose(np.exp(u.log_prob(x)), 0.25)
    np.testing.assert_array_equal(u.log_prob_grad(x, [0, 1, 2]), 0.0)


def test_quadratic_grad_vanishes_when_saturated():
    tau = 0.25
    clf = QuadraticClassifier(ring_centers(8, 20.0), tau)
    x = clf.centers[3] + np.array([[0.01, -0.02]])
    z = clf.logits(x)[0]
    assert z[3] - np.delete(z, 3).max() >= 40 * tau
    assert np.linalg.norm(clf.log_prob_grad(x, [3])) <= 1e-6


def test_per_row_timesteps_match_scalar_calls():
    den = AnalyticDenoiser(ring_centers(4, 2.0), 0.3, SCHED)
    x = np.random.default_rng(0).standard_normal((4, 2))
    t = np.array([1, 7, 100, 200])
    y = np.array([0, -1, 2, -1])
    rows = den.epsilon(x, t, y)
    for i in range(4):
        np.testing.assert_allclose(rows[i], den.epsilon(x[i : i + 1], int(t[i]), [y[i]])[0], atol=1e-15)


def test_conditional_epsilon_matches_least_squares_regression():
    # for one class, E[eps | x_t] is affine in x_t; fit it from simulated
    # pairs and compare with the closed form
    n, t, y = 200_000, 60, 2
    centers = ring_centers(5, 2.0)
    den = AnalyticDenoiser(centers, 0.3, SCHED)
    rng = np.random.default_rng(11)
    x0 = centers[y] + 0.3 * rng.standard_normal((n, 2))
    eps = rng.standard_normal((n, 2))
    ab = SCHED.alpha_bar[t]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    design = np.hstack([x_t, np.ones((n, 1))])
    coef, *_ = np.linalg.lstsq(design, eps, rcond=None)
    probe = np.array([[0.5, -0.4], [-1.0, 1.5], [0.0, 0.0]])
    fitted = np.hstack([probe, np.ones((3, 1))]) @ coef
    np.testing.assert_allclose(den.epsilon(probe, t, [y] * 3), fitted, atol=0.01)
