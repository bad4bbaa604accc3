import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drunknown.core import Context, Dataset
from drunknown.errors import NonConvergence, SingularInformation
from drunknown.policies import (
    ConstantPolicy,
    MixturePolicy,
    SoftmaxLinearPolicy,
    TabularPolicy,
    fisher_information,
    fit_general,
    fit_mle,
    mle_score,
    mle_weights,
    prob,
    quadratic_expand,
    score,
    target_weighted,
)

from conftest import softmax_bandit

finite = st.floats(-3, 3, allow_nan=False)


def test_zero_parameters_give_uniform():
    X = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(prob(SoftmaxLinearPolicy(np.zeros(3)), Context(X)).probs, 0.25, rtol=1e-15)


def test_two_action_closed_form():
    X = np.array([[np.log(2.0)], [0.0]])
    np.testing.assert_allclose(SoftmaxLinearPolicy([1.0]).probs(X), [2 / 3, 1 / 3], rtol=1e-14)


def test_mixture_with_deterministic_base():
    table = np.zeros((1, 10))
    table[0, 3] = 1.0
    mix = MixturePolicy(0.4, TabularPolicy(table))
    X = np.zeros((10, 10))
    X[:, 0] = 1.0
    p = mix.probs(X)
    assert p[3] == pytest.approx(0.46, abs=1e-15)
    np.testing.assert_allclose(np.delete(p, 3), 0.06, atol=1e-15)


def test_softmax_score_example():
    X = np.array([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(score(SoftmaxLinearPolicy(np.zeros(2)), X, 0), [0.25, 0.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5, 3), elements=finite), arrays(float, 3, elements=finite))
def test_probabilities_and_scores_sum(X, phi):
    for pol in (SoftmaxLinearPolicy(phi), SoftmaxLinearPolicy(np.r_[phi, phi], transform=quadratic_expand),
                MixturePolicy(0.3, SoftmaxLinearPolicy(phi))):
        assert pol.probs(X).sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(pol.score(X).sum(axis=0), 0.0, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_score_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 3))
    phi = rng.normal(size=3)
    h = 1e-5
    for pol in (SoftmaxLinearPolicy(phi), MixturePolicy(rng.uniform(0.1, 0.9), SoftmaxLinearPolicy(phi))):
        p0 = pol.params
        fd = np.empty((4, p0.size))
        for j in range(p0.size):
            e = np.zeros(p0.size)
            e[j] = h
            fd[:, j] = (pol.with_params(p0 + e).probs(X) - pol.with_params(p0 - e).probs(X)) / (2 * h)
        np.testing.assert_allclose(pol.score(X), fd, atol=1e-6)


def test_fisher_is_symmetric_psd(small_bandit):
    pol = SoftmaxLinearPolicy([0.3, -0.2])
    F = fisher_information(pol, small_bandit.features)
    np.testing.assert_allclose(F, F.T, atol=1e-12)
    eig = np.linalg.eigvalsh(F)
    assert eig.min() >= -1e-10 * eig.max()


def test_mle_recovers_parameters():
    phi = np.array([0.8, -0.5, 0.3])
    data = softmax_bandit(50000, phi, K=4, seed=5)
    fit = fit_mle(SoftmaxLinearPolicy(np.zeros(3)), data)
    assert fit.final_score_norm <= 1e-10 * data.n
    assert np.all(np.abs(fit.phi_hat - phi) <= 3 * fit.stderr)


def test_mle_uniform_actions_near_zero():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5000, 1, 3, 2))
    data = Dataset(X, rng.integers(0, 3, (5000, 1)), np.zeros((5000, 1)))
    fit = fit_mle(SoftmaxLinearPolicy(np.zeros(2)), data)
    assert np.all(np.abs(fit.phi_hat) <= 3 * fit.stderr)


def test_mle_separation_raises():
    # action 0 always has the larger feature: the likelihood increases without bound
    rng = np.random.default_rng(2)
    X = np.zeros((40, 1, 2, 1))
    X[:, 0, 0, 0] = rng.uniform(0.1, 1.0, 40)
    data = Dataset(X, np.zeros((40, 1), dtype=int), np.zeros((40, 1)))
    with pytest.raises(NonConvergence):
        fit_mle(SoftmaxLinearPolicy(np.zeros(1)), data)


def test_mle_permutation_invariant(small_bandit):
    fam = SoftmaxLinearPolicy(np.zeros(2))
    a = fit_mle(fam, small_bandit).phi_hat
    b = fit_mle(fam, small_bandit.take(np.random.default_rng(0).permutation(small_bandit.n))).phi_hat
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_mle_score_vanishes_at_fit(small_bandit):
    fit = fit_mle(SoftmaxLinearPolicy(np.zeros(2)), small_bandit)
    assert np.max(np.abs(mle_score(fit.policy, small_bandit))) <= 1e-10 * small_bandit.n


def test_mixture_mle_on_logit_scale():
    rng = np.random.default_rng(3)
    base = ConstantPolicy([1.0, 0.0])
    X = np.zeros((400, 1, 2, 1))
    a = (rng.random((400, 1)) > 0.8).astype(int)  # P(a=0) = 0.8 -> α = 0.6
    fit = fit_mle(MixturePolicy(0.5, base), Dataset(X, a, np.zeros((400, 1))))
    assert fit.phi_hat[0] == pytest.approx(2 * np.mean(a == 0) - 1, abs=1e-9)


def test_error_contracts_with_sample_size():
    phi = np.array([0.6, -0.4])
    fam = SoftmaxLinearPolicy(np.zeros(2))
    err = {n: [] for n in (500, 2000)}
    for rep in range(50):
        for n in err:
            fit = fit_mle(fam, softmax_bandit(n, phi, K=3, seed=1000 * rep + n))
            err[n].append(np.linalg.norm(fit.phi_hat - phi))
    assert np.median(err[2000]) <= 0.7 * np.median(err[500])


def test_general_with_mle_weights_matches_mle(small_bandit):
    fam = SoftmaxLinearPolicy(np.zeros(2))
    a = fit_mle(fam, small_bandit).phi_hat
    b = fit_general(fam, small_bandit, lambda pol, X: mle_weights(pol, X)).phi_hat
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_general_target_weighted_is_consistent():
    phi = np.array([0.5, -0.7])
    data = softmax_bandit(40000, phi, K=3, seed=8)
    fam = SoftmaxLinearPolicy(np.zeros(2))
    fit = fit_general(fam, data, target_weighted(SoftmaxLinearPolicy([1.0, 1.0])))
    assert np.all(np.abs(fit.phi_hat - phi) <= 3 * fit_mle(fam, data).stderr * 1.5)


def test_general_zero_weights_is_singular(small_bandit):
    with pytest.raises(SingularInformation):
        fit_general(SoftmaxLinearPolicy(np.zeros(2)), small_bandit, lambda pol, X: np.zeros(np.shape(X)[:-1] + (2,)))
