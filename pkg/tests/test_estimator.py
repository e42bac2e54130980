import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TRUE_BETA, synthetic_rankings
from llmvot.errors import IdentificationError, InvalidArgumentError
from llmvot.estimator import (
    Coefficients,
    FitResult,
    RankingData,
    RankingObservation,
    fit,
    gradient,
    hessian,
    log_likelihood,
    ranking_probability,
    vot_from,
)


def brute_force_probability(beta, attrs, order):
    """Product of stage softmax probabilities, written out directly."""
    v = [float(np.dot(beta, attrs[i - 1])) for i in order]
    p = 1.0
    for h in range(len(v) - 1):
        p *= math.exp(v[h]) / sum(math.exp(u) for u in v[h:])
    return p


def random_observations(rng, n, n_alt=13):
    return [RankingObservation(rng.normal(size=(n_alt, 3)), rng.permutation(n_alt) + 1) for _ in range(n)]


def test_uniform_probability_is_one_over_13_factorial(base_package):
    obs = RankingObservation(base_package.choice_set(1).attribute_matrix(), list(range(13, 0, -1)))
    assert ranking_probability((0, 0, 0), obs) == pytest.approx(1 / math.factorial(13), rel=1e-12)
    assert 1 / math.factorial(13) == pytest.approx(1.605e-10, rel=1e-3)


def test_three_alternative_closed_form():
    obs = RankingObservation([[1, 0, 0], [0, 0, 0], [-1, 0, 0]], [1, 2, 3])
    e = math.e
    expected = e / (e + 1 + 1 / e) * 1 / (1 + 1 / e)
    assert ranking_probability((1, 0, 0), obs) == pytest.approx(expected, rel=1e-14)


def test_probability_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        attrs = rng.normal(size=(n, 3))
        order = list(rng.permutation(n) + 1)
        beta = rng.normal(size=3) * 2
        got = ranking_probability(beta, RankingObservation(attrs, order))
        assert got == pytest.approx(brute_force_probability(beta, attrs, order), rel=1e-12)


@pytest.mark.parametrize("n_alt", [2, 3, 4])
def test_normalisation_by_enumeration(n_alt):
    rng = np.random.default_rng(n_alt)
    for _ in range(10):
        beta = rng.normal(size=3) * 3
        attrs = rng.normal(size=(n_alt, 3))
        total = sum(ranking_probability(beta, RankingObservation(attrs, p))
                    for p in itertools.permutations(range(1, n_alt + 1)))
        assert abs(total - 1) <= 1e-10


def test_probability_stays_in_unit_interval_for_extreme_utilities():
    obs = RankingObservation([[500, 0, 0], [0, 0, 0], [-500, 0, 0]], [3, 2, 1])
    p = ranking_probability((1, 0, 0), obs)
    assert 0 <= p <= 1
    assert math.isfinite(log_likelihood((1, 0, 0), [obs]))
    assert log_likelihood((1, 0, 0), [obs]) == pytest.approx(-1500, rel=1e-12)


def test_log_likelihood_uniform(base_package):
    data = synthetic_rankings(base_package, np.zeros(3), 17, seed=1)
    assert log_likelihood((0, 0, 0), data) == pytest.approx(-17 * math.log(math.factorial(13)), rel=1e-12)


def test_log_likelihood_single_observation_consistency():
    rng = np.random.default_rng(5)
    obs = random_observations(rng, 1)[0]
    beta = rng.normal(size=3)
    assert log_likelihood(beta, [obs]) == pytest.approx(math.log(ranking_probability(beta, obs)), abs=1e-12)


def test_translation_invariance():
    rng = np.random.default_rng(6)
    data = random_observations(rng, 30)
    for j in range(3):
        shifted = []
        for obs in data:
            a = np.array(obs.attributes)
            a[:, j] += 10.0
            shifted.append(RankingObservation(a, obs.order))
        for _ in range(5):
            beta = rng.normal(size=3)
            assert log_likelihood(beta, shifted) == pytest.approx(log_likelihood(beta, data), rel=1e-11)


def test_empty_data_and_bad_beta():
    with pytest.raises(InvalidArgumentError):
        log_likelihood((0, 0, 0), [])
    obs = RankingObservation([[1, 0, 0], [0, 1, 0]], [1, 2])
    with pytest.raises(InvalidArgumentError):
        ranking_probability((float("nan"), 0, 0), obs)
    with pytest.raises(InvalidArgumentError):
        gradient((0, 0), [obs])
    with pytest.raises(InvalidArgumentError):
        Coefficients(float("inf"), 0, 0)


def test_observation_validation():
    with pytest.raises(InvalidArgumentError):
        RankingObservation([[1, 0, 0], [0, 1, 0]], [1, 1])
    with pytest.raises(InvalidArgumentError):
        RankingObservation([[1, 0], [0, 1]], [1, 2])


def central_difference(f, beta, step=1e-5):
    out = np.zeros(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        out[j] = (f(beta + e) - f(beta - e)) / (2 * step)
    return out


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    data = RankingData(random_observations(rng, 100))
    for _ in range(20):
        beta = rng.normal(scale=0.5, size=3)
        g = gradient(beta, data)
        fd = central_difference(lambda b: log_likelihood(b, data), beta)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_hessian_matches_finite_differences():
    rng = np.random.default_rng(12)
    data = RankingData(random_observations(rng, 60))
    for _ in range(10):
        beta = rng.normal(scale=0.5, size=3)
        H = hessian(beta, data)
        fd = np.column_stack([central_difference(lambda b: gradient(b, data)[i], beta) for i in range(3)])
        assert np.linalg.norm(H - fd) / np.linalg.norm(fd) < 1e-4
        assert np.all(np.linalg.eigvalsh(H) < 0)


def test_gradient_zero_for_balanced_data():
    attrs = [[1.0, 2.0, 0.0], [3.0, -1.0, 1.0], [0.5, 0.0, 1.0]]
    data = [RankingObservation(attrs, p) for p in itertools.permutations([1, 2, 3])]
    assert np.allclose(gradient((0, 0, 0), data), 0, atol=1e-12)


def test_gradient_additive():
    rng = np.random.default_rng(13)
    data = random_observations(rng, 25)
    beta = rng.normal(size=3)
    assert np.allclose(gradient(beta, data + data), 2 * gradient(beta, data), rtol=1e-13, atol=1e-12)


def test_top_choice_truncation_is_multinomial_logit():
    rng = np.random.default_rng(14)
    data = random_observations(rng, 40)
    beta = rng.normal(size=3)
    mnl = 0.0
    for obs in data:
        v = np.asarray(obs.attributes) @ beta
        mnl += v[obs.order[0] - 1] - math.log(sum(math.exp(u) for u in v))
    assert log_likelihood(beta, data, stages=1) == pytest.approx(mnl, rel=1e-12)


def test_mixed_choice_set_sizes():
    rng = np.random.default_rng(15)
    small = random_observations(rng, 5, n_alt=3)
    big = random_observations(rng, 5, n_alt=5)
    beta = rng.normal(size=3)
    assert log_likelihood(beta, small + big) == pytest.approx(
        log_likelihood(beta, small) + log_likelihood(beta, big), rel=1e-13)


def test_vot_from():
    assert vot_from(Coefficients(-0.30, -0.05, 1.0)) == pytest.approx(10.0)
    assert vot_from((-0.30, 0.0, 0.2)) == 0.0
    assert vot_from((1e-12, -0.05, 0.0)) is None


def test_fit_recovers_planted_coefficients(recovery_data):
    r = fit(recovery_data)
    assert r.converged and r.gradient_max_norm <= 1e-8
    z = np.abs(r.beta_hat.as_array() - TRUE_BETA) / np.asarray(r.std_errors)
    assert np.all(z <= 3)
    assert abs(r.vot - 10.0) / 10.0 < 0.05
    assert r.n_observations == 5000


def test_fit_null_model(base_package):
    rng = np.random.default_rng(99)
    data = [RankingObservation(base_package.choice_set(1 + k % 2).attribute_matrix(), rng.permutation(13) + 1)
            for k in range(2000)]
    r = fit(data)
    assert r.converged
    assert np.all(np.abs(r.beta_hat.as_array()) <= 3 * np.asarray(r.std_errors))


def test_fit_cost_doubling_equivariance(recovery_data):
    a = fit(recovery_data)
    b = fit(recovery_data.scaled([2.0, 1.0, 1.0]))
    assert b.beta_hat.beta_cost == pytest.approx(a.beta_hat.beta_cost / 2, rel=1e-6)
    assert b.beta_hat.beta_time == pytest.approx(a.beta_hat.beta_time, rel=1e-6)
    assert b.beta_hat.beta_truck == pytest.approx(a.beta_hat.beta_truck, rel=1e-6)
    assert b.vot == pytest.approx(2 * a.vot, rel=1e-6)


def test_fit_constant_column_is_unidentified(base_package):
    rng = np.random.default_rng(2)
    data = []
    for _ in range(20):
        a = np.array(base_package.choice_set(1).attribute_matrix())
        a[:, 2] = 1.0
        data.append(RankingObservation(a, rng.permutation(13) + 1))
    with pytest.raises(IdentificationError) as info:
        fit(data)
    assert info.value.column == "truck"


def test_fit_iteration_cap_keeps_partial_result(recovery_data):
    r = fit(recovery_data, max_iterations=1)
    assert not r.converged and r.status == "max-iterations"
    assert r.iterations == 1
    assert np.all(np.isfinite(r.beta_hat.as_array()))


def test_fit_collinear_attributes_warns_and_leaves_se_undefined():
    rng = np.random.default_rng(8)
    data = []
    for _ in range(200):
        c = rng.uniform(0, 5, size=6)
        a = np.column_stack([c, 2 * c, rng.integers(0, 2, size=6)])
        data.append(RankingObservation(a, rng.permutation(6) + 1))
    with pytest.warns(RuntimeWarning, match="singular"):
        r = fit(data)
    assert all(math.isnan(s) for s in r.std_errors)


def test_fit_result_json_round_trip(recovery_data):
    r = fit(recovery_data)
    again = FitResult.from_dict(r.to_dict())
    assert again.to_dict() == r.to_dict()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_fit_reaches_same_optimum_from_any_start(seed):
    rng = np.random.default_rng(seed)
    data = RankingData(random_observations(rng, 80, n_alt=5))
    ref = fit(data)
    other = fit(data, start=rng.normal(scale=2, size=3))
    assert np.max(np.abs(ref.beta_hat.as_array() - other.beta_hat.as_array())) < 1e-6
