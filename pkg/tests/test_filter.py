import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semistatic import filter as pf
from semistatic.filter import FilterState, ModelKind, NoiseModel, Observation
from semistatic.survival import LogNormalComponent, SurvivalMixture, survival_function

from oracles import evidence_by_quadrature, posterior_by_quadrature

NOISE = NoiseModel(0.1, 0.1)


def two_mix(w=(0.7, 0.3)):
    return SurvivalMixture((LogNormalComponent(math.log(100.0), 0.5), LogNormalComponent(math.log(2.0), 0.5)), w)


def test_init_prediction_equals_prior():
    mix = two_mix()
    st0 = pf.init_filter(mix, NOISE, 0.99)
    t = 50.0
    expected = 0.7 * survival_function(mix, 0, t) + 0.3 * survival_function(mix, 1, t)
    assert pf.marginal_prediction(st0, t) == pytest.approx(expected, rel=1e-12)
    assert pf.dominant_prediction(st0, t) == pytest.approx(survival_function(mix, 0, t), rel=1e-12)


def test_tie_breaks_to_lower_index():
    st0 = pf.init_filter(two_mix((0.5, 0.5)), NOISE)
    assert st0.dominant_index() == 0
    assert pf.dominant_prediction(st0, 5.0) == pf.conditional_posterior(st0, 0, 5.0)


def test_forgetting_range_checked():
    for g in (-0.1, 1.5):
        with pytest.raises(ValueError):
            pf.init_filter(two_mix(), NOISE, g)


def test_single_observation_two_cell_bayes():
    mix = SurvivalMixture.single(0.5, 1.0)
    s = pf.update(pf.init_filter(mix, NOISE), Observation(1.0, 1))
    prior = survival_function(mix, 0, 1.0)
    expected = 0.9 * prior / (0.9 * prior + 0.1 * (1 - prior))
    assert pf.conditional_posterior(s, 0, 1.0) == pytest.approx(expected, rel=1e-9)


def test_two_positive_updates_likelihood():
    s = pf.run(pf.init_filter(two_mix(), NOISE, 1.0), [Observation(1.0, 1), Observation(2.0, 1)])
    assert s.log_likelihood == pytest.approx(2 * math.log(0.9), rel=1e-15)


def test_evidence_matches_quadrature_l3():
    rng = np.random.default_rng(42)
    comps = (LogNormalComponent(0.5, 0.8), LogNormalComponent(1.5, 0.4), LogNormalComponent(2.5, 1.0))
    mix = SurvivalMixture(comps, (0.2, 0.5, 0.3))
    times = np.sort(rng.uniform(0.1, 20.0, 10))
    values = rng.integers(0, 2, 10)
    s = pf.run(pf.init_filter(mix, NOISE, 1.0), [Observation(float(t), int(y)) for t, y in zip(times, values)])
    for k, c in enumerate(comps):
        oracle = evidence_by_quadrature(c.mu, c.sigma, times, values, 0.1, 0.1)
        assert math.exp(s.log_cond_evidence[k]) == pytest.approx(math.exp(oracle), rel=1e-5)


def test_conditional_posterior_limits():
    mix = two_mix()
    st0 = pf.init_filter(mix, NOISE)
    assert pf.conditional_posterior(st0, 1, 3.0) == pytest.approx(survival_function(mix, 1, 3.0), rel=1e-12)
    assert pf.conditional_posterior(st0, 0, 1e12) <= 1e-9


def test_conditional_posterior_matches_quadrature():
    mix = SurvivalMixture.single(1.0, 0.7)
    obs = [Observation(0.5, 1), Observation(1.0, 1), Observation(1.8, 0), Observation(2.2, 1), Observation(3.0, 1)]
    s = pf.run(pf.init_filter(mix, NOISE, 1.0), obs)
    t = 4.0
    oracle = posterior_by_quadrature(1.0, 0.7, [o.time for o in obs], [o.value for o in obs], 0.1, 0.1, t)
    assert pf.conditional_posterior(s, 0, t) == pytest.approx(oracle, rel=1e-5)


def test_dominant_moves_to_short_component():
    st0 = pf.init_filter(two_mix((0.5, 0.5)), NoiseModel(0.05, 0.05))
    obs = [Observation(0.5, 1), Observation(1.0, 1)] + [Observation(float(t), 0) for t in range(3, 15)]
    s = pf.run(st0, obs)
    assert s.dominant_index() == 1


def test_as_presence_belief():
    assert pf.as_presence_belief(ModelKind.PERSISTENCE, 0.8) == 0.8
    assert pf.as_presence_belief(ModelKind.EMERGENCE, 0.8) == pytest.approx(0.2)
    assert pf.as_presence_belief("emergence", 0.0) == 1.0
    with pytest.raises(ValueError):
        pf.as_presence_belief(ModelKind.PERSISTENCE, 1.2)


def test_out_of_order_rejected():
    s = pf.update(pf.init_filter(two_mix(), NOISE), Observation(5.0, 1))
    with pytest.raises(ValueError):
        pf.update(s, Observation(4.0, 1))
    with pytest.raises(ValueError):
        pf.conditional_posterior(s, 0, 4.0)


def test_observation_validation():
    with pytest.raises(ValueError):
        Observation(1.0, 2)
    with pytest.raises(ValueError):
        NoiseModel(0.6, 0.5)


def test_state_round_trip():
    s = pf.run(pf.init_filter(two_mix(), NOISE, 0.99, origin=1.0), [Observation(2.0, 1), Observation(3.0, 0)])
    back = FilterState.from_json(s.to_json())
    assert back.same_as(s)
    assert FilterState.from_json(pf.init_filter(two_mix(), NOISE).to_json()).same_as(pf.init_filter(two_mix(), NOISE))


sequences = st.lists(st.tuples(st.floats(0.01, 5.0), st.integers(0, 1)), min_size=1, max_size=30)
noises = st.tuples(st.floats(0.01, 0.3), st.floats(0.01, 0.3)).map(lambda p: NoiseModel(*p))


def _observations(seq):
    t, out = 0.0, []
    for dt, y in seq:
        t += dt
        out.append(Observation(t, y))
    return out


@settings(max_examples=200, deadline=None)
@given(sequences, noises, st.floats(0.5, 1.0))
def test_weights_normalised_and_beliefs_bounded(seq, noise, gamma):
    s = pf.init_filter(two_mix(), noise, gamma)
    for o in _observations(seq):
        s = pf.update(s, o)
        assert abs(math.fsum(np.exp(s.log_weights)) - 1) <= 1e-9
        for t in (o.time, o.time + 1.0, o.time + 100.0):
            assert 0.0 <= pf.dominant_prediction(s, t) <= 1.0
            assert 0.0 <= pf.marginal_prediction(s, t) <= 1.0


@settings(max_examples=100, deadline=None)
@given(sequences, noises, st.lists(st.floats(0.0, 200.0), min_size=2, max_size=6))
def test_silence_decay_monotone(seq, noise, gaps):
    s = pf.run(pf.init_filter(two_mix(), noise, 1.0), _observations(seq))
    ts = s.last_time + np.sort(gaps)
    vals = [pf.dominant_prediction(s, float(t)) for t in ts]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=200, deadline=None)
@given(sequences, noises, st.floats(0.5, 1.0))
def test_emergence_mirror(seq, noise, gamma):
    obs = _observations(seq)
    emer = pf.run(pf.init_filter(two_mix(), noise, gamma, ModelKind.EMERGENCE), obs)
    flipped = [Observation(o.time, 1 - o.value) for o in obs]
    pers = pf.run(pf.init_filter(two_mix(), noise.swapped(), gamma, ModelKind.PERSISTENCE), flipped)
    assert np.array_equal(emer.log_cond_evidence, pers.log_cond_evidence)
    assert np.array_equal(emer.log_weights, pers.log_weights)
    assert np.array_equal(emer.log_accumulators, pers.log_accumulators)
    assert emer.log_likelihood == pers.log_likelihood
    t = obs[-1].time + 1.0
    assert pf.presence_belief(emer, t) == 1.0 - pf.dominant_prediction(pers, t)
