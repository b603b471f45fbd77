import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgems.forecast import (
    DemandResponseParams, ForecastBundle, ForecastError, ProfileDictionary, bell, bell_dictionary,
    dr_adjusted_load, evaluate_forecasts, fit_krr, gaussian_kernel, make_samples, msms_score, msms_tune, nrmse,
    predict_increment, price_sensitivity, rollout, solar_forecast_step, train_forecaster,
)
from mgems.scenario import historical_solar


def solar_days(seed=3, n=6):
    return [historical_solar(seed * 100 + d) for d in range(n)]


class TestKrr:
    def test_single_sample_interpolates(self):
        m = fit_krr([[0.3, 0.1]], [1.0], 0.5, 0.0)
        assert m.predict([[0.3, 0.1]])[0] == pytest.approx(1.0)

    def test_single_sample_ridge(self):
        m = fit_krr([[0.3]], [1.0], 0.5, 0.5)
        assert m.predict([[0.3]])[0] == pytest.approx(1 / 1.5)

    def test_line_large_bandwidth(self):
        x = np.array([[0.0], [0.5], [1.0]])
        m = fit_krr(x, 2 * x.ravel(), 10.0, 1e-8)
        assert np.allclose(m.predict(x), 2 * x.ravel(), atol=1e-3)

    def test_far_query_vanishes(self):
        m = fit_krr([[0.0], [1.0]], [3.0, -2.0], 0.2, 0.0)
        assert m.predict([[1e3]])[0] == 0.0

    def test_symmetric_labels(self):
        m = fit_krr([[-1.0], [1.0]], [0.7, -0.7], 0.8, 0.01)
        assert m.predict([[0.0]])[0] == pytest.approx(0.0, abs=1e-14)

    def test_kernel(self):
        K = gaussian_kernel(np.array([[0.0], [1.0]]), np.array([[0.0]]), 1.0)
        assert K.ravel() == pytest.approx([1.0, np.exp(-0.5)])

    def test_errors(self):
        with pytest.raises(ForecastError):
            fit_krr([[0.0]], [1.0, 2.0], 1.0, 0.0)
        with pytest.raises(ForecastError):
            fit_krr([[0.0]], [1.0], -1.0, 0.0)
        with pytest.raises(ForecastError):
            fit_krr([[0.0], [0.0]], [1.0, 2.0], 1.0, 0.0)

    @given(st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_vanishing_ridge_interpolates(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(0, 1, (8, 4))
        y = rng.normal(size=8)
        m = fit_krr(X, y, 0.3, 0.0)
        assert np.max(np.abs(m.predict(X) - y)) <= 1e-8


class TestSamples:
    def test_make_samples(self):
        X, y = make_samples([0.0, 1.0, 3.0, 6.0], 2, 24)
        assert X.shape == (2, 3)
        assert y.tolist() == [2.0, 3.0]
        assert X[0, 2] == pytest.approx(1 / 24)

    def test_short_series(self):
        with pytest.raises(ForecastError):
            make_samples([1.0, 2.0], 2, 24)

    def test_window_length(self):
        m = fit_krr(np.zeros((1, 4)), [0.0], 1.0, 0.0)
        with pytest.raises(ForecastError):
            predict_increment(m, [0.0, 0.0], 0.0)


class TestDictionary:
    def test_midpoint(self):
        d = ProfileDictionary(np.array([[0.0, 0.6, 0.0]]))
        assert solar_forecast_step(0.5, d, 0.0, 0) == pytest.approx(0.55)

    def test_zero_region(self):
        d = bell_dictionary(24)
        assert solar_forecast_step(0.0, d, 0.0, 1) == 0.0

    def test_tie_takes_lower_index(self):
        d = ProfileDictionary(np.array([[0.2, 0.1], [0.4, 0.9]]))
        assert d.nearest(0.3, 0) == 0

    def test_range_checked(self):
        with pytest.raises(ForecastError):
            ProfileDictionary(np.array([[1.2]]))

    def test_bell(self):
        b = bell(24)
        assert b.max() == 1.0 and int(np.argmax(b)) == 12
        assert b[:7].sum() == 0.0


class TestRollout:
    def test_constant_profile_is_flat(self):
        series = np.full(72, 0.4)
        X, y = make_samples(series, 3, 24)
        m = fit_krr(X, y, 0.5, 1e-6)
        out = rollout(m, series[-3:], 71, 30, 24)
        assert np.allclose(out, 0.4)

    def test_anchor_modes(self):
        days = solar_days()
        fc = train_forecaster({"solar": days}, 24, {"solar": (0.5, 1e-4)})
        w = days[-1][8:11]
        a = rollout(fc.models["solar"], w, 10, 6, 24, fc.dictionary, anchor="rollout")
        b = rollout(fc.models["solar"], w, 10, 6, 24, fc.dictionary, anchor="measurement")
        assert a.shape == b.shape == (6,)
        assert np.all(a >= 0) and np.all(b >= 0)
        with pytest.raises(ForecastError):
            rollout(fc.models["solar"], w, 10, 6, 24, fc.dictionary, anchor="nope")

    def test_wraps_past_midnight(self):
        days = solar_days()
        fc = train_forecaster({"solar": days}, 24, {"solar": (0.5, 1e-4)})
        out = fc.predict("solar", days[-1][-3:], 23, 10)
        assert len(out) == 10
        assert np.all(out[:5] < 0.05)  # night hours of the next day


class TestMsms:
    def test_single_candidate(self):
        days = solar_days()
        s, l, score = msms_tune(days, [0.4], [1e-4])
        assert (s, l) == (0.4, 1e-4)
        assert score == pytest.approx(msms_score(days, 0.4, 1e-4))

    def test_smooth_function_prefers_fit(self):
        t = np.arange(24)
        days = [0.5 + 0.3 * np.sin(2 * np.pi * (t + 0.2 * i) / 24) for i in range(6)]
        s, l, _ = msms_tune(days, [0.3, 50.0], [1e-6, 10.0])
        assert (s, l) == (0.3, 1e-6)
        assert msms_score(days, 0.3, 1e-6) < msms_score(days, 50.0, 10.0)

    def test_deterministic(self):
        days = solar_days()
        grid = ([0.1, 0.5, 2.0], [1e-6, 1e-3])
        assert msms_tune(days, *grid) == msms_tune(days, *grid)

    def test_needs_days(self):
        with pytest.raises(ForecastError):
            msms_score(solar_days(n=2), 0.5, 1e-3)

    def test_empty_grid(self):
        with pytest.raises(ForecastError):
            msms_tune(solar_days(), [], [1e-3])


class TestDemandResponse:
    def test_sensitivity(self):
        a = price_sensitivity(-0.35, -20.0, 0.35)
        assert abs(a) == pytest.approx(20.0)
        assert a < 0

    def test_zero_elasticity(self):
        assert price_sensitivity(0.0, -20.0, 0.35) == 0.0

    def test_bad_tariff(self):
        with pytest.raises(ForecastError):
            price_sensitivity(-0.1, -1.0, 0.0)

    def test_adjusted_load_cumulative(self):
        out = dr_adjusted_load([-1.0, -1.0], [-2.0, -2.0], [0.1, 0.0])
        assert out == pytest.approx([-0.8, -0.8])

    def test_params_validation(self):
        with pytest.raises(ForecastError):
            DemandResponseParams(elasticity={"residential": {"peak": 0.1}})

    def test_bundle(self):
        with pytest.raises(ForecastError):
            ForecastBundle(np.array([[-0.1]]), np.zeros((1, 1)), np.zeros((1, 1)))


class TestEvaluation:
    def test_constant_profile_all_zero(self):
        days = [np.full(24, 0.5)] * 3
        rows = evaluate_forecasts(days, np.full(24, 0.5), [4, 12], kind="load", hyper=(0.5, 1e-6))
        for r in rows:
            assert r.nrmse_vanilla == pytest.approx(0.0, abs=1e-9)
            assert r.nrmse_persistence == 0.0
            assert r.nrmse_dictionary is None

    @pytest.mark.parametrize("member", range(8))
    def test_dictionary_member_day(self, member):
        # starts after the first nonzero measurement (step 7), where the anchor can tell members apart
        dic = bell_dictionary(24)
        rows = evaluate_forecasts(solar_days(), dic.profiles[member], range(8, 17), hyper=(0.5, 1e-4),
                                  dictionary=dic)
        for r in rows:
            assert r.nrmse_dictionary <= r.nrmse_vanilla

    def test_early_start_worse(self):
        days = solar_days()
        rows = evaluate_forecasts(days[:-1], days[-1], [2, 10], hyper=(0.5, 1e-4), n_steps=10)
        assert rows[0].n_steps == rows[1].n_steps == 10
        assert rows[0].nrmse_vanilla > rows[1].nrmse_vanilla

    def test_errors(self):
        with pytest.raises(ForecastError):
            evaluate_forecasts([np.ones(24)], np.ones(24), [1])
        with pytest.raises(ForecastError):
            evaluate_forecasts([np.ones(24)] * 3, np.ones(24), [30], kind="load", hyper=(1.0, 1e-3))

    def test_nrmse(self):
        assert nrmse([1.0, 2.0], [1.0, 3.0]) == pytest.approx(np.sqrt(0.5) / 2)
        assert nrmse([2.0], [2.0]) == 0.0
