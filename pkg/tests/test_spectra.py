import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meta_risk_lab.spectra import (
    ParameterDomainError,
    Spectrum,
    TaskSpectrum,
    exp_spectrum,
    isotropic_task_spectrum,
    log_decay_spectrum,
    log_growth_task_spectrum,
    poly_spectrum,
    two_block_spectrum,
    zero_task_spectrum,
)


class TestLogDecay:
    def test_d3_p2_against_high_precision(self):
        # independent evaluation at 50 digits
        mpmath.mp.dps = 50
        expected = [
            float(1 / (mpmath.mpf(k) * mpmath.log(k + 1) ** 2)) for k in (1, 2, 3)
        ]
        got = log_decay_spectrum(3, 2.0).values
        np.testing.assert_allclose(got, expected, rtol=1e-15)
        np.testing.assert_allclose(got, [2.0814, 0.4143, 0.1734], atol=5e-4)

    def test_single_element(self):
        got = log_decay_spectrum(1, 2.0).values
        assert got[0] == pytest.approx(1.0 / math.log(2.0) ** 2, rel=1e-15)

    def test_figure_scale(self):
        spec = log_decay_spectrum(500, 2.0)
        assert spec.d == 500
        assert spec.values[499] == pytest.approx(1.0 / (500 * math.log(501) ** 2), rel=1e-14)

    def test_trace_increments_shrink(self):
        t100 = log_decay_spectrum(100, 2.0).trace
        t1k = log_decay_spectrum(1000, 2.0).trace
        t10k = log_decay_spectrum(10000, 2.0).trace
        assert t100 < t1k < t10k
        assert (t10k - t1k) < (t1k - t100)

    def test_rejects_bad_params(self):
        with pytest.raises(ParameterDomainError):
            log_decay_spectrum(0, 2.0)
        with pytest.raises(ParameterDomainError):
            log_decay_spectrum(5, 0.0)


class TestPoly:
    def test_exact_rationals(self):
        np.testing.assert_array_equal(
            poly_spectrum(4, 2.0).values, [1.0, 0.25, 1.0 / 9.0, 0.0625]
        )

    def test_single(self):
        np.testing.assert_array_equal(poly_spectrum(1, 2.0).values, [1.0])

    def test_trace_below_zeta(self):
        assert poly_spectrum(200, 1.5).trace < 2.612375  # zeta(3/2)

    def test_rejects_q_at_most_one(self):
        with pytest.raises(ParameterDomainError):
            poly_spectrum(4, 1.0)


class TestExp:
    def test_values(self):
        np.testing.assert_allclose(
            exp_spectrum(2).values, [math.exp(-1), math.exp(-2)], rtol=1e-15
        )

    def test_trace_geometric(self):
        # sum_{k=1..50} e^-k = (1 - e^-50) / (e - 1)
        expected = (1 - math.exp(-50)) / (math.e - 1)
        assert exp_spectrum(50).trace == pytest.approx(expected, rel=1e-12)


class TestTwoBlock:
    def test_smallest_case(self):
        np.testing.assert_allclose(two_block_spectrum(4, 1).values, [1, 1 / 3, 1 / 3, 1 / 3])

    def test_d10_s2(self):
        vals = two_block_spectrum(10, 2).values
        np.testing.assert_allclose(vals[:2], 0.5)
        np.testing.assert_allclose(vals[2:], 0.125)

    def test_trace_exactly_two(self):
        for d, s in [(4, 1), (10, 2), (460, 22), (501, 250)]:
            assert two_block_spectrum(d, s).trace == pytest.approx(2.0, rel=1e-12)

    def test_block_setup_from_horizon(self):
        # s = T / log T, d = T log T at T = 100 (both rounded)
        T = 100
        s = round(T / math.log(T))
        d = round(T * math.log(T))
        spec = two_block_spectrum(d, s)
        assert spec.values[0] == pytest.approx(1 / s)
        assert spec.values[-1] == pytest.approx(1 / (d - s))

    def test_rejects_invalid_blocks(self):
        with pytest.raises(ParameterDomainError):
            two_block_spectrum(4, 4)
        with pytest.raises(ParameterDomainError):
            two_block_spectrum(5, 3)  # d < 2s


class TestTaskSpectra:
    def test_log_growth_values(self):
        np.testing.assert_allclose(
            log_growth_task_spectrum(2, 1.0, 1.0).values, [math.log(2), math.log(3)], rtol=1e-15
        )

    def test_log_growth_figure_configs(self):
        for r in (1.5, 8.0):
            vals = log_growth_task_spectrum(500, r, 0.25).values
            assert vals[0] == pytest.approx(0.25 * math.log(2) ** r, rel=1e-12)
            assert np.all(np.diff(vals) > 0)  # increasing, exempt from monotone invariant

    def test_isotropic(self):
        np.testing.assert_array_equal(isotropic_task_spectrum(3, 1.0).values, [1.0, 1.0, 1.0])
        vals = isotropic_task_spectrum(200, 0.8**2 / 200).values
        assert vals[0] == pytest.approx(0.0032)

    def test_zero(self):
        assert zero_task_spectrum(4).trace == 0.0

    def test_rejects_bad_params(self):
        with pytest.raises(ParameterDomainError):
            log_growth_task_spectrum(3, 0.0)
        with pytest.raises(ParameterDomainError):
            isotropic_task_spectrum(3, 0.0)


class TestInvariants:
    @given(
        d=st.integers(min_value=1, max_value=200),
        p=st.floats(min_value=0.1, max_value=5.0, allow_nan=False),
    )
    @settings(max_examples=40, deadline=None)
    def test_log_decay_is_valid_spectrum(self, d, p):
        spec = log_decay_spectrum(d, p)
        assert np.all(spec.values > 0)
        assert np.all(np.diff(spec.values) <= 0)
        assert math.isfinite(spec.trace)

    @given(
        d=st.integers(min_value=2, max_value=300),
        q=st.floats(min_value=1.01, max_value=4.0, allow_nan=False),
    )
    @settings(max_examples=40, deadline=None)
    def test_poly_is_valid_spectrum(self, d, q):
        spec = poly_spectrum(d, q)
        assert np.all(spec.values > 0)
        assert np.all(np.diff(spec.values) <= 0)

    def test_spectrum_rejects_increasing(self):
        with pytest.raises(ParameterDomainError):
            Spectrum(np.array([1.0, 2.0]))
        with pytest.raises(ParameterDomainError):
            Spectrum(np.array([1.0, 0.0]))

    def test_task_spectrum_allows_any_order_and_zero(self):
        TaskSpectrum(np.array([0.5, 2.0, 0.0]))
        with pytest.raises(ParameterDomainError):
            TaskSpectrum(np.array([-0.1, 1.0]))

    def test_values_immutable(self):
        spec = poly_spectrum(4, 2.0)
        with pytest.raises(ValueError):
            spec.values[0] = 5.0


class TestSerialization:
    def test_csv_round_trip(self, tmp_path):
        spec = log_decay_spectrum(37, 2.5)
        path = tmp_path / "spec.csv"
        spec.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "lambda"
        back = Spectrum.from_csv(path)
        np.testing.assert_array_equal(back.values, spec.values)

    def test_csv_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("eig\n1.0\n")
        with pytest.raises(ValueError, match="lambda"):
            Spectrum.from_csv(path)

    def test_json_round_trip(self):
        spec = exp_spectrum(12)
        back = Spectrum.from_json(spec.to_json())
        np.testing.assert_array_equal(back.values, spec.values)
        assert json.loads(spec.to_json())[0] == pytest.approx(math.exp(-1))

    def test_task_spectrum_round_trip(self, tmp_path):
        task = log_growth_task_spectrum(9, 1.5, 0.25)
        path = tmp_path / "task.csv"
        task.to_csv(path)
        back = TaskSpectrum.from_csv(path)
        np.testing.assert_array_equal(back.values, task.values)
