import math

import numpy as np
import pytest

from rppglab import metrics
from rppglab.optics import HrProfile, synth_pulse

FS = 30.0


def tone(f_hz, seconds=32.0, fs=FS, amp=1.0):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * f_hz * t)


class TestBandpass:
    @pytest.mark.parametrize("edge", [0.7, 2.5])
    def test_cutoffs_are_minus_3db(self, edge):
        gain = metrics.bandpass_response([edge], FS)[0]
        assert abs(20 * np.log10(gain) + 3.0103) < 0.05

    def test_passband_centre_near_unity(self):
        assert metrics.bandpass_response([1.3], FS)[0] > 0.95

    def test_low_frequency_rejected(self):
        x = tone(0.1, seconds=120)
        y = metrics.butterworth_bandpass(x, FS)
        mid = slice(len(x) // 4, 3 * len(x) // 4)
        assert 10 * np.log10(np.mean(y[mid] ** 2) / np.mean(x[mid] ** 2)) <= -20

    def test_zero_phase(self):
        x = tone(1.2, seconds=60)
        y = metrics.butterworth_bandpass(x, FS)
        mid = slice(300, 1500)
        lag = np.argmax(np.correlate(y[mid], x[mid], "full")) - (1200 - 1)
        assert lag == 0

    def test_fs_too_low(self):
        with pytest.raises(ValueError):
            metrics.butterworth_bandpass(np.zeros(100), 4.0)


class TestHeartRate:
    def test_dominant_peak_ignores_harmonic(self):
        x = tone(1.0) + tone(2.0, amp=0.3)
        hr = metrics.estimate_hr(x, FS)
        np.testing.assert_allclose(hr.bpm, 60.0)

    def test_resolution_is_half_bpm(self):
        f, _ = metrics.power_spectrum(np.ones(900), FS)
        assert math.isclose(f[1] * 60, 0.5)

    def test_window_count(self):
        assert len(metrics.estimate_hr(tone(1.2, seconds=40), FS)) == 11

    def test_short_signal_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            metrics.estimate_hr(np.ones(100), FS)

    def test_zero_window_is_missing(self):
        hr = metrics.estimate_hr(np.zeros(960), FS)
        assert np.all(np.isnan(hr.bpm))

    def test_drift_is_monotone(self):
        prof = HrProfile.linear(60.0, 90.0, 60.0)
        pulse = synth_pulse(prof, 60.0, FS, seed=0)
        hr = metrics.estimate_hr(metrics.butterworth_bandpass(pulse.samples, FS), FS)
        assert np.all(np.diff(hr.bpm) >= 0)
        assert hr.bpm[-1] > hr.bpm[0]

    @pytest.mark.parametrize("bpm", [48.0, 72.0, 110.0])
    def test_recovers_injected_rate(self, bpm):
        hr = metrics.estimate_hr(tone(bpm / 60), FS)
        assert np.all(np.abs(hr.bpm - bpm) <= 0.5)

    def test_ground_truth_is_window_mean(self):
        gt = metrics.hr_from_profile(HrProfile.linear(60.0, 90.0, 60.0), 1800, FS)
        assert gt.bpm[0] == pytest.approx(67.5, abs=0.3)


class TestErrorMetrics:
    def test_mae_rmse_fixture(self):
        assert metrics.mae([70, 72], [71, 70]) == pytest.approx(1.5, abs=1e-12)
        assert metrics.rmse([70, 72], [71, 70]) == pytest.approx(math.sqrt(2.5), abs=1e-12)

    def test_nan_estimates_dropped(self):
        assert metrics.mae([np.nan, 72], [71, 70]) == 2.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            metrics.mae([1, 2, 3], [1, 2])

    def test_pcc_fixture(self):
        assert metrics.pcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_pcc_matches_numpy(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=50), rng.normal(size=50)
        assert metrics.pcc(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)

    def test_pcc_constant_input(self):
        with pytest.raises(ValueError, match="variance"):
            metrics.pcc([1, 1, 1], [1, 2, 3])


class TestSnr:
    def test_closed_form_fixture(self):
        f = np.array([0.8, 1.2, 1.5, 2.4])
        power = np.array([0.5, 9.0, 0.5, 0.0])
        assert metrics.snr_from_spectrum(f, power, 1.2) == pytest.approx(10 * math.log10(9), abs=1e-9)

    def test_no_out_of_mask_power_is_inf(self):
        f = np.array([1.0, 1.2, 1.4])
        assert metrics.snr_from_spectrum(f, np.array([0.0, 3.0, 0.0]), 1.2) == math.inf

    def test_clean_sinusoid(self):
        rng = np.random.default_rng(0)
        x = tone(1.2) + 1e-3 * rng.normal(size=960)
        assert metrics.snr(x, FS, 72.0) > 20

    def test_white_noise_near_bandwidth_ratio(self):
        # 1.2 +- 0.1 and 2.4 +- 0.1 (clipped at 2.5) cover 0.4 Hz of the 1.75 Hz band
        rng = np.random.default_rng(1)
        vals = [metrics.snr(rng.normal(size=960), FS, 72.0) for _ in range(20)]
        expect = 10 * np.log10(0.4 / (1.75 - 0.4))
        assert expect == pytest.approx(-5.3, abs=0.05)
        assert abs(np.mean(vals) - expect) < 1.0


class TestBias:
    def test_population_std(self):
        mean = (2.37 + 2.95 + 4.97) / 3
        oracle = math.sqrt(sum((v - mean) ** 2 for v in (2.37, 2.95, 4.97)) / 3)
        assert metrics.population_std([2.37, 2.95, 4.97]) == pytest.approx(oracle, abs=1e-12)
        assert oracle == pytest.approx(1.11439, abs=1e-5)

    def test_bias_from_groups(self):
        groups = {g: {"n": 3, "mae": m, "rmse": m + 1} for g, m in zip(metrics.GROUPS, [2.37, 2.95, 4.97])}
        std_mae, std_rmse = metrics.bias_std(groups)
        assert std_mae == pytest.approx(std_rmse, abs=1e-12)

    def test_single_group_rejected(self):
        with pytest.raises(ValueError):
            metrics.bias_std({"F1-2": {"n": 1, "mae": 1.0, "rmse": 1.0}})

    def test_report_bias_none_when_single_group(self):
        row = metrics.SubjectMetrics("a", "I", "F1-2", 1.0, 1.0, 0.5, 3.0)
        rep = metrics.MetricsReport.from_subjects("pos", [row])
        assert rep.bias == {"std_mae": None, "std_rmse": None}


class TestProtocol:
    def test_evaluate_perfect_estimate(self):
        prof = HrProfile.constant(75.0)
        pulse = synth_pulse(prof, 32.0, FS, seed=4)
        gt = metrics.hr_from_profile(prof, len(pulse), FS)
        row = metrics.evaluate_pulse("s", "III", "F3-4", pulse.samples, FS, pulse.samples, gt)
        assert row.mae <= 0.5 and row.pcc > 0.999 and row.snr > 5
