import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from dt4ecg.dsp import (
    Activity,
    DspConfig,
    EcgRecording,
    FilterDesignError,
    design_highpass,
    design_notch,
    filtfilt,
    normalize_01,
    preprocess,
    segment,
)

FS = 100.0


def steady_amplitude(filt, f, fs=FS, seconds=10.0):
    t = np.arange(int(seconds * fs)) / fs
    y = filtfilt(filt, np.sin(2 * np.pi * f * t))
    mid = y[len(y) // 4 : 3 * len(y) // 4]
    return np.max(np.abs(mid))


class TestHighpass:
    def test_dc_blocked(self):
        assert abs(design_highpass(0.5, FS).response([0.0], FS)[0]) < 1e-12

    def test_cutoff_minus_3db(self):
        gain = design_highpass(0.5, FS).gain_db([0.5], FS)[0]
        assert abs(gain - (-3.0103)) < 0.1

    def test_passband(self):
        assert design_highpass(0.5, FS).gain_db([10.0], FS)[0] >= -0.1

    def test_matches_scipy_butterworth(self):
        ours = design_highpass(0.5, FS).sos()
        ref = signal.butter(2, 0.5, btype="highpass", fs=FS, output="sos")
        np.testing.assert_allclose(ours, ref, rtol=1e-10, atol=1e-14)

    def test_stable(self):
        assert design_highpass(0.5, FS).is_stable()

    @pytest.mark.parametrize("fc", [0.0, 50.0, 60.0])
    def test_band_errors(self, fc):
        with pytest.raises(FilterDesignError, match="Nyquist"):
            design_highpass(fc, FS)

    def test_swept_passband_flat(self):
        hp = design_highpass(0.5, FS)
        f = np.linspace(5, 49, 200)
        assert np.all(hp.gain_db(f, FS) > -0.1)
        assert np.all(hp.gain_db(f, FS) < 0.01)
        assert np.all(np.diff(hp.gain_db(np.linspace(0.01, 5, 200), FS)) > 0)


class TestNotch:
    def test_center_sinusoid_attenuated(self):
        notch = design_notch(40.0, FS, 30.0)
        assert 20 * np.log10(steady_amplitude(notch, 40.0)) <= -30.0

    def test_center_gain(self):
        assert design_notch(40.0, FS, 30.0).gain_db([40.0], FS)[0] < -100

    def test_dc_passed(self):
        assert abs(design_notch(40.0, FS, 30.0).gain_db([0.0], FS)[0]) < 0.1

    def test_bandwidth(self):
        # -3 dB edges sit half the f0/q bandwidth either side of the centre
        notch = design_notch(40.0, FS, 30.0)
        f = np.linspace(38, 42, 40001)
        g = notch.gain_db(f, FS)
        below = f[g < -3.0103]
        assert 40.0 - below.min() == pytest.approx(40.0 / 60, rel=0.2)
        assert below.max() - 40.0 == pytest.approx(40.0 / 60, rel=0.2)

    def test_matches_scipy_iirnotch(self):
        b, a = signal.iirnotch(40.0, 30.0, fs=FS)
        sec = design_notch(40.0, FS, 30.0).sections[0]
        np.testing.assert_allclose(sec, [b[0], b[1], b[2], a[1], a[2]], rtol=1e-12)

    def test_sixty_hz_at_100_rejected(self):
        with pytest.raises(FilterDesignError, match="Nyquist"):
            design_notch(60.0, FS, 30.0)


class TestFiltfilt:
    def test_zero(self):
        assert not filtfilt(design_highpass(0.5, FS), np.zeros(100)).any()

    def test_constant_through_highpass(self):
        y = filtfilt(design_highpass(0.5, FS), np.full(1000, 3.7))
        assert np.max(np.abs(y)) < 1e-6 * 3.7

    def test_length_preserved(self):
        assert filtfilt(design_notch(40.0, FS), np.random.default_rng(0).normal(size=123)).shape == (123,)

    def test_too_short(self):
        with pytest.raises(ValueError, match="exceed"):
            filtfilt(design_highpass(0.5, FS), np.ones(6))

    def test_zero_phase_pulse(self):
        t = np.arange(2000) / FS
        pulse = np.exp(-0.5 * ((t - 10.0) / 0.05) ** 2) * np.cos(2 * np.pi * 8 * (t - 10.0))
        y = filtfilt(design_highpass(0.5, FS), pulse)
        assert abs(int(np.argmax(np.abs(y))) - int(np.argmax(np.abs(pulse)))) <= 1

    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=400), rng.normal(size=400)
        for filt in (design_highpass(0.5, FS), design_notch(40.0, FS)):
            lhs = filtfilt(filt, a * x + b * y)
            rhs = a * filtfilt(filt, x) + b * filtfilt(filt, y)
            scale = max(1.0, np.max(np.abs(lhs)))
            assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


class TestNormalizeSegment:
    def test_normalize_endpoints(self):
        np.testing.assert_array_equal(normalize_01([2, 4, 6]), [0, 0.5, 1])

    def test_constant(self):
        np.testing.assert_array_equal(normalize_01([5, 5]), [0.5, 0.5])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
    def test_range(self, xs):
        y = normalize_01(xs)
        if max(xs) != min(xs):
            assert y.min() == 0.0 and y.max() == 1.0

    def test_segment_counts(self):
        assert len(segment(np.arange(950), 300)) == 3
        assert len(segment(np.arange(299), 300)) == 0
        segs = segment(np.arange(600), 300)
        assert [s[0] for s in segs] == [0, 300] and [s[-1] for s in segs] == [299, 599]

    def test_bad_window(self):
        with pytest.raises(ValueError):
            segment(np.arange(10), 0)


class TestPreprocess:
    def _rec(self, seconds=180.0, seed=0, interference=0.0):
        rng = np.random.default_rng(seed)
        t = np.arange(int(seconds * FS)) / FS
        x = np.sin(2 * np.pi * 1.2 * t) + 0.3 * rng.normal(size=t.size)
        x += interference * np.sin(2 * np.pi * 40.0 * t)
        return EcgRecording(3, Activity.EXERCISE, FS, x)

    def test_segment_count_and_labels(self):
        segs = preprocess(self._rec())
        assert len(segs) == 60
        assert all(s.subject_id == 3 and s.activity == Activity.EXERCISE for s in segs)
        assert all(s.samples.shape == (300,) for s in segs)

    def test_values_in_unit_interval(self):
        segs = preprocess(self._rec())
        allv = np.concatenate([s.samples for s in segs])
        assert allv.min() >= 0.0 and allv.max() <= 1.0

    def test_order_stable(self):
        rec = self._rec(seconds=30.0)
        segs = preprocess(rec)
        cfg = DspConfig()
        from dt4ecg.dsp import design_highpass as hp, design_notch as nt
        full = normalize_01(filtfilt(nt(cfg.notch_hz, FS, cfg.notch_q), filtfilt(hp(0.5, FS), rec.samples)))
        for i, s in enumerate(segs):
            np.testing.assert_array_equal(s.samples, full[i * 300 : (i + 1) * 300])

    def test_notch_matters_only_with_interference(self):
        off = DspConfig(notch_enabled=False)
        clean_on = np.concatenate([s.samples for s in preprocess(self._rec(seconds=30.0))])
        clean_off = np.concatenate([s.samples for s in preprocess(self._rec(seconds=30.0), off)])
        dirty_on = np.concatenate([s.samples for s in preprocess(self._rec(seconds=30.0, interference=1.0))])
        dirty_off = np.concatenate([s.samples for s in preprocess(self._rec(seconds=30.0, interference=1.0), off)])
        clean_diff = np.max(np.abs(clean_on - clean_off))
        dirty_diff = np.max(np.abs(dirty_on - dirty_off))
        assert dirty_diff > 5 * clean_diff
        # with the notch the 40 Hz line is gone from the interior
        def line_amp(y):
            mid = y[500:2500]
            t = np.arange(mid.size) / FS
            return abs(np.dot(mid - mid.mean(), np.exp(-2j * np.pi * 40.0 * t))) * 2 / mid.size
        assert line_amp(dirty_on) < 0.01 * line_amp(dirty_off)

    def test_deterministic(self):
        a = preprocess(self._rec(seconds=30.0))
        b = preprocess(self._rec(seconds=30.0))
        assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))

    def test_bad_recording(self):
        with pytest.raises(ValueError):
            EcgRecording(0, Activity.REST, FS, [])
        with pytest.raises(ValueError):
            EcgRecording(0, Activity.REST, 0.0, [1.0])
