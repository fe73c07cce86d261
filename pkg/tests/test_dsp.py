import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal as sps

from csihar import dsp
from csihar.errors import ConfigError

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def direct_difference_equation(b, a, x):
    """Straight loop over y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]."""
    y = np.zeros(len(x))
    for n in range(len(x)):
        acc = b[0] * x[n]
        if n >= 1:
            acc += b[1] * x[n - 1] - a[1] * y[n - 1]
        if n >= 2:
            acc += b[2] * x[n - 2] - a[2] * y[n - 2]
        y[n] = acc
    return y


def brute_unwrap(p):
    """Pick, step by step, the 2*pi shift that keeps consecutive samples closest.

    A jump of exactly pi is left alone.
    """
    out = [p[0]]
    for v in p[1:]:
        k = min(range(-4, 5), key=lambda k: (abs(v + 2 * math.pi * k - out[-1]), abs(k)))
        out.append(v + 2 * math.pi * k)
    return np.array(out)


def brute_dft(x):
    n = len(x)
    return np.array([sum(x[t] * np.exp(-2j * np.pi * k * t / n) for t in range(n))
                     for k in range(n)])


class TestSpecs:
    def test_cutoff_at_nyquist_rejected(self):
        with pytest.raises(ConfigError):
            dsp.FilterSpec(cutoff_hz=50.0, sample_rate_hz=100.0)

    def test_only_second_order_highpass(self):
        with pytest.raises(ConfigError):
            dsp.FilterSpec(order=4)
        with pytest.raises(ConfigError):
            dsp.FilterSpec(kind="lowpass")

    def test_window_stride_must_not_exceed_length(self):
        with pytest.raises(ConfigError):
            dsp.WindowSpec(length=4, stride=5)

    def test_spectrogram_needs_power_of_two(self):
        with pytest.raises(ConfigError):
            dsp.SpectrogramSpec(fft_size=48, hop=16)
        with pytest.raises(ConfigError):
            dsp.SpectrogramSpec(fft_size=64, hop=65)


class TestHighpass:
    spec = dsp.FilterSpec(cutoff_hz=2.0, sample_rate_hz=100.0)

    def test_coefficients_match_scipy_butter(self):
        b, a = dsp.butter2_highpass_coefficients(self.spec)
        rb, ra = sps.butter(2, 2.0, btype="highpass", fs=100.0)
        np.testing.assert_allclose(b, rb, rtol=1e-12)
        np.testing.assert_allclose(a, ra, rtol=1e-12)

    def test_constant_input_settles_to_zero(self):
        y = dsp.highpass(np.full(500, 5.0), self.spec)
        assert y.shape == (500,)
        assert np.max(np.abs(y[200:])) < 1e-3

    def test_impulse_matches_difference_equation(self):
        x = np.zeros(64)
        x[0] = 1.0
        b, a = dsp.butter2_highpass_coefficients(self.spec)
        np.testing.assert_allclose(dsp.highpass(x, self.spec), direct_difference_equation(b, a, x),
                                   atol=1e-14)

    def test_random_input_matches_difference_equation(self):
        x = np.random.default_rng(0).standard_normal(200)
        b, a = dsp.butter2_highpass_coefficients(self.spec)
        np.testing.assert_allclose(dsp.highpass(x, self.spec), direct_difference_equation(b, a, x),
                                   atol=1e-12)

    def test_tone_at_ten_times_cutoff_passes(self):
        t = np.arange(2000) / 100.0
        y = dsp.highpass(np.sin(2 * np.pi * 20.0 * t), self.spec)
        amp = np.max(np.abs(y[1000:]))
        assert abs(amp - 1.0) < 0.1

    def test_gain_matches_freqz(self):
        freqs = np.geomspace(0.1, 45.0, 10)
        b, a = dsp.butter2_highpass_coefficients(self.spec)
        _, h = sps.freqz(b, a, worN=freqs, fs=100.0)
        np.testing.assert_allclose(dsp.highpass_gain(freqs, self.spec), np.abs(h), rtol=1e-9)

    def test_gain_is_monotone_and_dc_blocked(self):
        freqs = np.geomspace(0.01, 2.0, 10)
        g = dsp.highpass_gain(freqs, self.spec)
        assert np.all(np.diff(g) > 0)
        assert dsp.highpass_gain(0.0, self.spec) < 1e-3

    def test_filters_last_axis_of_a_matrix(self):
        x = np.random.default_rng(1).standard_normal((3, 100))
        y = dsp.highpass(x, self.spec)
        np.testing.assert_allclose(y[1], dsp.highpass(x[1], self.spec))


class TestNormalize:
    def test_hand_zscore(self):
        np.testing.assert_allclose(dsp.zscore(np.array([2.0, 4.0, 6.0])),
                                   [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)

    def test_constant_channel_maps_to_zero(self):
        out = dsp.normalize(np.array([[3.0, 3.0, 3.0], [1.0, 2.0, 4.0]]))
        assert np.all(out[0] == 0.0)

    def test_moments_after_normalizing(self):
        x = np.random.default_rng(2).normal(5.0, 3.0, (4, 200))
        out = dsp.normalize(x)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-9)

    def test_unwrap_against_brute_force(self):
        p = np.array([3.1, -3.1, 3.0])
        np.testing.assert_allclose(dsp.unwrap_phase(p), brute_unwrap(p), atol=1e-12)
        assert dsp.unwrap_phase(p)[1] == pytest.approx(-3.1 + 2 * math.pi)

    def test_unwrap_leaves_exact_pi_jump(self):
        np.testing.assert_array_equal(dsp.unwrap_phase(np.array([0.0, math.pi])), [0.0, math.pi])

    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-math.pi, math.pi)))
    def test_unwrap_property(self, p):
        # jumps within rounding of pi have no well-defined answer
        assume(np.all(np.abs(np.abs(np.diff(p)) - math.pi) > 1e-6))
        np.testing.assert_allclose(dsp.unwrap_phase(p), brute_unwrap(p), atol=1e-9)

    def test_phase_mode_detrends_phase_half(self):
        t = np.arange(100.0)
        amp = np.vstack([np.sin(t / 5), np.cos(t / 7)])
        phase = np.angle(np.exp(1j * np.vstack([0.3 * t, -0.2 * t + 1.0])))
        out = dsp.normalize(np.vstack([amp, phase]), "amplitude_phase_zscore")
        # a linear phase ramp is pure trend, so only zeros remain
        assert np.max(np.abs(out[2:])) < 1e-9
        np.testing.assert_allclose(out[:2], dsp.zscore(amp), atol=1e-12)

    def test_phase_mode_needs_even_channels(self):
        with pytest.raises(ConfigError):
            dsp.normalize(np.ones((3, 10)), "amplitude_phase_zscore")

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            dsp.normalize(np.ones((2, 4)), "minmax")

    @given(arrays(np.float64, (3, 16), elements=finite))
    def test_idempotent(self, x):
        once = dsp.normalize(x)
        np.testing.assert_allclose(dsp.normalize(once), once, atol=1e-9)


class TestDft:
    def test_constant(self):
        np.testing.assert_allclose(dsp.dft([1.0, 1.0, 1.0, 1.0]), [4, 0, 0, 0], atol=1e-15)

    def test_cosine_bins(self):
        n = np.arange(16)
        mag = np.abs(dsp.dft(np.cos(2 * np.pi * 3 * n / 16)))
        assert mag[3] == pytest.approx(8.0) and mag[13] == pytest.approx(8.0)
        assert np.max(np.delete(mag, [3, 13])) < 1e-9

    @pytest.mark.parametrize("n", [1, 2, 8, 16, 64, 256])
    def test_fast_path_equals_direct(self, n):
        x = np.random.default_rng(n).standard_normal(n)
        assert np.max(np.abs(dsp.dft(x) - dsp.dft_direct(x))) < 1e-9

    @pytest.mark.parametrize("n", [3, 12, 30])
    def test_direct_equals_brute_force(self, n):
        x = np.random.default_rng(n).standard_normal(n)
        np.testing.assert_allclose(dsp.dft(x), brute_dft(x), atol=1e-9)

    def test_matches_numpy_fft_on_batches(self):
        x = np.random.default_rng(5).standard_normal((3, 4, 128))
        np.testing.assert_allclose(dsp.dft(x), np.fft.fft(x), atol=1e-9)

    @given(arrays(np.float64, st.sampled_from([4, 7, 16, 32]), elements=finite))
    def test_parseval_and_inverse(self, x):
        X = dsp.dft(x)
        scale = 1 + np.sum(x * x)
        assert abs(np.sum(np.abs(X) ** 2) / len(x) - np.sum(x * x)) < 1e-9 * scale
        np.testing.assert_allclose(dsp.idft(X).real, x, atol=1e-9 * math.sqrt(scale))

    @given(arrays(np.float64, 16, elements=finite), arrays(np.float64, 16, elements=finite))
    def test_linearity_and_conjugate_symmetry(self, x, y):
        X = dsp.dft(x)
        np.testing.assert_allclose(dsp.dft(2 * x - y), 2 * X - dsp.dft(y), atol=1e-9)
        np.testing.assert_allclose(X[1:], np.conj(X[1:][::-1]), atol=1e-9)


class TestHaar:
    def test_hand_values(self):
        c = dsp.haar_dwt([2.0, 4.0], 1)
        np.testing.assert_allclose(c.approx, [4.242640687119285])
        np.testing.assert_allclose(c.details[0], [-1.4142135623730951])

    def test_constant_has_no_detail(self):
        c = dsp.haar_dwt(np.full(32, 7.0), 3)
        assert all(np.max(np.abs(d)) < 1e-12 for d in c.details)

    def test_padding_is_recorded(self):
        c = dsp.haar_dwt(np.arange(10.0), 2)
        assert c.pad == 2 and c.length == 10
        np.testing.assert_allclose(dsp.haar_idwt(c), np.arange(10.0), atol=1e-12)

    def test_too_many_levels(self):
        with pytest.raises(ConfigError):
            dsp.haar_dwt(np.ones(4), 3)

    @given(arrays(np.float64, 32, elements=finite), st.integers(1, 5))
    def test_energy_and_round_trip(self, x, levels):
        c = dsp.haar_dwt(x, levels)
        assert abs(c.energy() - np.sum(x * x)) < 1e-9 * (1 + np.sum(x * x))
        np.testing.assert_allclose(dsp.haar_idwt(c), x, atol=1e-9)


class TestDoppler:
    def test_frame_count(self):
        spec = dsp.SpectrogramSpec(fft_size=128, hop=64)
        assert dsp.spectrogram_frames(500, spec) == 6
        assert dsp.doppler_spectrogram(np.random.default_rng(0).random((2, 500)), spec).shape == (65, 6)

    def test_tone_peaks_at_its_bin(self):
        spec = dsp.SpectrogramSpec(fft_size=64, hop=32)
        t = np.arange(320)
        s = dsp.doppler_spectrogram(np.cos(2 * np.pi * 5 * t / 64), spec)
        # oracle: direct DFT of each Hann-windowed frame
        for f in range(s.shape[1]):
            frame = np.cos(2 * np.pi * 5 * t[f * 32:f * 32 + 64] / 64)
            frame = (frame - np.cos(2 * np.pi * 5 * t / 64).mean()) * dsp.hann(64)
            ref = np.abs(brute_dft(frame))[:33]
            np.testing.assert_allclose(s[:, f], ref, atol=1e-9)
            assert np.argmax(s[:, f]) == 5

    def test_zero_signal(self):
        s = dsp.doppler_spectrogram(np.zeros((3, 128)), dsp.SpectrogramSpec())
        assert np.all(s == 0)

    def test_too_short(self):
        with pytest.raises(ConfigError):
            dsp.doppler_spectrogram(np.zeros((1, 32)), dsp.SpectrogramSpec(fft_size=64, hop=32))

    def test_hann_is_periodic(self):
        np.testing.assert_allclose(dsp.hann(8), sps.get_window("hann", 8, fftbins=True))


class TestSlidingWindows:
    def test_offsets(self):
        w = dsp.sliding_windows(np.arange(10.0)[None, :], dsp.WindowSpec(length=4, stride=2))
        assert w.offsets == [0, 2, 4, 6]
        np.testing.assert_array_equal(w.segments[3], [[6, 7, 8, 9]])

    def test_counts(self):
        assert len(dsp.sliding_windows(np.zeros((2, 250)), dsp.WindowSpec(50, 25))) == 9
        assert len(dsp.sliding_windows(np.zeros((2, 50)), dsp.WindowSpec(50, 25))) == 1

    def test_short_series_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            w = dsp.sliding_windows(np.zeros((1, 3)), dsp.WindowSpec(4, 2))
        assert w.short and len(w) == 0 and caught

    @pytest.mark.filterwarnings("ignore:series of length")
    @settings(max_examples=50)
    @given(st.integers(1, 60), st.integers(1, 20), st.data())
    def test_stride_prefixes_reconstruct_span(self, t, length, data):
        stride = data.draw(st.integers(1, length))
        x = np.arange(float(t))
        w = dsp.sliding_windows(x, dsp.WindowSpec(length, stride))
        if t < length:
            assert w.short
            return
        assert len(w) == (t - length) // stride + 1
        pieces = [seg[:stride] for seg in w.segments[:-1]] + [w.segments[-1]]
        covered = w.offsets[-1] + length
        np.testing.assert_array_equal(np.concatenate(pieces), x[:covered])
