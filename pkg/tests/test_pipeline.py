import numpy as np
import pytest

from csihar import dsp
from csihar.data import SynthConfig, directory_digest, save_dataset, synth_generate
from csihar.errors import ConfigError
from csihar.pipeline import Pipeline, Step, parse_steps

NTU_STEPS = [{"step": "highpass", "cutoff_hz": 2.0, "sample_rate_hz": 100.0},
             {"step": "normalize", "mode": "amplitude_zscore"},
             {"step": "doppler", "fft_size": 64, "hop": 64},
             {"step": "log_scale"}]


@pytest.fixture(scope="module")
def small():
    return synth_generate(SynthConfig(n_classes=2, per_class_train=3, per_class_val=1,
                                      channels=4, time=200, seed=4))


class TestParse:
    def test_defaults_materialised(self):
        steps = parse_steps([{"step": "highpass"}, {"step": "doppler"}])
        assert steps[0] == Step("highpass", {"cutoff_hz": 2.0, "sample_rate_hz": 100.0})
        assert steps[1].params == {"fft_size": 64, "hop": 32}

    def test_unknown_step_names_position(self):
        with pytest.raises(ConfigError) as exc:
            parse_steps([{"step": "highpass"}, {"step": "wavelet"}])
        assert exc.value.field == "preprocessing[1].step"

    def test_unknown_parameter(self):
        with pytest.raises(ConfigError) as exc:
            parse_steps([{"step": "highpass", "order": 4}])
        assert exc.value.field == "preprocessing[0].highpass"

    def test_window_needs_length_and_stride(self):
        with pytest.raises(ConfigError, match="stride"):
            parse_steps([{"step": "sliding_window", "length": 10}])

    def test_invalid_values_surface_at_construction(self):
        with pytest.raises(ConfigError) as exc:
            Pipeline([{"step": "highpass", "cutoff_hz": 80.0}])
        assert exc.value.field == "preprocessing[0]"
        with pytest.raises(ConfigError):
            Pipeline([{"step": "normalize", "mode": "minmax"}])

    def test_round_trip_through_dicts(self):
        p = Pipeline(NTU_STEPS)
        assert Pipeline(p.to_list()).to_list() == p.to_list() == NTU_STEPS
        assert Pipeline(p.steps).to_list() == NTU_STEPS

    def test_not_a_list(self):
        with pytest.raises(ConfigError):
            parse_steps({"step": "highpass"})


class TestApply:
    def test_matches_hand_composition(self, small):
        x = small.splits["train"][0].tensor.astype(np.float64)
        hp = dsp.highpass(x, dsp.FilterSpec(2.0, 100.0))
        z = dsp.normalize(hp, "amplitude_zscore")
        spec = dsp.doppler_spectrogram(z, dsp.SpectrogramSpec(fft_size=64, hop=64))
        expected = np.log1p(np.abs(spec)).astype(np.float32)
        np.testing.assert_array_equal(Pipeline(NTU_STEPS).apply_sample(x), expected)

    def test_output_shape_matches_application(self, small):
        p = Pipeline(NTU_STEPS)
        assert p.output_shape(small.shape) == p.apply_sample(small.splits["train"][0].tensor).shape
        assert p.output_shape((342, 500)) == (33, 7)

    def test_dataset_application_is_pure_and_reproducible(self, small, tmp_path):
        p = Pipeline(NTU_STEPS)
        before = small.arrays("train")[0].copy()
        a, b = p.apply_dataset(small), p.apply_dataset(small)
        np.testing.assert_array_equal(small.arrays("train")[0], before)
        save_dataset(a, tmp_path / "a")
        save_dataset(b, tmp_path / "b")
        assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
        assert a.shape == (33, 1 + (200 - 64) // 64)
        assert a.provenance["preprocessing"] == NTU_STEPS
        assert small.provenance["preprocessing"] == []

    def test_sliding_window_expands_with_ids(self, small):
        out = Pipeline([{"step": "sliding_window", "length": 100, "stride": 50}]).apply_dataset(small)
        assert out.shape == (4, 100)
        assert len(out.splits["train"]) == 3 * len(small.splits["train"])
        first = out.splits["train"][:3]
        assert [s.source_id for s in first] == [f"{small.splits['train'][0].source_id}@{o}"
                                                for o in (0, 50, 100)]
        np.testing.assert_array_equal(first[1].tensor, small.splits["train"][0].tensor[:, 50:150])

    def test_window_rejected_per_sample(self):
        p = Pipeline([{"step": "sliding_window", "length": 10, "stride": 5}])
        assert p.expands
        with pytest.raises(ConfigError):
            p.apply_sample(np.zeros((2, 20)))

    def test_empty_pipeline_is_identity(self, small):
        assert Pipeline([]).apply_dataset(small) is small

    def test_fourier_and_haar_steps(self):
        x = np.random.default_rng(0).standard_normal((3, 64))
        f = Pipeline([{"step": "fourier", "bins": 10}]).apply_sample(x)
        np.testing.assert_allclose(f, np.abs(np.fft.rfft(x - x.mean(axis=1, keepdims=True)))[:, :10],
                                   rtol=1e-5, atol=1e-5)
        h = Pipeline([{"step": "haar", "levels": 2}]).apply_sample(x)
        pairs = (x[:, 0::2] + x[:, 1::2]) / np.sqrt(2)
        np.testing.assert_allclose(h, (pairs[:, 0::2] + pairs[:, 1::2]) / np.sqrt(2), rtol=1e-5)
