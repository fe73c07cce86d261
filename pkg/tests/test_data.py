import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.neighbors import NearestCentroid

from csihar import data as D
from csihar.data import (CsiSample, Dataset, SynthConfig, directory_digest, load_dataset,
                         save_dataset, stratified_split, synth_generate)
from csihar.errors import ConfigError, FormatVersionError, IntegrityError


def brute_dft_magnitude(x):
    """|X_k| for k <= T/2 from the defining sum, no FFT involved."""
    t = x.shape[-1]
    k = np.arange(t // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(t)[None, :] / t)
    return np.abs(x @ basis.T)


def tiny_samples(per_class, k, prefix="s"):
    return [CsiSample(np.zeros((1, 1), np.float32), c, f"{prefix}-{c}-{i}")
            for c in range(k) for i in range(per_class)]


def small_synth(**kw):
    base = dict(n_classes=3, per_class_train=4, per_class_val=2, per_class_test=1,
                channels=5, time=100, seed=1)
    base.update(kw)
    return SynthConfig(**base)


class TestDatasetType:
    def test_rejects_mismatched_shapes(self):
        bad = [CsiSample(np.zeros((2, 3), np.float32), 0, "a"),
               CsiSample(np.zeros((2, 4), np.float32), 0, "b")]
        with pytest.raises(IntegrityError, match="shape"):
            Dataset("d", ("x",), {"train": bad}, (2, 3))

    def test_rejects_label_outside_roster(self):
        with pytest.raises(IntegrityError, match="label"):
            Dataset("d", ("x",), {"train": tiny_samples(1, 2)}, (1, 1))

    def test_rejects_shared_source_id(self):
        s = tiny_samples(1, 1)
        with pytest.raises(IntegrityError, match="source_id"):
            Dataset("d", ("x",), {"train": s, "val": s}, (1, 1))

    def test_arrays_and_counts(self):
        ds = synth_generate(small_synth())
        x, y = ds.arrays("val")
        assert x.shape == (6, 5, 100) and x.dtype == np.float64
        assert y.tolist() == [0, 0, 1, 1, 2, 2]
        assert ds.class_counts() == {"train": [4, 4, 4], "val": [2, 2, 2], "test": [1, 1, 1]}
        with pytest.raises(KeyError):
            ds.arrays("holdout")

    def test_counts_table(self):
        table = synth_generate(small_synth()).counts_table().splitlines()
        assert table[0].split() == ["Activity", "Train", "Instances", "Val", "Instances",
                                    "Test", "Instances"]
        assert table[-1].split() == ["Total", "12", "6", "3"]


class TestSynth:
    def test_same_seed_bit_identical(self):
        a, b = synth_generate(small_synth(seed=42)), synth_generate(small_synth(seed=42))
        for split in a.splits:
            for sa, sb in zip(a.splits[split], b.splits[split]):
                assert sa.tensor.tobytes() == sb.tensor.tobytes()
                assert (sa.label, sa.source_id) == (sb.label, sb.source_id)

    def test_different_seed_differs(self):
        a, b = synth_generate(small_synth(seed=1)), synth_generate(small_synth(seed=2))
        assert not np.array_equal(a.arrays("train")[0], b.arrays("train")[0])

    def test_noise_free_peak_at_class_frequency(self):
        cfg = small_synth(noise_std=0.0, channels=4, time=500, n_classes=6,
                          per_class_train=2, per_class_val=0, per_class_test=0)
        ds = synth_generate(cfg)
        for s in ds.splits["train"]:
            x = s.tensor.astype(np.float64)
            mag = brute_dft_magnitude(x - x.mean(axis=1, keepdims=True))
            expected_bin = round(cfg.class_frequency(s.label) * cfg.time / cfg.sample_rate_hz)
            assert np.all(np.argmax(mag, axis=1) == expected_bin)

    def test_ntu_like_split_sizes(self):
        cfg = SynthConfig(n_classes=6, per_class_train=156, per_class_val=44, channels=342,
                          time=500)
        # sizes depend only on the counts; a narrow copy avoids generating 400 MB
        ds = synth_generate(SynthConfig(**{**cfg.to_dict(), "channels": 1, "time": 64}))
        assert len(ds.splits["train"]) == 936 and len(ds.splits["val"]) == 264
        assert "test" not in ds.splits
        assert ds.classes == D.NTU_FI_CLASSES

    def test_nearest_centroid_separability(self):
        cfg = SynthConfig(n_classes=6, per_class_train=40, per_class_val=20, channels=16,
                          time=500, noise_std=0.5, seed=9)
        ds = synth_generate(cfg)

        def features(split):
            x, y = ds.arrays(split)
            mag = np.abs(np.fft.rfft(x - x.mean(axis=2, keepdims=True), axis=2))
            return mag.mean(axis=1), y

        clf = NearestCentroid().fit(*features("train"))
        xv, yv = features("val")
        assert np.mean(clf.predict(xv) == yv) > 0.95

    def test_drift_present(self):
        ds = synth_generate(small_synth(noise_std=0.0, time=500, channels=3))
        x = ds.arrays("train")[0][0]
        mag = brute_dft_magnitude(x - x.mean(axis=1, keepdims=True))
        assert np.all(mag[:, 1] > 0.1 * mag.max(axis=1))  # 0.2 Hz sits in bin 1 at T=500

    @pytest.mark.parametrize("field,value", [("per_class_train", -1), ("noise_std", -0.1),
                                             ("channels", 0), ("seed", -1), ("base_freq_hz", 9.0)])
    def test_invalid_config(self, field, value):
        with pytest.raises(ConfigError) as exc:
            small_synth(**{field: value})
        assert exc.value.field == field

    def test_class_names_must_match(self):
        with pytest.raises(ConfigError):
            small_synth(class_names=("a", "b"))
        assert synth_generate(small_synth(class_names=("a", "b", "c"))).classes == ("a", "b", "c")


class TestInterchange:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = synth_generate(small_synth())
        save_dataset(ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert (back.name, back.classes, back.shape) == (ds.name, ds.classes, ds.shape)
        assert back.provenance == json.loads(json.dumps(ds.provenance))
        for split in ds.splits:
            for a, b in zip(ds.splits[split], back.splits[split]):
                assert a.tensor.tobytes() == b.tensor.tobytes()
                assert (a.label, a.source_id) == (b.label, b.source_id)

    def test_binary_layout(self, tmp_path):
        ds = synth_generate(small_synth())
        save_dataset(ds, tmp_path / "ds")
        raw = (tmp_path / "ds" / "val.bin").read_bytes()
        x = np.frombuffer(raw, dtype="<f4").reshape(6, 5, 100)
        np.testing.assert_array_equal(x, ds.arrays("val", np.float32)[0])
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["format_version"] == D.FORMAT_VERSION
        assert manifest["splits"]["val"]["labels"] == [0, 0, 1, 1, 2, 2]

    def test_truncated_binary(self, tmp_path):
        save_dataset(synth_generate(small_synth()), tmp_path / "ds")
        f = tmp_path / "ds" / "train.bin"
        f.write_bytes(f.read_bytes()[:-3])
        with pytest.raises(IntegrityError, match="expected 24000"):
            load_dataset(tmp_path / "ds")

    def test_unknown_version(self, tmp_path):
        save_dataset(synth_generate(small_synth()), tmp_path / "ds")
        m = tmp_path / "ds" / "manifest.json"
        d = json.loads(m.read_text())
        d["format_version"] = 2
        m.write_text(json.dumps(d))
        with pytest.raises(FormatVersionError):
            load_dataset(tmp_path / "ds")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_multi_axis_shape_flattens(self, tmp_path):
        ds = Dataset("d", ("a",), {"train": [CsiSample(np.ones((342, 500), np.float32), 0, "x")]},
                     (342, 500))
        save_dataset(ds, tmp_path / "ds")
        m = tmp_path / "ds" / "manifest.json"
        d = json.loads(m.read_text())
        d["shape"] = [3, 114, 500]
        m.write_text(json.dumps(d))
        assert load_dataset(tmp_path / "ds").shape == (342, 500)

    def test_failed_write_keeps_existing(self, tmp_path, monkeypatch):
        target = tmp_path / "ds"
        save_dataset(synth_generate(small_synth()), target)
        before = directory_digest(target)

        def boom(*a, **k):
            raise RuntimeError("disk full")

        monkeypatch.setattr(D.json, "dumps", boom)
        with pytest.raises(RuntimeError):
            save_dataset(synth_generate(small_synth(seed=5)), target)
        assert directory_digest(target) == before
        assert sorted(p.name for p in tmp_path.iterdir()) == ["ds"]

    def test_overwrite_replaces(self, tmp_path):
        save_dataset(synth_generate(small_synth()), tmp_path / "ds")
        other = synth_generate(small_synth(seed=8))
        save_dataset(other, tmp_path / "ds")
        np.testing.assert_array_equal(load_dataset(tmp_path / "ds").arrays("train")[0],
                                      other.arrays("train")[0])


class TestStratifiedSplit:
    def test_exact_division(self):
        parts = stratified_split(tiny_samples(100, 6), {"train": 0.8, "val": 0.1, "test": 0.1}, 0)
        for name, n in (("train", 80), ("val", 10), ("test", 10)):
            counts = np.bincount([s.label for s in parts[name]], minlength=6)
            assert counts.tolist() == [n] * 6

    def test_explicit_counts_reproduce_ut_har_table(self):
        parts = stratified_split(tiny_samples(4973, 6),
                                 {"train": 3977, "val": 496, "test": 500}, 3)
        for name, n in (("train", 3977), ("val", 496), ("test", 500)):
            assert np.bincount([s.label for s in parts[name]]).tolist() == [n] * 6
        assert sum(len(v) for v in parts.values()) == 29838

    def test_deterministic(self):
        samples = tiny_samples(30, 3)
        a = stratified_split(samples, {"train": 0.7, "val": 0.3}, 11)
        b = stratified_split(samples, {"train": 0.7, "val": 0.3}, 11)
        assert [s.source_id for s in a["val"]] == [s.source_id for s in b["val"]]

    def test_ratio_sum_checked(self):
        with pytest.raises(ConfigError):
            stratified_split(tiny_samples(5, 2), {"train": 0.8, "val": 0.1}, 0)

    def test_small_class_warns(self):
        with pytest.warns(UserWarning):
            parts = stratified_split(tiny_samples(2, 1), {"a": 0.4, "b": 0.3, "c": 0.3}, 0)
        assert sum(len(v) for v in parts.values()) == 2

    def test_counts_exceeding_class_warn(self):
        with pytest.warns(UserWarning):
            parts = stratified_split(tiny_samples(5, 1), {"a": 4, "b": 4}, 0)
        assert sum(len(v) for v in parts.values()) == 5

    @settings(max_examples=60, deadline=None)
    @given(sizes=st.lists(st.integers(0, 40), min_size=1, max_size=5),
           raw=st.lists(st.integers(1, 10), min_size=2, max_size=4), seed=st.integers(0, 2 ** 32))
    def test_proportional_and_disjoint(self, sizes, raw, seed):
        ratios = {f"s{i}": r / sum(raw) for i, r in enumerate(raw)}
        samples = [s for c, n in enumerate(sizes) for s in tiny_samples(n, c + 1)[c * n:]]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            parts = stratified_split(samples, ratios, seed)
        ids = [s.source_id for v in parts.values() for s in v]
        assert len(ids) == len(set(ids)) == len(samples)
        for c, n in enumerate(sizes):
            for name, r in ratios.items():
                got = sum(1 for s in parts[name] if s.label == c)
                assert abs(got - r * n) < 1 + 1e-9
