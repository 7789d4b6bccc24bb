import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmotion import dataset as ds
from modmotion import simworld as sw
from modmotion.container import CorruptFileError, VersionMismatchError


def make_demo(T=2000, labels=None, seed=0):
    cfg = sw.ScenarioConfig(task="wiping", noise_scale=0.01, duration_ticks=max(T, 7400))
    demo = sw.synthesize_demo(cfg, labels or {"temporal": 0.5, "physical": 0.5}, seed=seed)
    return sw.Demonstration(
        q=demo.q[:T], dq=demo.dq[:T], tau=demo.tau[:T], dt=demo.dt, labels=demo.labels, meta=demo.meta
    )


class TestDownsample:
    def test_count(self):
        out = ds.downsample(make_demo(T=2000), 20)
        assert out.length == 100

    def test_identity_stride(self):
        demo = make_demo(T=200)
        out = ds.downsample(demo, 1)
        assert out is demo

    def test_effective_dt(self):
        out = ds.downsample(make_demo(T=2000), 20)
        assert out.dt == pytest.approx(0.04)

    def test_stride_too_large(self):
        with pytest.raises(ds.DatasetError):
            ds.downsample(make_demo(T=100), 100)


class TestWindow:
    def test_count_formula(self):
        demo = ds.downsample(make_demo(T=2000), 20)  # 100 states
        assert len(ds.window(demo, 50, hop=1)) == 51

    def test_single_window(self):
        demo = ds.downsample(make_demo(T=1000), 20)  # 50 states
        assert len(ds.window(demo, 50)) == 1

    def test_condition_is_first_state(self):
        demo = ds.downsample(make_demo(T=2000), 20)
        w0 = ds.window(demo, 50)[0]
        np.testing.assert_array_equal(w0.condition, demo.as_matrix()[0])
        np.testing.assert_array_equal(w0.condition, w0.sequence[0])

    def test_too_short(self):
        demo = ds.downsample(make_demo(T=900), 20)  # 45 states
        with pytest.raises(ds.DatasetError):
            ds.window(demo, 50)

    @given(extra=st.integers(0, 60), hop=st.integers(1, 7))
    @settings(max_examples=25, deadline=None)
    def test_count_formula_property(self, extra, hop):
        demo = make_demo(T=50 + extra)
        wins = ds.window(demo, 50, hop=hop)
        assert len(wins) == (extra // hop) + 1


def build_small_bundle(n_demos=3, seed=0):
    demos = [
        make_demo(T=2000, labels={"temporal": y, "physical": 0.5}, seed=i)
        for i, y in zip(range(n_demos), [0.0, 0.5, 1.0] * n_demos)
    ]
    return ds.build_bundle(demos, width=50, hop=5, stride=20, train_fraction=0.7, seed=seed)


class TestBundle:
    def test_label_propagation(self):
        bundle = build_small_bundle()
        for w in bundle.windows:
            assert w.labels == bundle.windows[0].labels or w.demo_index != bundle.windows[0].demo_index
            assert set(w.labels) == {"temporal", "physical"}

    def test_split_hygiene(self):
        bundle = build_small_bundle()
        by_demo = {}
        for w in bundle.windows:
            by_demo.setdefault(w.demo_index, set()).add(w.split)
        assert all(len(s) == 1 for s in by_demo.values())
        assert any(w.split == "val" for w in bundle.windows)

    def test_normalization_train_mean_zero(self):
        bundle = build_small_bundle()
        norm = bundle.normalization
        train = np.concatenate([w.sequence for w in bundle.split_windows("train")], axis=0)
        scaled = norm.apply(train)
        live = [i for i in range(train.shape[1]) if i not in norm.flagged]
        np.testing.assert_allclose(scaled[:, live].mean(axis=0), 0.0, atol=1e-10)

    def test_normalization_roundtrip(self):
        bundle = build_small_bundle()
        rng = np.random.default_rng(1)
        x = rng.normal(size=bundle.state_dim)
        back = bundle.normalization.invert(bundle.normalization.apply(x))
        assert np.max(np.abs(back - x)) < 1e-12

    def test_constant_channel_flagged_and_passthrough(self):
        demos = [make_demo(T=2000, seed=i) for i in range(2)]
        for d in demos:
            d.tau[:, 1] = 3.25  # force a constant channel
        bundle = ds.build_bundle(demos, width=50, hop=10, stride=20, seed=0)
        norm = bundle.normalization
        const_channel = 2 * 3 + 1  # tau block starts at 2J=6; joint 1 -> index 7
        assert const_channel in norm.flagged
        assert norm.apply(np.full(bundle.state_dim, 3.25))[const_channel] == pytest.approx(3.25)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        bundle = build_small_bundle()
        path = tmp_path / "data.mmds"
        ds.save(bundle, path)
        loaded = ds.load(path)
        assert len(loaded.windows) == len(bundle.windows)
        assert loaded.directive_names == bundle.directive_names
        assert loaded.dt == bundle.dt
        np.testing.assert_array_equal(loaded.normalization.mean, bundle.normalization.mean)
        for a, b in zip(loaded.windows, bundle.windows):
            np.testing.assert_array_equal(a.sequence, b.sequence)
            assert a.labels == b.labels and a.split == b.split and a.demo_index == b.demo_index

    def test_wrong_magic_is_corrupt(self, tmp_path):
        path = tmp_path / "bad.mmds"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CorruptFileError, match="corrupt"):
            ds.load(path)

    def test_future_version_rejected(self, tmp_path):
        bundle = build_small_bundle()
        path = tmp_path / "data.mmds"
        ds.save(bundle, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError, match="version mismatch"):
            ds.load(path)

    def test_save_deterministic(self, tmp_path):
        bundle = build_small_bundle()
        p1, p2 = tmp_path / "a.mmds", tmp_path / "b.mmds"
        ds.save(bundle, p1)
        ds.save(bundle, p2)
        assert p1.read_bytes() == p2.read_bytes()
