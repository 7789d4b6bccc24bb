import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmotion import metrics as mx
from modmotion import simworld as sw


def wiping_config():
    return sw.ScenarioConfig(task="wiping", noise_scale=0.0)


class TestExtractFeature:
    def test_cycle_time_matches_generator(self):
        cfg = wiping_config()
        demo = sw.synthesize_demo(cfg, {"temporal": 0.5, "physical": 0.5}, seed=1)
        y = mx.extract_feature(demo, mx.FeatureExtractor("cycle_time"), cfg)
        assert y == pytest.approx(2.5, abs=0.05)

    def test_min_torque_matches_strong_press(self):
        cfg = wiping_config()
        demo = sw.synthesize_demo(cfg, {"temporal": 0.5, "physical": 1.0}, seed=1)
        y = mx.extract_feature(demo, mx.FeatureExtractor("min_torque_joint4"), cfg)
        assert y == pytest.approx(-2.5, abs=0.02)

    def test_final_q2(self):
        cfg = sw.ScenarioConfig(task="pick_and_place", noise_scale=0.0)
        demo = sw.synthesize_demo(cfg, {"temporal": 0.5, "spatial": 0.0}, seed=1)
        y = mx.extract_feature(demo, mx.FeatureExtractor("final_q2"), cfg)
        assert y == pytest.approx(0.6, abs=0.01)

    def test_insufficient_cycles(self):
        cfg = wiping_config()
        demo = sw.synthesize_demo(cfg, {"temporal": 0.0, "physical": 0.5}, seed=1)
        cut = int((1.8 + 2 * 4.0) / cfg.dt)  # two cycles only
        short = sw.Demonstration(
            q=demo.q[:cut], dq=demo.dq[:cut], tau=demo.tau[:cut],
            dt=demo.dt, labels=demo.labels, meta=demo.meta,
        )
        with pytest.raises(mx.FeatureError, match="insufficient cycles"):
            mx.extract_feature(short, mx.FeatureExtractor("cycle_time"), cfg)

    def test_extractor_table(self):
        assert mx.extractor_for("wiping", "temporal").kind == "cycle_time"
        assert mx.extractor_for("wiping", "physical").kind == "min_torque_joint4"
        assert mx.extractor_for("pick_and_place", "spatial").kind == "final_q2"
        with pytest.raises(mx.FeatureError):
            mx.extractor_for("wiping", "spatial")


class TestFitLine:
    def test_exact_points(self):
        a, b = 3.7, -1.2
        xs = [0.0, 0.5, 1.0]
        ys = [a * x + b for x in xs]
        slope, intercept = mx.fit_line(xs, ys)
        assert slope == pytest.approx(a, abs=1e-12)
        assert intercept == pytest.approx(b, abs=1e-12)

    def test_recovers_published_wiping_temporal_line(self):
        xs = [0.0, 0.5, 1.0]
        ys = [12.414, 9.2245, 6.035]  # points generated on y = -6.379x + 12.414
        slope, intercept = mx.fit_line(xs, ys)
        assert slope == pytest.approx(-6.379, abs=1e-9)
        assert intercept == pytest.approx(12.414, abs=1e-9)

    def test_constant_ys(self):
        slope, intercept = mx.fit_line([0.0, 0.5, 1.0], [2.0, 2.0, 2.0])
        assert slope == 0.0 and intercept == pytest.approx(2.0)

    def test_degenerate_x(self):
        with pytest.raises(ValueError, match="degenerate"):
            mx.fit_line([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_residuals_orthogonal_to_design(self, seed):
        rng = np.random.default_rng(seed)
        xs = rng.normal(size=6)
        if np.ptp(xs) < 1e-6:
            return
        ys = rng.normal(size=6)
        slope, intercept = mx.fit_line(xs, ys)
        resid = ys - (slope * xs + intercept)
        assert abs(resid.sum()) < 1e-9
        assert abs((resid * xs).sum()) < 1e-9


class TestLatentToX:
    @pytest.mark.parametrize("z,x", [(-2.0, 0.0), (-1.0, 0.25), (0.0, 0.5), (1.0, 0.75), (2.0, 1.0)])
    def test_command_grid_mapping(self, z, x):
        assert mx.latent_to_x(z) == pytest.approx(x, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            mx.latent_to_x(2.5)

    @given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
    def test_affine_and_monotone(self, z1, z2):
        if z1 + 1e-9 < z2:
            assert mx.latent_to_x(z1) < mx.latent_to_x(z2)
        mid = mx.latent_to_x((z1 + z2) / 2.0)
        assert mid == pytest.approx((mx.latent_to_x(z1) + mx.latent_to_x(z2)) / 2.0, abs=1e-12)


class TestMde:
    def test_zero_for_identical_lines(self):
        ref = mx.ReferenceLine(-6.379, 12.414)
        assert mx.mde(ref, (-6.379, 12.414)) == 0.0

    def test_worked_example(self):
        assert mx.mde(mx.ReferenceLine(2.0, 4.0), (1.0, 2.0)) == pytest.approx(math.sqrt(0.5), abs=1e-12)

    def test_total_miss(self):
        assert mx.mde(mx.ReferenceLine(2.0, 4.0), (0.0, 0.0)) == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_not_symmetric(self):
        ref = mx.ReferenceLine(2.0, 4.0)
        swapped = mx.ReferenceLine(1.0, 2.0)
        assert mx.mde(ref, (1.0, 2.0)) != pytest.approx(mx.mde(swapped, (2.0, 4.0)))

    def test_undefined_for_zero_coefficients(self):
        with pytest.raises(ValueError, match="MDE undefined"):
            mx.mde(mx.ReferenceLine(0.0, 4.0), (1.0, 1.0))
        with pytest.raises(ValueError, match="MDE undefined"):
            mx.mde(mx.ReferenceLine(2.0, 0.0), (1.0, 1.0))


class TestTsr:
    def test_paper_format(self):
        outcomes = [(True, None)] * 8 + [(False, "premature stop")]
        result = mx.tsr(outcomes)
        assert str(result) == "88.9% [8/9]"
        assert result.ratio == pytest.approx(8 / 9)

    def test_all_fail(self):
        assert mx.tsr([(False, "x")] * 5).ratio == 0.0

    def test_all_pass(self):
        assert mx.tsr([(True, None)] * 5).ratio == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mx.tsr([])


class TestSynthesizedReference:
    def test_wiping_temporal_reference_matches_generator_map(self):
        # generator: period = 4 - 3 * y, so the reference line is y = -3x + 4
        cfg = wiping_config()
        ref, points = mx.synthesize_reference(cfg, "temporal", trials_per_level=2, seed=0)
        assert ref.slope == pytest.approx(-3.0, abs=0.1)
        assert ref.intercept == pytest.approx(4.0, abs=0.1)
        assert len(points) == 3 and all(len(p["trials"]) == 2 for p in points)

    def test_wiping_physical_reference(self):
        # torque floor = -0.5 - 2.0 * y
        cfg = wiping_config()
        ref, _ = mx.synthesize_reference(cfg, "physical", trials_per_level=2, seed=0)
        assert ref.slope == pytest.approx(-2.0, abs=0.05)
        assert ref.intercept == pytest.approx(-0.5, abs=0.05)

    def test_self_consistency_mde_zero(self):
        # re-fitting the reference's own level means must reproduce the line exactly
        cfg = wiping_config()
        ref, points = mx.synthesize_reference(cfg, "temporal", trials_per_level=2, seed=0)
        refit = mx.fit_line([p["x"] for p in points], [p["y"] for p in points])
        assert mx.mde(ref, refit) == pytest.approx(0.0, abs=1e-12)


def test_trace_from_events_roundtrip():
    cfg = wiping_config()
    demo = sw.synthesize_demo(cfg, {"temporal": 1.0, "physical": 0.5}, seed=0)
    events = [
        {"tick": t, "kind": "state", "payload": {"q": demo.q[t].tolist(), "dq": demo.dq[t].tolist(), "tau": demo.tau[t].tolist()}}
        for t in range(0, demo.length, 20)
    ]
    trace = mx.trace_from_events(events, dt=cfg.dt * 20)
    assert trace.length == len(events)
    y = mx.extract_feature(trace, mx.FeatureExtractor("cycle_time"), cfg)
    assert y == pytest.approx(1.0, abs=0.1)
