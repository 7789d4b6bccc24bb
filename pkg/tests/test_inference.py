import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmotion import inference as inf
from modmotion.dataset import Normalization
from modmotion.model import LatentSpec, ModelConfig, SeqCVAE
from modmotion.simworld import ScenarioConfig

LOG = inf.WeightScheme("inverse_log")

# frozen from direct evaluation of the blend formula with w1=1/ln2, w2=1/ln3
BLEND_T2_EXPECTED = (1.0 / math.log(2.0)) / (1.0 / math.log(2.0) + 1.0 / math.log(3.0))


class TestWeight:
    def test_inverse_log_age_one(self):
        assert inf.weight(LOG, 1) == pytest.approx(1.0 / math.log(2), abs=1e-12)

    def test_inverse(self):
        assert inf.weight(inf.WeightScheme("inverse"), 3) == pytest.approx(0.25)

    def test_exponential(self):
        scheme = inf.WeightScheme("exponential", m=0.01)
        assert inf.weight(scheme, 100) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_age_zero_rejected(self):
        with pytest.raises(inf.BlendError):
            inf.weight(LOG, 0)

    @given(st.integers(1, 200))
    def test_weights_strictly_positive(self, age):
        for scheme in (LOG, inf.WeightScheme("inverse"), inf.WeightScheme("exponential", 0.05), inf.WeightScheme("none")):
            assert inf.weight(scheme, age) > 0.0

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            inf.WeightScheme("quadratic")


def fill_buffer(chunks: dict[int, np.ndarray], window=50) -> inf.ChunkBuffer:
    buf = inf.ChunkBuffer(window=window)
    for g in sorted(chunks):
        buf.push(g, chunks[g])
    return buf


class TestBlend:
    def test_first_tick_returns_chunk_step_one(self):
        chunk = np.arange(50, dtype=float).reshape(50, 1)
        buf = fill_buffer({0: chunk})
        np.testing.assert_array_equal(inf.blend(buf, 0, LOG), chunk[1])

    def test_worked_example_tick_two(self):
        c2 = np.zeros((50, 1))
        c2[1] = 1.0  # newest chunk predicts 1 at its step 1
        c1 = np.zeros((50, 1))  # older chunk predicts 0 at its step 2
        c0 = np.full((50, 1), 99.0)  # excluded by the age bounds at t=2
        buf = fill_buffer({0: c0, 1: c1, 2: c2})
        out = inf.blend(buf, 2, LOG)
        assert out[0] == pytest.approx(BLEND_T2_EXPECTED, abs=1e-12)
        assert out[0] == pytest.approx(0.6131, abs=5e-5)

    def test_idempotent_on_agreeing_chunks(self):
        v = np.array([0.7, -1.2])
        chunks = {g: np.tile(v, (50, 1)) for g in range(6)}
        buf = fill_buffer(chunks)
        np.testing.assert_allclose(inf.blend(buf, 5, LOG), v, rtol=1e-12)

    def test_equal_weights_give_arithmetic_mean(self):
        rng = np.random.default_rng(0)
        chunks = {g: rng.normal(size=(50, 3)) for g in range(4)}
        buf = fill_buffer(chunks)
        out = inf.blend(buf, 3, inf.WeightScheme("exponential", m=1e-12))
        expected = np.mean([chunks[3 - (i - 1)][i] for i in range(1, 4)], axis=0)
        np.testing.assert_allclose(out, expected, rtol=1e-6)

    def test_scheme_none_uses_newest_raw(self):
        rng = np.random.default_rng(1)
        chunks = {g: rng.normal(size=(50, 2)) for g in range(5)}
        buf = fill_buffer(chunks)
        np.testing.assert_array_equal(inf.blend(buf, 4, inf.WeightScheme("none")), chunks[4][1])

    def test_log_base_invariance(self):
        # rescaling every weight by a constant cannot change the average
        rng = np.random.default_rng(2)
        chunks = {g: rng.normal(size=(50, 2)) for g in range(8)}
        buf = fill_buffer(chunks)
        t = 7
        natural = inf.blend(buf, t, LOG)
        acc, tot = 0.0, 0.0
        for age in range(1, t + 1):
            w = (1.0 / math.log(age + 1)) / math.log(10)  # base-10 variant
            acc = acc + w * chunks[t + 1 - age][age]
            tot += w
        np.testing.assert_allclose(natural, acc / tot, rtol=1e-12)

    def test_empty_buffer_rejected(self):
        with pytest.raises(inf.BlendError):
            inf.blend(inf.ChunkBuffer(window=50), 0, LOG)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 60), st.integers(0, 2**32 - 1))
    def test_convex_hull_property(self, t, seed):
        rng = np.random.default_rng(seed)
        window = 50
        chunks = {g: rng.normal(size=(window, 2)) for g in range(max(0, t - window + 2), t + 1)}
        buf = fill_buffer(chunks, window=window)
        out = inf.blend(buf, t, LOG)
        if t == 0:
            contribs = [chunks[0][1]]
        else:
            contribs = [chunks[t + 1 - i][i] for i in range(1, min(t, window - 1) + 1)]
        lo = np.min(contribs, axis=0) - 1e-12
        hi = np.max(contribs, axis=0) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)


class TestChunkBuffer:
    def test_eviction_keeps_at_most_window_minus_one(self):
        buf = inf.ChunkBuffer(window=5)
        for g in range(20):
            buf.push(g, np.zeros((5, 1)))
            assert len(buf) <= 4
        assert sorted(buf.entries) == [16, 17, 18, 19]


class TestMailbox:
    def test_last_writer_wins(self):
        box = inf.LatentMailbox(3)
        box.write(np.array([1.0, 0.0, 0.0]))
        box.write(np.array([0.0, 2.0, 0.0]))
        values, scheme, reset = box.take()
        np.testing.assert_array_equal(values, [0.0, 2.0, 0.0])
        assert scheme is None and not reset
        assert box.take() == (None, None, False)

    def test_write_dim_and_readback(self):
        box = inf.LatentMailbox(3)
        out = box.write_dim(1, 2.0, current=np.zeros(3))
        np.testing.assert_array_equal(out, [0.0, 2.0, 0.0])
        np.testing.assert_array_equal(box.peek(), [0.0, 2.0, 0.0])

    def test_dim_out_of_range(self):
        box = inf.LatentMailbox(3)
        with pytest.raises(IndexError):
            box.write_dim(3, 1.0, current=np.zeros(3))

    def test_wrong_size_rejected(self):
        box = inf.LatentMailbox(3)
        with pytest.raises(ValueError):
            box.write(np.zeros(4))


def tiny_engine_setup():
    scenario = ScenarioConfig(task="wiping", noise_scale=0.0)
    D = 3 * scenario.joints
    config = ModelConfig(
        state_dim=D, window=12, hidden_dim=8,
        latent=LatentSpec(2, 1, ("physical", "temporal")),
    )
    model = SeqCVAE(config, rng=np.random.default_rng(5))
    norm = Normalization(mean=np.zeros(D), std=np.ones(D))
    return model, norm, scenario


class TestRunOnline:
    def test_empty_stream_matches_constant_command(self):
        model, norm, scenario = tiny_engine_setup()
        engine = inf.EngineConfig(ticks=30, command_update_stride=20)
        a = inf.run_online(model, norm, scenario, engine, schedule=None)
        b = inf.run_online(model, norm, scenario, engine, schedule=[])
        np.testing.assert_array_equal(a.trace.q, b.trace.q)
        np.testing.assert_array_equal(a.commands, b.commands)

    def test_schedule_applies_at_regeneration_and_is_logged(self):
        model, norm, scenario = tiny_engine_setup()
        z = np.array([0.0, 2.0, 0.0])
        engine = inf.EngineConfig(ticks=30, command_update_stride=20)
        result = inf.run_online(model, norm, scenario, engine, schedule=[(10, z)])
        updates = [e for e in result.events if e["kind"] == "latent_update"]
        assert len(updates) == 2
        assert updates[1]["tick"] == 10 and updates[1]["payload"]["values"] == [0.0, 2.0, 0.0]
        changed = inf.run_online(model, norm, scenario, engine)
        assert not np.array_equal(result.trace.q, changed.trace.q)

    def test_mailbox_write_visible_at_next_regeneration(self):
        model, norm, scenario = tiny_engine_setup()
        box = inf.LatentMailbox(3)
        seen = []

        def on_tick(t, st, z, scheme):
            if t == 5:
                box.write(np.array([1.5, 0.0, 0.0]))
            seen.append((t, z.copy()))

        engine = inf.EngineConfig(ticks=12, command_update_stride=20)
        inf.run_online(model, norm, scenario, engine, mailbox=box, on_tick=on_tick)
        np.testing.assert_array_equal(seen[5][1], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(seen[6][1], [1.5, 0.0, 0.0])

    def test_deterministic(self):
        model, norm, scenario = tiny_engine_setup()
        engine = inf.EngineConfig(ticks=20, command_update_stride=20, follower_noise=0.005, seed=9)
        a = inf.run_online(model, norm, scenario, engine)
        b = inf.run_online(model, norm, scenario, engine)
        np.testing.assert_array_equal(a.trace.q, b.trace.q)

    def test_state_events_every_tick(self):
        model, norm, scenario = tiny_engine_setup()
        engine = inf.EngineConfig(ticks=15, command_update_stride=20)
        result = inf.run_online(model, norm, scenario, engine)
        states = [e for e in result.events if e["kind"] == "state"]
        assert len(states) == 15
        assert [e["tick"] for e in states] == list(range(15))
        assert result.trace.length == 15 * 20 + 1


class TestJerk:
    def test_linear_command_has_zero_jerk(self):
        cmd = np.linspace(0, 1, 30)[:, None] * np.ones((1, 9))
        assert inf.command_jerk(cmd, 3) == pytest.approx(0.0, abs=1e-20)

    def test_step_change_has_positive_jerk(self):
        cmd = np.zeros((30, 9))
        cmd[15:, 0] = 1.0
        assert inf.command_jerk(cmd, 3) > 0.0


class TestEventLog:
    def test_roundtrip(self, tmp_path):
        events = [
            {"tick": 0, "kind": "latent_update", "payload": {"values": [0, 0, 0]}},
            {"tick": 0, "kind": "state", "payload": {"q": [0.1]}},
        ]
        path = tmp_path / "run.jsonl"
        inf.write_event_log(path, events, meta={"task": "wiping"})
        meta, loaded = inf.read_event_log(path)
        assert meta == {"task": "wiping"}
        assert loaded == events
