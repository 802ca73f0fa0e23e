"""Camera timing, trigger schedule, galvo, simulated camera, file replay."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skewstream import phantom as ph
from skewstream import pipeline as pl
from skewstream import source as src
from skewstream.clock import SystemClock, VirtualClock
from skewstream.errors import EndOfStream, MetadataError, ParameterError
from skewstream.geometry import SheetGeometry


def geom(n=4, w=6, h=8, alpha=60.0, step=0.2, pitch=0.1):
    return SheetGeometry(
        alpha_deg=alpha,
        scan_step_um=step,
        pixel_pitch_um=pitch,
        slice_count=n,
        frame_width_px=w,
        frame_height_px=h,
    )


def point_scene():
    # point emitter exactly on slice 0's sheet plane at pixel (j=4, x=3)
    a = math.radians(60.0)
    center = (0.3, 4 * 0.1 * math.cos(a), 4 * 0.1 * math.sin(a))
    return ph.PhantomScene(
        primitives=(ph.point(center, 6000, radius_um=0.02),),
        extent_um=(0.8, 2.0, 0.8),
    )


class TestCameraTiming:
    def test_defaults_give_paper_rate(self):
        t = src.CameraTiming(exposure_ms=0.1)
        assert t.frame_period_ms == pytest.approx(1.6)

    def test_validation(self):
        with pytest.raises(ParameterError):
            src.CameraTiming(exposure_ms=-0.1)
        with pytest.raises(ParameterError):
            src.CameraTiming(readout_ms=0.0)
        with pytest.raises(ParameterError):
            src.CameraTiming(trigger_mode="software")

    def test_with_exposure(self):
        t = src.CameraTiming(exposure_ms=0.1).with_exposure(5.0)
        assert t.exposure_ms == 5.0
        assert t.readout_ms == src.DEFAULT_READOUT_MS


class TestSchedule:
    def test_headline_stack_rate(self):
        # 50 slices at 0.1 ms exposure + 1.5 ms readout: 80 ms per stack,
        # 12.5 volumes per second
        t = src.CameraTiming(exposure_ms=0.1, readout_ms=1.5)
        s = src.schedule(t, geom(n=50))
        assert s.stack_period_ms == pytest.approx(80.0)
        assert s.volume_rate_hz == pytest.approx(12.5)

    def test_single_slice_zero_exposure(self):
        t = src.CameraTiming(exposure_ms=0.0, readout_ms=1.0)
        s = src.schedule(t, geom(n=1))
        assert s.stack_period_ms == pytest.approx(1.0)
        assert s.slice_count == 1

    def test_doubling_exposure_adds_only_exposure_term(self):
        g = geom(n=10)
        t1 = src.CameraTiming(exposure_ms=2.0, readout_ms=1.5)
        t2 = t1.with_exposure(4.0)
        s1 = src.schedule(t1, g)
        s2 = src.schedule(t2, g)
        assert s2.stack_period_ms - s1.stack_period_ms == pytest.approx(10 * 2.0)
        assert s2.volume_rate_hz == pytest.approx(1000 / (10 * 5.5))

    def test_galvo_step_issued_at_exposure_end(self):
        t = src.CameraTiming(exposure_ms=0.5, readout_ms=1.5)
        s = src.schedule(t, geom(n=3), settle_time_ms=1.0)
        np.testing.assert_allclose(s.exposure_start_ms, [0.0, 2.0, 4.0])
        np.testing.assert_allclose(s.exposure_end_ms, [0.5, 2.5, 4.5])
        np.testing.assert_allclose(s.galvo_step_issue_ms, s.exposure_end_ms)
        np.testing.assert_allclose(s.galvo_settled_ms, [1.5, 3.5, 5.5])

    @settings(max_examples=60, deadline=None)
    @given(
        exposure=st.floats(0.0, 10.0),
        readout=st.floats(0.05, 10.0),
        settle=st.floats(0.0, 12.0),
        n=st.integers(1, 64),
    )
    def test_ordering_property(self, exposure, readout, settle, n):
        t = src.CameraTiming(exposure_ms=exposure, readout_ms=readout)
        s = src.schedule(t, geom(n=n), settle_time_ms=settle)
        assert np.all(s.exposure_start_ms <= s.exposure_end_ms)
        assert np.all(s.exposure_end_ms <= s.galvo_step_issue_ms)
        assert np.all(s.galvo_step_issue_ms <= s.galvo_settled_ms)
        if n > 1:
            assert np.all(np.diff(s.exposure_start_ms) > 0)
            # settle fits inside readout <=> schedule is physically valid
            fits = settle <= readout + 1e-12
            ok = np.all(
                s.galvo_settled_ms[:-1] <= s.exposure_start_ms[1:] + 1e-9
            )
            assert bool(ok) == bool(fits)


class TestValidateSettle:
    def test_calibrated_readout_passes(self):
        t = src.CameraTiming(exposure_ms=0.1, readout_ms=1.5)
        rep = src.validate_settle(src.schedule(t, geom(n=50)), 1.0)
        assert rep.ok
        assert rep.violations == ()

    def test_slow_galvo_flags_every_gap(self):
        t = src.CameraTiming(exposure_ms=0.1, readout_ms=1.5)
        rep = src.validate_settle(src.schedule(t, geom(n=50)), 2.0)
        assert not rep.ok
        assert len(rep.violations) == 49
        v = rep.violations[0]
        assert v.available_ms == pytest.approx(1.5)
        assert v.needed_ms == pytest.approx(2.0)

    def test_single_slice_vacuously_passes(self):
        t = src.CameraTiming(exposure_ms=0.1, readout_ms=1.5)
        rep = src.validate_settle(src.schedule(t, geom(n=1)), 99.0)
        assert rep.ok

    def test_report_serializable(self):
        t = src.CameraTiming(exposure_ms=0.1, readout_ms=1.5)
        rep = src.validate_settle(src.schedule(t, geom(n=3)), 2.0)
        json.dumps(rep.as_dict())


class TestGalvoStaircase:
    def test_three_levels(self):
        g = geom(n=3, step=1.0)
        wf = src.galvo_staircase(g, volts_per_um=0.5)
        np.testing.assert_allclose(wf.levels_v, [0.0, 0.5, 1.0])

    def test_single_level(self):
        wf = src.galvo_staircase(geom(n=1), volts_per_um=0.5)
        np.testing.assert_allclose(wf.levels_v, [0.0])

    def test_scale_linearity(self):
        g = geom(n=5)
        a = src.galvo_staircase(g, volts_per_um=0.2)
        b = src.galvo_staircase(g, volts_per_um=0.4)
        np.testing.assert_allclose(b.levels_v, 2 * a.levels_v)

    def test_monotone_invariant(self):
        wf = src.galvo_staircase(geom(n=8), volts_per_um=1.0)
        assert np.all(np.diff(wf.levels_v) > 0)

    def test_bad_scale(self):
        with pytest.raises(ParameterError):
            src.galvo_staircase(geom(), volts_per_um=0.0)


class TestSimulatedCamera:
    def make(self, scene=None, sweeps=2, noise_seed=None, n=4,
             exposure=0.1, readout=1.5):
        scene = scene if scene is not None else point_scene()
        g = geom(n=n)
        cam = src.SimulatedCameraSource(
            scene, g,
            src.CameraTiming(exposure_ms=exposure, readout_ms=readout),
            clock=VirtualClock(),
            noise_seed=noise_seed,
            sweeps=sweeps,
        )
        return cam, g

    def test_timestamps_follow_schedule(self):
        cam, g = self.make()
        frames = [cam.next_frame() for _ in range(8)]
        period = 1.6e6  # ns
        for k, f in enumerate(frames):
            assert f.timestamp_ns == pytest.approx((k + 1) * period, abs=1)

    def test_slice_and_sweep_indices(self):
        cam, g = self.make(sweeps=2, n=3)
        frames = [cam.next_frame() for _ in range(6)]
        assert [f.slice_index for f in frames] == [0, 1, 2, 0, 1, 2]
        assert [f.sweep_index for f in frames] == [0, 0, 0, 1, 1, 1]

    def test_end_of_stream_after_configured_sweeps(self):
        cam, g = self.make(sweeps=1, n=4)
        for _ in range(4):
            cam.next_frame()
        with pytest.raises(EndOfStream):
            cam.next_frame()

    def test_content_matches_renderer(self):
        cam, g = self.make()
        f = cam.next_frame()
        expect = ph.render_skewed_slice(cam.scene, g, 0)
        np.testing.assert_array_equal(f.pixels, expect.pixels)

    def test_noise_deterministic_per_seed(self):
        cam1, _ = self.make(noise_seed=5, sweeps=1)
        cam2, _ = self.make(noise_seed=5, sweeps=1)
        for _ in range(4):
            np.testing.assert_array_equal(
                cam1.next_frame().pixels, cam2.next_frame().pixels
            )

    def test_exposure_change_takes_effect_next_frame(self):
        cam, g = self.make(sweeps=4)
        f1 = cam.next_frame()
        f2 = cam.next_frame()
        assert f2.timestamp_ns - f1.timestamp_ns == pytest.approx(1.6e6, abs=1)
        cam.set_exposure_ms(8.5)  # period becomes 10 ms
        f3 = cam.next_frame()
        assert f3.timestamp_ns - f2.timestamp_ns == pytest.approx(10e6, abs=1)

    def test_move_stage_shifts_content_oppositely(self):
        cam, g = self.make(sweeps=4)
        f = cam.next_frame()  # slice 0: point lit at (4, 3)
        assert f.pixels[4, 3] > 0
        cam.move_stage(dx_um=0.1)
        # sweep restarted: next frame is slice 0 of the next sweep
        f2 = cam.next_frame()
        assert f2.slice_index == 0
        assert f2.sweep_index == f.sweep_index + 1
        assert f2.pixels[4, 3] == 0
        assert f2.pixels[4, 2] > 0

    def test_move_stage_mid_sweep_restarts(self):
        cam, g = self.make(sweeps=4, n=4)
        cam.next_frame()
        cam.next_frame()  # mid-sweep
        cam.move_stage(dy_um=0.05)
        f = cam.next_frame()
        assert (f.sweep_index, f.slice_index) == (1, 0)

    def test_virtual_clock_has_zero_jitter(self):
        cam, g = self.make()
        for _ in range(5):
            cam.next_frame()
        stats = cam.jitter_stats_ms()
        assert stats["samples"] == 5
        assert stats["p99_ms"] == 0.0


class TestRealClockPacing:
    def test_mean_interval_within_five_percent(self):
        # 5 ms frame period on the real clock; the sleep-until pacing
        # must hold the mean interval, and p99 jitter is reported
        scene = ph.PhantomScene(primitives=(), extent_um=(1, 1, 1))
        g = geom(n=4, w=4, h=4)
        cam = src.SimulatedCameraSource(
            scene, g, src.CameraTiming(exposure_ms=1.0, readout_ms=4.0),
            clock=SystemClock(), sweeps=6,
        )
        ts = [cam.next_frame().timestamp_ns for _ in range(20)]
        intervals = np.diff(ts) / 1e6
        assert abs(intervals.mean() - 5.0) / 5.0 < 0.05
        stats = cam.jitter_stats_ms()
        assert stats["samples"] == 20
        assert stats["p99_ms"] >= 0.0


class TestStackFiles:
    def stack(self, n=5):
        rng = np.random.default_rng(31)
        g = geom(n=n, w=6, h=4)
        frames = [
            pl.RawFrame(rng.integers(0, 65535, size=(4, 6)).astype(np.uint16), i)
            for i in range(n)
        ]
        return g, frames

    def test_raw_round_trip(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.raw"
        src.write_stack_raw(path, frames, g)
        fs = src.open_stack(path)
        assert len(fs) == 5
        for f in frames:
            got = fs.next_frame()
            np.testing.assert_array_equal(got.pixels, f.pixels)

    def test_exhausted_source_raises(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.raw"
        src.write_stack_raw(path, frames, g)
        fs = src.open_stack(path)
        for _ in range(5):
            fs.next_frame()
        with pytest.raises(EndOfStream):
            fs.next_frame()

    def test_tiff_round_trip(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.tif"
        src.write_stack_tiff(path, frames, g)
        fs = src.open_stack(path)
        for f in frames:
            np.testing.assert_array_equal(fs.next_frame().pixels, f.pixels)

    def test_tiff_and_raw_give_identical_pipeline_output(self, tmp_path):
        g, frames = self.stack()
        src.write_stack_raw(tmp_path / "s.raw", frames, g)
        src.write_stack_tiff(tmp_path / "s.tif", frames, g)
        outs = []
        for name in ("s.raw", "s.tif"):
            fs = src.open_stack(tmp_path / name)
            canvas = pl.ProjectionCanvas(g, 1.0, interp="nearest")
            for _ in range(len(fs)):
                canvas.place(fs.next_frame())
            outs.append(canvas.finalize_global())
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_replay_deterministic(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.raw"
        src.write_stack_raw(path, frames, g)
        runs = []
        for _ in range(2):
            fs = src.open_stack(path)
            runs.append([fs.next_frame() for _ in range(len(fs))])
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a.pixels, b.pixels)
            assert a.timestamp_ns == b.timestamp_ns
            assert (a.slice_index, a.sweep_index) == (b.slice_index, b.sweep_index)

    def test_missing_sidecar_field_named(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.raw"
        src.write_stack_raw(path, frames, g)
        side = json.loads((tmp_path / "stack.json").read_text())
        del side["geometry"]["alpha_deg"]
        (tmp_path / "stack.json").write_text(json.dumps(side))
        with pytest.raises(MetadataError, match="geometry.alpha_deg"):
            src.open_stack(path)

    def test_missing_sidecar_file(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.raw"
        src.write_stack_raw(path, frames, g)
        (tmp_path / "stack.json").unlink()
        with pytest.raises(MetadataError, match="no sidecar"):
            src.open_stack(path)

    def test_raw_size_mismatch(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.raw"
        src.write_stack_raw(path, frames, g)
        data = path.read_bytes()
        path.write_bytes(data[:-10])  # truncate mid-frame
        with pytest.raises(MetadataError, match="multiple"):
            src.open_stack(path)

    def test_sidecar_frame_count_mismatch(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "stack.raw"
        src.write_stack_raw(path, frames, g)
        side = json.loads((tmp_path / "stack.json").read_text())
        side["frames"] = 7
        (tmp_path / "stack.json").write_text(json.dumps(side))
        with pytest.raises(MetadataError, match="sidecar says 7"):
            src.open_stack(path)

    def test_eight_bit_tiff_rejected(self, tmp_path):
        from PIL import Image

        g, _ = self.stack()
        path = tmp_path / "bad.tif"
        Image.fromarray(np.zeros((4, 6), dtype=np.uint8)).save(path)
        src.write_sidecar(path, g, src.CameraTiming())
        with pytest.raises(MetadataError, match="16-bit"):
            src.open_stack(path)

    def test_explicit_metadata_overrides_sidecar(self, tmp_path):
        g, frames = self.stack()
        path = tmp_path / "bare.raw"
        with open(path, "wb") as fh:
            for f in frames:
                fh.write(f.pixels.astype("<u2").tobytes())
        fs = src.open_stack(path, geom=g, timing=src.CameraTiming())
        assert len(fs) == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(MetadataError, match="no such stack"):
            src.open_stack(tmp_path / "nope.raw")
