"""Scene, renderer, oracle and reference-deskew tests.

The hand-derived cases here pin down the sampling geometry; the heavier
equivalence sweeps (all view angles, big stacks) live in the acceptance
suite.
"""

import math

import numpy as np
import pytest

from skewstream import phantom as ph
from skewstream import pipeline as pl
from skewstream.errors import ParameterError
from skewstream.geometry import (
    SheetGeometry,
    native_shear_px,
    view_transform,
)


def geom(**kw):
    base = dict(
        alpha_deg=60.0,
        scan_step_um=0.2,
        pixel_pitch_um=0.1,
        slice_count=6,
        frame_width_px=6,
        frame_height_px=8,
    )
    base.update(kw)
    return SheetGeometry(**base)


class TestPrimitives:
    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            ph.Primitive("cube", (0, 0, 0), 1.0, 100)

    def test_intensity_range(self):
        with pytest.raises(ParameterError):
            ph.sphere((0, 0, 0), 1.0, 70000)

    def test_cylinder_needs_axis(self):
        with pytest.raises(ParameterError):
            ph.Primitive("cylinder", (0, 0, 0), 1.0, 100)
        with pytest.raises(ParameterError):
            ph.cylinder((0, 0, 0), 1.0, 100, axis=(0, 0, 0))

    def test_radius_positive(self):
        with pytest.raises(ParameterError):
            ph.sphere((0, 0, 0), 0.0, 100)

    def test_center_inside_extent(self):
        with pytest.raises(ParameterError, match="outside extent"):
            ph.PhantomScene(
                primitives=(ph.sphere((5, 0, 0), 1.0, 100),),
                extent_um=(2, 2, 2),
            )

    def test_hard_sphere_values(self):
        s = ph.sphere((1, 1, 1), 0.5, 1000)
        pts = np.array([[1, 1, 1], [1, 1, 1.49], [1, 1, 1.51]])
        np.testing.assert_array_equal(s.evaluate(pts), [1000, 1000, 0])

    def test_soft_edge_is_linear_ramp(self):
        s = ph.sphere((0, 0, 0), 1.0, 1000, soft_edge_um=0.4)
        # ramp runs from r-e/2=0.8 (full) to r+e/2=1.2 (zero)
        pts = np.array([[0.8, 0, 0], [1.0, 0, 0], [1.1, 0, 0], [1.2, 0, 0]])
        np.testing.assert_allclose(s.evaluate(pts), [1000, 500, 250, 0], atol=1e-9)

    def test_cylinder_distance_is_axial(self):
        c = ph.cylinder((0, 0, 0), 0.5, 1000, axis=(1, 0, 0))
        # anywhere along x is inside; off-axis in y/z is not
        pts = np.array([[37.0, 0, 0], [0, 0.6, 0]])
        np.testing.assert_array_equal(c.evaluate(pts), [1000, 0])

    def test_scene_zero_outside_extent(self):
        sc = ph.PhantomScene(
            primitives=(ph.cylinder((1, 1, 1), 0.5, 1000, axis=(1, 0, 0)),),
            extent_um=(2, 2, 2),
        )
        assert sc.evaluate(np.array([[3.0, 1.0, 1.0]]))[0] == 0.0
        assert sc.evaluate(np.array([[1.5, 1.0, 1.0]]))[0] == 1000.0

    def test_max_combine(self):
        sc = ph.PhantomScene(
            primitives=(
                ph.sphere((1, 1, 1), 0.5, 300),
                ph.sphere((1, 1, 1), 0.5, 900),
            ),
            extent_um=(2, 2, 2),
        )
        assert sc.evaluate(np.array([[1.0, 1.0, 1.0]]))[0] == 900.0


class TestRenderSkewedSlice:
    def test_empty_scene_gives_zero_frame(self):
        sc = ph.PhantomScene(primitives=(), extent_um=(5, 5, 5))
        f = ph.render_skewed_slice(sc, geom(), 2)
        assert f.pixels.max() == 0
        assert f.slice_index == 2

    def test_slice_index_validated(self):
        sc = ph.PhantomScene(primitives=(), extent_um=(5, 5, 5))
        with pytest.raises(ParameterError):
            ph.render_skewed_slice(sc, geom(), 6)
        with pytest.raises(ParameterError):
            ph.render_skewed_slice(sc, geom(), -1)

    def test_point_source_on_one_sheet_plane(self):
        # invert the pixel->sample map: slice 3, row j=4, col x=2 sits at
        # (0.2, 3*0.2 + 4*0.1*cos60, 4*0.1*sin60)
        g = geom()
        a = math.radians(60.0)
        center = (0.2, 0.6 + 4 * 0.1 * math.cos(a), 4 * 0.1 * math.sin(a))
        sc = ph.PhantomScene(
            primitives=(ph.point(center, 5000, radius_um=0.02),),
            extent_um=(0.6, 2.0, 0.8),
        )
        stack = ph.render_stack(sc, g)
        for i, f in enumerate(stack):
            if i == 3:
                assert f.pixels[4, 2] == 5000
                lit = np.argwhere(f.pixels > 0)
                np.testing.assert_array_equal(lit, [[4, 2]])
            else:
                assert f.pixels.max() == 0

    def test_cylinder_shifts_by_one_shear_per_slice(self):
        # axis along the sheet normal: consecutive sheet planes see the
        # same disc, displaced by exactly the per-slice shear (here 1 px)
        g = geom(frame_height_px=10, frame_width_px=4)
        assert native_shear_px(g) == pytest.approx(1.0)
        a = math.radians(60.0)
        axis = (0.0, math.sin(a), -math.cos(a))
        sc = ph.PhantomScene(
            primitives=(
                ph.cylinder((0.2, 1.5, 0.4), 0.15, 10000, axis=axis,
                            soft_edge_um=0.1),
            ),
            extent_um=(1.0, 3.0, 1.0),
        )
        stack = ph.render_stack(sc, g)
        assert any(f.pixels.max() > 0 for f in stack)
        h = g.frame_height_px
        for i in range(g.slice_count - 1):
            np.testing.assert_array_equal(
                stack[i + 1].pixels[: h - 1], stack[i].pixels[1:]
            )

    def test_noise_deterministic_per_seed(self):
        sc = ph.PhantomScene(
            primitives=(ph.sphere((0.3, 0.6, 0.3), 0.25, 800,
                                  soft_edge_um=0.1),),
            extent_um=(0.6, 2.0, 0.8),
        )
        g = geom()
        s1 = ph.render_stack(sc, g, noise_seed=42)
        s2 = ph.render_stack(sc, g, noise_seed=42)
        s3 = ph.render_stack(sc, g, noise_seed=43)
        for a, b in zip(s1, s2):
            np.testing.assert_array_equal(a.pixels, b.pixels)
        assert any(
            not np.array_equal(a.pixels, c.pixels) for a, c in zip(s1, s3)
        )
        clean = ph.render_stack(sc, g)
        assert any(
            not np.array_equal(a.pixels, c.pixels) for a, c in zip(s1, clean)
        )


class TestVoxelGrid:
    def scene(self):
        return ph.PhantomScene(
            primitives=(ph.sphere((1.0, 1.5, 1.0), 0.5, 10000,
                                  soft_edge_um=0.2),),
            extent_um=(2.0, 3.0, 2.0),
        )

    def test_dims_cover_extent(self):
        vox = ph.voxelize(self.scene(), 0.1)
        assert vox.dims == (21, 31, 21)
        assert vox.intensities.shape == (21, 31, 21)

    def test_values_are_scene_samples(self):
        sc = self.scene()
        vox = ph.voxelize(sc, 0.1)
        pt = np.array([[0.5, 1.2, 0.8]])  # indices (5, 12, 8)
        expect = np.rint(sc.evaluate(pt)[0])
        assert vox.intensities[8, 12, 5] == expect

    def test_validation(self):
        with pytest.raises(ParameterError):
            ph.VoxelGrid(np.zeros((2, 2, 2), dtype=np.uint8), 0.1)
        with pytest.raises(ParameterError):
            ph.VoxelGrid(np.zeros((2, 2), dtype=np.uint16), 0.1)
        with pytest.raises(ParameterError):
            ph.VoxelGrid(np.zeros((2, 2, 2), dtype=np.uint16), 0.0)


class TestOracleProject:
    def scene(self):
        return ph.PhantomScene(
            primitives=(ph.sphere((1.0, 1.5, 1.0), 0.5, 10000,
                                  soft_edge_um=0.2),),
            extent_um=(2.0, 3.0, 2.0),
        )

    def test_zero_angle_equals_side_mip(self):
        vox = ph.voxelize(self.scene(), 0.1)
        out = ph.oracle_project(vox, 0.0)
        np.testing.assert_array_equal(out, vox.intensities.max(axis=1).astype(float))

    @pytest.mark.parametrize("angle", [20.0, 45.0, 70.0])
    def test_sphere_projects_to_disc(self, angle):
        vox = ph.voxelize(self.scene(), 0.1)
        out = ph.oracle_project(vox, angle)
        # half-maximum area of the disc recovers the radius within a voxel
        area = (out >= 5000).sum()
        r_est = math.sqrt(area / math.pi) * 0.1
        assert r_est == pytest.approx(0.5, abs=0.1)

    def test_explicit_t_coordinates(self):
        vox = ph.voxelize(self.scene(), 0.1)
        t = np.arange(0.0, 2.01, 0.1)
        out = ph.oracle_project(vox, 0.0, t_um=t)
        np.testing.assert_array_equal(out, vox.intensities.max(axis=1).astype(float))


class TestReferenceDeskew:
    def test_single_frame_unchanged(self):
        g = geom(slice_count=1, frame_height_px=4, frame_width_px=3)
        f = np.arange(12, dtype=np.uint16).reshape(4, 3)
        out = ph.reference_deskew([f], g, 1.5)
        np.testing.assert_array_equal(out, f)

    def test_two_frames_abut_at_shear_h(self):
        g = geom(slice_count=2, frame_height_px=2, frame_width_px=2)
        f0 = np.array([[1, 2], [3, 4]], dtype=np.uint16)
        f1 = np.array([[5, 6], [7, 8]], dtype=np.uint16)
        out = ph.reference_deskew([f0, f1], g, 2.0)
        np.testing.assert_array_equal(out, np.vstack([f0, f1]))

    def test_three_frame_hand_example(self):
        g = geom(slice_count=3, frame_height_px=2, frame_width_px=2)
        frames = [
            np.array([[1, 2], [3, 4]], dtype=np.uint16),
            np.array([[5, 0], [0, 1]], dtype=np.uint16),
            np.array([[2, 9], [6, 3]], dtype=np.uint16),
        ]
        out = ph.reference_deskew(frames, g, 1.0)
        np.testing.assert_array_equal(out, [[1, 2], [5, 4], [2, 9], [6, 3]])

    def test_inconsistent_sizes_rejected(self):
        g = geom(slice_count=2)
        with pytest.raises(ParameterError, match="frame 1"):
            ph.reference_deskew(
                [np.zeros((2, 2), dtype=np.uint16),
                 np.zeros((3, 2), dtype=np.uint16)],
                g, 1.0,
            )

    def test_accepts_rawframes(self):
        g = geom(slice_count=2, frame_height_px=2, frame_width_px=2)
        frames = [
            pl.RawFrame(np.full((2, 2), 5, dtype=np.uint16), 0),
            pl.RawFrame(np.full((2, 2), 9, dtype=np.uint16), 1),
        ]
        out = ph.reference_deskew(frames, g, 0.0)
        np.testing.assert_array_equal(out, np.full((2, 2), 9))

    def test_streaming_matches_reference_nearest(self):
        rng = np.random.default_rng(19)
        for trial in range(10):
            n = int(rng.integers(2, 7))
            h = int(rng.integers(2, 9))
            w = int(rng.integers(2, 9))
            s = float(rng.uniform(0.0, 2.0))
            g = SheetGeometry(
                alpha_deg=60.0, scan_step_um=0.2, pixel_pitch_um=0.1,
                slice_count=n, frame_width_px=w, frame_height_px=h,
            )
            frames = [
                pl.RawFrame(
                    rng.integers(0, 65535, size=(h, w)).astype(np.uint16), i
                )
                for i in range(n)
            ]
            canvas = pl.ProjectionCanvas(g, s, interp="nearest")
            for f in frames:
                canvas.place(f)
            streaming = canvas.finalize_global()
            reference = ph.reference_deskew(frames, g, s, interp="nearest")
            np.testing.assert_array_equal(streaming, reference)

    def test_streaming_matches_reference_linear(self):
        rng = np.random.default_rng(23)
        for trial in range(6):
            n = int(rng.integers(2, 6))
            h = int(rng.integers(3, 8))
            w = int(rng.integers(2, 6))
            s = float(rng.uniform(0.2, 1.8))
            g = SheetGeometry(
                alpha_deg=60.0, scan_step_um=0.2, pixel_pitch_um=0.1,
                slice_count=n, frame_width_px=w, frame_height_px=h,
            )
            frames = [
                pl.RawFrame(
                    rng.integers(0, 65535, size=(h, w)).astype(np.uint16), i
                )
                for i in range(n)
            ]
            canvas = pl.ProjectionCanvas(g, s, interp="linear")
            for f in frames:
                canvas.place(f)
            streaming = canvas.finalize_global()
            reference = ph.reference_deskew(frames, g, s, interp="linear")
            # the two lerp formulations may land half a ULP apart at a
            # rounding boundary
            assert np.abs(
                streaming.astype(int) - reference.astype(int)
            ).max() <= 1


class TestNativeAngleOracle:
    def test_cylinder_native_view_matches_oracle(self):
        # small version of the shear-warp equivalence: native angle only
        alpha = 45.0
        g = SheetGeometry(
            alpha_deg=alpha, scan_step_um=0.1, pixel_pitch_um=0.1,
            slice_count=48, frame_width_px=24, frame_height_px=40,
        )
        a = math.radians(alpha)
        sc = ph.PhantomScene(
            primitives=(
                ph.cylinder((1.2, 3.0, 1.4), 0.7, 10000, axis=(1, 0, 0),
                            soft_edge_um=0.3),
                ph.sphere((1.2, 1.6, 0.9), 0.5, 8000, soft_edge_um=0.3),
            ),
            extent_um=(2.4, 8.0, 3.0),
        )
        stack = ph.render_stack(sc, g)
        s0 = native_shear_px(g)
        vt = view_transform(g, shear_px=s0)
        assert vt.view_angle_deg == pytest.approx(90 - alpha)
        canvas = pl.ProjectionCanvas(g, s0, interp="linear")
        for f in stack:
            canvas.place(f)
        img = pl.warp_projection(canvas.finalize_global(), vt.warp_scale).astype(float)

        # oracle on a dense grid covering what the sweep sampled
        vox = ph.voxelize(sc, 0.1, extent_um=(
            (g.frame_width_px - 1) * 0.1,
            (g.slice_count - 1) * 0.1 + (g.frame_height_px - 1) * 0.1 * math.cos(a),
            (g.frame_height_px - 1) * 0.1 * math.sin(a),
        ))
        t = np.arange(img.shape[0]) * vt.out_pitch_um
        oracle = ph.oracle_project(vox, vt.view_angle_deg, t_um=t)
        peak = max(img.max(), oracle.max())
        rms = math.sqrt(np.mean((img - oracle) ** 2)) / peak
        assert rms < 0.02


class TestSceneIO:
    def scene(self):
        return ph.PhantomScene(
            primitives=(
                ph.sphere((1, 1, 1), 0.4, 9000, soft_edge_um=0.2),
                ph.cylinder((1, 2, 1), 0.3, 7000, axis=(1, 0, 0)),
                ph.point((0.5, 0.5, 0.5), 5000),
            ),
            extent_um=(2.0, 4.0, 2.0),
        )

    def test_round_trip(self, tmp_path):
        path = tmp_path / "scene.json"
        ph.save_scene(self.scene(), path)
        back = ph.load_scene(path)
        assert back == self.scene()

    def test_rejects_unknown_kind(self):
        with pytest.raises(ParameterError, match="bad scene"):
            ph.scene_from_dict(
                {
                    "extent_um": [1, 1, 1],
                    "primitives": [
                        {"kind": "cube", "center_um": [0, 0, 0], "intensity": 5}
                    ],
                }
            )

    def test_rejects_overrange_intensity(self):
        with pytest.raises(ParameterError, match="bad scene"):
            ph.scene_from_dict(
                {
                    "extent_um": [1, 1, 1],
                    "primitives": [
                        {
                            "kind": "sphere",
                            "center_um": [0, 0, 0],
                            "radius_um": 0.1,
                            "intensity": 99999,
                        }
                    ],
                }
            )

    def test_rejects_missing_extent(self):
        with pytest.raises(ParameterError, match="bad scene"):
            ph.scene_from_dict({"primitives": []})


class TestImageExport:
    def test_png16_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 65536, size=(9, 7)).astype(np.uint16)
        path = tmp_path / "img.png"
        ph.save_png16(path, img)
        np.testing.assert_array_equal(ph.load_png16(path), img)

    def test_raw_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 65536, size=(5, 11)).astype(np.uint16)
        path = tmp_path / "img.raw"
        ph.save_raw_u16(path, img)
        np.testing.assert_array_equal(ph.load_raw_u16(path, (5, 11)), img)

    def test_raw_size_mismatch(self, tmp_path):
        path = tmp_path / "img.raw"
        ph.save_raw_u16(path, np.zeros((2, 2), dtype=np.uint16))
        with pytest.raises(ParameterError, match="4 pixels"):
            ph.load_raw_u16(path, (3, 3))
