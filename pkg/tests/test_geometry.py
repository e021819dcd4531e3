import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vexpress.errors import DegenerateGeometryError, FormatError, InvalidInputError
from vexpress.geometry import (
    FaceKeypoints,
    VKpsSequence,
    bresenham_line,
    interpolate_sequence,
    render_vkps,
    retarget_sequence,
)


def reference_bresenham(x0, y0, x1, y1):
    """Independent oracle: textbook octant-reduction Bresenham."""
    steep = abs(y1 - y0) > abs(x1 - x0)
    if steep:
        x0, y0, x1, y1 = y0, x0, y1, x1
    if x0 > x1:
        x0, y0, x1, y1 = x1, y1, x0, y0
    dx = x1 - x0
    dy = abs(y1 - y0)
    error = dx // 2
    ystep = 1 if y0 < y1 else -1
    y = y0
    pts = []
    for x in range(x0, x1 + 1):
        pts.append((y, x) if steep else (x, y))
        error -= dy
        if error < 0:
            y += ystep
            error += dx
    return pts


def kps(le, re, no):
    return FaceKeypoints(tuple(le), tuple(re), tuple(no))


class TestRenderVkps:
    def test_degenerate_point_blob(self):
        img = render_vkps(kps((16, 16), (16, 16), (16, 16)), (32, 32), line_width=1)
        red = np.argwhere(img.raster[:, :, 0] > 0)
        green = np.argwhere(img.raster[:, :, 1] > 0)
        assert len(red) <= 1 and len(green) <= 1
        assert tuple(red[0]) == (16, 16)
        assert tuple(green[0]) == (16, 16)

    def test_pixel_count_matches_reference_rasterizer(self):
        img = render_vkps(kps((8, 8), (24, 8), (16, 24)), (32, 32), line_width=1)
        left_ref = reference_bresenham(8, 8, 16, 24)
        right_ref = reference_bresenham(24, 8, 16, 24)
        assert int((img.raster[:, :, 0] > 0).sum()) == len(left_ref)
        assert int((img.raster[:, :, 1] > 0).sum()) == len(right_ref)
        # every rendered pixel sits within one pixel of the oracle's line
        for channel, ref in ((0, left_ref), (1, right_ref)):
            ref = np.array(ref)
            for y, x in np.argwhere(img.raster[:, :, channel] > 0):
                assert np.abs(ref - [x, y]).max(axis=1).min() <= 1

    @settings(max_examples=60, deadline=None)
    @given(coords=st.lists(st.integers(0, 31), min_size=6, max_size=6))
    def test_pixel_count_random(self, coords):
        le, re, no = (coords[0], coords[1]), (coords[2], coords[3]), (coords[4], coords[5])
        img = render_vkps(kps(le, re, no), (32, 32), line_width=1)
        assert int((img.raster[:, :, 0] > 0).sum()) == len(reference_bresenham(*le, *no))
        assert int((img.raster[:, :, 1] > 0).sum()) == len(reference_bresenham(*re, *no))

    def test_v_shape_two_distinct_colors(self):
        # wide eyes above a centered nose form the V with two colored arms
        img = render_vkps(kps((8, 8), (24, 8), (16, 24)), (32, 32), line_width=1).raster
        red_only = (img[:, :, 0] > 0) & (img[:, :, 1] == 0)
        green_only = (img[:, :, 1] > 0) & (img[:, :, 0] == 0)
        assert red_only.sum() > 0 and green_only.sum() > 0
        assert img[:, :, 2].sum() == 0  # nothing but the two segment colors
        # arms meet at the nose pixel
        assert img[24, 16, 0] > 0 and img[24, 16, 1] > 0
        # background stays black
        assert (img.sum(axis=2) == 0).sum() > 32 * 32 / 2

    def test_clamping_out_of_canvas(self):
        img = render_vkps(kps((-5, -9), (40, 8), (16, 24)), (32, 32), line_width=1)
        assert (img.raster > 0).any()

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            FaceKeypoints((float("nan"), 0.0), (1.0, 1.0), (2.0, 2.0))
        with pytest.raises(InvalidInputError):
            FaceKeypoints((float("inf"), 0.0), (1.0, 1.0), (2.0, 2.0))
        # render re-validates even if construction was bypassed
        hacked = object.__new__(FaceKeypoints)
        object.__setattr__(hacked, "left_eye", (float("nan"), 0.0))
        object.__setattr__(hacked, "right_eye", (1.0, 1.0))
        object.__setattr__(hacked, "nose", (2.0, 2.0))
        with pytest.raises(InvalidInputError):
            render_vkps(hacked, (32, 32))

    def test_small_canvas_rejected(self):
        with pytest.raises(InvalidInputError):
            render_vkps(kps((1, 1), (2, 2), (3, 3)), (4, 4))

    def test_line_width_thickens(self):
        thin = render_vkps(kps((8, 8), (24, 8), (16, 24)), (32, 32), line_width=1).raster
        thick = render_vkps(kps((8, 8), (24, 8), (16, 24)), (32, 32), line_width=3).raster
        assert (thick > 0).sum() > (thin > 0).sum()

    def test_translation_equivariance(self):
        base = kps((8, 9), (20, 8), (14, 22))
        img0 = render_vkps(base, (48, 48), line_width=1).raster
        dx, dy = 5, 7
        moved = kps(
            (base.left_eye[0] + dx, base.left_eye[1] + dy),
            (base.right_eye[0] + dx, base.right_eye[1] + dy),
            (base.nose[0] + dx, base.nose[1] + dy),
        )
        img1 = render_vkps(moved, (48, 48), line_width=1).raster
        assert np.array_equal(np.roll(img0, shift=(dy, dx), axis=(0, 1)), img1)

    def test_determinism(self):
        a = render_vkps(kps((8, 8), (24, 8), (16, 24)), (32, 32)).raster
        b = render_vkps(kps((8, 8), (24, 8), (16, 24)), (32, 32)).raster
        assert np.array_equal(a, b)


class TestInterpolateSequence:
    def canvas_seq(self, noses, canvas=(64, 64)):
        frames = [kps((10, 10), (20, 10), no) for no in noses]
        return VKpsSequence(tuple(frames), canvas)

    def test_identity_when_lengths_match(self):
        seq = self.canvas_seq([(0, 0), (3, 4), (9, 2), (5, 5), (1, 7)])
        out = interpolate_sequence(seq, 5)
        assert out.frames == seq.frames

    def test_midpoint(self):
        seq = self.canvas_seq([(0, 0), (10, 10)])
        out = interpolate_sequence(seq, 3)
        assert out.frames[1].nose == (5.0, 5.0)
        assert out.frames[0] == seq.frames[0]
        assert out.frames[2] == seq.frames[1]

    def test_matches_lerp_oracle(self):
        rng = np.random.default_rng(7)
        coords = rng.uniform(0, 63, size=(3, 3, 2))
        frames = tuple(FaceKeypoints.from_array(c) for c in coords)
        out = interpolate_sequence(VKpsSequence(frames, (64, 64)), 7)
        for j in range(7):
            pos = j * 2 / 6
            lo, frac = int(math.floor(pos)), pos - int(math.floor(pos))
            hi = min(lo + 1, 2)
            expect = (1 - frac) * coords[lo] + frac * coords[hi]
            np.testing.assert_allclose(out.frames[j].as_array(), expect, atol=1e-12)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(3)
        coords = rng.uniform(0, 63, size=(4, 3, 2))
        frames = tuple(FaceKeypoints.from_array(c) for c in coords)
        seq = VKpsSequence(frames, (64, 64))
        for target in (1, 2, 5, 11, 40):
            out = interpolate_sequence(seq, target)
            assert len(out) == target
            assert out.frames[0] == seq.frames[0]
            if target > 1:
                assert out.frames[-1] == seq.frames[-1]

    def test_monotone_nose_x(self):
        seq = self.canvas_seq([(1, 5), (4, 5), (9, 5), (30, 5)])
        out = interpolate_sequence(seq, 13)
        xs = [f.nose[0] for f in out.frames]
        assert all(b >= a for a, b in zip(xs, xs[1:]))

    def test_zero_target_rejected(self):
        seq = self.canvas_seq([(0, 0)])
        with pytest.raises(InvalidInputError):
            interpolate_sequence(seq, 0)


class TestRetargetSequence:
    def test_identity_case(self):
        f = kps((20, 20), (40, 20), (30, 36))
        seq = VKpsSequence((f, f, f), (64, 64))
        out = retarget_sequence(seq, f)
        for a, b in zip(out.frames, seq.frames):
            np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-12)

    def test_uniform_double_scale(self):
        ref = kps((20, 20), (30, 20), (25, 28))
        frames = []
        for dx in (0, 2, 4):
            nose = np.array([25.0 + dx, 28.0])
            # frame is 2x larger than ref about its nose, same ratios
            pts = nose + 2.0 * (ref.as_array() - np.array([25.0, 28.0]))
            pts[:, 0] += dx
            frames.append(FaceKeypoints.from_array(pts))
        seq = VKpsSequence(tuple(frames), (64, 64))
        out = retarget_sequence(seq, ref)
        for orig, got in zip(frames, out.frames):
            nose = np.array(orig.nose)
            expect = nose + 0.5 * (orig.as_array() - nose)
            np.testing.assert_allclose(got.as_array(), expect, atol=1e-9)
            np.testing.assert_allclose(got.nose, orig.nose, atol=0)

    def test_best_frame_by_ratio(self):
        # ratios r = {1.0, 1.2, 0.9}, ref ratio 1.15 -> frame 1 selected
        def frame_with_ratio(r, size=20.0):
            # place nose at origin-ish, eyes horizontally at distances r*d and d
            d = size / (r + 1.0)
            return kps((30 - r * d, 30), (30 + d, 30), (30, 30 + 1))

        frames = tuple(frame_with_ratio(r) for r in (1.0, 1.2, 0.9))
        ref = frame_with_ratio(1.15, size=40.0)
        seq = VKpsSequence(frames, (64, 64))
        out = retarget_sequence(seq, ref)
        # scale should be size(ref)/size(frame1); verify against frame 1 geometry
        from vexpress.geometry import _face_size

        s = _face_size(ref) / _face_size(frames[1])
        nose = np.array(frames[1].nose)
        expect = nose + s * (frames[1].as_array() - nose)
        expect[:, 0] = np.clip(expect[:, 0], 0, 63)
        expect[:, 1] = np.clip(expect[:, 1], 0, 63)
        np.testing.assert_allclose(out.frames[1].as_array(), expect, atol=1e-9)

    def test_nose_trace_preserved(self):
        rng = np.random.default_rng(11)
        frames = []
        for _ in range(6):
            c = rng.uniform(20, 44, size=2)
            iod = rng.uniform(8, 14)
            frames.append(
                kps(
                    (c[0] - iod / 2, c[1]),
                    (c[0] + iod / 2, c[1]),
                    (c[0] + rng.uniform(-1, 1), c[1] + iod * 0.8),
                )
            )
        seq = VKpsSequence(tuple(frames), (64, 64))
        ref = kps((10, 10), (30, 10), (20, 26))
        out = retarget_sequence(seq, ref)
        for orig, got in zip(frames, out.frames):
            np.testing.assert_allclose(got.nose, orig.nose, atol=1e-12)

    def test_degenerate_rejected(self):
        bad = kps((5, 5), (9, 9), (9, 9))  # right eye on nose
        seq = VKpsSequence((bad,), (64, 64))
        with pytest.raises(DegenerateGeometryError):
            retarget_sequence(seq, kps((10, 10), (20, 10), (15, 20)))
        good = kps((10, 10), (20, 10), (15, 20))
        with pytest.raises(DegenerateGeometryError):
            retarget_sequence(VKpsSequence((good,), (64, 64)), bad)

    def test_idempotent_on_matched_sequence(self):
        f = kps((20, 20), (40, 20), (30, 36))
        seq = VKpsSequence((f, f), (64, 64))
        once = retarget_sequence(seq, f)
        twice = retarget_sequence(once, f)
        for a, b in zip(once.frames, twice.frames):
            np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-12)


class TestSerialization:
    def test_json_roundtrip(self):
        seq = VKpsSequence(
            (kps((1.5, 2.5), (3.5, 2.0), (2.5, 6.0)), kps((2, 3), (4, 3), (3, 7))),
            (64, 48),
        )
        back = VKpsSequence.from_json(seq.to_json())
        assert back == seq

    def test_json_schema(self):
        seq = VKpsSequence((kps((1, 2), (3, 4), (5, 6)),), (32, 32))
        doc = json.loads(seq.to_json())
        assert doc["width"] == 32 and doc["height"] == 32
        assert doc["frames"][0] == {
            "left_eye": [1.0, 2.0],
            "right_eye": [3.0, 4.0],
            "nose": [5.0, 6.0],
        }

    @pytest.mark.parametrize(
        "text,field",
        [
            ("[]", "top level"),
            ('{"width": 3, "height": 4}', "frames"),
            ('{"width": 3, "frames": []}', "height"),
            ('{"width": 3, "height": 4, "frames": []}', "frames"),
            ('{"width": 3, "height": 4, "frames": [{"left_eye": [1, 2]}]}', "right_eye"),
            (
                '{"width": 3, "height": 4, "frames": [{"left_eye": [1], "right_eye": [1, 2], "nose": [1, 2]}]}',
                "left_eye",
            ),
        ],
    )
    def test_parse_errors_name_field(self, text, field):
        with pytest.raises(FormatError) as exc:
            VKpsSequence.from_json(text)
        assert field in str(exc.value)

    def test_empty_sequence_rejected(self):
        with pytest.raises(InvalidInputError):
            VKpsSequence((), (32, 32))


def test_bresenham_endpoint_inclusive():
    assert bresenham_line(3, 3, 3, 3) == [(3, 3)]
    pts = bresenham_line(0, 0, 5, 2)
    assert pts[0] == (0, 0) and pts[-1] == (5, 2)
    assert len(pts) == 6
