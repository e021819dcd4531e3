import numpy as np
import pytest

from vexpress.errors import DetectionError, InvalidInputError
from vexpress.geometry import FaceKeypoints, VKpsSequence
from vexpress.metrics import (
    EvalReport,
    extract_kps_from_synth,
    kps_distance,
    lambda_sweep,
    lipsync_correlation,
    mouth_motion_energy,
    pearson,
    sweep_to_csv,
)
from vexpress.synthdata import generate_sample, render_face


def kps(le, re, no):
    return FaceKeypoints(tuple(le), tuple(re), tuple(no))


def shift(seq: VKpsSequence, dx, dy):
    frames = tuple(
        kps(
            (f.left_eye[0] + dx, f.left_eye[1] + dy),
            (f.right_eye[0] + dx, f.right_eye[1] + dy),
            (f.nose[0] + dx, f.nose[1] + dy),
        )
        for f in seq.frames
    )
    return VKpsSequence(frames, seq.canvas)


class TestKpsDistance:
    def seq(self, seed=0, n=5):
        rng = np.random.default_rng(seed)
        frames = tuple(
            kps(rng.uniform(5, 50, 2), rng.uniform(5, 50, 2), rng.uniform(5, 50, 2))
            for _ in range(n)
        )
        return VKpsSequence(frames, (64, 64))

    def test_identical_zero(self):
        s = self.seq()
        assert kps_distance(s, s) == 0.0

    def test_shift_3_4_5(self):
        s = self.seq()
        assert abs(kps_distance(s, shift(s, 3, 4)) - 5.0) < 1e-12

    def test_matches_hand_summation(self):
        a, b = self.seq(1), self.seq(2)
        total = 0.0
        for fa, fb in zip(a.frames, b.frames):
            pts = 0.0
            for pa, pb in zip(
                (fa.left_eye, fa.right_eye, fa.nose), (fb.left_eye, fb.right_eye, fb.nose)
            ):
                pts += np.hypot(pa[0] - pb[0], pa[1] - pb[1])
            total += pts / 3
        expect = total / len(a.frames)
        assert abs(kps_distance(a, b) - expect) < 1e-12

    def test_symmetry_and_triangle(self):
        a, b, c = self.seq(1), self.seq(2), self.seq(3)
        assert kps_distance(a, b) == kps_distance(b, a)
        assert kps_distance(a, c) <= kps_distance(a, b) + kps_distance(b, c) + 1e-12

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            kps_distance(self.seq(n=5), self.seq(n=4))


class TestExtractKps:
    def test_roundtrip_with_generator(self):
        sample = generate_sample(seed=2, n_frames=6)
        for i, truth in enumerate(sample.kps_seq.frames):
            got = extract_kps_from_synth(sample.frames[i])
            for p, q in zip(
                (got.left_eye, got.right_eye, got.nose),
                (truth.left_eye, truth.right_eye, truth.nose),
            ):
                assert np.hypot(p[0] - q[0], p[1] - q[1]) <= 1.0

    def test_all_black_raises(self):
        with pytest.raises(DetectionError):
            extract_kps_from_synth(np.zeros((3, 64, 64), dtype=np.float32))

    def test_translation_equivariance(self):
        sample = generate_sample(seed=3, n_frames=1)
        frame = sample.frames[0]
        shifted = np.roll(frame, shift=(2, 2), axis=(1, 2))
        a = extract_kps_from_synth(frame)
        b = extract_kps_from_synth(shifted)
        for p, q in zip((a.left_eye, a.right_eye, a.nose), (b.left_eye, b.right_eye, b.nose)):
            assert abs(q[0] - p[0] - 2) < 1e-9
            assert abs(q[1] - p[1] - 2) < 1e-9


class TestLipsync:
    def test_perfect_correlation(self):
        sample = generate_sample(seed=4, n_frames=24)
        r = lipsync_correlation(sample.frames, sample.mouth_openness, sample.kps_seq.frames)
        assert r > 0.97  # limited only by pixel quantization

    def test_anti_correlation(self):
        sample = generate_sample(seed=5, n_frames=24)
        r = lipsync_correlation(sample.frames, 1.0 - sample.mouth_openness, sample.kps_seq.frames)
        assert r < -0.97

    def test_pearson_matches_reference(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, 60)
        y = x + rng.normal(0, 0.1, 60)
        expect = np.corrcoef(x, y)[0, 1]
        assert abs(pearson(x, y) - expect) < 1e-9

    def test_pearson_affine_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, 30)
        y = rng.uniform(0, 1, 30)
        assert abs(pearson(2.5 * x + 3, y) - pearson(x, y)) < 1e-12
        assert abs(pearson(x, -0.5 * y + 1) + pearson(x, y)) < 1e-12

    def test_constant_series_rejected(self):
        with pytest.raises(InvalidInputError):
            pearson(np.ones(10), np.arange(10))
        frames = np.zeros((5, 3, 64, 64), dtype=np.float32)
        kps_list = [generate_sample(seed=1, n_frames=1).kps_seq.frames[0]] * 5
        with pytest.raises(InvalidInputError):
            lipsync_correlation(frames, np.linspace(0, 1, 5), kps_list)

    def test_too_few_frames(self):
        sample = generate_sample(seed=8, n_frames=2)
        with pytest.raises(InvalidInputError):
            lipsync_correlation(sample.frames, sample.mouth_openness, sample.kps_seq.frames)


class TestLambdaSweep:
    def test_sweep_rows_and_determinism(self):
        sample = generate_sample(seed=9, n_frames=12)
        base = sample.frames

        def generate_fn(lam):
            # toy stand-in: scale mouth openness by regenerating with scaled amplitude
            frames = np.stack(
                [
                    render_face(k, (64, 64), sample.identity, lam * a)
                    for k, a in zip(sample.kps_seq.frames, sample.mouth_openness)
                ]
            )
            return frames, sample.kps_seq.frames

        rows = lambda_sweep(generate_fn, [0.0, 0.5, 1.0])
        assert [r[0] for r in rows] == [0.0, 0.5, 1.0]
        assert rows[2][1] > rows[0][1]  # more audio weight, more motion energy
        assert rows[0][1] == 0.0  # closed mouth everywhere: zero variance
        rows2 = lambda_sweep(generate_fn, [0.0, 0.5, 1.0])
        assert rows == rows2

    def test_energy_is_variance(self):
        sample = generate_sample(seed=10, n_frames=12)
        from vexpress.metrics import measure_openness_series

        series = measure_openness_series(sample.frames, sample.kps_seq.frames)
        assert abs(mouth_motion_energy(sample.frames, sample.kps_seq.frames) - series.var()) < 1e-12

    def test_csv_format(self):
        text = sweep_to_csv([(0.0, 0.1), (1.0, 0.4)])
        assert text.splitlines()[0] == "lambda,energy"
        assert text.splitlines()[1] == "0.0,0.1"


def test_eval_report_dict():
    rep = EvalReport(kps_dis=1.5, lipsync_r=0.9, lambda_sweep=((0.0, 0.1),), frames_evaluated=10)
    d = rep.to_dict()
    assert d["kps_dis"] == 1.5 and d["lipsync_r"] == 0.9
    assert d["lambda_sweep"] == [[0.0, 0.1]]
