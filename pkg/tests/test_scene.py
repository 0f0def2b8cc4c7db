"""Domain-type math and serialization contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emosplat.scene import (
    Camera,
    Dataset,
    DegenerateRotationError,
    DimensionMismatchError,
    FrameConditions,
    GaussianField,
    MalformedHeaderError,
    Role,
    SceneError,
    TruncatedFileError,
    activate,
    build_covariance,
    load_dataset,
    load_field,
    logistic,
    look_at_camera,
    quat_to_rotmat,
    save_dataset,
    save_field,
)

quat_strategy = st.tuples(
    *[st.floats(-2, 2, allow_nan=False, allow_infinity=False) for _ in range(4)]
).filter(lambda q: sum(x * x for x in q) > 1e-4)


def small_field(n=3, role=Role.FACE, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianField(
        positions=rng.normal(0, 1, (n, 3)).astype(np.float32),
        log_scales=rng.normal(-1, 0.3, (n, 3)).astype(np.float32),
        rotations=rng.normal(0, 1, (n, 4)).astype(np.float32),
        opacity_logits=rng.normal(0, 1, n).astype(np.float32),
        colors=rng.uniform(0, 1, (n, 3)).astype(np.float32),
        normal_residuals=(rng.normal(0, 0.1, (n, 3)) if role is Role.FACE else np.zeros((n, 3))).astype(np.float32),
        role=role,
    )


class TestBuildCovariance:
    def test_identity(self):
        sigma = build_covariance(np.zeros(3), np.array([1.0, 0, 0, 0]))
        np.testing.assert_allclose(sigma, np.eye(3), atol=1e-15)

    def test_axis_aligned_scaling(self):
        sigma = build_covariance(np.log([2.0, 1.0, 1.0]), np.array([1.0, 0, 0, 0]))
        np.testing.assert_allclose(sigma, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotation_about_z_oracle(self):
        # independent oracle: numeric R (s I) (s I)^T R^T product
        angle = np.pi / 2
        q = np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)])
        s = np.array([2.0, 1.0, 1.0])
        R = np.array(
            [
                [np.cos(angle), -np.sin(angle), 0],
                [np.sin(angle), np.cos(angle), 0],
                [0, 0, 1],
            ]
        )
        oracle = R @ np.diag(s) @ np.diag(s).T @ R.T
        sigma = build_covariance(np.log(s), q)
        np.testing.assert_allclose(sigma, oracle, atol=1e-12)
        np.testing.assert_allclose(sigma, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_zero_quaternion_degenerate(self):
        with pytest.raises(DegenerateRotationError):
            build_covariance(np.zeros(3), np.zeros(4))

    @settings(max_examples=60, deadline=None)
    @given(q=quat_strategy)
    def test_double_cover_exact(self, q):
        q = np.array(q)
        a = build_covariance(np.array([0.1, -0.2, 0.3]), q)
        b = build_covariance(np.array([0.1, -0.2, 0.3]), -q)
        assert np.array_equal(a, b)

    @settings(max_examples=60, deadline=None)
    @given(q=quat_strategy)
    def test_spectrum_preserved(self, q):
        log_s = np.array([0.2, -0.5, 0.1])
        sigma = build_covariance(log_s, np.array(q))
        np.testing.assert_allclose(sigma, sigma.T, atol=1e-12)
        eig = np.sort(np.linalg.eigvalsh(sigma))
        np.testing.assert_allclose(eig, np.sort(np.exp(2 * log_s)), atol=1e-9)
        assert np.all(eig > 0)


class TestActivate:
    def test_logistic_midpoint(self):
        f = small_field()
        f.opacity_logits[:] = 0.0
        assert np.all(activate(f).opacities == 0.5)

    def test_exp_zero(self):
        f = small_field()
        f.log_scales[:] = 0.0
        np.testing.assert_array_equal(activate(f).scales, np.ones((3, 3)))

    def test_saturated_logit(self):
        # independent numeric evaluation of the logistic
        f = small_field()
        f.opacity_logits[:] = 20.0
        expected = 1.0 / (1.0 + np.exp(-20.0))
        np.testing.assert_allclose(activate(f).opacities, expected, rtol=0, atol=1e-12)
        assert np.all(np.abs(activate(f).opacities - 1.0) < 1e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30, allow_nan=False))
    def test_monotone_and_open_interval(self, x):
        # strictly monotone and inside (0, 1) wherever float64 has headroom;
        # beyond |x| ~ 37 the value saturates to exactly 0.0 / 1.0
        a, b = logistic(np.array([x])), logistic(np.array([x + 0.1]))
        assert 0.0 < a[0] < 1.0
        assert b[0] > a[0]

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-500, 500, allow_nan=False))
    def test_monotone_nonstrict_everywhere(self, x):
        a, b = logistic(np.array([x])), logistic(np.array([x + 0.1]))
        assert 0.0 <= a[0] <= 1.0
        assert b[0] >= a[0]

    def test_rotation_normalized(self):
        f = small_field()
        R = activate(f).rotmats
        np.testing.assert_allclose(R @ np.transpose(R, (0, 2, 1)), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)


class TestFieldInvariants:
    def test_mouth_field_rejects_normal_residual(self):
        f = small_field(role=Role.FACE, seed=1)  # has nonzero residuals
        with pytest.raises(DimensionMismatchError):
            GaussianField(
                f.positions, f.log_scales, f.rotations, f.opacity_logits, f.colors,
                f.normal_residuals, Role.INSIDE_MOUTH,
            )
        # zero residuals are fine
        GaussianField(
            f.positions, f.log_scales, f.rotations, f.opacity_logits, f.colors,
            np.zeros_like(f.normal_residuals), Role.INSIDE_MOUTH,
        )

    def test_shape_mismatch_rejected(self):
        f = small_field()
        with pytest.raises(DimensionMismatchError):
            GaussianField(
                f.positions[:2], f.log_scales, f.rotations, f.opacity_logits,
                f.colors, f.normal_residuals, Role.FACE,
            )


class TestFieldSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        f = small_field(n=3)
        save_field(f, tmp_path / "f.field")
        g = load_field(tmp_path / "f.field")
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors", "normal_residuals"):
            assert np.array_equal(getattr(f, name), getattr(g, name)), name
        assert g.role == f.role

    def test_empty_field_valid(self, tmp_path):
        f = GaussianField.empty(Role.INSIDE_MOUTH)
        save_field(f, tmp_path / "e.field")
        g = load_field(tmp_path / "e.field")
        assert len(g) == 0 and g.role is Role.INSIDE_MOUTH

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.field"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(MalformedHeaderError):
            load_field(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.field"
        f = small_field(n=3)
        save_field(f, p)
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(TruncatedFileError):
            load_field(p)

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "x.field"
        save_field(small_field(n=2), p)
        p.write_bytes(p.read_bytes() + b"junk")
        with pytest.raises(MalformedHeaderError):
            load_field(p)


class TestCamera:
    def test_orthonormality_enforced(self):
        bad = np.eye(3)
        bad[0, 1] = 0.01
        with pytest.raises(SceneError):
            Camera(10, 10, 5, 5, bad, np.zeros(3), 10, 10)

    def test_resolution_floor(self):
        with pytest.raises(SceneError):
            Camera(10, 10, 5, 5, np.eye(3), np.zeros(3), 0, 10)

    def test_look_at_points_at_target(self):
        cam = look_at_camera((0, 0, 3), (0, 0, 0), 10, 10, 5, 5, 10, 10)
        view = cam.rotation @ np.zeros(3) + cam.translation
        assert view[2] < 0  # target sits in front, down -z


class TestConditions:
    def test_emotion_range_enforced(self):
        cam = look_at_camera((0, 0, 3), (0, 0, 0), 10, 10, 5, 5, 10, 10)
        with pytest.raises(SceneError):
            FrameConditions(np.zeros(4), np.zeros(2), np.array([1.2, 0.0]), cam)


class TestDatasetIO:
    def _dataset(self, n=3, size=24):
        rng = np.random.default_rng(0)
        cam = look_at_camera((0, 0, 3), (0, 0, 0), 20, 20, size / 2, size / 2, size, size)
        conds = [
            FrameConditions(rng.normal(0, 0.5, 4), rng.normal(0, 0.5, 2),
                            np.clip(rng.normal(0, 0.3, 2), -1, 1), cam)
            for _ in range(n)
        ]
        fmask = np.zeros((size, size))
        fmask[4:14, 4:14] = 1
        mmask = np.zeros((size, size))
        mmask[16:20, 10:14] = 1
        normals = np.zeros((size, size, 3))
        normals[:, :, 2] = 1.0
        return Dataset(
            frames=[rng.uniform(0, 1, (size, size, 3)) for _ in range(n)],
            conditions=conds,
            face_masks=[fmask] * n,
            mouth_masks=[mmask] * n,
            normal_targets=[normals * fmask[:, :, None]] * n,
            background=rng.uniform(0, 1, (size, size, 3)),
            emotional_targets=[(0, np.array([0.74, 0.31]), rng.uniform(0, 1, (size, size, 3)))],
        )

    def test_round_trip(self, tmp_path):
        ds = self._dataset()
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert len(back) == len(ds)
        assert back.condition_dims == ds.condition_dims
        # 8-bit quantization bounds the reconstruction error
        assert np.max(np.abs(back.frames[0] - ds.frames[0])) < 0.02
        assert np.array_equal(back.face_masks[0], ds.face_masks[0])
        assert len(back.emotional_targets) == 1
        idx, e, _ = back.emotional_targets[0]
        np.testing.assert_allclose(e, [0.74, 0.31])

    def test_count_mismatch_rejected(self, tmp_path):
        ds = self._dataset()
        save_dataset(ds, tmp_path)
        # remove one frame file: loader must flag the count mismatch
        (tmp_path / "frames" / "00002.png").unlink()
        with pytest.raises(DimensionMismatchError):
            load_dataset(tmp_path)

    def test_overlapping_masks_rejected(self):
        ds = self._dataset()
        with pytest.raises(SceneError):
            Dataset(
                frames=ds.frames,
                conditions=ds.conditions,
                face_masks=ds.face_masks,
                mouth_masks=ds.face_masks,  # same region: overlap
                normal_targets=ds.normal_targets,
                background=ds.background,
            )

    def test_condition_dim_mismatch_rejected(self):
        ds = self._dataset()
        cam = ds.conditions[0].camera
        bad = list(ds.conditions)
        bad[1] = FrameConditions(np.zeros(5), np.zeros(2), np.zeros(2), cam)
        with pytest.raises(DimensionMismatchError):
            Dataset(
                frames=ds.frames, conditions=bad, face_masks=ds.face_masks,
                mouth_masks=ds.mouth_masks, normal_targets=ds.normal_targets,
                background=ds.background,
            )
