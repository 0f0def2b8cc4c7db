"""Branch deformation composition and isolation contracts."""

import numpy as np
import pytest

from conftest import make_gradcheck_field
from emosplat.deformation import (
    BranchSet,
    deform_emotion,
    deform_face,
    deform_mouth,
)
from emosplat.scene import DimensionMismatchError, Role, SceneError


@pytest.fixture()
def setup():
    mouth, _ = make_gradcheck_field(1, n=4, role=Role.INSIDE_MOUTH)
    face, _ = make_gradcheck_field(2, n=5, role=Role.FACE)
    branches = BranchSet(audio_dim=6, au_dim=3, seed=0)
    rng = np.random.default_rng(0)
    return mouth, face, branches, rng


def randomize_final_layers(branches, rng, scale=0.05):
    for branch in branches.branches().values():
        last = branch.net.layers[-1]
        last.params["W"][...] = rng.normal(0, scale, last.params["W"].shape).astype(np.float32)
        last.params["b"][...] = rng.normal(0, scale, last.params["b"].shape).astype(np.float32)


class TestMouthBranch:
    def test_identity_at_init(self, setup):
        mouth, _, branches, _ = setup
        theta, _ = deform_mouth(branches, mouth, np.zeros(6))
        assert np.array_equal(theta.positions, mouth.positions.astype(np.float64))

    def test_positions_respond_to_audio(self, setup):
        mouth, _, branches, rng = setup
        randomize_final_layers(branches, rng)
        t1, _ = deform_mouth(branches, mouth, rng.normal(0, 1, 6))
        t2, _ = deform_mouth(branches, mouth, rng.normal(0, 1, 6))
        assert not np.allclose(t1.positions, t2.positions)

    def test_only_positions_move(self, setup):
        mouth, _, branches, rng = setup
        randomize_final_layers(branches, rng)
        theta, _ = deform_mouth(branches, mouth, rng.normal(0, 1, 6))
        assert np.array_equal(theta.log_scales, mouth.log_scales)
        assert np.array_equal(theta.rotations, mouth.rotations)
        assert np.array_equal(theta.opacity_logits, mouth.opacity_logits)
        assert np.array_equal(theta.colors, mouth.colors)

    def test_role_and_dim_validation(self, setup):
        mouth, face, branches, _ = setup
        with pytest.raises(SceneError):
            deform_mouth(branches, face, np.zeros(6))
        with pytest.raises(DimensionMismatchError):
            deform_mouth(branches, mouth, np.zeros(5))


class TestFaceBranch:
    def test_identity_at_init(self, setup):
        _, face, branches, _ = setup
        theta, _ = deform_face(branches, face, np.zeros(6), np.zeros(3))
        assert np.array_equal(theta.positions, face.positions.astype(np.float64))
        assert np.array_equal(theta.log_scales, face.log_scales.astype(np.float64))
        assert np.array_equal(theta.rotations, face.rotations.astype(np.float64))

    def test_opacity_color_residual_pass_through(self, setup):
        _, face, branches, rng = setup
        randomize_final_layers(branches, rng)
        theta, _ = deform_face(branches, face, rng.normal(0, 1, 6), rng.normal(0, 1, 3))
        assert np.array_equal(theta.opacity_logits, face.opacity_logits)
        assert np.array_equal(theta.colors, face.colors)
        assert np.array_equal(theta.normal_residuals, face.normal_residuals)

    def test_zero_rotation_offset_keeps_rotation(self, setup):
        _, face, branches, rng = setup
        randomize_final_layers(branches, rng)
        last = branches.face.net.layers[-1]
        last.params["W"][6:10, :] = 0.0  # rotation offset slots
        last.params["b"][6:10] = 0.0
        theta, _ = deform_face(branches, face, rng.normal(0, 1, 6), rng.normal(0, 1, 3))
        np.testing.assert_array_equal(theta.rotations, face.rotations.astype(np.float64))


class TestEmotionBranch:
    def test_identity_at_init(self, setup):
        _, face, branches, rng = setup
        theta_f, _ = deform_face(branches, face, rng.normal(0, 1, 6), rng.normal(0, 1, 3))
        theta_e, _ = deform_emotion(branches, theta_f, np.array([0.5, -0.5]))
        assert np.array_equal(theta_e.positions, theta_f.positions)
        assert np.array_equal(theta_e.log_scales, theta_f.log_scales)

    def test_additive_composition(self, setup):
        _, face, branches, rng = setup
        randomize_final_layers(branches, rng)
        a, u, e = rng.normal(0, 1, 6), rng.normal(0, 1, 3), np.array([0.3, 0.6])
        theta_f, _ = deform_face(branches, face, a, u)
        theta_e, _ = deform_emotion(branches, theta_f, e)
        # total position offset = face offset + emotion offset
        d_u = theta_f.positions - face.positions.astype(np.float64)
        d_e = theta_e.positions - theta_f.positions
        np.testing.assert_allclose(
            theta_e.positions, face.positions.astype(np.float64) + d_u + d_e, atol=1e-12
        )
        assert np.array_equal(theta_e.opacity_logits, face.opacity_logits)
        assert np.array_equal(theta_e.colors, face.colors)

    def test_out_of_range_emotion_clamps_with_warning(self, setup):
        _, face, branches, rng = setup
        randomize_final_layers(branches, rng)
        theta_f, _ = deform_face(branches, face, np.zeros(6), np.zeros(3))
        with pytest.warns(UserWarning, match="clamping"):
            t_over, _ = deform_emotion(branches, theta_f, np.array([1.5, 0.0]))
        t_edge, _ = deform_emotion(branches, theta_f, np.array([1.0, 0.0]))
        assert np.array_equal(t_over.positions, t_edge.positions)


class TestBranchIsolation:
    def test_mouth_ignores_au_and_emotion(self, setup):
        mouth, _, branches, rng = setup
        randomize_final_layers(branches, rng)
        a = rng.normal(0, 1, 6)
        t1, _ = deform_mouth(branches, mouth, a)
        t2, _ = deform_mouth(branches, mouth, a)
        assert np.array_equal(t1.positions, t2.positions)

    def test_face_ignores_emotion(self, setup):
        _, face, branches, rng = setup
        randomize_final_layers(branches, rng)
        a, u = rng.normal(0, 1, 6), rng.normal(0, 1, 3)
        t1, _ = deform_face(branches, face, a, u)
        # perturb the emotion branch: face output must not change
        branches.emotion.net.layers[0].params["W"][...] += 0.5
        t2, _ = deform_face(branches, face, a, u)
        assert np.array_equal(t1.positions, t2.positions)
        assert np.array_equal(t1.log_scales, t2.log_scales)

    def test_face_output_varies_with_conditions(self, setup):
        _, face, branches, rng = setup
        randomize_final_layers(branches, rng)
        a = rng.normal(0, 1, 6)
        t1, _ = deform_face(branches, face, a, np.zeros(3))
        t2, _ = deform_face(branches, face, a, np.full(3, 0.8))
        assert not np.allclose(t1.positions, t2.positions)
