"""Forward rendering contracts: compositing identities, determinism,
worker invariance, throughput reporting."""

import numpy as np
import pytest

from conftest import make_camera, make_gradcheck_field
from emosplat.render import RenderError, backward, benchmark, render, render_normal_map
from emosplat.render.kernels import EARLY_OUT_T
from emosplat.render.projection import Q_CUTOFF, project_field
from emosplat.scene import GaussianField, Role, activate, look_at_camera

ALPHA_ONE_LOGIT = 40.0  # logistic saturates to exactly 1.0 in float64


def axis_camera(size=32, fx=40.0, distance=2.0):
    return look_at_camera((0, 0, distance), (0, 0, 0), fx=fx, fy=fx,
                          cx=size / 2, cy=size / 2, width=size, height=size)


def field_on_axis(zs, logits, colors, role=Role.FACE, sigma=0.1):
    n = len(zs)
    return GaussianField(
        positions=np.array([[0.0, 0.0, z] for z in zs]),
        log_scales=np.full((n, 3), np.log(sigma)),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacity_logits=np.array(logits, dtype=np.float64),
        colors=np.array(colors, dtype=np.float64),
        normal_residuals=np.zeros((n, 3)),
        role=role,
    )


class TestRenderForward:
    def test_empty_field(self):
        cam = axis_camera()
        out = render(GaussianField.empty(Role.FACE), cam)
        assert np.all(out.alpha == 0) and np.all(out.color == 0)

    def test_single_gaussian_center_closed_form(self):
        cam = axis_camera()
        color = [0.3, 0.6, 0.9]
        f = field_on_axis([0.0], [ALPHA_ONE_LOGIT], [color])
        out = render(f, cam)
        cy, cx = 16, 16
        np.testing.assert_allclose(out.color[cy, cx], color, atol=1e-12)
        np.testing.assert_allclose(out.alpha[cy, cx], 1.0, atol=1e-12)

    def test_two_coincident_centers(self):
        # front: alpha 0.5 red; back: alpha 1 blue -> 0.5 red + 0.5 blue, A = 1
        cam = axis_camera()
        f = field_on_axis([0.2, -0.2], [0.0, ALPHA_ONE_LOGIT], [[1, 0, 0], [0, 0, 1]])
        out = render(f, cam)
        np.testing.assert_allclose(out.color[16, 16], [0.5, 0, 0.5], atol=1e-12)
        np.testing.assert_allclose(out.alpha[16, 16], 1.0, atol=1e-12)

    def test_where_alpha_zero_color_zero(self):
        cam = axis_camera()
        out = render(field_on_axis([0.0], [0.0], [[1, 1, 1]], sigma=0.02), cam)
        zero = out.alpha == 0
        assert zero.any()
        assert np.all(out.color[zero] == 0)

    def test_telescoping_identity_against_bruteforce(self):
        field, cam = make_gradcheck_field(5, n=8)
        out = render(field, cam)
        act = activate(field)
        proj = project_field(act, cam)
        order = np.argsort(proj.depth, kind="stable")
        h, w = cam.height, cam.width
        alpha_sum = np.zeros((h, w))
        trans = np.ones((h, w))
        for g in order:
            xs = np.arange(w) - proj.mean2d[g, 0]
            ys = np.arange(h) - proj.mean2d[g, 1]
            dx, dy = np.meshgrid(xs, ys)
            a, b, c = proj.conic[g]
            q = a * dx**2 + 2 * b * dx * dy + c * dy**2
            win = np.clip((Q_CUTOFF - q) / 3.0, 0.0, 1.0)
            win = np.where(q <= 9.0, 1.0, win**2 * (3 - 2 * win))
            at = act.opacities[g] * np.exp(-0.5 * q) * win * (q < Q_CUTOFF)
            alpha_sum += at * trans
            trans *= 1 - at
        np.testing.assert_allclose(alpha_sum, 1.0 - trans, atol=1e-6)  # telescoping
        np.testing.assert_allclose(out.alpha, alpha_sum, atol=1e-9)

    def test_alpha_monotone_in_prefix(self):
        field, cam = make_gradcheck_field(11, n=7)
        act = activate(field)
        proj = project_field(act, cam)
        order = np.argsort(proj.depth, kind="stable")
        prev = np.zeros((cam.height, cam.width))
        for k in range(1, len(field) + 1):
            idx = order[:k]
            sub = GaussianField(
                field.positions[idx], field.log_scales[idx], field.rotations[idx],
                field.opacity_logits[idx], field.colors[idx], field.normal_residuals[idx],
                field.role,
            )
            alpha = render(sub, cam).alpha
            assert np.all(alpha >= prev - 1e-12)
            prev = alpha

    def test_alpha_range(self):
        field, cam = make_gradcheck_field(13, n=9)
        out = render(field, cam)
        assert np.all(out.alpha >= 0) and np.all(out.alpha <= 1 + 1e-12)

    def test_equal_depth_tie_break_by_index(self):
        cam = axis_camera()
        a = field_on_axis([0.0, 0.0], [0.0, 0.0], [[1, 0, 0], [0, 0, 1]])
        b = field_on_axis([0.0, 0.0], [0.0, 0.0], [[0, 0, 1], [1, 0, 0]])
        out_a = render(a, cam)
        out_b = render(b, cam)
        # index 0 composites in front: red-over-blue vs blue-over-red
        np.testing.assert_allclose(out_a.color[16, 16], [0.5, 0, 0.25], atol=1e-12)
        np.testing.assert_allclose(out_b.color[16, 16], [0.25, 0, 0.5], atol=1e-12)
        # bit-deterministic on repetition
        assert np.array_equal(out_a.color, render(a, cam).color)

    def test_worker_count_bit_invariance(self):
        for seed in (21, 22, 23):
            field, cam = make_gradcheck_field(seed, n=8)
            ref = render(field, cam, workers=1)
            for workers in (2, 3, 4):
                out = render(field, cam, workers=workers)
                assert np.array_equal(ref.color, out.color)
                assert np.array_equal(ref.alpha, out.alpha)
                assert np.array_equal(ref.normal, out.normal)

    def test_nonfinite_parameter_names_index(self):
        field, cam = make_gradcheck_field(3, n=4)
        field.positions[2, 1] = np.nan
        with pytest.raises(RenderError, match="Gaussian 2"):
            render(field, cam)

    def test_early_out_transmittance(self):
        # a stack of near-opaque gaussians must stop blending early
        cam = axis_camera()
        zs = np.linspace(0.3, -0.3, 8)
        f = field_on_axis(zs, [3.0] * 8, [[0.5, 0.5, 0.5]] * 8, sigma=0.3)
        out = render(f, cam, retain=True)
        assert out.ctx.consumed[16, 16] < 8
        assert out.ctx.consumed.max() <= 8
        assert np.all(out.alpha <= 1.0)
        assert out.alpha[16, 16] > 1 - EARLY_OUT_T


class TestNormalMap:
    def test_camera_facing_disc(self):
        cam = axis_camera()
        f = field_on_axis([0.0], [ALPHA_ONE_LOGIT], [[1, 1, 1]])
        f.log_scales[0] = [np.log(0.15), np.log(0.15), np.log(0.01)]
        nm = render_normal_map(f, cam)
        np.testing.assert_allclose(nm[16, 16], [0, 0, 1], atol=1e-4)
        np.testing.assert_allclose(nm[17, 15], [0, 0, 1], atol=1e-4)

    def test_zero_residual_identity(self):
        field, cam = make_gradcheck_field(31, n=5)
        field.normal_residuals[:] = 0.0
        base = render(field, cam).normal
        again = render(field, cam).normal
        assert np.array_equal(base, again)

    def test_residual_replaces_base(self):
        # dn = -base + t makes the effective normal exactly t
        cam = axis_camera()
        f = field_on_axis([0.0], [ALPHA_ONE_LOGIT], [[1, 1, 1]])
        f.log_scales[0] = [np.log(0.15), np.log(0.15), np.log(0.01)]
        t = np.array([0.3, 0.4, np.sqrt(1 - 0.25)])
        base = np.array([0.0, 0.0, 1.0])  # camera-facing disc, no flip
        f.normal_residuals[0] = -base + t
        nm = render_normal_map(f, cam)
        np.testing.assert_allclose(nm[16, 16], t, atol=1e-4)

    def test_role_precondition(self):
        f = field_on_axis([0.0], [0.0], [[1, 1, 1]], role=Role.INSIDE_MOUTH)
        with pytest.raises(RenderError):
            render_normal_map(f, axis_camera())


class TestBackwardBasics:
    def test_requires_retained_state(self):
        field, cam = make_gradcheck_field(41, n=4)
        out = render(field, cam)
        with pytest.raises(RenderError):
            backward(out, d_color=np.zeros_like(out.color))

    def test_zero_upstream_zero_grads(self):
        field, cam = make_gradcheck_field(42, n=5)
        out = render(field, cam, retain=True)
        g = backward(out, d_color=np.zeros_like(out.color))
        for arr in g.as_dict().values():
            assert np.all(arr == 0)

    def test_color_gradient_is_weight_at_center(self):
        cam = axis_camera()
        f = field_on_axis([0.0], [0.0], [[0.2, 0.4, 0.6]])  # alpha = 0.5
        out = render(f, cam, retain=True)
        d_color = np.zeros_like(out.color)
        d_color[16, 16, :] = 1.0
        g = backward(out, d_color=d_color)
        np.testing.assert_allclose(g.colors[0], [0.5, 0.5, 0.5], atol=1e-12)


class TestBenchmark:
    def test_zero_repetitions_error(self):
        field, cam = make_gradcheck_field(51, n=4)
        with pytest.raises(ValueError, match="empty benchmark"):
            benchmark(field, cam, 0)

    def test_report_fields_and_worker_determinism(self):
        field, cam = make_gradcheck_field(52, n=10)
        r1 = benchmark(field, cam, 2, workers=1)
        r4 = benchmark(field, cam, 2, workers=4)
        assert r1["fps"] > 0 and r4["fps"] > 0
        assert set(r1["stages"]) == {"project", "sort", "blend"}
        assert r1["checksum"] == r4["checksum"]  # same image regardless of workers
        assert sum(r1["tile_histogram"]["counts"]) == 4  # 32x32 -> 2x2 tiles
