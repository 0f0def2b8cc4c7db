"""Hash encoder, attention gates, and branch network contracts."""

import numpy as np
import pytest

from conftest import fd_gradcheck
from emosplat.encoders import AttentionGate, BranchNetwork, DeformationOffsets, TriPlaneHashEncoder
from emosplat.scene import DimensionMismatchError


class TestHashEncoder:
    def test_output_dim(self):
        enc = TriPlaneHashEncoder()
        out, _ = enc.encode(np.full((2, 3), 0.4))
        assert out.shape == (2, 48)

    def test_vertex_is_exact_table_lookup(self):
        # position 0 lies on a grid vertex at every level; bilinear weights
        # collapse onto the (0, 0) corner of every plane
        enc = TriPlaneHashEncoder(seed=5)
        out, _ = enc.encode(np.zeros((1, 3)))
        h0 = (np.uint64(0) * np.uint64(1)) ^ (np.uint64(0) * np.uint64(2654435761))
        idx = int(h0 % np.uint64(enc.table_size))
        expected = []
        for plane in range(3):
            for lvl in range(enc.levels):
                expected.extend(enc.params["tables"][plane, lvl, idx].astype(np.float64))
        np.testing.assert_allclose(out[0], expected, atol=0)

    def test_edge_midpoint_averages_two_vertices(self):
        enc = TriPlaneHashEncoder(levels=1, base_res=16, growth=1.5, seed=2)
        # x at the midpoint of the first cell edge, y exactly on the vertex row
        p = np.array([[0.5 / 16, 0.0, 0.0]])
        out, _ = enc.encode(p)
        t = enc.params["tables"].astype(np.float64)

        def h(ix, iy):
            return int(((np.uint64(ix) * np.uint64(1)) ^ (np.uint64(iy) * np.uint64(2654435761))) % np.uint64(enc.table_size))

        # plane (x, y): average of vertices (0,0) and (1,0)
        expected_xy = 0.5 * (t[0, 0, h(0, 0)] + t[0, 0, h(1, 0)])
        np.testing.assert_allclose(out[0, :2], expected_xy, atol=1e-15)
        # plane (y, z) sits exactly on a vertex
        np.testing.assert_allclose(out[0, 2:4], t[1, 0, h(0, 0)], atol=0)

    def test_position_gradient_matches_fd(self):
        enc = TriPlaneHashEncoder(seed=9)
        rng = np.random.default_rng(3)
        # keep every level's fraction away from cell boundaries
        p = np.array([[0.3712, 0.5317, 0.6123], [0.2215, 0.8111, 0.4412]])
        w = rng.normal(0, 1, (2, enc.out_dim))
        out, ctx = enc.encode(p)
        enc.zero_grad()
        d_pos = enc.backward(ctx, w)
        h = 1e-5
        for i in range(2):
            for c in range(3):
                pp, pm = p.copy(), p.copy()
                pp[i, c] += h
                pm[i, c] -= h
                fd = (np.sum(enc.encode(pp)[0] * w) - np.sum(enc.encode(pm)[0] * w)) / (2 * h)
                assert abs(fd - d_pos[i, c]) <= 1e-3 * max(abs(fd), abs(d_pos[i, c]), 1e-9)

    def test_table_gradient_matches_fd(self):
        enc = TriPlaneHashEncoder(levels=2, seed=4)
        rng = np.random.default_rng(8)
        p = rng.uniform(0.1, 0.9, (3, 3))
        w = rng.normal(0, 1, (3, enc.out_dim))

        def loss():
            out, _ = enc.encode(p)
            return float(np.sum(out * w))

        out, ctx = enc.encode(p)
        enc.zero_grad()
        enc.backward(ctx, w)
        fd_gradcheck(loss, enc.params, enc.grads, h=1e-4, rtol=1e-3, atol=1e-8,
                     samples=12, rng=np.random.default_rng(1))

    def test_continuity_across_cell_boundary(self):
        enc = TriPlaneHashEncoder(seed=11)
        eps = 1e-7
        boundary = 8.0 / enc.resolutions[-1]  # vertex of the finest level
        a, _ = enc.encode(np.array([[boundary - eps, 0.44, 0.55]]))
        b, _ = enc.encode(np.array([[boundary + eps, 0.44, 0.55]]))
        assert np.max(np.abs(a - b)) < 1e-5

    def test_determinism_across_instances(self):
        a = TriPlaneHashEncoder(seed=21)
        b = TriPlaneHashEncoder(seed=21)
        assert np.array_equal(a.params["tables"], b.params["tables"])
        p = np.random.default_rng(0).uniform(0, 1, (4, 3))
        assert np.array_equal(a.encode(p)[0], b.encode(p)[0])

    def test_out_of_box_positions_clamp(self):
        enc = TriPlaneHashEncoder(seed=1)
        out_in, _ = enc.encode(np.array([[0.0, 0.5, 1.0]]))
        out_out, _ = enc.encode(np.array([[-3.0, 0.5, 7.0]]))
        np.testing.assert_array_equal(out_in, out_out)


class TestAttentionGate:
    def test_saturated_bias_passes_condition_through(self):
        gate = AttentionGate(3, 4, seed=0)
        gate.params["W"][:] = 0.0
        gate.params["b"][:] = 500.0  # sigmoid saturates to exactly 1.0
        cond = np.array([2.0, -1.0, 0.5])
        out, _ = gate.forward(np.random.default_rng(0).normal(0, 1, (5, 4)), cond)
        assert np.array_equal(out, np.tile(cond, (5, 1)))

    def test_zero_condition_absorbs(self):
        gate = AttentionGate(3, 4, seed=1)
        out, _ = gate.forward(np.random.default_rng(0).normal(0, 1, (5, 4)), np.zeros(3))
        assert np.all(out == 0)

    def test_componentwise_product(self):
        gate = AttentionGate(3, 4, seed=2)
        feats = np.zeros((1, 4))
        # bias chosen so the gate is exactly (0.5, 1, 0) up to saturation
        gate.params["W"][:] = 0.0
        gate.params["b"][:] = [0.0, 500.0, -500.0]
        out, _ = gate.forward(feats, np.array([2.0, 3.0, 4.0]))
        np.testing.assert_allclose(out[0], [1.0, 3.0, 0.0], atol=1e-12)

    def test_gate_range(self):
        gate = AttentionGate(6, 8, seed=3)
        feats = np.random.default_rng(5).normal(0, 10, (50, 8))
        g = gate.gate_values(feats)
        assert np.all(g >= 0) and np.all(g <= 1)

    def test_dimension_mismatch(self):
        gate = AttentionGate(3, 4, seed=4)
        with pytest.raises(DimensionMismatchError):
            gate.forward(np.zeros((2, 4)), np.zeros(5))

    def test_weight_gradients_match_fd(self):
        gate = AttentionGate(3, 5, seed=6)
        rng = np.random.default_rng(7)
        feats = rng.normal(0, 1, (4, 5))
        cond = rng.normal(0, 1, 3)
        w = rng.normal(0, 1, (4, 3))

        def loss():
            out, _ = gate.forward(feats, cond)
            return float(np.sum(out * w))

        out, ctx = gate.forward(feats, cond)
        gate.zero_grad()
        d_feats = gate.backward(ctx, w)
        fd_gradcheck(loss, gate.params, gate.grads, h=1e-4, rtol=1e-3, atol=1e-8)
        # input gradient
        h = 1e-6
        for idx in [(0, 0), (2, 3)]:
            fp, fm = feats.copy(), feats.copy()
            fp[idx] += h
            fm[idx] -= h
            fd = (np.sum(gate.forward(fp, cond)[0] * w) - np.sum(gate.forward(fm, cond)[0] * w)) / (2 * h)
            assert abs(fd - d_feats[idx]) < 1e-6 + 1e-4 * abs(fd)


class TestBranchNetwork:
    def test_zero_init_identity(self):
        net = BranchNetwork(10, full_offsets=True, seed=0)
        x = np.random.default_rng(0).normal(0, 1, (7, 10))
        off, _ = net.forward(x)
        assert np.all(off.d_position == 0)
        assert np.all(off.d_log_scale == 0)
        assert np.all(off.d_rotation == 0)

    def test_handcrafted_copy_map(self):
        # one-layer-equivalent weights copying input slot 2 to d_position.x
        net = BranchNetwork(6, full_offsets=False, seed=1)
        for layer in net.layers:
            layer.params["W"][:] = 0.0
            layer.params["b"][:] = 0.0
        # route slot 2 through the two tanh layers in their linear regime
        net.layers[0].params["W"][0, 2] = 1e-3
        net.layers[1].params["W"][0, 0] = 1e-3
        net.layers[2].params["W"][0, 0] = 1e6
        x = np.zeros((3, 6))
        x[:, 2] = [0.1, -0.2, 0.05]
        off, _ = net.forward(x)
        np.testing.assert_allclose(off.d_position[:, 0], x[:, 2], rtol=1e-4)
        assert np.all(off.d_position[:, 1:] == 0)

    def test_weight_gradients_match_fd(self):
        net = BranchNetwork(5, full_offsets=True, seed=2)
        rng = np.random.default_rng(3)
        for layer in net.layers:  # nonzero final layer so every path is live
            layer.params["W"][...] = rng.normal(0, 0.2, layer.params["W"].shape).astype(np.float32)
        x = rng.normal(0, 1, (4, 5))
        w_mu = rng.normal(0, 1, (4, 3))
        w_ls = rng.normal(0, 1, (4, 3))
        w_q = rng.normal(0, 1, (4, 4))

        def loss():
            off, _ = net.forward(x)
            return float(np.sum(off.d_position * w_mu) + np.sum(off.d_log_scale * w_ls) + np.sum(off.d_rotation * w_q))

        off, ctx = net.forward(x)
        net.zero_grad()
        d_x = net.backward(ctx, DeformationOffsets(w_mu, w_ls, w_q))
        params = {f"l{i}.{k}": v for i, l in enumerate(net.layers) for k, v in l.params.items()}
        grads = {f"l{i}.{k}": v for i, l in enumerate(net.layers) for k, v in l.grads.items()}
        fd_gradcheck(loss, params, grads, h=1e-4, rtol=1e-3, atol=1e-8,
                     samples=10, rng=np.random.default_rng(4))
        # input gradients
        h = 1e-6
        for idx in [(0, 0), (3, 4)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            offp, _ = net.forward(xp)
            offm, _ = net.forward(xm)
            lp = np.sum(offp.d_position * w_mu) + np.sum(offp.d_log_scale * w_ls) + np.sum(offp.d_rotation * w_q)
            lm = np.sum(offm.d_position * w_mu) + np.sum(offm.d_log_scale * w_ls) + np.sum(offm.d_rotation * w_q)
            fd = (lp - lm) / (2 * h)
            assert abs(fd - d_x[idx]) < 1e-6 + 1e-3 * abs(fd)

    def test_shape_mismatch(self):
        net = BranchNetwork(5, full_offsets=False, seed=3)
        with pytest.raises(DimensionMismatchError):
            net.forward(np.zeros((2, 6)))
