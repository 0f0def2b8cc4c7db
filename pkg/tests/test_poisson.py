"""Region boxes, cut-and-paste, and the Poisson clone solver."""

import numpy as np
import pytest

from emosplat.poisson import (
    CloneError,
    CloneProblem,
    NonConvergenceError,
    RegionBox,
    augment_frame,
    boxes_to_mask,
    clone_residual,
    cut_paste,
    gauss_seidel_clone,
    region_boxes,
    seamless_clone,
)
from emosplat.poisson import _apply_laplacian, _build_system, _pcg, _rhs
from emosplat.scene import DimensionMismatchError


class TestRegionBoxes:
    def test_single_point_with_margin(self):
        boxes = region_boxes({"mouth": [(10, 10)]}, 2, (32, 32))
        assert (boxes[0].x0, boxes[0].y0, boxes[0].x1, boxes[0].y1) == (8, 8, 12, 12)

    def test_tight_bounding_box(self):
        pts = [(0, 0), (5, 2), (3, 5)]
        boxes = region_boxes({"left-eye": pts}, 0, (32, 32))
        b = boxes[0]
        # clamped to the 1-pixel solver-interior ring
        assert (b.x0, b.y0, b.x1, b.y1) == (1, 1, 5, 5)

    def test_margin_clamped_to_interior_ring(self):
        boxes = region_boxes({"mouth": [(16, 16)]}, 100, (32, 32))
        b = boxes[0]
        assert (b.x0, b.y0, b.x1, b.y1) == (1, 1, 30, 30)

    def test_empty_landmarks_rejected(self):
        with pytest.raises(ValueError):
            region_boxes({"mouth": []}, 2, (32, 32))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            RegionBox(5, 5, 5, 8)
        with pytest.raises(ValueError):
            RegionBox(5, 5, 8, 5)  # zero-height box


class TestCutPaste:
    def test_empty_boxes_keep_destination(self):
        rng = np.random.default_rng(0)
        src, dst = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
        assert np.array_equal(cut_paste(src, dst, []), dst)

    def test_full_cover_returns_source(self):
        rng = np.random.default_rng(1)
        src, dst = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
        out = cut_paste(src, dst, [RegionBox(0, 0, 7, 7)])
        assert np.array_equal(out, src)

    def test_membership_decides_provenance(self):
        rng = np.random.default_rng(2)
        src, dst = rng.uniform(0, 1, (10, 10, 3)), rng.uniform(0, 1, (10, 10, 3))
        boxes = [RegionBox(1, 1, 3, 3), RegionBox(6, 5, 8, 8)]
        out = cut_paste(src, dst, boxes)
        mask = boxes_to_mask(boxes, (10, 10))
        assert np.array_equal(out[mask], src[mask])
        assert np.array_equal(out[~mask], dst[~mask])

    def test_resolution_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            cut_paste(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)), [])


def random_problem(seed, size=20, box=(5, 13, 6, 14)):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 1, (size, size, 3))
    dst = rng.uniform(0, 1, (size, size, 3))
    mask = np.zeros((size, size), bool)
    y0, y1, x0, x1 = box
    mask[y0:y1, x0:x1] = True
    return CloneProblem(src, dst, mask)


class TestSeamlessClone:
    def test_identical_images_fixed_point(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (16, 16, 3))
        mask = np.zeros((16, 16), bool)
        mask[4:12, 5:11] = True
        out = seamless_clone(CloneProblem(img.copy(), img.copy(), mask))
        np.testing.assert_allclose(out, img, atol=1e-5)

    def test_constant_source_constant_boundary(self):
        # zero guidance + constant boundary b: the interior is exactly b
        mask = np.zeros((16, 16), bool)
        mask[4:12, 4:12] = True
        src = np.full((16, 16, 3), 0.7)
        dst = np.full((16, 16, 3), 0.25)
        out = seamless_clone(CloneProblem(src, dst, mask))
        np.testing.assert_allclose(out[mask], 0.25, atol=1e-5)
        assert np.array_equal(out[~mask], dst[~mask])

    def test_matches_dense_direct_solve(self):
        # independent oracle: assemble the dense system and solve by
        # Gaussian elimination
        problem = random_problem(4, size=20, box=(2, 18, 3, 19))  # 16x16 region
        ys, xs, neighbors = _build_system(problem)
        k = ys.size
        A = np.zeros((k, k))
        for i in range(k):
            A[i, i] = 4.0
            for d in range(4):
                if neighbors[i, d] >= 0:
                    A[i, neighbors[i, d]] -= 1.0
        out = seamless_clone(problem, tol=1e-8)
        for c in range(3):
            b = _rhs(problem, ys, xs, neighbors, c)
            dense = np.linalg.solve(A, b)
            np.testing.assert_allclose(out[ys, xs, c], dense, atol=1e-5)

    def test_residual_certificate(self):
        for seed, box in ((5, (5, 13, 6, 14)), (6, (2, 17, 2, 9)), (7, (8, 11, 3, 17))):
            problem = random_problem(seed, box=box)
            out = seamless_clone(problem, tol=1e-6)
            assert clone_residual(problem, out) < 1e-6

    def test_outside_region_bit_identical(self):
        problem = random_problem(8)
        out = seamless_clone(problem)
        outside = ~problem.mask
        assert np.array_equal(out[outside], problem.destination[outside])

    def test_linearity(self):
        problem = random_problem(9)
        scaled = CloneProblem(0.5 * problem.source, 0.5 * problem.destination, problem.mask)
        a = seamless_clone(problem, tol=1e-9)
        b = seamless_clone(scaled, tol=1e-9)
        np.testing.assert_allclose(b, 0.5 * a, atol=1e-5)

    def test_gauss_seidel_reference_agrees(self):
        problem = random_problem(10, size=14, box=(4, 9, 4, 9))
        cg = seamless_clone(problem, tol=1e-9)
        gs = gauss_seidel_clone(problem, sweeps=4000)
        np.testing.assert_allclose(cg, gs, atol=1e-4)

    def test_nonconvergence_raises_with_residual(self):
        problem = random_problem(11)
        with pytest.raises(NonConvergenceError) as exc:
            seamless_clone(problem, tol=1e-14, max_iters=2)
        assert exc.value.residual > 0

    def test_empty_mask_rejected(self):
        rng = np.random.default_rng(12)
        with pytest.raises(CloneError):
            CloneProblem(rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3)),
                         np.zeros((8, 8), bool))

    def test_border_touching_mask_rejected(self):
        rng = np.random.default_rng(13)
        mask = np.zeros((8, 8), bool)
        mask[0:4, 2:5] = True
        with pytest.raises(CloneError):
            CloneProblem(rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3)), mask)

    def test_cg_iterations_sublinear_in_region_size(self):
        # regression guard on solver scaling: iteration count on a disc
        # grows clearly slower than the pixel count
        counts = {}
        for size, radius in ((24, 8), (48, 16)):
            yy, xx = np.mgrid[0:size, 0:size]
            mask = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 < radius**2
            mask[0, :] = mask[-1, :] = False
            mask[:, 0] = mask[:, -1] = False
            rng = np.random.default_rng(size)
            problem = CloneProblem(
                rng.uniform(0, 1, (size, size)), rng.uniform(0, 1, (size, size)), mask
            )
            ys, xs, neighbors = _build_system(problem)
            b = _rhs(problem, ys, xs, neighbors, 0)
            _, iters = _pcg(neighbors, b, problem.destination[ys, xs].astype(float),
                            1e-6, 10000)
            counts[size] = (iters, ys.size)
        (i1, n1), (i2, n2) = counts[24], counts[48]
        assert i2 / i1 < 0.75 * (n2 / n1)  # sublinear with 25% headroom


class TestAugmentFrame:
    def test_idempotent_on_identical_frames(self):
        rng = np.random.default_rng(14)
        frame = rng.uniform(0, 1, (24, 24, 3))
        landmarks = {"mouth": [(10, 16), (14, 18)], "left-eye": [(6, 6)], "right-eye": [(17, 6)]}
        out = augment_frame(frame, frame.copy(), landmarks, margin=2)
        np.testing.assert_allclose(out, frame, atol=1e-5)

    def test_seam_gradient_smaller_than_cut_paste(self):
        # fixture: a brightened mouth box; the clone's boundary seam must be
        # strictly softer than the hard paste's
        rng = np.random.default_rng(15)
        base = rng.uniform(0.2, 0.4, (24, 24, 3))
        emotional = base + 0.3
        landmarks = {"mouth": [(8, 8), (15, 14)]}
        boxes = region_boxes(landmarks, 2, base.shape)
        pasted = cut_paste(emotional, base, boxes)
        cloned = augment_frame(base, emotional, landmarks, margin=2)

        def seam_max_gradient(img, box):
            ring = []
            # horizontal gradient across the left/right box edges
            for x in (box.x0, box.x1 + 1):
                ring.append(np.abs(img[box.y0 : box.y1 + 1, x] - img[box.y0 : box.y1 + 1, x - 1]))
            for y in (box.y0, box.y1 + 1):
                ring.append(np.abs(img[y, box.x0 : box.x1 + 1] - img[y - 1, box.x0 : box.x1 + 1]))
            return max(np.max(r) for r in ring)

        assert seam_max_gradient(cloned, boxes[0]) < seam_max_gradient(pasted, boxes[0])

    def test_resolution_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            augment_frame(np.zeros((8, 8, 3)), np.zeros((9, 9, 3)), {"mouth": [(3, 3)]})
