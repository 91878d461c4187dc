import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from depthdiff.grid import Field2D, FieldStack, least_squares_affine
from depthdiff.metrics import (
    EdgeMap,
    MetricsReport,
    absrel,
    angular_errors,
    angular_metrics,
    dbe,
    delta1,
    edge_pr,
    evaluate_depth,
    evaluate_edges,
    evaluate_image,
    evaluate_normals,
    extract_depth_edges,
    gaussian_window,
    psnr,
    sobel_magnitude,
    ssim,
)
from depthdiff.normalize import unit_normals


def f(*vals):
    return Field2D(np.array([vals], dtype=float))


def rotated(deg):
    """Unit vectors at ``deg`` from +z, rotated about the x axis."""
    r = np.radians(deg)
    return np.array([0.0, np.sin(r), np.cos(r)])


def normals_field(vecs, h, w):
    return FieldStack(np.asarray(vecs, float).T.reshape(3, h, w))


class TestDepthMetrics:
    def test_three_pixel_example(self):
        assert absrel(f(1, 2, 3), f(1, 2, 4)) == pytest.approx(25 / 3, abs=1e-12)
        assert delta1(f(1, 2, 3), f(1, 2, 4)) == pytest.approx(200 / 3, abs=1e-12)

    def test_trivial_examples(self, rng):
        d = Field2D(rng.uniform(1, 5, (4, 4)))
        assert absrel(d, d) == 0 and delta1(d, d) == 100
        assert absrel(Field2D(1.1 * d.values), d) == pytest.approx(10)
        assert delta1(Field2D(1.3 * d.values), d) == 0

    def test_errors(self):
        with pytest.raises(ValueError):
            absrel(f(1, 2), f(1, 0))
        with pytest.raises(ValueError):
            delta1(f(-1, 2), f(1, 2))

    def test_affine_of_gt_is_perfect(self, rng):
        gt = Field2D(rng.uniform(1, 10, (8, 8)))
        rep = evaluate_depth(Field2D(3 * gt.values - 4), gt)
        assert rep["absrel"] == pytest.approx(0, abs=1e-9) and rep["delta1"] == 100

    def test_two_stage_oracle_bit_exact(self, rng):
        gt = Field2D(rng.uniform(1, 10, (16, 16)))
        pred = Field2D(0.5 * gt.values + 2 + 0.3 * rng.standard_normal((16, 16)))
        rep = evaluate_depth(pred, gt)
        s, t = least_squares_affine(pred, gt)
        aligned = Field2D(pred.values * s + t)
        assert rep["absrel"] == absrel(aligned, gt)
        assert rep["delta1"] == delta1(aligned, gt)
        assert rep.config["scale"] == s and rep.pixel_count == 256

    @given(st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 2**31 - 1))
    def test_affine_invariance(self, a, b, seed):
        rng = np.random.default_rng(seed)
        gt = Field2D(rng.uniform(1, 10, (8, 8)))
        pred = Field2D(gt.values + rng.standard_normal((8, 8)))
        r1 = evaluate_depth(pred, gt)
        r2 = evaluate_depth(Field2D(a * pred.values + b), gt)
        assert r2["absrel"] == pytest.approx(r1["absrel"], abs=1e-9)
        assert r2["delta1"] == pytest.approx(r1["delta1"], abs=1e-9)

    def test_report_text(self):
        rep = MetricsReport({"b": 0.1, "a": 2.0}, 5, {"k": 0.5, "name": "x"})
        assert rep.to_text() == "pixel_count = 5\na = 2.0\nb = 0.1\nconfig.k = 0.5\nconfig.name = x\n"
        with pytest.raises(ValueError):
            MetricsReport({"a": float("nan")}, 1)


class TestAngular:
    def test_identity_and_orthogonal(self, rng):
        n = FieldStack(unit_normals(rng.normal(size=(3, 5, 5)))[0])
        assert angular_metrics(n, n) == (0.0, 100.0)
        x = normals_field([[1, 0, 0]] * 4, 2, 2)
        z = normals_field([[0, 0, 1]] * 4, 2, 2)
        assert angular_metrics(x, z) == pytest.approx((90.0, 0.0))

    def test_ten_twenty_split(self):
        pred = normals_field([rotated(10), rotated(20), rotated(10), rotated(20)], 2, 2)
        gt = normals_field([rotated(0)] * 4, 2, 2)
        mean, pct = angular_metrics(pred, gt)
        assert mean == pytest.approx(15, abs=1e-6) and pct == pytest.approx(50, abs=1e-6)

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError):
            angular_errors(normals_field([[0, 0, 1.01]], 1, 1), normals_field([[0, 0, 1]], 1, 1))

    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_matches_arccos(self, seed):
        rng = np.random.default_rng(seed)
        a = FieldStack(unit_normals(rng.normal(size=(3, 4, 4)))[0])
        b = FieldStack(unit_normals(rng.normal(size=(3, 4, 4)))[0])
        e = angular_errors(a, b)
        np.testing.assert_array_equal(e, angular_errors(b, a))
        ref = np.degrees(np.arccos(np.clip(np.sum(a.values * b.values, axis=0), -1, 1)))
        np.testing.assert_allclose(e, ref.ravel(), atol=1e-6)

    def test_report(self):
        pred = normals_field([rotated(5), rotated(30)], 1, 2)
        rep = evaluate_normals(pred, normals_field([rotated(0)] * 2, 1, 2))
        assert rep["pct_below_11_25"] == 50 and rep["mean_angular_error_deg"] == pytest.approx(17.5)


def step_field(h=12, w=12, c=6):
    v = np.zeros((h, w))
    v[:, c:] = 1.0
    return Field2D(v)


def edge(mask):
    return EdgeMap(np.asarray(mask, bool), 0.1)


class TestEdges:
    def test_constant_empty(self):
        assert not extract_depth_edges(Field2D(np.full((6, 6), 4.0))).edges.any()

    def test_step_confined_to_sobel_support(self):
        e = extract_depth_edges(step_field(c=6)).edges
        assert set(np.nonzero(e.any(axis=0))[0]) == {5, 6}
        assert e[:, 5].all() and e[:, 6].all()

    def test_sobel_slope_scaling(self):
        ramp = np.tile(np.arange(8.0), (8, 1))
        np.testing.assert_allclose(sobel_magnitude(ramp)[2:-2, 2:-2], 1.0)

    def test_threshold_zero(self, rng):
        v = np.zeros((8, 8))
        v[4, 4] = 1
        e = extract_depth_edges(Field2D(v), threshold=0).edges
        np.testing.assert_array_equal(e, sobel_magnitude(v) > 0)

    def test_masked_pixels_filled(self):
        v = np.zeros((6, 6))
        v[:, 4:] = 1
        v[0, 0] = 1e9
        m = np.ones((6, 6), bool)
        m[0, 0] = False
        e = extract_depth_edges(Field2D(v, m)).edges
        np.testing.assert_array_equal(e, extract_depth_edges(step_field(6, 6, 4)).edges)

    def test_dbe_identical_and_empty(self):
        e = np.zeros((10, 10), bool)
        e[:, 4] = True
        assert dbe(edge(e), edge(e)) == (0.0, 0.0)
        assert dbe(edge(np.zeros_like(e)), edge(e), 7.0) == (7.0, 7.0)

    def test_dbe_two_pixel_shift(self):
        g = np.zeros((20, 20), bool)
        p = np.zeros((20, 20), bool)
        g[:, 8] = True
        p[:, 10] = True
        # brute-force distance oracle
        gy, gx = np.nonzero(g)
        py, px = np.nonzero(p)
        d = np.sqrt((py[:, None] - gy[None]) ** 2 + (px[:, None] - gx[None]) ** 2).min(axis=1)
        assert d.mean() == 2.0
        assert dbe(edge(p), edge(g), 10) == (2.0, 2.0)

    def test_dbe_truncation(self):
        g = np.zeros((5, 30), bool)
        p = np.zeros((5, 30), bool)
        g[:, 0] = True
        p[:, 25] = True
        assert dbe(edge(p), edge(g), 10) == (10.0, 10.0)

    def test_dbe_matches_edt(self, rng):
        g = rng.random((16, 16)) < 0.1
        p = rng.random((16, 16)) < 0.1
        acc, comp = dbe(edge(p), edge(g), 3.0)
        assert acc == pytest.approx(np.minimum(ndimage.distance_transform_edt(~g)[p], 3).mean())
        assert comp == pytest.approx(np.minimum(ndimage.distance_transform_edt(~p)[g], 3).mean())

    def test_pr_examples(self):
        g = np.zeros((10, 10), bool)
        g[:, 5] = True
        assert edge_pr(edge(g), edge(g)) == (1.0, 1.0)
        dil = ndimage.binary_dilation(g)
        assert edge_pr(edge(dil), edge(g), 1) == (1.0, 1.0)
        far = np.zeros_like(g)
        far[:, 0] = True
        assert edge_pr(edge(far), edge(g), 1) == (0.0, 0.0)
        empty = np.zeros_like(g)
        assert edge_pr(edge(empty), edge(empty)) == (1.0, 1.0)
        assert edge_pr(edge(empty), edge(g)) == (0.0, 0.0)

    @given(arrays(bool, (8, 8)), arrays(bool, (8, 8)), st.integers(0, 2))
    def test_pr_brute_force_and_swap(self, p, g, r):
        def brute(src, dst):
            if not src.any():
                return 1.0 if not dst.any() else 0.0
            ys, xs = np.nonzero(dst)
            hits = [np.any((abs(ys - y) <= r) & (abs(xs - x) <= r)) for y, x in zip(*np.nonzero(src))]
            return float(np.mean(hits))

        prc, rec = edge_pr(edge(p), edge(g), r)
        assert prc == pytest.approx(brute(p, g)) and rec == pytest.approx(brute(g, p))
        assert edge_pr(edge(g), edge(p), r) == (rec, prc)

    def test_evaluate_edges(self):
        rep = evaluate_edges(step_field(), step_field())
        assert rep["dbe_acc"] == 0 and rep["edge_precision"] == 1 and rep["edge_recall"] == 1


class TestImageMetrics:
    def test_psnr(self, rng):
        x = rng.random((8, 8))
        assert psnr(x, x) == 99.0
        assert psnr(np.zeros((10, 10)), np.full((10, 10), 0.1)) == pytest.approx(20.0)
        y = rng.random((8, 8))
        assert psnr(x, y, 2.0) == pytest.approx(10 * np.log10(4 / np.mean((x - y) ** 2)), abs=1e-9)

    def test_window(self):
        w = gaussian_window()
        assert w.shape == (11, 11) and w.sum() == pytest.approx(1)

    def test_ssim_identity_and_small(self, rng):
        x = rng.random((16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 16)), np.zeros((10, 16)))

    def test_ssim_constant_offset_closed_form(self):
        c1, c2 = 0.01**2, 0.03**2
        expect = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
        assert ssim(np.full((11, 11), 0.5), np.full((11, 11), 0.6)) == pytest.approx(expect, abs=1e-12)
        del c2

    def test_checkerboard_negative(self):
        board = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
        neg = 1.0 - board
        w = gaussian_window()
        # sliding-window oracle
        vals = []
        for i in range(32 - 10):
            for j in range(32 - 10):
                a, b = board[i : i + 11, j : j + 11], neg[i : i + 11, j : j + 11]
                ma, mb = np.sum(w * a), np.sum(w * b)
                va, vb = np.sum(w * a * a) - ma**2, np.sum(w * b * b) - mb**2
                cov = np.sum(w * a * b) - ma * mb
                vals.append((2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma**2 + mb**2 + 1e-4) * (va + vb + 9e-4)))
        got = ssim(board, neg)
        assert got < 0
        assert got == pytest.approx(np.mean(vals), abs=1e-10)

    def test_ssim_matches_skimage(self, rng):
        skm = pytest.importorskip("skimage.metrics")
        x = rng.random((24, 20))
        y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
        ref = skm.structural_similarity(
            x, y, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert ssim(x, y) == pytest.approx(ref, abs=1e-9)

    @given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
    def test_ssim_bounded(self, x, y):
        assert ssim(x, y) <= 1 + 1e-12

    def test_evaluate_image_and_shading(self, rng):
        img = FieldStack(rng.random((3, 12, 12)))
        rep = evaluate_image(img, img)
        assert rep["psnr"] == 99 and rep["ssim"] == pytest.approx(1) and rep.config["lpips"] == "unavailable"
        shaded = evaluate_image(FieldStack(0.25 * img.values), img, shading=True)
        assert shaded["psnr"] == 99 and shaded.config["scale"] == pytest.approx(4)
