import numpy as np
import pytest

from hijacklab import detector, harness, stage1
from hijacklab.geometry import BBox, Vec2
from hijacklab.stage1 import Stage1Config
from hijacklab.targeting import AttackDirection


class TestMaskFromParams:
    def test_zero_params_give_half(self):
        m = np.zeros((4, 4))
        out = stage1.mask_from_params(m, gamma=1.0, s=2)
        assert out.shape == (8, 8)
        assert np.allclose(out, 0.5)

    def test_saturation(self):
        m = np.array([[40.0, -40.0]])
        out = stage1.mask_from_params(m, gamma=1.0, s=1)
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0)

    def test_block_sharing(self):
        m = np.random.default_rng(0).normal(size=(2, 3))
        out = stage1.mask_from_params(m, gamma=2.0, s=8)
        for bi in range(2):
            for bj in range(3):
                block = out[bi * 8 : (bi + 1) * 8, bj * 8 : (bj + 1) * 8]
                assert np.all(block == block[0, 0])

    def test_crop_to_shape(self):
        m = np.zeros((3, 3))
        out = stage1.mask_from_params(m, 1.0, 4, shape=(10, 11))
        assert out.shape == (10, 11)

    def test_monotone_in_m(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(3, 3))
        base = stage1.mask_from_params(m, 1.5, 1)
        bumped = stage1.mask_from_params(m + 0.1, 1.5, 1)
        assert np.all(bumped > base)

    def test_open_interval(self):
        m = np.array([[1e6, -1e6, 0.0]])
        out = stage1.mask_from_params(m, 3.0, 1)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


def brute_window_scores(mask, dh, dw):
    """Literal double sum of the sliding-window average."""
    h, w = mask.shape
    out = np.zeros((h - dh + 1, w - dw + 1))
    for i in range(h - dh + 1):
        for j in range(w - dw + 1):
            acc = 0.0
            for z1 in range(dh):
                for z2 in range(dw):
                    acc += mask[i + z1, j + z2] / (dh * dw)
            out[i, j] = acc
    return out


class TestWindowScores:
    def test_constant_mask(self):
        out = stage1.window_scores(np.full((9, 9), 0.3), 3, 4)
        assert out.shape == (7, 6)
        assert np.allclose(out, 0.3)

    def test_block_of_ones_peak(self):
        mask = np.zeros((30, 30))
        mask[10:14, 10:15] = 1.0
        out = stage1.window_scores(mask, 4, 5)
        assert out.max() == pytest.approx(1.0)
        assert np.unravel_index(np.argmax(out), out.shape) == (10, 10)

    def test_max_bounded_by_mask_max(self):
        rng = np.random.default_rng(2)
        mask = rng.uniform(0, 1, (20, 20))
        assert stage1.window_scores(mask, 5, 5).max() <= mask.max() + 1e-12

    def test_matches_literal_double_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            h = int(rng.integers(6, 16))
            w = int(rng.integers(6, 16))
            dh = int(rng.integers(1, h))
            dw = int(rng.integers(1, w))
            mask = rng.uniform(0, 1, (h, w))
            got = stage1.window_scores(mask, dh, dw)
            want = brute_window_scores(mask, dh, dw)
            assert np.abs(got - want).max() < 1e-12

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            stage1.window_scores(np.zeros((4, 4)), 5, 2)


class TestClusterLoss:
    def test_degenerate_window_uniform_mask(self):
        mask = np.full((6, 6), 0.7)
        scores = stage1.window_scores(mask, 1, 1)
        assert stage1.cluster_loss(scores, (6, 6)) == pytest.approx(0.0, abs=1e-12)

    def test_direct_evaluation(self):
        scores = np.array([[1.0, 0.0], [0.0, 0.0]])
        # padded mean over h*w=10 pixels: 1/10; |1 - 0.1| = 0.9
        assert stage1.cluster_loss(scores, (2, 5)) == pytest.approx(0.9)

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            scores = rng.uniform(0, 1, (5, 7))
            assert stage1.cluster_loss(scores, (8, 10)) >= 0.0


@pytest.fixture(scope="module")
def small_setup():
    cfg = detector.DetectorConfig()
    corpus = harness.make_corpus(4, seed=4700, frames_per_scene=1)
    weights = detector.train(corpus, cfg, seed=0, epochs=40)
    sc = harness.gen_scene(harness.SceneSpec(), seed=4750, goal="move_out")
    return weights, cfg, sc


class TestPreselectLocation:
    def test_single_candidate_region(self, small_setup):
        weights, cfg, sc = small_setup
        f = sc.t_start
        region = sc.regions[f]
        s1 = Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w, iterations=1)
        tight = BBox(region.x1, region.y1, region.x1 + sc.patch_w, region.y1 + sc.patch_h)
        (x, y), diag = stage1.preselect_location(
            sc.frames[f], sc.target_boxes[f], sc.direction, tight, s1, weights, cfg
        )
        assert (x, y) == (int(region.x1), int(region.y1))

    def test_region_smaller_than_window_rejected(self, small_setup):
        weights, cfg, sc = small_setup
        f = sc.t_start
        s1 = Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w, iterations=1)
        tiny = BBox(10, 10, 10 + sc.patch_w - 1, 10 + sc.patch_h - 1)
        with pytest.raises(ValueError):
            stage1.preselect_location(sc.frames[f], sc.target_boxes[f], sc.direction, tiny, s1, weights, cfg)

    def test_window_inside_region_and_deterministic(self, small_setup):
        weights, cfg, sc = small_setup
        f = sc.t_start
        region = sc.regions[f]
        s1 = Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w, iterations=3)
        (x, y), diag = stage1.preselect_location(
            sc.frames[f], sc.target_boxes[f], sc.direction, region, s1, weights, cfg
        )
        assert region.x1 <= x and x + sc.patch_w <= region.x2
        assert region.y1 <= y and y + sc.patch_h <= region.y2
        (x2, y2), _ = stage1.preselect_location(
            sc.frames[f], sc.target_boxes[f], sc.direction, region, s1, weights, cfg
        )
        assert (x, y) == (x2, y2)
        assert len(diag.loss_log) == 3
        assert diag.mask.shape == sc.frames[f].shape[:2]

    def test_frozen_blocks_outside_region(self, small_setup):
        weights, cfg, sc = small_setup
        f = sc.t_start
        region = sc.regions[f]
        s1 = Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w, iterations=2)
        _, diag = stage1.preselect_location(
            sc.frames[f], sc.target_boxes[f], sc.direction, region, s1, weights, cfg
        )
        # far corner block is frozen at the large negative value -> mask ~ 0
        assert diag.mask[0, 0] < 1e-3


class TestLocationStability:
    def test_identical_frames_zero_displacement(self, small_setup):
        weights, cfg, sc = small_setup
        f = sc.t_start
        s1 = Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w, iterations=2)
        disp = stage1.location_stability(
            [sc.frames[f], sc.frames[f]],
            [sc.target_boxes[f]] * 2,
            sc.direction,
            [sc.regions[f]] * 2,
            s1,
            weights,
            cfg,
        )
        assert disp == [0.0]

    def test_report_length(self, small_setup):
        weights, cfg, sc = small_setup
        s1 = Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w, iterations=1)
        fs = [sc.t_start, sc.t_start + 1, sc.t_start + 2]
        disp = stage1.location_stability(
            [sc.frames[f] for f in fs],
            [sc.target_boxes[f] for f in fs],
            sc.direction,
            [sc.regions[f] for f in fs],
            s1,
            weights,
            cfg,
        )
        assert len(disp) == 2

    def test_needs_two_frames(self, small_setup):
        weights, cfg, sc = small_setup
        s1 = Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w)
        with pytest.raises(ValueError):
            stage1.location_stability([sc.frames[0]], [sc.target_boxes[0]], sc.direction, [sc.regions[0]], s1, weights, cfg)
