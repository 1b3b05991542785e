import numpy as np
import pytest

from hijacklab import detector, harness, losses
from hijacklab.detector import DetectorConfig, DetectorWeights
from hijacklab.geometry import BBox
from hijacklab.losses import LossHyper


@pytest.fixture(scope="module")
def cfg():
    return DetectorConfig()


@pytest.fixture(scope="module")
def rand_weights(cfg):
    return detector.init_weights(cfg, seed=0)


@pytest.fixture(scope="module")
def rand_image(cfg):
    return np.random.default_rng(1).uniform(0.2, 0.8, (cfg.h, cfg.w, 3))


@pytest.fixture(scope="module")
def tiny_trained():
    """Small corpus, short schedule: enough to detect its own training scenes."""
    cfg = DetectorConfig()
    corpus = harness.make_corpus(6, seed=4200, frames_per_scene=1)
    weights = detector.train(corpus, cfg, seed=0, epochs=60)
    return corpus, weights, cfg


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            DetectorConfig(h=100)  # not divisible by stride
        with pytest.raises(ValueError):
            DetectorConfig(stride=16)
        with pytest.raises(ValueError):
            DetectorConfig(anchors=())
        with pytest.raises(ValueError):
            DetectorConfig(t_conf=0.0)
        with pytest.raises(ValueError):
            DetectorConfig(anchor_free=True)  # needs exactly one anchor

    def test_round_trip_dict(self, cfg):
        assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_zero_weights_decode(self, cfg):
        w = detector.init_weights(cfg, 0)
        zeros = DetectorWeights(*[np.zeros_like(a) for a in w.arrays()])
        zeros.anchor_base = np.asarray(cfg.anchors, dtype=np.float64)
        x = np.full((cfg.h, cfg.w, 3), 0.5)
        det = detector.forward(x, zeros, cfg)
        i = (4 * cfg.grid_w + 3) * cfg.n_anchors  # cell (3, 4), anchor 0
        assert det.boxes[i] == pytest.approx([28 - 8, 36 - 8, 28 + 8, 36 + 8])
        assert det.obj[i] == pytest.approx(0.5)
        assert det.conf[i] == pytest.approx(0.25)

    def test_proposal_count(self, cfg, rand_weights, rand_image):
        det = detector.forward(rand_image, rand_weights, cfg)
        assert det.n == (cfg.h // 8) * (cfg.w // 8) * 3 == 768

    def test_centers_inside_cells(self, cfg, rand_weights, rand_image):
        det = detector.forward(rand_image, rand_weights, cfg)
        cx = (det.boxes[:, 0] + det.boxes[:, 2]) / 2
        cy = (det.boxes[:, 1] + det.boxes[:, 3]) / 2
        assert np.all(cx > det.cell[:, 0] * 8) and np.all(cx < (det.cell[:, 0] + 1) * 8)
        assert np.all(cy > det.cell[:, 1] * 8) and np.all(cy < (det.cell[:, 1] + 1) * 8)

    def test_conf_is_obj_times_max_class(self, cfg, rand_weights, rand_image):
        det = detector.forward(rand_image, rand_weights, cfg)
        assert np.allclose(det.conf, det.obj * det.cls.max(axis=1))
        assert det.conf.min() >= 0.0 and det.conf.max() <= 1.0

    def test_pure(self, cfg, rand_weights, rand_image):
        a = detector.forward(rand_image, rand_weights, cfg)
        b = detector.forward(rand_image, rand_weights, cfg)
        assert np.array_equal(a.boxes, b.boxes) and a.kept == b.kept

    def test_shape_mismatch_rejected(self, cfg, rand_weights):
        with pytest.raises(ValueError):
            detector.forward(np.zeros((64, 64, 3)), rand_weights, cfg)

    def test_non_finite_weights_rejected(self, cfg, rand_weights, rand_image):
        bad = DetectorWeights(*[a.copy() for a in rand_weights.arrays()])
        bad.w1[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            detector.forward(rand_image, bad, cfg)

    def test_anchor_free_center_can_leave_cell(self):
        cfg = DetectorConfig(anchors=((16.0, 16.0),), anchor_free=True)
        w = detector.init_weights(cfg, 0)
        big = DetectorWeights(*[np.zeros_like(a) for a in w.arrays()])
        big.anchor_base = np.asarray(cfg.anchors, dtype=np.float64)
        big.bh[0] = 30.0  # saturate t_x: b_x = 2*sigmoid - 0.5 + c = c + 1.5
        det = detector.forward(np.full((cfg.h, cfg.w, 3), 0.5), big, cfg)
        i = (4 * cfg.grid_w + 3)
        cx = (det.boxes[i, 0] + det.boxes[i, 2]) / 2
        assert cx == pytest.approx((3 + 1.5) * 8, abs=1e-6)


class TestInputGradient:
    def test_constant_loss_zero_gradient(self, cfg, rand_weights, rand_image):
        from hijacklab.autodiff import tensor

        val, grad = detector.input_gradient(rand_image, rand_weights, cfg, lambda d, t: tensor(3.0))
        assert val == 3.0
        assert np.all(grad == 0)

    def test_linearity(self, cfg, rand_weights, rand_image):
        def loss1(d, t):
            return t.conf.sum()

        def loss2(d, t):
            return t.conf.sum() * 2.0

        _, g1 = detector.input_gradient(rand_image, rand_weights, cfg, loss1)
        _, g2 = detector.input_gradient(rand_image, rand_weights, cfg, loss2)
        assert np.allclose(g2, 2 * g1)

    def test_matches_finite_differences(self, cfg, rand_weights, rand_image):
        rep = detector.grad_check(
            rand_image, rand_weights, cfg, lambda d, t: (t.conf * t.conf).sum(), n_pixels=24, seed=5
        )
        assert rep["pass"], rep


class TestGradCheck:
    def test_linear_head_machine_precision(self, cfg):
        """Conv weights chosen so activations stay positive: the map to raw
        head outputs is linear and the check reaches ~machine precision."""
        w = detector.init_weights(cfg, 2)
        w.b1[:] = 5.0
        w.b2[:] = 5.0
        x = np.random.default_rng(3).uniform(0.3, 0.7, (cfg.h, cfg.w, 3))

        def loss(d, trace):
            return trace.raw.sum()

        rep = detector.grad_check(x, w, cfg, loss, n_pixels=16, eps=1e-3, tol=1e-6, seed=0)
        assert rep["max_rel_err"] < 1e-6

    def test_invalid_eps(self, cfg, rand_weights, rand_image):
        with pytest.raises(ValueError):
            detector.grad_check(rand_image, rand_weights, cfg, lambda d, t: t.conf.sum(), eps=0.0)

    def test_invalid_n_pixels(self, cfg, rand_weights, rand_image):
        with pytest.raises(ValueError):
            detector.grad_check(rand_image, rand_weights, cfg, lambda d, t: t.conf.sum(), n_pixels=0)


class TestTrain:
    def test_deterministic(self):
        cfg = DetectorConfig()
        corpus = harness.make_corpus(2, seed=4100, frames_per_scene=1)
        w1 = detector.train(corpus, cfg, seed=7, epochs=3)
        w2 = detector.train(corpus, cfg, seed=7, epochs=3)
        for a, b in zip(w1.arrays(), w2.arrays()):
            assert np.array_equal(a, b)

    def test_loss_decreases(self, tiny_trained):
        corpus, weights, cfg = tiny_trained
        initial = detector.training_loss(corpus, detector.init_weights(cfg, 0), cfg)
        final = detector.training_loss(corpus, weights, cfg)
        assert final < initial

    def test_overfits_single_image(self):
        cfg = DetectorConfig()
        corpus = harness.make_corpus(1, seed=4300, frames_per_scene=1)
        w = detector.train(corpus, cfg, seed=0, epochs=200)
        img, gts = corpus[0]
        det = detector.forward(img, w, cfg)
        target = next(b for b, c in gts if c == 0)
        best = max(det.kept, key=lambda i: det.conf[i] * (det.class_id[i] == 0), default=None)
        assert best is not None
        assert det.conf[best] > 0.5
        from hijacklab.geometry import iou

        assert iou(BBox.from_array(det.boxes[best]), target) > 0.5

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            detector.train([], DetectorConfig(), seed=0)

    def test_out_of_bounds_gt_rejected(self):
        cfg = DetectorConfig()
        img = np.full((cfg.h, cfg.w, 3), 0.5)
        with pytest.raises(ValueError):
            detector.train([(img, [(BBox(200, 10, 240, 40), 0)])], cfg, seed=0, epochs=1)


class TestWeightsIo:
    def test_round_trip_bit_identical(self, tmp_path, cfg, rand_weights):
        w = rand_weights.quantized()
        p = tmp_path / "w.cldw"
        detector.save_weights(p, w, cfg)
        back, cfg2 = detector.load_weights(p)
        assert cfg2 == cfg
        for a, b in zip(w.arrays(), back.arrays()):
            assert np.array_equal(a, b)
        detector.save_weights(tmp_path / "w2.cldw", back, cfg2)
        assert (tmp_path / "w.cldw").read_bytes() == (tmp_path / "w2.cldw").read_bytes()

    def test_truncated_rejected(self, tmp_path, cfg, rand_weights):
        p = tmp_path / "w.cldw"
        detector.save_weights(p, rand_weights.quantized(), cfg)
        p.write_bytes(p.read_bytes()[:-17])
        with pytest.raises(ValueError):
            detector.load_weights(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "w.cldw"
        p.write_bytes(b"WXYZ" + bytes(64))
        with pytest.raises(ValueError):
            detector.load_weights(p)
