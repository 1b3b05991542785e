import math

import numpy as np
import pytest

from hijacklab import detector, losses, targeting
from hijacklab.autodiff import tensor
from hijacklab.detector import DetectorConfig, SelectedProposals
from hijacklab.geometry import BBox, Vec2
from hijacklab.losses import LossHyper
from hijacklab.targeting import FilterResult


def selected(confs, boxes=None):
    confs = np.asarray(confs, dtype=np.float64)
    if boxes is None:
        boxes = np.tile([0.0, 0.0, 10.0, 10.0], (confs.size, 1))
    boxes = np.asarray(boxes, dtype=np.float64)
    return SelectedProposals(
        conf=tensor(confs),
        x1=tensor(boxes[:, 0]),
        y1=tensor(boxes[:, 1]),
        x2=tensor(boxes[:, 2]),
        y2=tensor(boxes[:, 3]),
    )


class TestScoreLoss:
    def test_direct_evaluation(self):
        l_s, l_e, l_f = losses.score_loss(selected([0.6]), selected([0.7]), LossHyper(mu1=1.0))
        assert float(l_e.data) == pytest.approx(0.36)
        assert float(l_f.data) == pytest.approx(0.09, abs=1e-12)
        assert float(l_s.data) == pytest.approx(0.45)

    def test_vanishes_when_done(self):
        l_s, _, _ = losses.score_loss(selected([0.1, 0.25]), selected([1.0]), LossHyper())
        assert float(l_s.data) == 0.0

    def test_indicator_strict_at_threshold(self):
        _, l_e, _ = losses.score_loss(selected([0.25]), selected([0.5]), LossHyper(t_conf=0.25))
        assert float(l_e.data) == 0.0

    def test_empty_erasure_allowed(self):
        l_s, l_e, _ = losses.score_loss(None, selected([0.5]), LossHyper())
        assert float(l_e.data) == 0.0
        assert float(l_s.data) == pytest.approx(0.25)

    def test_empty_fabrication_rejected(self):
        with pytest.raises(ValueError):
            losses.score_loss(selected([0.5]), None, LossHyper())

    def test_mean_over_full_erasure_set(self):
        # gated members contribute conf^2; the mean divides by |B_e| incl. gated-out
        _, l_e, _ = losses.score_loss(selected([0.6, 0.1]), selected([0.5]), LossHyper())
        assert float(l_e.data) == pytest.approx(0.18)


class TestRegressionLoss:
    def test_perfect_match_is_zero(self):
        b_t = BBox(0, 0, 10, 10)
        l_r, l_iou, l_c = losses.regression_loss(selected([0.9]), b_t, LossHyper())
        assert float(l_iou.data) == pytest.approx(0.0, abs=1e-12)
        assert float(l_c.data) == pytest.approx(0.0, abs=1e-12)
        assert float(l_r.data) == pytest.approx(0.0, abs=1e-12)

    def test_direct_evaluation(self):
        b_t = BBox(5, 0, 15, 10)
        sel = selected([0.9], [[0, 0, 10, 10]])
        l_r, l_iou, l_c = losses.regression_loss(sel, b_t, LossHyper(beta=0.01))
        assert float(l_iou.data) == pytest.approx(-math.log(1 / 3))
        assert float(l_c.data) == pytest.approx(25.0)
        assert float(l_r.data) == pytest.approx(-math.log(1 / 3) + 0.25)

    def test_disjoint_clamped(self):
        b_t = BBox(100, 100, 110, 110)
        sel = selected([0.9], [[0, 0, 10, 10]])
        _, l_iou, _ = losses.regression_loss(sel, b_t, LossHyper(iou_floor=1e-6))
        assert float(l_iou.data) == pytest.approx(-math.log(1e-6))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            losses.regression_loss(None, BBox(0, 0, 1, 1), LossHyper())


class TestTvLoss:
    def test_constant_patch_near_zero(self):
        patch = np.full((5, 7, 3), 0.4)
        val = float(losses.tv_loss(patch).data)
        assert val <= 1e-8 * 5 * 7 * 3

    def test_hand_evaluated_2x2(self):
        vals = np.array([[0.0, 1.0], [0.0, 1.0]])
        patch = np.zeros((2, 2, 1))
        patch[:, :, 0] = vals
        # single-channel block replicated so the helper sees one channel
        t = tensor(patch)
        assert float(losses.tv_loss(t).data) == pytest.approx(1.0, abs=1e-7)

    def test_invariant_to_constant_shift(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.1, 0.6, (6, 6, 3))
        a = float(losses.tv_loss(p).data)
        b = float(losses.tv_loss(p + 0.3).data)
        assert a == pytest.approx(b, rel=1e-9)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            losses.tv_loss(np.zeros((1, 5, 3)))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        p0 = rng.uniform(0.2, 0.8, (4, 4, 3))
        t = tensor(p0)
        losses.tv_loss(t).backward()
        eps = 1e-6
        for idx in [(0, 0, 0), (1, 2, 1), (3, 3, 2)]:
            pp = p0.copy()
            pp[idx] += eps
            pm = p0.copy()
            pm[idx] -= eps
            fd = (float(losses.tv_loss(pp).data) - float(losses.tv_loss(pm).data)) / (2 * eps)
            assert t.grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestEraseLoss:
    def test_empty_is_zero(self):
        assert float(losses.erase_loss(None).data) == 0.0

    def test_direct_evaluation(self):
        assert float(losses.erase_loss(selected([0.6, 0.8])).data) == pytest.approx(0.5)

    def test_zero_scores(self):
        assert float(losses.erase_loss(selected([0.0, 0.0])).data) == 0.0


@pytest.fixture(scope="module")
def live_pass():
    cfg = DetectorConfig()
    w = detector.init_weights(cfg, 3)
    w.bh[4 :: 5 + cfg.n_classes] = 1.0  # lively objectness so NMS keeps a few
    x = np.random.default_rng(5).uniform(0.2, 0.8, (cfg.h, cfg.w, 3))
    det, trace = detector.forward_with_trace(x, w, cfg)
    return det, trace, cfg


class TestConditionalAdvLoss:
    def _fr(self, det, b_f_alive: bool, b_e_alive: bool):
        kept = list(det.kept)
        assert kept, "fixture pass must keep something"
        others = [i for i in range(det.n) if i not in det.kept]
        b_f = kept[0] if b_f_alive else others[0]
        b_e = frozenset({kept[1] if len(kept) > 1 else kept[0]}) if b_e_alive else frozenset({others[1]})
        if b_f in b_e:
            b_e = frozenset({others[2]})
        return FilterResult(b_f=b_f, b_e=b_e)

    def test_regression_branch(self, live_pass):
        det, trace, cfg = live_pass
        fr = self._fr(det, True, False)
        _, bd = losses.conditional_adv_loss(det, fr, BBox(10, 10, 30, 30), LossHyper(), trace)
        assert bd.branch == "regression"
        assert bd.l_adv == pytest.approx(bd.l_r)

    def test_score_branch_when_bf_dead(self, live_pass):
        det, trace, cfg = live_pass
        fr = self._fr(det, False, False)
        _, bd = losses.conditional_adv_loss(det, fr, BBox(10, 10, 30, 30), LossHyper(), trace)
        assert bd.branch == "score"
        assert bd.l_adv == pytest.approx(bd.l_s)

    def test_score_branch_when_be_survives(self, live_pass):
        det, trace, cfg = live_pass
        fr = self._fr(det, True, True)
        _, bd = losses.conditional_adv_loss(det, fr, BBox(10, 10, 30, 30), LossHyper(), trace)
        assert bd.branch == "score"

    def test_branch_is_pure_function_of_pass(self, live_pass):
        det, trace, cfg = live_pass
        fr = self._fr(det, True, True)
        b1 = losses.conditional_adv_loss(det, fr, BBox(10, 10, 30, 30), LossHyper(), trace)[1].branch
        b2 = losses.conditional_adv_loss(det, fr, BBox(10, 10, 30, 30), LossHyper(), trace)[1].branch
        assert b1 == b2

    def test_forced_branch(self, live_pass):
        det, trace, cfg = live_pass
        fr = self._fr(det, True, False)
        _, bd = losses.conditional_adv_loss(det, fr, BBox(10, 10, 30, 30), LossHyper(), trace, branch="score")
        assert bd.branch == "score"
        with pytest.raises(ValueError):
            losses.conditional_adv_loss(det, fr, BBox(10, 10, 30, 30), LossHyper(), trace, branch="both")


class TestLossProperties:
    def test_non_negative_and_finite_fuzz(self):
        rng = np.random.default_rng(11)
        hyper = LossHyper()
        for _ in range(100):
            n_e = int(rng.integers(0, 5))
            confs_e = rng.uniform(0, 1, n_e)
            confs_f = rng.uniform(0, 1, 1)
            boxes = np.sort(rng.uniform(0, 100, (1, 2, 2)), axis=2).reshape(1, 4)[:, [0, 2, 1, 3]]
            b_e = selected(confs_e) if n_e else None
            b_f = selected(confs_f, boxes)
            b_t = BBox(20, 20, 60, 50)
            for t in (
                losses.score_loss(b_e, b_f, hyper)
                + losses.regression_loss(b_f, b_t, hyper)
                + (losses.erase_loss(b_e),)
            ):
                v = float(t.data)
                assert np.isfinite(v) and v >= 0.0

    def test_gradients_wrt_raw_outputs_match_fd(self):
        """Loss gradients chained to raw head values, finite-difference checked."""
        cfg = DetectorConfig()
        w = detector.init_weights(cfg, 3)
        x = np.random.default_rng(5).uniform(0.2, 0.8, (cfg.h, cfg.w, 3))
        det, trace = detector.forward_with_trace(x, w, cfg)
        b_t = BBox(40, 40, 70, 64)
        b_o = BBox(30, 40, 60, 64)
        fr = targeting.split(det, b_t, b_o, cfg, Vec2(2, 0))
        hyper = LossHyper()

        def loss_fn(d, tr):
            return losses.conditional_adv_loss(d, fr, b_t, hyper, tr, branch="score")[0]

        val, grad = detector.input_gradient(x, w, cfg, loss_fn)
        rng = np.random.default_rng(0)
        eps = 1e-3
        for _ in range(8):
            i, j, c = int(rng.integers(cfg.h)), int(rng.integers(cfg.w)), int(rng.integers(3))
            xp = x.copy()
            xp[i, j, c] += eps
            xm = x.copy()
            xm[i, j, c] -= eps
            fp = loss_fn(*detector.forward_with_trace(xp, w, cfg)).data
            fm = loss_fn(*detector.forward_with_trace(xm, w, cfg)).data
            fd = (float(fp) - float(fm)) / (2 * eps)
            assert grad[i, j, c] == pytest.approx(fd, rel=1e-4, abs=1e-8)
