import json
import math

import numpy as np
import pytest

from unigrounder import tensors as tt
from unigrounder.losses import (LossWeights, foreground_bce, gaussian_target, giou, giou_loss,
                                guided_attention_loss, kl_loss, l1_box_loss, make_targets, positive_weight,
                                task_loss, breakdown_line)
from unigrounder.model import FramePredictions
from unigrounder.tensors import ContractError, Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestGaussianTarget:
    def test_argmax_and_normalization(self):
        for w, c in [(5, 0), (9, 4), (12, 11)]:
            p = gaussian_target(c, w)
            assert int(np.argmax(p)) == c
            assert abs(p.sum() - 1) < 1e-9

    def test_closed_form_ratio(self):
        p = gaussian_target(2, 5)
        np.testing.assert_allclose(p, p[::-1])
        assert p[2] / p[1] == pytest.approx(math.exp(0.5), rel=1e-12)

    def test_translation_equivariant(self):
        for c in range(3, 10):
            assert np.argmax(gaussian_target(c + 1, 20)) == np.argmax(gaussian_target(c, 20)) + 1
            a, b = gaussian_target(c + 1, 20), gaussian_target(c, 20)
            # same shape up to the renormalisation constant
            np.testing.assert_allclose(a[c - 2:c + 5] / a[c + 1], b[c - 3:c + 4] / b[c], rtol=1e-12)

    def test_center_outside(self):
        with pytest.raises(ValueError):
            gaussian_target(5, 5)


class TestTargets:
    def test_foreground_mask(self):
        tg = make_targets(2, 4, 8)
        np.testing.assert_array_equal(tg.fg, [0, 0, 1, 1, 1, 0, 0, 0])

    def test_clipping(self):
        boxes = np.arange(20, dtype=float).reshape(5, 4)
        tg = make_targets(-2, 2, 6, boxes)
        assert (tg.s, tg.e) == (0, 2)
        np.testing.assert_array_equal(tg.boxes, boxes[2:5])
        tg = make_targets(4, 8, 6, boxes)
        assert (tg.s, tg.e) == (4, 5)
        np.testing.assert_array_equal(tg.boxes, boxes[:2])


class TestBoxLosses:
    def test_l1_identical_and_offset(self):
        b = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.4, 0.1, 0.3]])
        assert l1_box_loss(t64(b), b).item() == 0.0
        assert l1_box_loss(t64(b + 0.1), b).item() == pytest.approx(0.4, abs=1e-12)

    def test_giou_identical(self):
        b = np.array([[0.5, 0.5, 0.2, 0.2]])
        assert giou_loss(t64(b), b).item() == pytest.approx(0.0, abs=1e-12)

    def test_giou_diagonal_boxes(self):
        a = np.array([[0.25, 0.25, 0.5, 0.5]])
        b = np.array([[0.75, 0.75, 0.5, 0.5]])
        assert giou(t64(a), b).item() == pytest.approx(-0.5, abs=1e-12)
        assert giou_loss(t64(a), b).item() == pytest.approx(1.5, abs=1e-12)

    def test_giou_nested(self):
        outer = np.array([[0.5, 0.5, 0.4, 0.4]])
        inner = np.array([[0.5, 0.5, 0.2, 0.2]])
        assert giou(t64(inner), outer).item() == pytest.approx(0.25, abs=1e-12)
        assert giou_loss(t64(inner), outer).item() == pytest.approx(0.75, abs=1e-12)

    def test_giou_zero_area_pred(self):
        val = giou_loss(t64([[0.5, 0.5, 0.0, 0.0]]), np.array([[0.3, 0.3, 0.2, 0.2]])).item()
        assert np.isfinite(val) and 1.0 <= val <= 2.0

    def test_giou_range_and_no_slack_case(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)])[None]
            b = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)])[None]
            per = 1 - giou(t64(a), b).item()
            assert 0.0 <= per <= 2.0
        # boxes sharing a full edge: hull == union, so gIoU == IoU
        a = np.array([[0.3, 0.5, 0.2, 0.4]])
        b = np.array([[0.4, 0.5, 0.2, 0.4]])
        assert giou(t64(a), b).item() == pytest.approx(0.1 * 0.4 / (0.3 * 0.4), rel=1e-12)


class TestKL:
    def test_matching_distribution_zero(self):
        p = gaussian_target(3, 8)
        assert kl_loss(t64(np.log(p)), p).item() == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        # KL(u || softmax([10, 0, 0])) = -log 3 + logsumexp - 10/3
        lse = math.log(math.exp(10) + 2)
        expected = -math.log(3) + lse - 10 / 3
        assert expected == pytest.approx(5.568145, abs=1e-6)
        q = np.exp([10 - lse, -lse, -lse])
        assert expected == pytest.approx(float(np.sum(np.full(3, 1 / 3) * np.log((1 / 3) / q))), abs=1e-12)
        assert kl_loss(t64([10.0, 0.0, 0.0]), np.full(3, 1 / 3)).item() == pytest.approx(expected, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            assert kl_loss(t64(rng.standard_normal(6) * 3), p).item() >= -1e-12


class TestBCE:
    def test_perfect(self):
        f = np.array([0, 1, 1, 0.0])
        assert foreground_bce(t64(f), f).item() <= 4 * abs(math.log(1 - 1e-6))

    def test_balanced(self):
        assert foreground_bce(t64([0.5] * 4), np.array([0, 0, 1, 1.0])).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_weighted(self):
        assert positive_weight(np.array([0, 0, 0, 1.0])) == 3
        val = foreground_bce(t64([0.5] * 4), np.array([0, 0, 0, 1.0])).item()
        assert val == pytest.approx(1.5 * math.log(2), abs=1e-12)
        assert val == pytest.approx(1.0397, abs=1e-4)

    def test_alpha_clamps(self):
        assert positive_weight(np.zeros(5)) == 1
        assert positive_weight(np.array([1.0] * 4 + [0.0])) == 1
        f = np.zeros(300)
        f[0] = 1
        assert positive_weight(f) == 100


class TestGuidedAttention:
    def test_all_mass_inside(self):
        a = np.zeros((1, 1, 4, 4))
        a[..., 1] = 1.0
        assert guided_attention_loss(t64(a), 1, 2).item() == pytest.approx(0.0, abs=1e-7)

    def test_uniform(self):
        a = np.full((2, 3, 4, 4), 0.25)
        assert guided_attention_loss(t64(a), 1, 2).item() == pytest.approx(math.log(2), abs=1e-7)

    def test_monotone_in_segment_mass(self):
        vals = []
        for m in (0.2, 0.5, 0.8):
            a = np.array([[[[m, 1 - m], [m, 1 - m]]]])
            vals.append(guided_attention_loss(t64(a), 0, 0).item())
        assert vals[0] > vals[1] > vals[2]


def random_preds(rng, w, grad=True):
    return FramePredictions(t64(rng.uniform(0.2, 0.8, (w, 4)), grad), t64(rng.standard_normal(w), grad),
                            t64(rng.standard_normal(w), grad), t64(rng.uniform(0.1, 0.9, w), grad))


def random_maps(rng, w, grad=True):
    a = rng.uniform(0.1, 1, (2, 2, w, w))
    return t64(a / a.sum(-1, keepdims=True), grad)


class TestTaskLoss:
    def test_nlq_has_no_spatial_terms(self):
        rng = np.random.default_rng(0)
        _, br = task_loss("nlq", random_preds(rng, 6), random_maps(rng, 6), make_targets(1, 3, 6))
        assert br["l1"] == 0.0 and br["giou"] == 0.0

    def test_vq2d_needs_boxes(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            task_loss("vq2d", random_preds(rng, 6), random_maps(rng, 6), make_targets(1, 3, 6))

    def test_vq2d_minus_nlq_is_spatial(self):
        rng = np.random.default_rng(1)
        preds, maps = random_preds(rng, 6), random_maps(rng, 6)
        boxes = rng.uniform(0.2, 0.8, (3, 4))
        tgt = make_targets(1, 3, 6, boxes)
        tv, brv = task_loss("vq2d", preds, maps, tgt)
        tn, _ = task_loss("nlq", preds, maps, tgt)
        pb = tt.take(preds.boxes, np.arange(1, 4), axis=0)
        spatial = 5 * l1_box_loss(pb, boxes).item() + 2 * giou_loss(pb, boxes).item()
        assert tv.item() - tn.item() == pytest.approx(spatial, abs=1e-12)
        assert brv["l1"] + brv["giou"] == pytest.approx(spatial, abs=1e-12)

    def test_perfect_predictions(self):
        w, s, e = 8, 2, 4
        boxes = np.tile([0.5, 0.5, 0.2, 0.2], (3, 1))
        tgt = make_targets(s, e, w, boxes)
        all_boxes = np.tile([0.5, 0.5, 0.2, 0.2], (w, 1))
        preds = FramePredictions(t64(all_boxes), t64(np.log(tgt.p_s)), t64(np.log(tgt.p_e)),
                                 t64(np.clip(tgt.fg, 1e-6, 1 - 1e-6)))
        maps = t64(np.full((1, 1, w, w), 1.0 / w))
        total, br = task_loss("vq2d", preds, maps, tgt)
        assert total.item() - br["att"] < 1e-3

    def test_kl_weight_linear(self):
        rng = np.random.default_rng(2)
        preds, maps = random_preds(rng, 6), random_maps(rng, 6)
        tgt = make_targets(1, 3, 6)
        _, a = task_loss("mq", preds, maps, tgt, LossWeights())
        _, b = task_loss("mq", preds, maps, tgt, LossWeights(kl=20.0))
        assert b["kl_s"] == pytest.approx(2 * a["kl_s"], rel=1e-12)
        assert b["kl_e"] == pytest.approx(2 * a["kl_e"], rel=1e-12)
        assert b["bce"] == a["bce"]

    def test_breakdown_line_keys(self):
        rng = np.random.default_rng(0)
        _, br = task_loss("nlq", random_preds(rng, 6), random_maps(rng, 6), make_targets(1, 3, 6))
        rec = json.loads(breakdown_line("nlq", br))
        assert list(rec) == ["task", "total", "kl_s", "kl_e", "bce", "att", "l1", "giou"]

    def test_weights_non_negative(self):
        with pytest.raises(ValueError):
            LossWeights(kl=-1)
        assert LossWeights() == LossWeights(5, 2, 10, 1, 2)


LOSSES = {
    "l1": lambda p, rng: l1_box_loss(p.boxes, rng.uniform(0.2, 0.8, (6, 4))),
    "giou": lambda p, rng: giou_loss(p.boxes, rng.uniform(0.2, 0.6, (6, 4))),
    "kl": lambda p, rng: kl_loss(p.start_logits, rng.dirichlet(np.ones(6))),
    "bce": lambda p, rng: foreground_bce(p.foreground, (rng.uniform(size=6) > 0.5).astype(float)),
}


@pytest.mark.parametrize("name", sorted(LOSSES) + ["att", "vq2d", "nlq"])
@pytest.mark.parametrize("seed", range(10))
def test_loss_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    preds = random_preds(rng, 6)
    maps = random_maps(rng, 6)
    params = [preds.boxes, preds.start_logits, preds.end_logits, preds.foreground, maps]
    if name in LOSSES:
        state = rng.bit_generator.state

        def f():
            rng.bit_generator.state = state
            return LOSSES[name](preds, rng)
    elif name == "att":
        def f():
            return guided_attention_loss(maps, 1, 3)
    else:
        tgt = make_targets(1, 3, 6, rng.uniform(0.3, 0.7, (3, 4)))

        def f():
            return task_loss(name, preds, maps, tgt)[0]
    rep = tt.finite_diff_check(f, params, tol=1e-4)
    assert rep.passed, rep.errors
    assert f().item() >= 0
