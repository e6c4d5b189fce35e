"""Set-prediction loss: symmetry, normalization, batched/per-image agreement."""

import numpy as np
import pytest

from deco.core import Tensor
from deco.decoder import DecoderOutput, DetectionSet
from deco.matching import CostWeights, batch_prediction_loss, set_prediction_loss


def random_output(rng, n=6, k=3, layers=2):
    per_layer = []
    for _ in range(layers):
        logits = Tensor(rng.normal(size=(n, k + 1)), dtype=np.float64, requires_grad=True)
        boxes = Tensor(rng.uniform(0.2, 0.8, size=(n, 4)), dtype=np.float64, requires_grad=True)
        per_layer.append(DetectionSet(class_logits=logits, boxes=boxes))
    return DecoderOutput(per_layer=per_layer)


def random_gts(rng, m, k=3):
    return [(int(rng.integers(0, k)), rng.uniform(0.25, 0.75, size=4)) for _ in range(m)]


def permute_output(output, perm):
    per_layer = []
    for det in output.per_layer:
        per_layer.append(DetectionSet(
            class_logits=Tensor(det.class_logits.data[perm], dtype=np.float64),
            boxes=Tensor(det.boxes.data[perm], dtype=np.float64)))
    return DecoderOutput(per_layer=per_layer)


class TestPermutationInvariance:
    def test_gt_order_irrelevant(self, rng):
        for _ in range(50):
            out = random_output(rng)
            gts = random_gts(rng, int(rng.integers(1, 5)))
            base = set_prediction_loss(out, gts).total.item()
            perm = rng.permutation(len(gts))
            shuffled = [gts[i] for i in perm]
            assert set_prediction_loss(out, shuffled).total.item() == pytest.approx(base, rel=1e-6)

    def test_prediction_order_irrelevant(self, rng):
        for _ in range(50):
            out = random_output(rng)
            gts = random_gts(rng, int(rng.integers(0, 5)))
            base = set_prediction_loss(out, gts).total.item()
            perm = rng.permutation(6)
            assert set_prediction_loss(permute_output(out, perm), gts).total.item() \
                == pytest.approx(base, rel=1e-6)


class TestLossStructure:
    def test_zero_gts_class_only(self, rng):
        out = random_output(rng)
        lb = set_prediction_loss(out, [])
        assert lb.l1_loss == 0.0 and lb.giou_loss == 0.0
        assert lb.class_loss > 0.0
        assert lb.total.item() == pytest.approx(lb.class_loss * 1.0, rel=1e-9)

    def test_perfect_prediction_box_terms_vanish(self):
        # slot 0 sits exactly on the gt with near-certain class probability
        logits = np.full((3, 3), -20.0)
        logits[:, 2] = 0.0  # default every slot to no-object
        logits[0] = [20.0, -20.0, -20.0]
        boxes = np.full((3, 4), 0.5)
        boxes[0] = [0.3, 0.4, 0.2, 0.1]
        out = DecoderOutput(per_layer=[DetectionSet(
            class_logits=Tensor(logits, dtype=np.float64),
            boxes=Tensor(boxes, dtype=np.float64))])
        lb = set_prediction_loss(out, [(0, np.array([0.3, 0.4, 0.2, 0.1]))])
        assert lb.l1_loss == pytest.approx(0.0, abs=1e-9)
        assert lb.giou_loss == pytest.approx(0.0, abs=1e-9)
        assert lb.class_loss == pytest.approx(0.0, abs=1e-6)

    def test_aux_sums_layers(self, rng):
        out = random_output(rng, layers=3)
        gts = random_gts(rng, 2)
        full = set_prediction_loss(out, gts, aux=True)
        last = set_prediction_loss(DecoderOutput(per_layer=out.per_layer[-1:]), gts)
        assert len(full.per_layer) == 3
        assert full.per_layer[-1]["class"] == pytest.approx(last.class_loss, rel=1e-9)
        no_aux = set_prediction_loss(out, gts, aux=False)
        assert no_aux.total.item() == pytest.approx(last.total.item(), rel=1e-9)

    def test_weights_scale_terms(self, rng):
        out = random_output(rng, layers=1)
        gts = random_gts(rng, 2)
        w1 = CostWeights(class_weight=1.0, l1_weight=5.0, giou_weight=2.0)
        w2 = CostWeights(class_weight=1.0, l1_weight=10.0, giou_weight=2.0)
        lb1 = set_prediction_loss(out, gts, weights=w1)
        lb2 = set_prediction_loss(out, gts, weights=w2)
        # same matching (l1 dominates both costs identically ordered) -> the
        # total moves by exactly the extra l1 contribution
        if lb1.l1_loss == pytest.approx(lb2.l1_loss, rel=1e-9):
            assert lb2.total.item() - lb1.total.item() == pytest.approx(5.0 * lb1.l1_loss, rel=1e-6)

    def test_loss_backward_reaches_inputs(self, rng):
        out = random_output(rng, layers=2)
        gts = random_gts(rng, 3)
        lb = set_prediction_loss(out, gts)
        lb.total.backward()
        for det in out.per_layer:
            assert det.class_logits.grad is not None
            assert det.boxes.grad is not None
            assert np.all(np.isfinite(det.class_logits.grad))


class TestBatchedAgreement:
    def test_batched_equals_mean_of_per_image(self, rng):
        b, n, k, layers = 4, 6, 3, 2
        logits = rng.normal(size=(layers, b, n, k + 1))
        boxes = rng.uniform(0.2, 0.8, size=(layers, b, n, 4))
        gts_per_image = [random_gts(rng, int(rng.integers(0, 4))) for _ in range(b)]

        layer_outputs = [(Tensor(logits[l], dtype=np.float64, requires_grad=True),
                          Tensor(boxes[l], dtype=np.float64, requires_grad=True))
                         for l in range(layers)]
        batched = batch_prediction_loss(layer_outputs, gts_per_image)

        per_image_total = 0.0
        for i in range(b):
            out = DecoderOutput(per_layer=[DetectionSet(
                class_logits=Tensor(logits[l, i], dtype=np.float64),
                boxes=Tensor(boxes[l, i], dtype=np.float64)) for l in range(layers)])
            per_image_total += set_prediction_loss(out, gts_per_image[i]).total.item()
        assert batched.total.item() == pytest.approx(per_image_total / b, rel=1e-9)

    def test_batched_gradient_flows(self, rng):
        logits = Tensor(rng.normal(size=(2, 5, 4)), dtype=np.float64, requires_grad=True)
        boxes = Tensor(rng.uniform(0.3, 0.7, size=(2, 5, 4)), dtype=np.float64, requires_grad=True)
        gts = [random_gts(rng, 2), []]
        lb = batch_prediction_loss([(logits, boxes)], gts)
        lb.total.backward()
        assert logits.grad is not None and boxes.grad is not None
