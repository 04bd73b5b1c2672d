"""
Tests for focal, BFL, loss-rank mining, SHEM, CIoU and the total loss
"""

import logging
import math

import numpy as np
import pytest
import torch

from cratertan.model.detector import DetectionOutput, DetectorConfig, build_model
from cratertan.model.losses import (
    LossError,
    ObjectnessMode,
    SHEMConfig,
    bfl,
    build_targets,
    ciou_loss,
    focal_loss,
    focal_loss_with_logits,
    lrm,
    regularized_weights,
    shem,
    total_loss,
)
from cratertan.model.nam import NAM


def _brute_force_lrm(per_scale, top_k_percent, weights):
    """Reference: sort each scale, average the top ceil(K% n), weighted mean over scales"""
    numerator, denominator = 0.0, 0.0
    for values, weight in zip(per_scale, weights):
        values = np.sort(np.asarray(values, dtype=np.float64).ravel())[::-1]
        k = max(1, math.ceil(top_k_percent * values.size / 100.0 - 1e-9))
        numerator += weight * values[:k].mean()
        denominator += weight
    return numerator / denominator


def _perfect_output():
    """2x2 grid at stride 32 predicting exactly one 16 px box centered in cell (1, 1)"""
    grid = torch.zeros(1, 1, 2, 2, 6)
    grid[..., 4] = -20.0
    grid[0, 0, 1, 1, 4] = 20.0
    grid[0, 0, 1, 1, 5] = 20.0
    return DetectionOutput([grid], (32,), torch.tensor([[[16.0, 16.0]]]), 64)


PERFECT_TARGET = torch.tensor([[0.0, 0.0, 0.75, 0.75, 0.25, 0.25]])


def test_focal_loss_values():
    """Test focal arithmetic for positive and negative labels"""
    q = torch.tensor([0.9, 0.9])
    y = torch.tensor([1.0, 0.0])
    loss = focal_loss(q, y, focal_gamma=2.0)
    assert loss.tolist() == pytest.approx([0.01 * -math.log(0.9), 0.81 * -math.log(0.1)], rel=1e-5)


def test_focal_gamma_zero_is_cross_entropy():
    """Test gamma 0 reduces to binary cross-entropy"""
    q = torch.tensor([0.2, 0.7, 0.99], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    expected = torch.nn.functional.binary_cross_entropy(q, y, reduction="none")
    assert torch.allclose(focal_loss(q, y, focal_gamma=0.0), expected)


def test_focal_loss_clamps_probabilities():
    """Test certain-but-wrong predictions stay finite"""
    loss = focal_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]), focal_gamma=2.0)
    assert torch.isfinite(loss).all()
    assert loss[0] == pytest.approx(-math.log(1e-7), rel=1e-4)


def test_focal_with_logits_matches_probabilities():
    """Test the logit form agrees with the probability form"""
    logits = torch.linspace(-6, 6, 25, dtype=torch.float64)
    y = (torch.arange(25) % 2).double()
    a = focal_loss_with_logits(logits, y, focal_gamma=2.0, focal_alpha=0.25)
    b = focal_loss(logits.sigmoid(), y, focal_gamma=2.0, focal_alpha=0.25)
    assert torch.allclose(a, b, atol=1e-9)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 5.0])
def test_focal_strictly_decreasing_in_confidence(gamma):
    """Test the positive-label loss falls as q rises and the negative-label loss grows"""
    q = torch.linspace(0.001, 0.999, 999, dtype=torch.float64)
    assert torch.all(torch.diff(focal_loss(q, torch.ones_like(q), gamma)) < 0)
    assert torch.all(torch.diff(focal_loss(q, torch.zeros_like(q), gamma)) > 0)


def test_focal_gradients():
    """Test focal gradients against central differences"""
    generator = torch.Generator().manual_seed(1)
    q = (torch.rand(20, generator=generator, dtype=torch.float64) * 0.9 + 0.05).requires_grad_()
    y = (torch.rand(20, generator=generator) > 0.5).double()
    assert torch.autograd.gradcheck(
        lambda p: focal_loss(p, y, focal_gamma=2.0, focal_alpha=0.25), (q,), eps=1e-6, atol=1e-8, rtol=1e-4
    )


def test_bfl_scales_and_rejects_small_xi():
    """Test BFL is xi times the focal loss"""
    losses = torch.tensor([0.5, 2.0])
    assert bfl(losses, 1.5).tolist() == pytest.approx([0.75, 3.0])
    with pytest.raises(LossError):
        bfl(losses, 1.0)


def test_lrm_hand_computed():
    """Test top 70% of four values and a single-value scale"""
    per_scale = [torch.tensor([1.0, 2.0, 3.0, 4.0]), torch.tensor([10.0])]
    assert float(lrm(per_scale, 70.0, (4.0, 1.0))) == pytest.approx((4 * 3.0 + 10.0) / 5)


@pytest.mark.parametrize("seed,max_size", [(0, 1), (1, 7), (2, 200), (3, 10_000)])
def test_lrm_matches_brute_force(seed, max_size):
    """Test random inputs against a sort-and-average reference"""
    rng = np.random.default_rng(seed)
    for _ in range(20):
        sizes = rng.integers(1, max_size + 1, size=4)
        per_scale = [rng.exponential(size=int(n)) for n in sizes]
        k = float(rng.uniform(1, 100))
        weights = tuple(rng.uniform(0.1, 4.0, size=4))
        got = lrm([torch.from_numpy(v) for v in per_scale], k, weights)
        assert float(got) == pytest.approx(_brute_force_lrm(per_scale, k, weights), rel=1e-9)


def test_lrm_is_monotone_in_loss_values():
    """Test raising any loss value never lowers the mined loss"""
    rng = np.random.default_rng(5)
    for _ in range(200):
        per_scale = [torch.from_numpy(rng.exponential(size=int(n))) for n in rng.integers(1, 50, size=4)]
        k = float(rng.uniform(1, 100))
        before = float(lrm(per_scale, k, (4.0, 1.0, 0.4, 0.1)))
        scale = int(rng.integers(0, 4))
        raised = [v.clone() for v in per_scale]
        raised[scale][int(rng.integers(0, raised[scale].numel()))] += float(rng.uniform(0.0, 3.0))
        assert float(lrm(raised, k, (4.0, 1.0, 0.4, 0.1))) >= before - 1e-12


def test_lrm_decreases_as_more_values_are_kept():
    """Test a larger top-K share averages in smaller losses"""
    rng = np.random.default_rng(6)
    per_scale = [torch.from_numpy(rng.exponential(size=int(n))) for n in (400, 100, 25, 9)]
    values = [float(lrm(per_scale, k, (4.0, 1.0, 0.4, 0.1))) for k in np.linspace(1, 100, 40)]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_lrm_full_percent_is_weighted_mean():
    """Test K = 100 averages everything"""
    per_scale = [torch.tensor([1.0, 3.0]), torch.tensor([5.0, 7.0, 9.0])]
    assert float(lrm(per_scale, 100.0, (1.0, 1.0))) == pytest.approx((2.0 + 7.0) / 2)


def test_lrm_errors():
    """Test invalid K, missing weights and all-zero weights"""
    values = [torch.ones(4)]
    with pytest.raises(LossError):
        lrm(values, 0.0, (1.0,))
    with pytest.raises(LossError):
        lrm(values * 2, 50.0, (1.0,))
    with pytest.raises(LossError):
        lrm(values, 50.0, (0.0,))


def test_lrm_skips_empty_scale(caplog):
    """Test an empty scale is dropped from the weighted mean with a warning"""
    per_scale = [torch.zeros(0), torch.tensor([2.0, 4.0])]
    with caplog.at_level(logging.WARNING, logger="cratertan.model.losses"):
        assert float(lrm(per_scale, 100.0, (4.0, 1.0))) == pytest.approx(3.0)
    assert any("Scale 0 has no loss values" in r.getMessage() for r in caplog.records)


def test_shem_without_regularization_is_lrm_of_bfl():
    """Test reg_lambda 0 leaves only the mined term on random instances"""
    rng = np.random.default_rng(7)
    for _ in range(1000):
        cfg = SHEMConfig(
            reg_lambda=0.0,
            xi=float(rng.uniform(1.01, 3.0)),
            top_k_percent=float(rng.uniform(1, 100)),
        )
        per_scale = [torch.from_numpy(rng.exponential(size=int(n))) for n in rng.integers(1, 60, size=4)]
        expected = lrm([bfl(l, cfg.xi) for l in per_scale], cfg.top_k_percent, cfg.scale_weights)
        assert float(shem(per_scale, cfg, [torch.ones(3)])) == pytest.approx(float(expected), rel=1e-12)


def test_shem_adds_l2_term():
    """Test the L2 term is reg_lambda times the sum of squares"""
    cfg = SHEMConfig(reg_lambda=0.5, top_k_percent=100.0, scale_weights=(1.0,))
    per_scale = [torch.tensor([1.0, 1.0])]
    got = shem(per_scale, cfg, [torch.tensor([1.0, 2.0])])
    assert float(got) == pytest.approx(1.5 + 0.5 * 5.0)


def test_shem_gradients():
    """Test SHEM gradients for losses and weights against central differences"""
    generator = torch.Generator().manual_seed(2)
    inputs = tuple(
        (torch.rand(n, generator=generator, dtype=torch.float64) * 2.0 + 0.1).requires_grad_()
        for n in (10, 7, 5, 3)
    )
    weight = torch.randn(6, generator=generator, dtype=torch.float64).requires_grad_()
    cfg = SHEMConfig(reg_lambda=0.01)
    assert torch.autograd.gradcheck(
        lambda a, b, c, d, w: shem([a, b, c, d], cfg, [w]),
        inputs + (weight,),
        eps=1e-6,
        atol=1e-8,
        rtol=1e-4,
    )


def test_ciou_disjoint_unit_boxes():
    """Test unit boxes ten apart: 1 - 0 + 100 / 122"""
    pred = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    gt = torch.tensor([10.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    assert float(ciou_loss(pred, gt)) == pytest.approx(1.0 + 100.0 / 122.0, rel=1e-9)


def test_ciou_identical_boxes_is_zero():
    """Test a perfect box has zero loss"""
    box = torch.tensor([[3.0, 4.0, 2.0, 5.0]], dtype=torch.float64)
    assert float(ciou_loss(box, box)) == pytest.approx(0.0, abs=1e-9)


def test_ciou_aspect_ratio_term():
    """Test same center and area but different aspect ratio costs more than IoU alone"""
    pred = torch.tensor([0.0, 0.0, 2.0, 0.5], dtype=torch.float64)
    gt = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    iou = 0.5 / (1.0 + 1.0 - 0.5)
    assert float(ciou_loss(pred, gt)) > 1.0 - iou


def test_ciou_rejects_empty_boxes():
    """Test zero extent is an error"""
    with pytest.raises(LossError):
        ciou_loss(torch.tensor([0.0, 0.0, 0.0, 1.0]), torch.tensor([0.0, 0.0, 1.0, 1.0]))


def test_ciou_gradients():
    """Test CIoU gradients against finite differences"""
    generator = torch.Generator().manual_seed(0)
    centers = torch.rand(6, 2, generator=generator, dtype=torch.float64)
    sizes = torch.rand(6, 2, generator=generator, dtype=torch.float64) + 0.5
    pred = torch.cat((centers, sizes), 1).requires_grad_()
    gt = torch.cat((centers + 0.3, sizes * 0.8), 1)
    assert torch.autograd.gradcheck(lambda p: ciou_loss(p, gt), (pred,), eps=1e-6, atol=1e-6)


def test_build_targets_single_cell():
    """Test a target at a cell center lands in its own cell only"""
    assigned = build_targets(_perfect_output(), PERFECT_TARGET)
    assert len(assigned) == 1
    scale = assigned[0]
    assert len(scale) == 1
    assert (int(scale.gj), int(scale.gi), int(scale.anchor)) == (1, 1, 0)
    assert scale.box.tolist() == [pytest.approx([0.5, 0.5, 0.5, 0.5])]


@pytest.mark.parametrize("mode", list(ObjectnessMode))
def test_total_loss_perfect_prediction(mode):
    """Test a perfect prediction has near-zero total loss in both modes"""
    breakdown = total_loss(_perfect_output(), PERFECT_TARGET, mode, SHEMConfig())
    assert breakdown.num_positives == 1
    assert float(breakdown.box_ciou) == pytest.approx(0.0, abs=1e-6)
    assert float(breakdown.total) == pytest.approx(0.0, abs=1e-6)
    assert len(breakdown.per_scale_objectness) == 1


def test_total_loss_without_targets():
    """Test an empty target set gives objectness only"""
    breakdown = total_loss(_perfect_output(), torch.zeros(0, 6), "complex_source", SHEMConfig())
    assert breakdown.num_positives == 0
    assert float(breakdown.box_ciou) == 0.0
    assert float(breakdown.classification) == 0.0
    assert float(breakdown.objectness) > 0.0


def test_total_loss_backward_through_detector():
    """Test gradients reach the attention scale factors"""
    model = build_model(DetectorConfig(base_channels=4, input_size=64))
    out = model(torch.rand(2, 3, 64, 64))
    targets = torch.tensor([[0, 0, 0.5, 0.5, 0.2, 0.2], [1, 0, 0.3, 0.6, 0.1, 0.15]])
    breakdown = total_loss(out, targets, "complex_source", SHEMConfig(), regularized_weights(model))
    breakdown.total.backward()

    nam_block = next(m for m in model.modules() if isinstance(m, NAM))
    assert all(p.grad is not None for p in nam_block.scale_factors())
    assert set(breakdown.to_dict()) >= {"box_ciou", "objectness", "obj_scale3", "num_positives"}


def test_total_loss_gradients_match_finite_differences():
    """Test backprop through the detector against central differences on a 2-image batch"""
    torch.manual_seed(0)
    model = build_model(DetectorConfig(base_channels=4, input_size=64)).double().eval()
    images = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    targets = torch.tensor([[0, 0, 0.5, 0.5, 0.2, 0.2], [1, 0, 0.3, 0.6, 0.1, 0.15]])
    cfg = SHEMConfig()

    def loss():
        return total_loss(model(images), targets, "complex_source", cfg, regularized_weights(model)).total

    nam_block = next(m for m in model.modules() if isinstance(m, NAM))
    spots = [
        (model.head[0].bias, (4,)),
        (model.head[1].weight, (5, 0, 0, 0)),
        (model.backbone[1].conv.weight, (0, 0, 1, 1)),
        (nam_block.channel.bn.weight, (0,)),
    ]
    model.zero_grad()
    loss().backward()

    eps = 1e-6
    for param, index in spots:
        analytic = float(param.grad[index])
        with torch.no_grad():
            param[index] += eps
            plus = float(loss())
            param[index] -= 2 * eps
            minus = float(loss())
            param[index] += eps
        assert analytic == pytest.approx((plus - minus) / (2 * eps), rel=1e-2, abs=1e-6)


@pytest.mark.parametrize("mode", list(ObjectnessMode))
def test_loss_breakdown_total_is_weighted_sum(mode):
    """Test total equals the gain-weighted sum of its own components"""
    torch.manual_seed(1)
    model = build_model(DetectorConfig(base_channels=4, input_size=64))
    out = model(torch.rand(2, 3, 64, 64))
    targets = torch.tensor([[0, 0, 0.5, 0.5, 0.2, 0.2], [1, 0, 0.3, 0.6, 0.1, 0.15]])
    gains = (0.1, 0.7, 0.3)
    b = total_loss(out, targets, mode, SHEMConfig(reg_lambda=1e-3), regularized_weights(model), gains)

    expected = 0.1 * float(b.box_ciou) + 0.7 * (float(b.objectness) + float(b.regularization)) \
        + 0.3 * float(b.classification)
    assert float(b.total) == pytest.approx(expected, rel=1e-6)
    assert b.gains == gains
    if mode == ObjectnessMode.COMPLEX_SOURCE:
        assert float(b.regularization) > 0.0
    else:
        assert float(b.regularization) == 0.0


def test_regularized_weights_exclude_normalization():
    """Test the L2 set is exactly the conv, linear and attention projection weights"""
    model = build_model(DetectorConfig(base_channels=4, input_size=64))
    ids = {id(w) for w in regularized_weights(model)}

    expected = set()
    for module in model.modules():
        if isinstance(module, (torch.nn.Conv2d, torch.nn.Linear)):
            expected.add(id(module.weight))
        elif isinstance(module, torch.nn.MultiheadAttention):
            expected.add(id(module.in_proj_weight))
    assert ids == expected

    for module in model.modules():
        if isinstance(module, torch.nn.BatchNorm2d):
            assert id(module.weight) not in ids and id(module.bias) not in ids
        if isinstance(module, NAM):
            assert not any(id(p) in ids for p in module.scale_factors())
    assert id(model.head[0].bias) not in ids


def test_shem_config_validation():
    """Test invalid SHEM parameters"""
    with pytest.raises(LossError):
        SHEMConfig(xi=1.0).validate(4)
    with pytest.raises(LossError):
        SHEMConfig(scale_weights=(1.0, 1.0)).validate(3)
    with pytest.raises(LossError):
        SHEMConfig(top_k_percent=120.0).validate(4)
    SHEMConfig(scale_weights=(4.0, 1.0, 0.4)).validate(3)
