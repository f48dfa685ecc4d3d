import math

import numpy as np
import pytest
import torch

from semiseg import (
    ConfigurationError,
    LossConfig,
    McConfig,
    ShapeError,
    SoftLabelRecord,
    class_region_mass,
    class_region_partition,
    inverse_frequency_weights,
    labeled_loss,
    one_hot,
    semi_supervised_loss,
    unlabeled_loss,
    zeta_weights,
)

from oracles import labeled_loss_by_loops, unlabeled_loss_by_loops


def make_record(soft_label, confidence, uncertainty=None):
    soft_label = np.asarray(soft_label, dtype=np.float32)
    confidence = np.asarray(confidence, dtype=np.float32)
    if uncertainty is None:
        uncertainty = np.zeros(soft_label.shape[:2], dtype=np.float32)
    return SoftLabelRecord(
        soft_label=soft_label, uncertainty=uncertainty, confidence=confidence,
        source_image_id="t", teacher_checkpoint_id="t", mc_config=McConfig(),
    )


# ---------------------------------------------------------------------------
# labeled loss


def test_labeled_loss_perfect_prediction_is_zero():
    y = torch.tensor(one_hot(np.array([[0, 1], [1, 0]]), 2))
    assert float(labeled_loss(y, y)) == 0.0


def test_labeled_loss_analytic_half():
    p = torch.tensor([[[[0.5, 0.5]]]], dtype=torch.float64)
    y = torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64)
    assert abs(float(labeled_loss(p, y)) - math.log(2)) < 1e-12


def test_labeled_loss_linear_in_weights():
    rng = np.random.default_rng(3)
    raw = rng.random((1, 4, 4, 2))
    p = torch.tensor(raw / raw.sum(-1, keepdims=True))
    y = torch.tensor(one_hot(rng.integers(0, 2, (1, 4, 4)), 2))
    single = float(labeled_loss(p, y, [1.0, 0.0]))
    double = float(labeled_loss(p, y, [2.0, 0.0]))
    assert abs(double - 2 * single) < 1e-12


def test_labeled_loss_matches_loop_oracle():
    rng = np.random.default_rng(11)
    raw = rng.random((5, 6, 3))
    probs = raw / raw.sum(-1, keepdims=True)
    labels = one_hot(rng.integers(0, 3, (5, 6)), 3)
    weights = [0.5, 2.0, 1.0]
    got = float(labeled_loss(torch.tensor(probs), torch.tensor(labels.astype(np.float64)), weights))
    want = labeled_loss_by_loops(probs, labels, weights)
    assert abs(got - want) < 1e-10


def test_labeled_loss_rejects_bad_inputs():
    p = torch.full((1, 2, 2, 2), 0.5)
    with pytest.raises(ShapeError):
        labeled_loss(p, torch.full((1, 2, 2, 3), 0.5))
    soft = torch.full((1, 2, 2, 2), 0.5)  # not one-hot
    with pytest.raises(ShapeError):
        labeled_loss(p, soft)


# ---------------------------------------------------------------------------
# regions, masses, zeta


def test_partition_of_one_hot_soft_label():
    labels = np.array([[0, 2], [1, 1]])
    assignment = class_region_partition(one_hot(labels, 3))
    assert np.array_equal(assignment, labels)


def test_partition_tie_breaks_to_lowest_index():
    pixel = np.array([[[0.4, 0.4, 0.2]]])
    assert class_region_partition(pixel)[0, 0] == 0


def test_partition_is_a_partition():
    rng = np.random.default_rng(5)
    raw = rng.random((8, 8, 4))
    soft = raw / raw.sum(-1, keepdims=True)
    assignment = class_region_partition(soft)
    assert assignment.shape == (8, 8)
    assert assignment.min() >= 0 and assignment.max() < 4


def test_zeta_values():
    assert np.allclose(zeta_weights(np.array([100.0]), 50.0), [0.01])
    assert zeta_weights(np.array([40.0]), 50.0)[0] == 0.0
    assert zeta_weights(np.array([50.0]), 50.0)[0] == 0.0  # strict inequality at the gate


def test_class_region_mass():
    assignment = np.array([[0, 0], [1, 1]])
    confidence = np.array([[0.5, 0.25], [1.0, 1.0]])
    mass = class_region_mass(assignment, confidence, 3)
    assert np.allclose(mass, [0.75, 2.0, 0.0])


# ---------------------------------------------------------------------------
# unlabeled loss


def test_unlabeled_loss_zero_when_fully_uncertain():
    soft = one_hot(np.zeros((4, 4), dtype=int), 2)
    record = make_record(soft, np.zeros((4, 4)))
    p = torch.full((1, 4, 4, 2), 0.5)
    assert float(unlabeled_loss(p, record, LossConfig(min_class_mass=0.0))) == 0.0


def test_unlabeled_loss_zero_for_perfect_student():
    labels = np.zeros((10, 10), dtype=int)
    record = make_record(one_hot(labels, 2), np.ones((10, 10)))
    student = torch.tensor(one_hot(labels, 2))[None]
    loss = float(unlabeled_loss(student, record, LossConfig(min_class_mass=50.0)))
    assert loss <= 1e-5  # only the log clamp keeps this from exact zero


def test_unlabeled_loss_derived_ln2():
    # one region of 100 pixels, mass 100 > P=50, student score 0.5 everywhere
    labels = np.zeros((10, 10), dtype=int)
    record = make_record(one_hot(labels, 2), np.ones((10, 10)))
    student = torch.full((1, 10, 10, 2), 0.5, dtype=torch.float64)
    loss = float(unlabeled_loss(student, record, LossConfig(min_class_mass=50.0)))
    assert abs(loss - math.log(2)) < 1e-12


@pytest.mark.parametrize("trial", range(20))
def test_unlabeled_loss_matches_triple_loop_oracle(trial):
    rng = np.random.default_rng(100 + trial)
    h = w = 8
    c = int(rng.integers(2, 5))
    soft = rng.random((h, w, c))
    soft /= soft.sum(-1, keepdims=True)
    confidence = rng.random((h, w))
    raw = rng.random((h, w, c))
    student = raw / raw.sum(-1, keepdims=True)
    min_mass = float(rng.uniform(0.0, 20.0))
    record = make_record(soft, confidence)
    got = float(unlabeled_loss(torch.tensor(student)[None], record, LossConfig(min_class_mass=min_mass)))
    want = unlabeled_loss_by_loops(student, soft.astype(np.float32), confidence.astype(np.float32), min_mass)
    assert abs(got - want) < 1e-6


def test_gated_regions_do_not_affect_loss():
    # class 1 has tiny mass -> zeta_1 = 0; perturbing student scores there changes nothing
    rng = np.random.default_rng(9)
    labels = np.zeros((8, 8), dtype=int)
    labels[0, 0] = 1
    record = make_record(one_hot(labels, 2), np.ones((8, 8)))
    raw = rng.random((8, 8, 2))
    student = raw / raw.sum(-1, keepdims=True)
    cfg = LossConfig(min_class_mass=10.0)
    base = float(unlabeled_loss(torch.tensor(student)[None], record, cfg))
    perturbed = student.copy()
    perturbed[0, 0] = [0.01, 0.99]
    after = float(unlabeled_loss(torch.tensor(perturbed)[None], record, cfg))
    assert after == base


def test_loss_monotone_in_confidence():
    # fixed wrong prediction at one pixel: shifting confidence mass onto it
    # (total mass constant, so zeta is fixed) cannot lower the loss
    labels = np.zeros((10, 10), dtype=int)
    student = np.full((10, 10, 2), [0.99, 0.01])
    student[0, 0] = [0.3, 0.7]  # the one wrong pixel
    losses = []
    for w_wrong in (0.2, 0.5, 0.9):
        confidence = np.ones((10, 10))
        confidence[0, 0] = w_wrong
        confidence[0, 1] = 2.0 - w_wrong - 1.0  # keeps the class mass at 100
        record = make_record(one_hot(labels, 2), confidence)
        losses.append(float(unlabeled_loss(torch.tensor(student)[None], record,
                                           LossConfig(min_class_mass=50.0))))
    assert losses[0] < losses[1] < losses[2]


def test_alpha_zero_equals_plain_pseudo_labels():
    rng = np.random.default_rng(21)
    soft = rng.random((8, 8, 3))
    soft /= soft.sum(-1, keepdims=True)
    raw = rng.random((8, 8, 3))
    student = torch.tensor(raw / raw.sum(-1, keepdims=True))[None]
    # alpha = 0 gives confidence 1 everywhere, so zeta_c = 1/|Z_c| for |Z_c| > P
    record = make_record(soft, np.ones((8, 8)))
    assignment = class_region_partition(soft)
    p_gate = 3.0
    got = float(unlabeled_loss(student, record, LossConfig(alpha=0.0, min_class_mass=p_gate)))
    eps = 1e-7
    want = 0.0
    for cls in range(3):
        region = assignment == cls
        if region.sum() <= p_gate:
            continue
        p_cls = np.clip(student[0].numpy()[..., cls][region], eps, 1.0)
        want += (-np.log(p_cls)).sum() / region.sum()
    assert abs(got - want) < 1e-10


def test_unlabeled_loss_batch_sums_over_images():
    labels = np.zeros((10, 10), dtype=int)
    record = make_record(one_hot(labels, 2), np.ones((10, 10)))
    single = torch.full((1, 10, 10, 2), 0.5, dtype=torch.float64)
    double = torch.full((2, 10, 10, 2), 0.5, dtype=torch.float64)
    cfg = LossConfig(min_class_mass=50.0)
    one = float(unlabeled_loss(single, record, cfg))
    two = float(unlabeled_loss(double, [record, record], cfg))
    assert abs(two - 2 * one) < 1e-12


def test_unlabeled_loss_shape_mismatch():
    record = make_record(one_hot(np.zeros((4, 4), dtype=int), 2), np.ones((4, 4)))
    with pytest.raises(ShapeError):
        unlabeled_loss(torch.full((1, 4, 4, 3), 1 / 3), record, LossConfig())
    with pytest.raises(ShapeError):
        unlabeled_loss(torch.full((2, 4, 4, 2), 0.5), record, LossConfig())


# ---------------------------------------------------------------------------
# combined loss


def test_semi_supervised_loss_is_a_sum():
    assert semi_supervised_loss(0.7, 0.3) == pytest.approx(1.0)
    assert semi_supervised_loss(1.23, 0.0) == pytest.approx(1.23)
    assert float(semi_supervised_loss(torch.tensor(2.0), torch.tensor(3.0), 0.5)) == pytest.approx(3.5)


def test_semi_supervised_loss_rejects_non_finite():
    with pytest.raises(ConfigurationError):
        semi_supervised_loss(float("nan"), 0.0)
    with pytest.raises(ConfigurationError):
        semi_supervised_loss(0.0, float("inf"))


# ---------------------------------------------------------------------------
# gradient checks: autograd vs central finite differences on the
# logits -> softmax -> loss composition, double precision


def _fd_gradient(fn, logits, eps=1e-6):
    grad = np.zeros_like(logits)
    flat = grad.reshape(-1)
    base = logits.reshape(-1)
    for i in range(base.size):
        bump = np.zeros_like(base)
        bump[i] = eps
        hi = fn((base + bump).reshape(logits.shape))
        lo = fn((base - bump).reshape(logits.shape))
        flat[i] = (hi - lo) / (2 * eps)
    return grad


def _relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


@pytest.mark.parametrize("num_classes", [2, 9])
def test_labeled_loss_gradient_check(num_classes):
    rng = np.random.default_rng(40 + num_classes)
    logits0 = rng.normal(size=(1, 4, 4, num_classes))
    y = one_hot(rng.integers(0, num_classes, (1, 4, 4)), num_classes).astype(np.float64)
    weights = rng.uniform(0.5, 2.0, num_classes)

    def loss_of(logits_np):
        p = torch.softmax(torch.tensor(logits_np, dtype=torch.float64), dim=-1)
        return float(labeled_loss(p, torch.tensor(y), weights))

    logits = torch.tensor(logits0, dtype=torch.float64, requires_grad=True)
    loss = labeled_loss(torch.softmax(logits, dim=-1), torch.tensor(y), weights)
    loss.backward()
    analytic = logits.grad.numpy()
    numeric = _fd_gradient(loss_of, logits0)
    assert _relative_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("num_classes", [2, 9])
def test_unlabeled_loss_gradient_check(num_classes):
    rng = np.random.default_rng(60 + num_classes)
    logits0 = rng.normal(size=(1, 4, 4, num_classes))
    soft = rng.random((4, 4, num_classes))
    soft /= soft.sum(-1, keepdims=True)
    record = make_record(soft, rng.uniform(0.2, 1.0, (4, 4)))
    cfg = LossConfig(min_class_mass=1.0)

    def loss_of(logits_np):
        p = torch.softmax(torch.tensor(logits_np, dtype=torch.float64), dim=-1)
        return float(unlabeled_loss(p, record, cfg))

    logits = torch.tensor(logits0, dtype=torch.float64, requires_grad=True)
    loss = unlabeled_loss(torch.softmax(logits, dim=-1), record, cfg)
    loss.backward()
    analytic = logits.grad.numpy()
    numeric = _fd_gradient(loss_of, logits0)
    assert _relative_error(analytic, numeric) < 1e-4


# ---------------------------------------------------------------------------
# helpers


def test_one_hot_roundtrip():
    labels = np.random.default_rng(2).integers(0, 4, (5, 5))
    oh = one_hot(labels, 4)
    assert oh.shape == (5, 5, 4)
    assert np.array_equal(oh.argmax(-1), labels)
    assert np.array_equal(oh.sum(-1), np.ones((5, 5)))


def test_inverse_frequency_weights_mean_one():
    maps = [np.array([[0, 0, 0, 1]]), np.array([[0, 1, 2, 2]])]
    w = inverse_frequency_weights(maps, 4)
    present = w > 0
    assert np.isclose(w[present].mean(), 1.0)
    assert w[3] == 0.0  # absent class
    assert w[0] < w[1]  # rarer class weighted higher


def test_non_negativity_random_inputs():
    rng = np.random.default_rng(77)
    for _ in range(10):
        raw = rng.random((1, 4, 4, 3))
        p = torch.tensor(raw / raw.sum(-1, keepdims=True))
        y = torch.tensor(one_hot(rng.integers(0, 3, (1, 4, 4)), 3).astype(np.float64))
        assert float(labeled_loss(p, y)) >= 0.0
        soft = rng.random((4, 4, 3))
        soft /= soft.sum(-1, keepdims=True)
        record = make_record(soft, rng.random((4, 4)))
        assert float(unlabeled_loss(p, record, LossConfig(min_class_mass=2.0))) >= 0.0
