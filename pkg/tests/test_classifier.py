"""Classifier forward/gradient contracts, PGD, training, and the
query-metered black-box wall."""

import numpy as np
import pytest

from metasquare import nn
from metasquare.classifier import (ARCHITECTURES, BlackBox, BudgetExhausted,
                                   CapabilityError, PgdParams, QueryMeter,
                                   TrainConfig, black_box_score, conv_net,
                                   input_gradient, input_gradient_batch,
                                   mlp_net, pgd_attack, train_classifier)
from metasquare.core import LossSpec, apply_perturbation, classification_loss

SHAPE = (3, 16, 16)


@pytest.fixture(scope="module")
def conv_clf():
    return conv_net(np.random.default_rng(0), SHAPE, 10)


@pytest.fixture(scope="module")
def mlp_clf():
    return mlp_net(np.random.default_rng(1), SHAPE, 10)


def test_predict_is_distribution(conv_clf):
    rng = np.random.default_rng(2)
    x = rng.random(SHAPE)
    p = conv_clf.predict(x)
    assert p.shape == (10,)
    assert np.all(p >= 0.0)
    assert abs(p.sum() - 1.0) < 1e-6

    batch = conv_clf.predict_batch(rng.random((4,) + SHAPE))
    assert batch.shape == (4, 10)
    np.testing.assert_allclose(batch.sum(axis=1), 1.0, atol=1e-6)


def test_zero_weight_net_uniform(conv_clf):
    clf = conv_net(np.random.default_rng(3), SHAPE, 10)
    clf.net.set_params([np.zeros_like(p) for p in clf.net.params])
    p = clf.predict(np.random.default_rng(4).random(SHAPE))
    np.testing.assert_allclose(p, 0.1, atol=1e-15)
    g = input_gradient(clf, np.random.default_rng(5).random(SHAPE), 3)
    assert np.all(g == 0.0)


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
@pytest.mark.parametrize("kind", ["ce", "margin"])
def test_input_gradient_fd(arch, kind):
    clf = ARCHITECTURES[arch](np.random.default_rng(6), SHAPE, 10)
    rng = np.random.default_rng(7)
    x = 0.2 + 0.6 * rng.random(SHAPE)
    spec = LossSpec(kind)
    g = input_gradient(clf, x, 4, spec)

    def f(xv):
        return classification_loss(clf.predict(xv), 4, spec)

    fd = nn.finite_difference_gradient(f, x.copy(), h=1e-5)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


def test_input_gradient_batch_matches_single(conv_clf):
    rng = np.random.default_rng(8)
    x = rng.random((3,) + SHAPE)
    labels = np.array([1, 5, 9])
    gb = input_gradient_batch(conv_clf, x, labels)
    for i in range(3):
        gi = input_gradient(conv_clf, x[i], int(labels[i]))
        np.testing.assert_allclose(gb[i], gi, rtol=1e-10, atol=1e-18)


def test_targeted_input_gradient_fd(conv_clf):
    rng = np.random.default_rng(9)
    x = 0.2 + 0.6 * rng.random(SHAPE)
    spec = LossSpec("ce", target=7)
    g = input_gradient(conv_clf, x, 2, spec)
    fd = nn.finite_difference_gradient(
        lambda xv: classification_loss(conv_clf.predict(xv), 2, spec),
        x.copy(), h=1e-5)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


# ---------------------------------------------------------------------------
# pgd

def test_pgd_zero_iters_returns_init(conv_clf):
    rng = np.random.default_rng(10)
    x = rng.random((2,) + SHAPE)
    xi = pgd_attack(conv_clf, x, np.array([0, 1]), PgdParams(iters=0))
    assert np.all(xi == 0.0)


def test_pgd_zero_gradient_model_stays_at_init():
    clf = conv_net(np.random.default_rng(11), SHAPE, 10)
    clf.net.set_params([np.zeros_like(p) for p in clf.net.params])
    x = np.random.default_rng(12).random((2,) + SHAPE)
    xi = pgd_attack(clf, x, np.array([0, 1]), PgdParams(iters=5))
    assert np.all(xi == 0.0)  # sign(0) == 0


def test_pgd_ball_and_box(conv_clf):
    rng = np.random.default_rng(13)
    x = rng.random((4,) + SHAPE)
    labels = np.array([0, 1, 2, 3])
    params = PgdParams()
    xi = pgd_attack(conv_clf, x, labels, params)
    assert np.max(np.abs(xi)) <= params.eps + 1e-15
    adv = np.clip(x + xi, 0.0, 1.0)
    np.testing.assert_allclose(adv, x + xi, atol=1e-15)  # already in box


def test_pgd_loss_increases(conv_clf):
    # after 20 steps the attack loss should beat the 1-step loss
    # for most seeds (monotone trend, majority vote)
    from metasquare.core import loss_batch
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        x = rng.random((8,) + SHAPE)
        labels = rng.integers(0, 10, size=8)
        l1 = loss_batch(conv_clf.predict_batch(
            apply_perturbation(x, pgd_attack(conv_clf, x, labels,
                                             PgdParams(iters=1)))), labels)
        l20 = loss_batch(conv_clf.predict_batch(
            apply_perturbation(x, pgd_attack(conv_clf, x, labels,
                                             PgdParams(iters=20)))), labels)
        if l20.mean() >= l1.mean():
            wins += 1
    assert wins >= 3


# ---------------------------------------------------------------------------
# training

def make_separable_toy(n=200, seed=0):
    # two blobs separated along the first pixel
    rng = np.random.default_rng(seed)
    x = 0.05 * rng.random((n, 1, 4, 4))
    y = rng.integers(0, 2, size=n)
    x[y == 1, 0, 0, 0] += 0.9
    x[y == 0, 0, 0, 0] += 0.05
    return np.clip(x, 0, 1), y


def test_train_one_epoch_separable():
    x, y = make_separable_toy()
    cfg = TrainConfig(epochs=1, batch_size=32, lr=3e-3, seed=0,
                      architecture="mlp", eval_size=0)
    clf, log = train_classifier(x, y, cfg, num_classes=2)
    preds = clf.predict_batch(x).argmax(axis=1)
    assert (preds == y).mean() > 0.9
    assert len(log) == 1


def test_train_zero_epochs_returns_init():
    x, y = make_separable_toy(50)
    cfg = TrainConfig(epochs=0, seed=5, architecture="mlp", eval_size=0)
    clf, log = train_classifier(x, y, cfg, num_classes=2)
    fresh = mlp_net(np.random.default_rng(5), (1, 4, 4), 2)
    for a, b in zip(clf.net.params, fresh.net.params):
        np.testing.assert_array_equal(a, b)
    assert log == []


def test_train_rejects_bad_input():
    x, y = make_separable_toy(20)
    with pytest.raises(ValueError):
        train_classifier(x[:0], y[:0], TrainConfig(epochs=1, eval_size=0))
    with pytest.raises(ValueError):
        train_classifier(x, np.full_like(y, 7), TrainConfig(epochs=1, eval_size=0),
                         num_classes=2)


def test_training_log_shape():
    x, y = make_separable_toy(80)
    cfg = TrainConfig(epochs=2, batch_size=20, seed=1, architecture="mlp",
                      eval_size=40)
    _, log = train_classifier(x, y, cfg, num_classes=2)
    assert len(log) == 2
    for epoch, loss, acc, rob in log:
        assert 1 <= epoch <= 2
        assert loss >= 0.0
        assert 0.0 <= acc <= 1.0
        assert 0.0 <= rob <= acc + 1e-12


# ---------------------------------------------------------------------------
# the black-box wall

def test_query_meter_counts(conv_clf):
    x = np.random.default_rng(14).random(SHAPE)
    bb = BlackBox(conv_clf, label=3)
    meter = QueryMeter(500)
    loss, pred = black_box_score(bb, x, meter)
    assert meter.used == 1
    assert 0 <= pred < 10

    # white-box parity, bit for bit
    assert loss == classification_loss(conv_clf.predict(x), 3)


def test_query_meter_exhaustion(conv_clf):
    x = np.random.default_rng(15).random(SHAPE)
    bb = BlackBox(conv_clf, label=0)
    meter = QueryMeter(500)
    for _ in range(500):
        black_box_score(bb, x, meter)
    assert meter.used == 500 and meter.remaining == 0
    with pytest.raises(BudgetExhausted):
        black_box_score(bb, x, meter)


def test_black_box_hides_gradients(conv_clf):
    bb = BlackBox(conv_clf, label=0)
    x = np.random.default_rng(16).random(SHAPE)
    with pytest.raises(CapabilityError):
        input_gradient(bb, x, 0)
    with pytest.raises(CapabilityError):
        input_gradient_batch(bb, x[None], np.array([0]))
