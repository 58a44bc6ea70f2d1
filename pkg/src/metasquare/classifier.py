"""Desk-scale image classifiers: training, gradients, PGD, black-box scoring.

White-box access (gradients) is a capability of Classifier only.  Attacks
receive a BlackBox handle whose single entry point charges a QueryMeter;
asking a BlackBox for gradients is a type error, not a policy knob.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .core import LossSpec, apply_perturbation, classification_loss, loss_batch


class CapabilityError(TypeError):
    """Raised when gradient access is attempted through a black-box handle."""


class BudgetExhausted(RuntimeError):
    """Raised when a query would exceed the meter's budget."""


class QueryMeter:
    def __init__(self, budget):
        self.budget = int(budget)
        self.used = 0

    def charge(self, n=1):
        if self.used + n > self.budget:
            raise BudgetExhausted(f"query budget {self.budget} exhausted")
        self.used += n

    @property
    def remaining(self):
        return self.budget - self.used


class Classifier:
    """A Sequential net mapping (B, c, h, w) images to class probabilities."""

    def __init__(self, net, input_shape, num_classes, architecture="custom"):
        self.net = net
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.architecture = architecture

    def logits(self, x):
        out, _ = self.net.forward(x)
        return out

    def predict_batch(self, x):
        return nn.softmax(self.logits(x), axis=1)

    def predict(self, x):
        """Probability vector for a single (c, h, w) image."""
        return self.predict_batch(x[None])[0]


class BlackBox:
    """Score-only view of a classifier for one (label, loss spec) pair."""

    def __init__(self, classifier, label, spec=LossSpec()):
        self._classifier = classifier
        self.label = int(label)
        self.spec = spec
        self.num_classes = classifier.num_classes
        self.input_shape = classifier.input_shape

    def score(self, x, meter):
        meter.charge(1)
        probs = self._classifier.predict(x)
        loss = classification_loss(probs, self.label, self.spec)
        return loss, int(np.argmax(probs))


def black_box_score(f, x, meter):
    """One metered query: (attacker loss, predicted label)."""
    if not isinstance(f, BlackBox):
        raise TypeError("black_box_score expects a BlackBox handle")
    return f.score(x, meter)


def _dlogits(probs, labels, spec):
    """Gradient of the attacker loss w.r.t. logits, one row per image."""
    n, k = probs.shape
    rows = np.arange(n)
    d = np.zeros_like(probs)
    if spec.kind == "ce":
        if spec.target is None:
            # d(-log p_y)/dz = p - e_y
            d = probs.copy()
            d[rows, labels] -= 1.0
        else:
            d = -probs.copy()
            d[:, spec.target] += 1.0
        return d
    # margin on log-probs: gradient is e_rival - e_y (signs flip when targeted)
    logp = np.log(np.maximum(probs, 1e-300))
    if spec.target is None:
        masked = logp.copy()
        masked[rows, labels] = -np.inf
        rival = masked.argmax(axis=1)
        d[rows, rival] += 1.0
        d[rows, labels] -= 1.0
    else:
        masked = logp.copy()
        masked[:, spec.target] = -np.inf
        rival = masked.argmax(axis=1)
        d[:, spec.target] += 1.0
        d[rows, rival] -= 1.0
    return d


def input_gradient_batch(f, x, labels, spec=LossSpec()):
    if isinstance(f, BlackBox):
        raise CapabilityError("gradients are not available through a black-box handle")
    out, tape = f.net.forward(x)
    probs = nn.softmax(out, axis=1)
    _, dx = f.net.backward(tape, _dlogits(probs, labels, spec), with_params=False)
    return dx


def input_gradient(f, x, label, spec=LossSpec()):
    """d classification_loss / d x for a single image."""
    return input_gradient_batch(f, x[None], np.asarray([label]), spec)[0]


@dataclass(frozen=True)
class PgdParams:
    eps: float = 8.0 / 255.0
    step: float = 0.01
    iters: int = 20
    rand_init: bool = False


def pgd_attack(f, x, labels, params=PgdParams(), spec=LossSpec(), rng=None):
    """Batched sign-gradient ascent on the attacker loss inside the linf ball.

    Returns the perturbation xi with |xi| <= eps and x + xi in [0, 1].
    np.sign maps a zero gradient coordinate to a zero step.
    """
    x = np.asarray(x, dtype=np.float64)
    if params.rand_init:
        if rng is None:
            rng = np.random.default_rng(0)
        xi = rng.uniform(-params.eps, params.eps, size=x.shape)
    else:
        xi = np.zeros_like(x)
    xi = np.clip(xi, -x, 1.0 - x)
    for _ in range(params.iters):
        g = input_gradient_batch(f, apply_perturbation(x, xi), labels, spec)
        xi = xi + params.step * np.sign(g)
        xi = np.clip(xi, -params.eps, params.eps)
        xi = np.clip(xi, -x, 1.0 - x)
    return xi


# ---------------------------------------------------------------------------
# architectures

def conv_net(rng, input_shape, num_classes, widths=(8, 16), dense=64):
    """Two conv blocks with 2x2 average pooling, then two dense layers."""
    c, h, w = input_shape
    layers = [
        nn.make_conv(rng, c, widths[0]),
        nn.AvgPool2d(2),
        nn.make_conv(rng, widths[0], widths[1]),
        nn.AvgPool2d(2),
        nn.Flatten(),
    ]
    feat = widths[1] * (h // 4) * (w // 4)
    wd = nn.glorot_uniform(rng, (feat, dense), feat, dense)
    layers.append(nn.Dense(wd, np.zeros(dense), "relu"))
    wo = nn.glorot_uniform(rng, (dense, num_classes), dense, num_classes)
    layers.append(nn.Dense(wo, np.zeros(num_classes), "identity"))
    return Classifier(nn.Sequential(layers), input_shape, num_classes, "conv")


def mlp_net(rng, input_shape, num_classes, hidden=(128, 64)):
    """Fully connected baseline on flattened pixels."""
    c, h, w = input_shape
    dims = [c * h * w, *hidden, num_classes]
    net = nn.make_dense_net(rng, dims)
    net.layers.insert(0, nn.Flatten())
    return Classifier(net, input_shape, num_classes, "mlp")


ARCHITECTURES = {"conv": conv_net, "mlp": mlp_net}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    architecture: str = "conv"
    adversarial: PgdParams | None = None  # train on PGD examples when set
    eval_size: int = 200  # held-out-front slice used for the per-epoch log
    eval_pgd: PgdParams = PgdParams()


def _accuracy(f, x, labels, chunk=256):
    hits = 0
    for i in range(0, len(x), chunk):
        pred = np.argmax(f.logits(x[i:i + chunk]), axis=1)
        hits += int(np.sum(pred == labels[i:i + chunk]))
    return hits / len(x)


def robust_accuracy_pgd(f, x, labels, params, chunk=128):
    """Accuracy under a white-box PGD attack (batched)."""
    hits = 0
    for i in range(0, len(x), chunk):
        xb, yb = x[i:i + chunk], labels[i:i + chunk]
        xi = pgd_attack(f, xb, yb, params)
        pred = np.argmax(f.logits(apply_perturbation(xb, xi)), axis=1)
        hits += int(np.sum(pred == yb))
    return hits / len(x)


def train_classifier(images, labels, config, num_classes=None):
    """Minibatch Adam training (optionally on PGD examples).

    Returns (classifier, log) where log rows are
    (epoch, mean loss, eval accuracy, eval PGD robust accuracy).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty training set")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    rng = np.random.default_rng(config.seed)
    f = ARCHITECTURES[config.architecture](rng, images.shape[1:], num_classes)
    n = len(images)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    opt = nn.adam_init(f.net.params, config.lr, config.epochs * steps_per_epoch)
    n_eval = min(config.eval_size, n)
    log = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            xb, yb = images[idx], labels[idx]
            if config.adversarial is not None:
                xb = apply_perturbation(xb, pgd_attack(f, xb, yb, config.adversarial))
            out, tape = f.net.forward(xb)
            probs = nn.softmax(out, axis=1)
            total += float(loss_batch(probs, yb).sum())
            d = _dlogits(probs, yb, LossSpec()) / len(idx)
            grads, _ = f.net.backward(tape, d)
            nn.adam_step(opt, f.net.params, grads)
        if n_eval:
            acc = _accuracy(f, images[:n_eval], labels[:n_eval])
            rob = robust_accuracy_pgd(f, images[:n_eval], labels[:n_eval],
                                      config.eval_pgd)
        else:
            acc = rob = float("nan")
        log.append((epoch, total / n, acc, rob))
    return f, log
