"""Learned proposal controllers: square size and color policies.

Both are tiny MLPs (2 -> 10 -> 10 -> 1, ReLU) reading a time encoding and
an exponential moving average of recent proposal successes.  The size head
is squashed into [1, s_max]; the color head is evaluated once per candidate
color (shared weights) to produce categorical logits that are mixed with a
uniform floor so every color keeps probability at least p_min.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn

ENCODE_HORIZON = 5000  # fixed reference horizon, independent of the run budget


def encode_time(t, horizon=ENCODE_HORIZON):
    return np.log2(t / horizon + 1.0)


def success_indicator(new_loss, best_loss):
    """Step function of the loss improvement; ties count as failure."""
    return 1.0 if new_loss > best_loss else 0.0


@dataclass(frozen=True)
class ControllerConfig:
    gamma: float = 0.9  # EMA decay
    r0: float = 0.25  # reference success rate normalizing the EMA input
    p_min: float = 0.05  # uniform floor mixed into the color distribution
    temperature: float = 1.0  # Gumbel-softmax temperature
    horizon: int = ENCODE_HORIZON


def ema_update(prev, r, cfg):
    return cfg.gamma * prev + (1.0 - cfg.gamma) * (r / cfg.r0)


@dataclass
class ControllerState:
    """Per-attack EMA state; controller weights themselves stay read-only."""

    R: float = 1.0
    R_colors: np.ndarray | None = None

    @staticmethod
    def fresh(num_colors):
        return ControllerState(R=1.0, R_colors=np.ones(num_colors))


def _policy_net(rng):
    return nn.make_dense_net(rng, (2, 10, 10, 1))


class SizeController:
    def __init__(self, net=None, cfg=ControllerConfig(), rng=None):
        if net is None:
            net = _policy_net(rng if rng is not None else np.random.default_rng(0))
        self.net = net
        self.cfg = cfg

    def size(self, t, R, s_max):
        """Continuous square size in [1, s_max]."""
        s, _ = self.size_with_tape(t, R, s_max)
        return s

    def size_rounded(self, t, R, s_max):
        s = self.size(t, R, s_max)
        return int(min(max(np.floor(s + 0.5), 1), s_max))

    def size_with_tape(self, t, R, s_max):
        x = np.array([[encode_time(t, self.cfg.horizon), R]])
        raw, tape = self.net.forward(x)
        sig = float(nn.sigmoid(raw)[0, 0])
        s = sig * (s_max - 1.0) + 1.0
        return s, (tape, sig, s_max)

    def backward(self, tape_info, ds):
        """Gradients of a scalar w.r.t. the policy weights given ds/d size."""
        tape, sig, s_max = tape_info
        draw = ds * sig * (1.0 - sig) * (s_max - 1.0)
        grads, _ = self.net.backward(tape, np.array([[draw]]))
        return grads


class ColorController:
    def __init__(self, num_colors, net=None, cfg=ControllerConfig(), rng=None):
        if net is None:
            net = _policy_net(rng if rng is not None else np.random.default_rng(1))
        self.net = net
        self.cfg = cfg
        self.num_colors = num_colors

    def logits(self, t, R_colors):
        """Shared-weight evaluation on (time, R_i) for every color i."""
        m = self.num_colors
        x = np.empty((m, 2))
        x[:, 0] = encode_time(t, self.cfg.horizon)
        x[:, 1] = R_colors
        raw, tape = self.net.forward(x)
        return raw[:, 0], tape

    def backward(self, tape, dlogits):
        grads, _ = self.net.backward(tape, np.asarray(dlogits).reshape(-1, 1))
        return grads

    def mixed_probs(self, logits):
        """p_min floor mixed with the categorical from the logits."""
        m = self.num_colors
        cat = nn.softmax(np.asarray(logits))
        return self.cfg.p_min + (1.0 - m * self.cfg.p_min) * cat

    def sample_eval(self, rng, logits):
        """Single draw from the mixed categorical (inverse CDF)."""
        probs = self.mixed_probs(logits)
        u = rng.random()
        return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, self.num_colors - 1))

    def sample_train(self, rng, logits):
        """Two-stage draw matching the mixture: uniform floor branch with
        probability m * p_min (no gradient), otherwise a straight-through
        Gumbel-softmax sample from the categorical branch."""
        m = self.num_colors
        if rng.random() < m * self.cfg.p_min:
            return int(rng.integers(0, m)), None
        sample = nn.gumbel_softmax(np.asarray(logits), self.cfg.temperature, rng)
        return sample.index, sample


def probe_controller(size_ctrl, p, budget, s_max, rng, n_runs=25):
    """Simulated size trace under Bernoulli(p) successes, no model queries.

    Returns the mean continuous size per step over n_runs simulations.
    """
    cfg = size_ctrl.cfg
    total = np.zeros(budget)
    for _ in range(n_runs):
        R = 1.0
        for t in range(budget):
            total[t] += size_ctrl.size(t, R, s_max)
            r = 1.0 if rng.random() < p else 0.0
            R = ema_update(R, r, cfg)
    return total / n_runs
