"""Threat models, projections and scoring losses shared by all attacks.

Images live in [0, 1]^(c x h x w).  A perturbation xi is kept inside the
threat ball at all times; the adversarial image is clip(x + xi, 0, 1).
"""

from dataclasses import dataclass

import numpy as np

LINF = "linf"
L2 = "l2"

# floor for log(p) so that a numerically zero class probability cannot
# produce inf/nan in the loss
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class ThreatModel:
    norm: str  # "linf" or "l2"
    eps: float

    def __post_init__(self):
        if self.norm not in (LINF, L2):
            raise ValueError(f"unknown norm {self.norm!r}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class LossSpec:
    """Scalar score the attacker maximizes.

    kind   : "ce" (cross-entropy of the true label) or "margin"
             (log-prob gap between the best wrong class and the true class)
    target : None for untargeted; otherwise the label the attack should
             drive the prediction toward (score terms are negated with the
             target substituted for the true label)
    """

    kind: str = "ce"
    target: int | None = None

    def __post_init__(self):
        if self.kind not in ("ce", "margin"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


def project_linf(xi, eps):
    """Clamp every coordinate of xi to [-eps, eps]."""
    return np.clip(xi, -eps, eps)


def project_l2(xi, eps):
    """Scale xi onto the l2 ball of radius eps if it lies outside.

    Rescaling is repeated in the (rare) case rounding leaves the norm a few
    ulps above eps, so callers can rely on norm(result) <= eps exactly.
    """
    out = np.asarray(xi, dtype=np.float64)
    for _ in range(4):
        norm = np.linalg.norm(out)
        if norm <= eps:
            return out
        out = out * (eps / norm)
    return out


def project(xi, threat):
    if threat.norm == LINF:
        return project_linf(xi, threat.eps)
    return project_l2(xi, threat.eps)


def apply_perturbation(x, xi):
    """Adversarial image: x + xi clipped back to the valid pixel range."""
    return np.clip(x + xi, 0.0, 1.0)


def _check_probs(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("probs must be a single probability vector")
    if np.any(probs < 0):
        raise ValueError("probs has negative entries")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"probs sum to {probs.sum()!r}, not 1")
    return probs


def classification_loss(probs, label, spec=LossSpec()):
    """Attacker score of a probability vector; higher means closer to success.

    Untargeted: ce = -log p_y, margin = max_{k != y} log p_k - log p_y.
    Targeted versions negate the score with the target in place of y.
    """
    probs = _check_probs(probs)
    logp = np.log(np.maximum(probs, _LOG_FLOOR))
    if spec.target is None:
        y = label
        if spec.kind == "ce":
            return -logp[y]
        rival = np.max(np.delete(logp, y))
        return rival - logp[y]
    t = spec.target
    if spec.kind == "ce":
        return logp[t]
    rival = np.max(np.delete(logp, t))
    return logp[t] - rival


def loss_batch(probs, labels, spec=LossSpec()):
    """Vectorized classification_loss over rows of probs (no per-row checks)."""
    probs = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.maximum(probs, _LOG_FLOOR))
    n = probs.shape[0]
    rows = np.arange(n)
    if spec.target is None:
        own = logp[rows, labels]
        if spec.kind == "ce":
            return -own
        masked = logp.copy()
        masked[rows, labels] = -np.inf
        return masked.max(axis=1) - own
    own = logp[:, spec.target]
    if spec.kind == "ce":
        return own
    masked = logp.copy()
    masked[:, spec.target] = -np.inf
    return own - masked.max(axis=1)
