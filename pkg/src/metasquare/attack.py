"""Random-search square attack driver: scheduled or controller-guided.

Each image runs on its own RNG stream derived from the run seed, so a
batch of attacks is reproducible bit for bit no matter how the images are
grouped into lockstep evaluation chunks or spread over worker processes.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import proposal
from .classifier import BlackBox, QueryMeter
from .controller import ControllerState, ema_update, success_indicator
from .core import (L2, LINF, LossSpec, ThreatModel, apply_perturbation,
                   loss_batch, project_linf)

TRAJECTORY_COLUMNS = ("image_id", "t", "s", "color_index", "r", "R", "loss", "accepted")


@dataclass(frozen=True)
class AttackConfig:
    threat: ThreatModel = ThreatModel(LINF, 8.0 / 255.0)
    budget: int = 500
    schedule: str = "sa"  # "sa" | "aa" | "controller"
    p0: float = proposal.SA_P0
    colors: str = "uniform"  # "uniform" | "controller"
    loss: LossSpec = LossSpec()
    targeted: str | int | None = None  # None | "random" | explicit label
    early_stop: bool = True
    seed: int = 0
    group_size: int = 32  # lockstep evaluation chunk, fixed per config
    record_trajectory: bool = False
    validate: bool = False  # in-loop ball/box invariant asserts


@dataclass
class AttackResult:
    image_id: int
    clean_correct: bool
    queries_used: int
    best_loss: float
    success: bool
    first_success_query: int | None
    xi: np.ndarray | None = None
    target: int | None = None
    trajectory: list = field(default_factory=list)


@dataclass
class _ImageRun:
    image_id: int
    x: np.ndarray
    label: int
    target: int | None
    rng: np.random.Generator
    meter: QueryMeter
    xi: np.ndarray = None
    best_loss: float = -np.inf
    first_success: int | None = None
    done: bool = False
    state: ControllerState = None
    trajectory: list = field(default_factory=list)


class ControllerBundle:
    """Trained policies handed to the attack; either may sit unused."""

    def __init__(self, size=None, color=None):
        self.size = size
        self.color = color


def _goal_label(run):
    return run.target if run.target is not None else run.label


def _hit(run, pred):
    if run.target is not None:
        return pred == run.target
    return pred != run.label


def _spec_for(config, run):
    if run.target is None:
        return replace(config.loss, target=None)
    return replace(config.loss, target=run.target)


def _derived_rng(seed, image_id):
    return np.random.default_rng(seed ^ image_id)


def _init_xi(rng, shape, config):
    if config.threat.norm == LINF:
        return proposal.stripe_init(rng, shape, config.threat.eps)
    return proposal.l2_init(rng, shape, config.threat.eps)


def _pick_target(rng, label, num_classes, targeted):
    if targeted is None:
        return None
    if targeted == "random":
        t = int(rng.integers(0, num_classes - 1))
        return t + 1 if t >= label else t
    t = int(targeted)
    if t == label:
        raise ValueError("explicit target equals the true label")
    return t


def _step_size(config, controllers, run, t, h, w):
    if config.schedule == "controller":
        return controllers.size.size_rounded(t, run.state.R, min(h, w))
    if config.schedule == "sa":
        p = proposal.sa_schedule(t, config.budget, config.p0)
    elif config.schedule == "aa":
        p = proposal.aa_schedule(t)
    else:
        raise ValueError(f"unknown schedule {config.schedule!r}")
    return proposal.p_to_size(p, h, w)


def _propose(config, controllers, run, t, shape):
    """Sample one candidate perturbation; returns (xi_cand, s, color_index, pos)."""
    c, h, w = shape
    eps = config.threat.eps
    s = _step_size(config, controllers, run, t, h, w)
    if config.threat.norm == LINF:
        pos = proposal.sample_position(run.rng, s, h, w)
        idx = _sample_color(config, controllers, run, t)
        color = proposal.corner_colors(c, eps)[idx]
        delta = proposal.make_square_delta(shape, s, pos, color)
        xi_cand = project_linf(run.xi + delta, eps)
        return xi_cand, s, idx, pos
    n = proposal.odd(s)
    pos1 = proposal.sample_position(run.rng, n, h, w)
    pos2 = proposal.sample_position(run.rng, n, h, w)
    idx = _sample_color(config, controllers, run, t)
    signs = proposal.corner_colors(c, 1.0)[idx]
    xi_cand, _ = proposal.make_relaxed_l2_update(run.xi, s, pos1, pos2, signs, eps)
    return xi_cand, s, idx, pos1


def _sample_color(config, controllers, run, t):
    c = run.x.shape[0]
    if config.colors == "controller":
        logits, _ = controllers.color.logits(t, run.state.R_colors)
        return controllers.color.sample_eval(run.rng, logits)
    if config.colors != "uniform":
        raise ValueError(f"unknown color mode {config.colors!r}")
    return int(run.rng.integers(0, 2 ** c))


def _validate_iterate(config, run, xi, x_adv):
    eps = config.threat.eps
    if config.threat.norm == LINF:
        assert np.max(np.abs(xi)) <= eps + 1e-12
    else:
        assert np.linalg.norm(xi) <= eps * (1 + 1e-12)
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def _record(run, t, s, idx, r, R_in, loss, accepted):
    run.trajectory.append((run.image_id, t, float(s), idx, int(r), float(R_in),
                           float(loss), int(accepted)))


def _run_group(classifier, runs, config, controllers):
    """Advance a group of per-image attacks in lockstep.

    Candidate images are scored through one batched forward pass per step;
    every image still charges its own meter and draws from its own RNG.
    """
    shape = runs[0].x.shape
    # EMA state moves only when some controller actually reads it, so a
    # scheduled run is the same bit-for-bit with or without a bundle attached
    has_ctrl = config.schedule == "controller" or config.colors == "controller"
    if config.schedule == "controller" and (controllers is None or controllers.size is None):
        raise ValueError("schedule='controller' needs a trained size controller")
    if config.colors == "controller" and (controllers is None or controllers.color is None):
        raise ValueError("colors='controller' needs a trained color controller")
    # initialization query
    for run in runs:
        run.state = ControllerState.fresh(2 ** shape[0])
        run.xi = _init_xi(run.rng, shape, config)
        run.meter.charge(1)
    x_adv = np.stack([apply_perturbation(r.x, r.xi) for r in runs])
    probs = classifier.predict_batch(x_adv)
    preds = probs.argmax(axis=1)
    for i, run in enumerate(runs):
        spec = _spec_for(config, run)
        run.best_loss = float(loss_batch(probs[i:i + 1], np.array([run.label]), spec)[0])
        if config.validate:
            _validate_iterate(config, run, run.xi, x_adv[i])
        if config.record_trajectory:
            _record(run, run.meter.used, 0, -1, 0, run.state.R, run.best_loss, 1)
        if _hit(run, int(preds[i])):
            run.first_success = run.meter.used
            if config.early_stop:
                run.done = True
        if run.meter.remaining == 0:
            run.done = True

    while True:
        active = [r for r in runs if not r.done]
        if not active:
            break
        cands = []
        for run in active:
            t = run.meter.used - 1  # proposals made so far
            cand = _propose(config, controllers, run, t, shape)
            cands.append((t, *cand))
        x_adv = np.stack([apply_perturbation(run.x, c[1])
                          for run, c in zip(active, cands)])
        probs = classifier.predict_batch(x_adv)
        preds = probs.argmax(axis=1)
        for i, (run, (t, xi_cand, s, idx, pos)) in enumerate(zip(active, cands)):
            run.meter.charge(1)
            spec = _spec_for(config, run)
            loss_new = float(loss_batch(probs[i:i + 1], np.array([run.label]), spec)[0])
            r = success_indicator(loss_new, run.best_loss)
            accepted = r > 0
            if config.validate:
                _validate_iterate(config, run, xi_cand, x_adv[i])
            R_in = run.state.R
            if has_ctrl:
                cfg = (controllers.size or controllers.color).cfg
                run.state.R = ema_update(run.state.R, r, cfg)
                run.state.R_colors[idx] = ema_update(run.state.R_colors[idx], r, cfg)
            if accepted:
                run.xi = xi_cand
                run.best_loss = loss_new
            if config.record_trajectory:
                _record(run, run.meter.used, s, idx, r, R_in, loss_new, accepted)
            if _hit(run, int(preds[i])) and run.first_success is None:
                run.first_success = run.meter.used
                if config.early_stop:
                    run.xi = xi_cand  # keep the example that actually succeeded
                    run.done = True
            if run.meter.remaining == 0:
                run.done = True


def run_attack(classifier, x, label, config, controllers=None, image_id=0):
    """Attack a single image; returns an AttackResult.

    The clean prediction is checked first (not metered); initially
    misclassified images are not attacked and count as broken at query 0.
    """
    x = np.asarray(x, dtype=np.float64)
    pred0 = int(np.argmax(classifier.predict(x)))
    rng = _derived_rng(config.seed, image_id)
    target = _pick_target(rng, label, classifier.num_classes, config.targeted)
    clean_correct = pred0 == label
    if not clean_correct:
        return AttackResult(image_id, False, 0, np.nan, True, 0, None, target)
    run = _ImageRun(image_id=image_id, x=x, label=int(label), target=target,
                    rng=rng, meter=QueryMeter(config.budget))
    _run_group(classifier, [run], config, controllers)
    return _finish(run, config)


def _finish(run, config):
    success = run.first_success is not None
    return AttackResult(run.image_id, True, run.meter.used, run.best_loss,
                        success, run.first_success, run.xi, run.target,
                        run.trajectory)


def _run_chunk(args):
    classifier, images, labels, ids, config, controllers = args
    results = []
    pending = []
    for x, label, image_id in zip(images, labels, ids):
        rng = _derived_rng(config.seed, image_id)
        target = _pick_target(rng, int(label), classifier.num_classes, config.targeted)
        pred0 = int(np.argmax(classifier.predict(np.asarray(x, dtype=np.float64))))
        if pred0 != label:
            results.append(AttackResult(image_id, False, 0, np.nan, True, 0, None, target))
            continue
        pending.append(_ImageRun(image_id=image_id, x=np.asarray(x, dtype=np.float64),
                                 label=int(label), target=target, rng=rng,
                                 meter=QueryMeter(config.budget)))
    if pending:
        _run_group(classifier, pending, config, controllers)
    results.extend(_finish(run, config) for run in pending)
    results.sort(key=lambda res: res.image_id)
    return results


def run_batch(classifier, images, labels, config, controllers=None,
              image_ids=None, workers=1):
    """Attack a set of images; deterministic for any worker count.

    Images are split into fixed chunks of config.group_size (by position,
    independent of workers); each chunk runs its images in lockstep.
    """
    n = len(images)
    if image_ids is None:
        image_ids = list(range(n))
    chunks = []
    for i in range(0, n, config.group_size):
        sel = slice(i, i + config.group_size)
        chunks.append((classifier, images[sel], labels[sel], image_ids[sel],
                       config, controllers))
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [_run_chunk(chunk) for chunk in chunks]
    results = [res for part in parts for res in part]
    results.sort(key=lambda res: res.image_id)
    return results


# ---------------------------------------------------------------------------
# accounting

def first_break(result):
    """Query index at which the image was first misclassified (None = never)."""
    if not result.clean_correct:
        return 0
    return result.first_success_query


def robust_accuracy_curve(results, checkpoints):
    """Fraction of images still correctly classified after q queries."""
    n = len(results)
    out = []
    for q in checkpoints:
        robust = sum(1 for res in results
                     if first_break(res) is None or first_break(res) > q)
        out.append(robust / n)
    return out


def summarize(results, checkpoints=(500,)):
    broken = [first_break(res) for res in results]
    queries = [res.queries_used for res in results if res.clean_correct]
    return {
        "images": len(results),
        "clean_accuracy": sum(res.clean_correct for res in results) / len(results),
        "robust_accuracy": robust_accuracy_curve(results, checkpoints),
        "checkpoints": list(checkpoints),
        "mean_queries": float(np.mean(queries)) if queries else 0.0,
        "broken": sum(1 for b in broken if b is not None),
    }


def config_header(config, extra=None):
    """CSV comment lines embedding the resolved run configuration."""
    blob = {"threat": {"norm": config.threat.norm, "eps": config.threat.eps},
            "budget": config.budget, "schedule": config.schedule, "p0": config.p0,
            "colors": config.colors, "loss": config.loss.kind,
            "targeted": config.targeted, "early_stop": config.early_stop,
            "seed": config.seed, "group_size": config.group_size}
    if extra:
        blob.update(extra)
    return ["# config " + json.dumps(blob, sort_keys=True)]


def write_trajectories(path, results, config, extra=None):
    lines = config_header(config, extra)
    lines.append(",".join(TRAJECTORY_COLUMNS))
    for res in results:
        for row in res.trajectory:
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
