"""Greedy meta-training of the proposal controllers on white-box models.

The controllers drive a relaxed square attack (real-valued sizes, hard
color samples with a soft backward path) against a source classifier for a
full query budget with no early stopping.  Each step contributes the
positive part of its loss improvement to the meta-objective; its gradient
w.r.t. the controller weights flows through the proposal only, never
through the running perturbation (the incumbent xi is a stop-gradient).

Gradient bookkeeping is per image and reductions run in image-index order,
so results do not depend on batch composition or worker scheduling.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn
from .classifier import _dlogits, input_gradient_batch
from .controller import ControllerState, ema_update, success_indicator
from .core import LossSpec, apply_perturbation, loss_batch
from .proposal import RelaxedSquare, corner_colors, odd, stripe_init


@dataclass(frozen=True)
class MetaTrainConfig:
    eps: float = 8.0 / 255.0
    budget: int = 1000  # queries per image per epoch, including the init query
    epochs: int = 10
    batch_size: int = 100
    lr: float = 0.03
    seed: int = 0
    group_size: int = 50  # lockstep evaluation chunk
    workers: int = 1


def meta_loss_step(loss_new, loss_incumbent):
    """Positive part of the improvement over the incumbent loss."""
    return max(loss_new - loss_incumbent, 0.0)


@dataclass
class _Proposal:
    square: RelaxedSquare
    s_tape: object
    color_index: int
    color: np.ndarray
    gsample: object  # None when the uniform floor branch was taken
    c_tape: object
    background: np.ndarray  # xi at build time (stop-gradient buffer)
    xi_cand: np.ndarray


def build_proposal(shape, xi, t, state, size_ctrl, color_ctrl, eps, rng,
                   soft_color=False):
    """Sample one relaxed proposal; draw order: position, then color branch.

    soft_color swaps the hard color for its soft relaxation in the forward
    pass; only the finite-difference tests use it.
    """
    c, h, w = shape
    s, s_tape = size_ctrl.size_with_tape(t, state.R, min(h, w))
    n = odd(s)
    px = int(rng.integers(0, h - n + 1))
    py = int(rng.integers(0, w - n + 1))
    logits, c_tape = color_ctrl.logits(t, state.R_colors)
    idx, gsample = color_ctrl.sample_train(rng, logits)
    corners = corner_colors(c, eps)
    if soft_color and gsample is not None:
        color = corners.T @ gsample.soft
    else:
        color = corners[idx]
    square = RelaxedSquare(shape, s, (px, py))
    xi_cand = square.candidate(xi, color, eps)
    return _Proposal(square, s_tape, idx, color, gsample, c_tape, xi, xi_cand)


def chain_gradients(prop, gx, size_ctrl, color_ctrl, eps):
    """Backpropagate d(step objective)/d(candidate image) into the policies.

    The ball and pixel-range clamps are treated as identity (straight
    through); the Gumbel sample uses its soft path.  Returns (gs, gc) lists
    aligned with the nets' params; gc is None for floor-branch steps.
    """
    ds = prop.square.grad_size(gx, prop.color, prop.background)
    gs = size_ctrl.backward(prop.s_tape, ds)
    if prop.gsample is None:
        return gs, None
    dcolor = prop.square.grad_color(gx, prop.background)
    c = len(dcolor)
    dsoft = corner_colors(c, eps) @ dcolor
    dlogits = nn.gumbel_softmax_vjp(prop.gsample, dsoft)
    gc = color_ctrl.backward(prop.c_tape, dlogits)
    return gs, gc


def meta_step_once(classifier, x, y, xi, incumbent, t, state, size_ctrl,
                   color_ctrl, eps, rng, soft_color=False):
    """One greedy step on one image: objective value and policy gradients.

    Used directly by the gradient checks; the epoch loop below runs the
    same construction with batched classifier evaluations.
    """
    shape = x.shape
    prop = build_proposal(shape, xi, t, state, size_ctrl, color_ctrl, eps, rng,
                          soft_color)
    x_cand = apply_perturbation(x, prop.xi_cand)
    probs = classifier.predict_batch(x_cand[None])
    loss_new = float(loss_batch(probs, np.array([y]))[0])
    value = meta_loss_step(loss_new, incumbent)
    zero_s = [np.zeros_like(p) for p in size_ctrl.net.params]
    zero_c = [np.zeros_like(p) for p in color_ctrl.net.params]
    if value <= 0.0:
        return value, zero_s, zero_c, prop, loss_new
    gx = input_gradient_batch(classifier, x_cand[None], np.array([y]))[0]
    gs, gc = chain_gradients(prop, gx, size_ctrl, color_ctrl, eps)
    return value, gs, gc if gc is not None else zero_c, prop, loss_new


@dataclass
class _GroupOut:
    ids: list
    grads_s: list  # per image, list of arrays (sum over steps, normalized 1/T)
    grads_c: list
    losses: list  # per image, (1/T) * sum of positive improvements
    broken: list  # bool per image: misclassified at any evaluated candidate
    init_loss: list  # losses at the stripe initialization
    final_loss: list  # incumbent losses after the last step


def _run_meta_group(classifier, images, labels, ids, size_ctrl, color_ctrl,
                    config, epoch_seed):
    g = len(images)
    shape = images[0].shape
    steps = config.budget - 1  # the init evaluation consumes one query
    rngs = [np.random.default_rng(epoch_seed ^ int(i)) for i in ids]
    states = [ControllerState.fresh(2 ** shape[0]) for _ in range(g)]
    xis = [stripe_init(rngs[i], shape, config.eps) for i in range(g)]
    acc_s = [[np.zeros_like(p) for p in size_ctrl.net.params] for _ in range(g)]
    acc_c = [[np.zeros_like(p) for p in color_ctrl.net.params] for _ in range(g)]
    loss_acc = np.zeros(g)
    labels = np.asarray(labels)

    x_adv = np.stack([apply_perturbation(images[i], xis[i]) for i in range(g)])
    out, _ = classifier.net.forward(x_adv)
    probs = nn.softmax(out, axis=1)
    incumbent = loss_batch(probs, labels)
    init_loss = incumbent.copy()
    broken = list(probs.argmax(axis=1) != labels)

    for t in range(steps):
        props = [build_proposal(shape, xis[i], t, states[i], size_ctrl,
                                color_ctrl, config.eps, rngs[i]) for i in range(g)]
        x_adv = np.stack([apply_perturbation(images[i], props[i].xi_cand)
                          for i in range(g)])
        out, tape = classifier.net.forward(x_adv)
        probs = nn.softmax(out, axis=1)
        losses = loss_batch(probs, labels)
        preds = probs.argmax(axis=1)
        improved = np.flatnonzero(losses > incumbent)
        if improved.size:
            sub_tape = classifier.net.slice_tape(tape, improved)
            dlog = _dlogits(probs[improved], labels[improved], LossSpec())
            _, gx = classifier.net.backward(sub_tape, dlog, with_params=False)
            for j, i in enumerate(improved):
                gs, gc = chain_gradients(props[i], gx[j], size_ctrl, color_ctrl,
                                         config.eps)
                for a, v in zip(acc_s[i], gs):
                    a += v
                if gc is not None:
                    for a, v in zip(acc_c[i], gc):
                        a += v
        cfg = size_ctrl.cfg
        for i in range(g):
            r = success_indicator(losses[i], incumbent[i])
            states[i].R = ema_update(states[i].R, r, cfg)
            idx = props[i].color_index
            states[i].R_colors[idx] = ema_update(states[i].R_colors[idx], r, cfg)
            if r > 0:
                loss_acc[i] += losses[i] - incumbent[i]
                xis[i] = props[i].xi_cand
                incumbent[i] = losses[i]
            if preds[i] != labels[i]:
                broken[i] = True

    grads_s = [[a / steps for a in acc_s[i]] for i in range(g)]
    grads_c = [[a / steps for a in acc_c[i]] for i in range(g)]
    return _GroupOut(list(ids), grads_s, grads_c, list(loss_acc / steps),
                     broken, list(init_loss), list(incumbent))


def _run_meta_group_task(args):
    return _run_meta_group(*args)


def meta_train(classifier, images, labels, size_ctrl, color_ctrl, config):
    """Train both controllers simultaneously; mutates their weights.

    Each epoch attacks every training image for the full budget with the
    current policies, one Adam step per batch on the mean per-image
    gradient of the (negated) improvement objective.  The learning rate
    follows a cosine schedule over all batch updates.  Returns log rows
    (epoch, meta_loss, robust_accuracy) where meta_loss is the mean of
    -(1/T) * sum of positive improvements and robust_accuracy counts
    images never misclassified during their attack.
    """
    return list(meta_train_epochs(classifier, images, labels, size_ctrl,
                                  color_ctrl, config))


def meta_train_epochs(classifier, images, labels, size_ctrl, color_ctrl, config):
    """Generator form of meta_train, yielding one log row after each epoch."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(images)
    params = size_ctrl.net.params + color_ctrl.net.params
    n_s = len(size_ctrl.net.params)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    opt = nn.adam_init(params, config.lr, config.epochs * batches_per_epoch)
    master = np.random.default_rng(config.seed)
    # common random numbers: every epoch replays the same per-image attack
    # streams, so the epoch-to-epoch meta-loss curve isolates learning
    attack_seed = int(master.integers(0, 2 ** 62))
    for epoch in range(1, config.epochs + 1):
        order = master.permutation(n)
        epoch_losses = {}
        epoch_broken = {}
        for b in range(0, n, config.batch_size):
            batch_ids = order[b:b + config.batch_size]
            tasks = []
            for gstart in range(0, len(batch_ids), config.group_size):
                ids = batch_ids[gstart:gstart + config.group_size]
                tasks.append((classifier, images[ids], labels[ids], ids,
                              size_ctrl, color_ctrl, config, attack_seed))
            if config.workers > 1 and len(tasks) > 1:
                with ProcessPoolExecutor(max_workers=config.workers) as pool:
                    outs = list(pool.map(_run_meta_group_task, tasks))
            else:
                outs = [_run_meta_group(*task) for task in tasks]
            # reduce in image-index order so grouping cannot change the sums
            per_image = {}
            for outg in outs:
                for j, i in enumerate(outg.ids):
                    per_image[int(i)] = (outg.grads_s[j], outg.grads_c[j])
                    epoch_losses[int(i)] = -outg.losses[j]
                    epoch_broken[int(i)] = outg.broken[j]
            grad = [np.zeros_like(p) for p in params]
            for i in sorted(per_image):
                gs, gc = per_image[i]
                for a, v in zip(grad[:n_s], gs):
                    a += v
                for a, v in zip(grad[n_s:], gc):
                    a += v
            # minimize the negated objective, averaged over the batch
            scale = -1.0 / len(batch_ids)
            nn.adam_step(opt, params, [g * scale for g in grad])
        meta_loss = float(np.mean([epoch_losses[i] for i in sorted(epoch_losses)]))
        robust = 1.0 - float(np.mean([epoch_broken[i] for i in sorted(epoch_broken)]))
        yield (epoch, meta_loss, robust)
