"""End-to-end acceptance runs, one test per shipped guarantee.

The numbered tests are ordered cheap to expensive: the schedule, relaxation,
gradient, controller and conservation checks take seconds; the attack-loop
and robustness checks train the two source CNNs once (shared fixture); the
meta-training efficacy and transfer checks run the full three-seed training
pipeline and dominate the suite's runtime (budgeted under two CPU-hours).

Each test prints one summary line with the measured numbers straight to the
terminal so a `pytest -v` log doubles as the acceptance report.
"""

import time

import numpy as np
import pytest

from metasquare import nn
from metasquare.attack import (AttackConfig, ControllerBundle,
                               robust_accuracy_curve, run_batch)
from metasquare.classifier import (ARCHITECTURES, PgdParams, TrainConfig,
                                   input_gradient, robust_accuracy_pgd,
                                   train_classifier)
from metasquare.controller import (ColorController, ControllerState,
                                   SizeController)
from metasquare.core import (LINF, ThreatModel, apply_perturbation,
                             classification_loss, project_linf)
from metasquare.metatrain import (MetaTrainConfig, meta_step_once,
                                  meta_train_epochs)
from metasquare.proposal import (RelaxedSquare, aa_schedule, corner_colors,
                                 halving_count, l2_init,
                                 make_relaxed_l2_update, make_square_delta,
                                 odd, sa_schedule, sample_position,
                                 stripe_init)
from metasquare.synth import synth_dataset

EPS = 8.0 / 255.0
SHAPE = (3, 16, 16)


def report(line):
    # captured by pytest and replayed in the -rA summary of a passing run
    print(line, flush=True)


# ---------------------------------------------------------------------------
# shared experiment fixtures

@pytest.fixture(scope="module")
def dataset():
    pixels, labels = synth_dataset(3000, seed=0)
    return pixels.astype(np.float64) / 255.0, labels


@pytest.fixture(scope="module")
def twins(dataset):
    """Standard and adversarially trained conv models, paired seed."""
    images, labels = dataset
    t0 = time.monotonic()
    std, _ = train_classifier(
        images[:2000], labels[:2000],
        TrainConfig(epochs=10, seed=1, architecture="conv"))
    adv, _ = train_classifier(
        images[:2000], labels[:2000],
        TrainConfig(epochs=10, seed=1, architecture="conv",
                    adversarial=PgdParams(iters=7)))
    report(f"[fixtures] conv twins trained in {time.monotonic() - t0:.0f}s")
    return std, adv


@pytest.fixture(scope="module")
def transfer_model(dataset):
    """Held-out architecture trained on the same data and recipe."""
    images, labels = dataset
    f, _ = train_classifier(
        images[:2000], labels[:2000],
        TrainConfig(epochs=10, seed=1, architecture="mlp",
                    adversarial=PgdParams(iters=7)))
    return f


@pytest.fixture(scope="module")
def meta_runs(dataset, twins):
    """Three-seed meta-training against the adversarially trained model."""
    images, labels = dataset
    _, adv = twins
    runs = []
    t0 = time.monotonic()
    for seed in (0, 1, 2):
        rng = np.random.default_rng(1000 + seed)
        size_ctrl = SizeController(rng=rng)
        color_ctrl = ColorController(8, rng=rng)
        log = []
        for row in meta_train_epochs(
                adv, images[:1000], labels[:1000], size_ctrl, color_ctrl,
                MetaTrainConfig(budget=1000, epochs=10, batch_size=100,
                                group_size=50, lr=0.03, seed=seed)):
            log.append(row)
            report(f"[meta seed {seed}] epoch {row[0]}: "
                   f"meta_loss {row[1]:.6f} robust {row[2]:.3f} "
                   f"[{time.monotonic() - t0:.0f}s]")
        runs.append((log, size_ctrl, color_ctrl))
    return runs, time.monotonic() - t0


def robust_500(classifier, images, labels, seed, bundle=None):
    config = AttackConfig(
        threat=ThreatModel(LINF, EPS), budget=500,
        schedule="controller" if bundle else "sa",
        colors="controller" if bundle else "uniform", seed=seed)
    results = run_batch(classifier, images, labels, config, controllers=bundle)
    return robust_accuracy_curve(results, [500])[0]


# ---------------------------------------------------------------------------
# 1. size schedule parity

def test_01_schedule_parity():
    t0 = time.monotonic()
    mille = (1, 5, 20, 100, 200, 400, 600, 800)
    for budget in (500, 1000, 5000, 10000):
        for t in range(budget):
            n = sum(1000 * t >= pm * budget for pm in mille)
            assert halving_count(t, budget) == n, (t, budget)
            assert sa_schedule(t, budget) == 0.3 / 2 ** n, (t, budget)
    ps = [aa_schedule(t) for t in range(5000)]
    assert ps[4999] == 0.8 / 2 ** 6  # exactly 6 halvings by the last query
    assert len(set(ps)) == 7  # all and only halvings 0..6 occur
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    report(f"[criterion 1] PASS exact halving parity for T in "
           f"{{500,1000,5000,10000}}; aggressive run: 6 halvings "
           f"({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# 2. relaxed square consistency

def test_02_relaxation_consistency():
    t0 = time.monotonic()
    rng = np.random.default_rng(2)
    xi = stripe_init(rng, SHAPE, EPS)
    colors = corner_colors(3, EPS)
    for s in range(1, 16, 2):  # every odd size up to s_max = 16
        for _ in range(4):
            pos = sample_position(rng, s, 16, 16)
            color = colors[rng.integers(0, 8)]
            cand = RelaxedSquare(SHAPE, float(s), pos).candidate(xi, color, EPS)
            ref = project_linf(xi + make_square_delta(SHAPE, s, pos, color), EPS)
            assert np.array_equal(cand, ref), s

    background = 0.5 * EPS * (2.0 * rng.random(SHAPE) - 1.0)
    h = 1e-6
    worst = 0.0
    for _ in range(200):
        s = float(rng.uniform(1.0, 15.0))
        if abs(s - round(s)) < 1e-3:
            s += 0.01  # stay inside one differentiable parity interval
        n = odd(s)
        pos = (int(rng.integers(0, 16 - n + 1)), int(rng.integers(0, 16 - n + 1)))
        color = colors[rng.integers(0, 8)]
        w = rng.standard_normal(SHAPE)
        _, dds = RelaxedSquare(SHAPE, s, pos).delta(color, background)
        got = float(np.sum(w * dds))
        up, _ = RelaxedSquare(SHAPE, s + h, pos).delta(color, background)
        dn, _ = RelaxedSquare(SHAPE, s - h, pos).delta(color, background)
        fd = float(np.sum(w * (up - dn)) / (2.0 * h))
        worst = max(worst, abs(got - fd) / (abs(fd) + 1e-12))
    assert worst < 1e-5
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    report(f"[criterion 2] PASS odd sizes exact; 200 random sizes "
           f"worst d(delta)/ds rel err {worst:.2e} ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# 3. gradient oracle suite

def _sampled_rel_err(analytic, fd_eval, param_arrays, picker, n_coords, h=1e-5):
    """Worst relative error of `analytic` grads vs central differences of
    fd_eval() over n_coords sampled coordinates per parameter array."""
    worst = 0.0
    for i, p in enumerate(param_arrays):
        for _ in range(min(n_coords, p.size)):
            loc = np.unravel_index(int(picker.integers(0, p.size)), p.shape)
            keep = p[loc]
            p[loc] = keep + h
            up = fd_eval()
            p[loc] = keep - h
            dn = fd_eval()
            p[loc] = keep
            fd = (up - dn) / (2.0 * h)
            worst = max(worst, abs(analytic[i][loc] - fd) / (abs(fd) + 1e-8))
    return worst


def test_03_gradient_oracles():
    t0 = time.monotonic()
    picker = np.random.default_rng(33)
    worst = {}

    # every shipped architecture: parameter and input gradients
    x = np.random.default_rng(3).random((2, *SHAPE))
    for arch, make in sorted(ARCHITECTURES.items()):
        f = make(np.random.default_rng(7), SHAPE, 10)
        out, tape = f.net.forward(x)
        w = picker.standard_normal(out.shape)
        grads, dx = f.net.backward(tape, w)
        worst[f"{arch} params"] = _sampled_rel_err(
            grads, lambda: float(np.sum(w * f.net.forward(x)[0])),
            f.net.params, picker, n_coords=20)
        err = 0.0
        for _ in range(20):
            loc = np.unravel_index(int(picker.integers(0, x.size)), x.shape)
            keep = x[loc]
            x[loc] = keep + 1e-5
            up = float(np.sum(w * f.net.forward(x)[0]))
            x[loc] = keep - 1e-5
            dn = float(np.sum(w * f.net.forward(x)[0]))
            x[loc] = keep
            fd = (up - dn) / 2e-5
            err = max(err, abs(dx[loc] - fd) / (abs(fd) + 1e-8))
        worst[f"{arch} input"] = err

        # classifier-level attacker-loss gradient
        xi = x[0].copy()
        g = input_gradient(f, xi, 4)
        err = 0.0
        for _ in range(20):
            loc = np.unravel_index(int(picker.integers(0, xi.size)), xi.shape)
            keep = xi[loc]
            xi[loc] = keep + 1e-5
            up = classification_loss(f.predict_batch(xi[None])[0], 4)
            xi[loc] = keep - 1e-5
            dn = classification_loss(f.predict_batch(xi[None])[0], 4)
            xi[loc] = keep
            fd = (up - dn) / 2e-5
            err = max(err, abs(g[loc] - fd) / (abs(fd) + 1e-8))
        worst[f"{arch} loss input"] = err

    # size controller: ds/dweights, every parameter entry
    size_ctrl = SizeController(rng=np.random.default_rng(8))
    s, tape_info = size_ctrl.size_with_tape(120, 1.7, 16)
    gs = size_ctrl.backward(tape_info, 1.0)
    worst["size ds/dw"] = _sampled_rel_err(
        gs, lambda: size_ctrl.size(120, 1.7, 16),
        size_ctrl.net.params, picker, n_coords=10 ** 9)

    # color soft path under frozen Gumbel noise
    color_ctrl = ColorController(8, rng=np.random.default_rng(9))
    R_colors = np.linspace(0.4, 1.6, 8)
    wv = picker.standard_normal(8)

    def color_value():
        logits, _ = color_ctrl.logits(240, R_colors)
        gs = nn.gumbel_softmax(logits, color_ctrl.cfg.temperature,
                               np.random.default_rng(77))
        return float(wv @ gs.soft)

    logits, c_tape = color_ctrl.logits(240, R_colors)
    gsample = nn.gumbel_softmax(logits, color_ctrl.cfg.temperature,
                                np.random.default_rng(77))
    dlogits = nn.gumbel_softmax_vjp(gsample, wv)
    gc = color_ctrl.backward(c_tape, dlogits)
    worst["color soft path"] = _sampled_rel_err(
        gc, color_value, color_ctrl.net.params, picker, n_coords=10 ** 9)

    # one greedy meta-step on a conv classifier, frozen randomness
    clf = ARCHITECTURES["conv"](np.random.default_rng(10), SHAPE, 10)
    xm = 0.3 + 0.4 * np.random.default_rng(11).random(SHAPE)
    state = ControllerState.fresh(8)
    state.R = 1.3
    state.R_colors[:] = R_colors

    def meta_value(replay, incumbent):
        return meta_step_once(clf, xm, 4, np.zeros(SHAPE), incumbent, 25,
                              state, size_ctrl, color_ctrl, EPS,
                              np.random.default_rng(replay), soft_color=True)

    replay = next(k for k in range(50)
                  if meta_value(k, -1e9)[3].gsample is not None)
    inc = meta_value(replay, -1e9)[4] - 1.0
    _, gs, gc, _, _ = meta_value(replay, inc)
    for label, ctrl, grads in (("meta size", size_ctrl, gs),
                               ("meta color", color_ctrl, gc)):
        worst[label] = _sampled_rel_err(
            grads, lambda: meta_value(replay, inc)[0],
            ctrl.net.params, picker, n_coords=4)

    peak = max(worst.values())
    assert peak < 1e-3, worst
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    report(f"[criterion 3] PASS gradient oracles, worst rel err {peak:.2e} "
           f"across {len(worst)} checks ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 4. controller output contracts

def test_04_controller_contracts():
    rng = np.random.default_rng(4)
    for scale in (1.0, 5.0, 50.0):  # saturating weights must still respect bounds
        size_ctrl = SizeController(rng=rng)
        size_ctrl.net.set_params([p * scale for p in size_ctrl.net.params])
        for _ in range(3334):
            t = int(rng.integers(0, 5000))
            R = float(rng.uniform(0.0, 5.0))
            s = size_ctrl.size(t, R, 16)
            assert 1.0 <= s <= 16.0
            r = size_ctrl.size_rounded(t, R, 16)
            assert r == int(r) and 1 <= r <= 16

    color_ctrl = ColorController(8, rng=rng)
    worst_sum = 0.0
    for _ in range(10 ** 4):
        logits = 3.0 * rng.standard_normal(8)
        p = color_ctrl.mixed_probs(logits)
        assert p.min() >= color_ctrl.cfg.p_min
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
    assert worst_sum <= 1e-12

    logits = np.array([1.1, -0.4, 0.2, 0.9, -1.3, 0.0, 0.6, -0.8])
    p = color_ctrl.mixed_probs(logits)
    counts = np.zeros(8)
    draws = 10 ** 5
    for _ in range(draws):
        counts[color_ctrl.sample_eval(rng, logits)] += 1
    chi2 = float(np.sum((counts - draws * p) ** 2 / (draws * p)))
    assert chi2 < 18.475  # 1% critical value, 7 degrees of freedom
    report(f"[criterion 4] PASS size in [1,16] over 1e4 inputs; "
           f"probs >= p_min, sum dev {worst_sum:.1e}; chi2 {chi2:.1f} < 18.475")


# ---------------------------------------------------------------------------
# 5. attack-loop invariants at scale

def test_05_attack_loop_invariants(dataset, twins):
    images, labels = dataset
    _, adv = twins
    x, y = images[2000:2100], labels[2000:2100]
    config = AttackConfig(threat=ThreatModel(LINF, EPS), budget=500, seed=11,
                          record_trajectory=True, validate=True)
    t0 = time.monotonic()
    by_workers = {n: run_batch(adv, x, y, config, workers=n) for n in (1, 4, 8)}
    elapsed = time.monotonic() - t0

    for res in by_workers[1]:
        if res.trajectory is None or not res.clean_correct:
            continue
        rows = res.trajectory
        assert rows[0][1] == 1  # the stripe init is the first query
        best = rows[0][6]
        proposals = 0
        for row in rows[1:]:
            proposals += 1
            if row[7]:  # accepted: the incumbent loss improves strictly
                assert row[6] > best
                best = row[6]
        assert res.queries_used == 1 + proposals
        assert res.queries_used <= 500
        if res.xi is not None:
            assert np.max(np.abs(res.xi)) <= EPS + 1e-15
            applied = apply_perturbation(x[res.image_id], res.xi)
            assert np.all(applied >= 0.0) and np.all(applied <= 1.0)

    for n in (4, 8):
        for a, b in zip(by_workers[1], by_workers[n]):
            assert a.trajectory == b.trajectory
            assert a.queries_used == b.queries_used
            assert a.best_loss == b.best_loss or (
                np.isnan(a.best_loss) and np.isnan(b.best_loss))
            assert (a.xi is None) == (b.xi is None)
            if a.xi is not None:
                assert np.array_equal(a.xi, b.xi)
    assert elapsed < 60.0
    report(f"[criterion 5] PASS 100 images x 500 queries: monotone, exact "
           f"accounting, in-ball, bitwise across 1/4/8 workers ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 6. l2 boundary mass conservation

def test_06_l2_mass_conservation():
    rng = np.random.default_rng(6)
    xi = l2_init(rng, SHAPE, EPS)
    worst = 0.0
    for k in range(10 ** 4):
        s = float(rng.uniform(2.0, 13.0)) if k % 2 else int(rng.integers(2, 14))
        n = odd(s)
        pos1 = sample_position(rng, n, 16, 16)
        pos2 = sample_position(rng, n, 16, 16)
        signs = rng.choice([-1.0, 1.0], size=3)
        out, info = make_relaxed_l2_update(xi, s, pos1, pos2, signs, EPS)
        resid = abs(info["boundary_after"] ** 2
                    + (info["frac"] * info["boundary_before"]) ** 2
                    - info["boundary_before"] ** 2)
        worst = max(worst, resid)
        assert np.linalg.norm(out) <= EPS * (1.0 + 1e-12)
        if k % 3 == 0:
            xi = out  # walk the state so windows see varied history
    assert worst < 1e-10
    report(f"[criterion 6] PASS 1e4 windows, worst conservation residual "
           f"{worst:.1e}; norm <= eps after every step")


# ---------------------------------------------------------------------------
# 9. adversarial training gives a meaningfully robust source model
#    (runs before the meta criteria so a broken source fails fast)

def test_09_adversarial_training_gap(dataset, twins):
    images, labels = dataset
    std, adv = twins
    x, y = images[2000:2200], labels[2000:2200]
    r_std = robust_accuracy_pgd(std, x, y, PgdParams())
    r_adv = robust_accuracy_pgd(adv, x, y, PgdParams())
    assert r_adv - r_std >= 0.10
    report(f"[criterion 9] PASS robust accuracy under the white-box attack: "
           f"standard {r_std:.3f} vs adversarially trained {r_adv:.3f} "
           f"(gap {100 * (r_adv - r_std):.1f} points)")


# ---------------------------------------------------------------------------
# 10. idle controller machinery is bit-for-bit inert

def test_10_schedule_mode_ignores_idle_controllers(dataset, twins):
    images, labels = dataset
    _, adv = twins
    x, y = images[2000:2010], labels[2000:2010]
    config = AttackConfig(threat=ThreatModel(LINF, EPS), budget=200, seed=13,
                          schedule="sa", colors="uniform",
                          record_trajectory=True)
    rng = np.random.default_rng(14)
    bundle = ControllerBundle(size=SizeController(rng=rng),
                              color=ColorController(8, rng=rng))
    plain = run_batch(adv, x, y, config)
    idle = run_batch(adv, x, y, config, controllers=bundle)
    for a, b in zip(plain, idle):
        assert a.trajectory == b.trajectory  # full proposal sequence, all fields
        assert a.queries_used == b.queries_used
        assert (a.xi is None) == (b.xi is None)
        if a.xi is not None:
            assert np.array_equal(a.xi, b.xi)
    report("[criterion 10] PASS proposal sequences identical with and "
           "without controller machinery attached")


# ---------------------------------------------------------------------------
# 7. meta-training efficacy on the robust source model

def test_07_meta_training_efficacy(dataset, twins, meta_runs):
    images, labels = dataset
    _, adv = twins
    runs, train_elapsed = meta_runs
    ev_x, ev_y = images[2200:2400], labels[2200:2400]
    t0 = time.monotonic()
    lines = []
    margin_hits = 0
    for seed, (log, size_ctrl, color_ctrl) in enumerate(runs):
        assert [row[0] for row in log] == list(range(1, 11))
        assert log[9][1] < log[0][1], f"seed {seed}: no meta-loss decrease"
        sa = robust_500(adv, ev_x, ev_y, seed)
        msa = robust_500(adv, ev_x, ev_y, seed,
                         bundle=ControllerBundle(size_ctrl, color_ctrl))
        assert msa <= sa + 1e-12, f"seed {seed}: msa {msa} > sa {sa}"
        margin_hits += sa - msa >= 0.01 - 1e-12
        lines.append(f"seed {seed}: meta_loss {log[0][1]:.6f}->{log[9][1]:.6f}, "
                     f"robust@500 sa {sa:.3f} msa {msa:.3f}")
    assert margin_hits >= 2, lines
    elapsed = train_elapsed + (time.monotonic() - t0)
    assert elapsed < 7200.0
    report(f"[criterion 7] PASS " + "; ".join(lines) +
           f" ({elapsed / 60:.0f} min total)")


# ---------------------------------------------------------------------------
# 8. trained controllers transfer to an unseen architecture

def test_08_transfer_direction(dataset, transfer_model, meta_runs):
    images, labels = dataset
    runs, _ = meta_runs
    ev_x, ev_y = images[2200:2400], labels[2200:2400]
    sa, msa = [], []
    for seed, (_, size_ctrl, color_ctrl) in enumerate(runs):
        sa.append(robust_500(transfer_model, ev_x, ev_y, seed))
        msa.append(robust_500(transfer_model, ev_x, ev_y, seed,
                              bundle=ControllerBundle(size_ctrl, color_ctrl)))
    mean_sa = 100.0 * float(np.mean(sa))
    mean_msa = 100.0 * float(np.mean(msa))
    assert mean_msa <= mean_sa + 0.5 + 1e-9, (sa, msa)
    report(f"[criterion 8] PASS transfer to held-out architecture: "
           f"sa {mean_sa:.2f} vs msa {mean_msa:.2f} "
           f"(mean over 3 seeds, msa <= sa + 0.5)")
