"""Command-line experiment runner.

Subcommands: make-dataset, train-classifier, meta-train, attack, evaluate,
probe, report.  Options can come from --config (a JSON file) with explicit
flags taking precedence; every output embeds the resolved configuration so
a report can be regenerated from its own metadata.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import containers, controller, metatrain, proposal, synth
from .attack import (AttackConfig, ControllerBundle, robust_accuracy_curve,
                     run_batch, summarize, write_trajectories)
from .classifier import PgdParams, TrainConfig, train_classifier
from .core import L2, LINF, LossSpec, ThreatModel


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _fail(code, msg):
    raise CliError(code, msg)


def _parse_seeds(text):
    if ".." in text:
        a, b = text.split("..", 1)
        return list(range(int(a), int(b) + 1))
    return [int(text)]


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    _fail("bad-flag", f"not a boolean: {text!r}")


def _threads(args):
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("MSA_THREADS")
    return int(env) if env else 1


def _load_config_file(args):
    if getattr(args, "config", None) is None:
        return {}
    try:
        with open(args.config) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        _fail("bad-config", f"cannot read config {args.config}: {exc}")


def _resolve(args, cfg_file, name, default=None):
    val = getattr(args, name.replace("-", "_"), None)
    if val is not None:
        return val
    if name in cfg_file:
        return cfg_file[name]
    return default


def _attack_config(args, cfg, seed, budget=None):
    schedule = _resolve(args, cfg, "schedule", "sa")
    if schedule not in ("sa", "aa", "msa"):
        _fail("bad-flag", f"unknown schedule {schedule!r}")
    colors = _resolve(args, cfg, "colors", "uniform")
    if colors not in ("uniform", "msa"):
        _fail("bad-flag", f"unknown colors {colors!r}")
    threat = _resolve(args, cfg, "threat", "linf")
    if threat not in (LINF, L2):
        _fail("bad-flag", f"unknown threat {threat!r}")
    eps = float(_resolve(args, cfg, "eps", 8.0 / 255.0))
    targeted = _resolve(args, cfg, "targeted")
    if targeted is not None and targeted != "random":
        targeted = int(targeted)
    early = _resolve(args, cfg, "early-stop", True)
    if isinstance(early, str):
        early = _parse_bool(early)
    return AttackConfig(
        threat=ThreatModel(threat, eps),
        budget=int(budget if budget is not None else _resolve(args, cfg, "budget", 500)),
        schedule="controller" if schedule == "msa" else schedule,
        p0=float(_resolve(args, cfg, "p0", proposal.SA_P0)),
        colors="controller" if colors == "msa" else colors,
        loss=LossSpec(kind=_resolve(args, cfg, "loss", "ce")),
        targeted=targeted,
        early_stop=early,
        seed=seed,
        record_trajectory=bool(_resolve(args, cfg, "record-trajectory", False)),
    )


def _need_controllers(args, cfg, config):
    if config.schedule != "controller" and config.colors != "controller":
        return None
    path = _resolve(args, cfg, "controllers")
    if path is None:
        _fail("missing-flag", "msa schedule/colors needs --controllers")
    size_ctrl, color_ctrl, _ = containers.load_controllers(path)
    return ControllerBundle(size=size_ctrl, color=color_ctrl)


def _slice(dataset, text):
    if text is None:
        return list(range(len(dataset)))
    a, b = text.split("..", 1)
    return list(range(int(a), int(b) + 1))


# ---------------------------------------------------------------------------
# subcommands

def cmd_make_dataset(args):
    cfg = _load_config_file(args)
    n = int(_resolve(args, cfg, "n", 2000))
    k = int(_resolve(args, cfg, "classes", 10))
    seed = int(_resolve(args, cfg, "seed", 0))
    pixels, labels = synth.synth_dataset(
        n, num_classes=k, seed=seed,
        amplitude=float(_resolve(args, cfg, "amplitude", 0.12)),
        clutter=float(_resolve(args, cfg, "clutter", 0.05)),
        noise=float(_resolve(args, cfg, "noise", 0.03)))
    containers.save_dataset(args.out, pixels, labels, k)
    print(f"wrote {args.out}: {n} images, {k} classes, seed {seed}")


def cmd_train_classifier(args):
    cfg = _load_config_file(args)
    path = _resolve(args, cfg, "data")
    if path is None:
        _fail("missing-flag", "--data required")
    data = containers.load_dataset(path)
    adv = None
    if _resolve(args, cfg, "adversarial", False):
        adv = PgdParams(eps=float(_resolve(args, cfg, "eps", 8.0 / 255.0)),
                        step=float(_resolve(args, cfg, "pgd-step", 0.01)),
                        iters=int(_resolve(args, cfg, "pgd-iters", 20)))
    tc = TrainConfig(epochs=int(_resolve(args, cfg, "epochs", 12)),
                     batch_size=int(_resolve(args, cfg, "batch-size", 64)),
                     lr=float(_resolve(args, cfg, "lr", 1e-3)),
                     seed=int(_resolve(args, cfg, "seed", 0)),
                     architecture=_resolve(args, cfg, "arch", "conv"),
                     adversarial=adv)
    f, log = train_classifier(data.images, data.labels, tc, num_classes=data.num_classes)
    resolved = dict(tc.__dict__)
    resolved["adversarial"] = None if adv is None else dict(adv.__dict__)
    resolved["eval_pgd"] = dict(tc.eval_pgd.__dict__)
    containers.save_classifier(args.out, f, meta={"train": resolved})
    with open(args.out + ".log.csv", "w") as fh:
        fh.write("# config " + json.dumps(resolved, sort_keys=True) + "\n")
        fh.write("epoch,loss,accuracy,robust_accuracy\n")
        for row in log:
            fh.write(",".join(str(v) for v in row) + "\n")
    print(f"wrote {args.out}; final epoch: loss={log[-1][1]:.4f} "
          f"acc={log[-1][2]:.3f} robust={log[-1][3]:.3f}")


def cmd_meta_train(args):
    cfg = _load_config_file(args)
    data = containers.load_dataset(_resolve(args, cfg, "data"))
    clf = containers.load_classifier(_resolve(args, cfg, "model"))
    seed = int(_resolve(args, cfg, "seed", 0))
    train_count = int(_resolve(args, cfg, "train-count", 1000))
    train_idx, _ = containers.split_indices(len(data), train_count, 0)
    mcfg = metatrain.MetaTrainConfig(
        eps=float(_resolve(args, cfg, "eps", 8.0 / 255.0)),
        budget=int(_resolve(args, cfg, "budget", 1000)),
        epochs=int(_resolve(args, cfg, "epochs", 10)),
        batch_size=int(_resolve(args, cfg, "batch-size", 100)),
        lr=float(_resolve(args, cfg, "lr", 0.03)),
        seed=seed, workers=_threads(args))
    rng = np.random.default_rng(seed)
    size_ctrl = controller.SizeController(rng=rng)
    color_ctrl = controller.ColorController(2 ** data.shape[0], rng=rng)
    os.makedirs(args.out, exist_ok=True)
    log = []
    for epoch_log in metatrain.meta_train_epochs(
            clf, data.images[train_idx], data.labels[train_idx],
            size_ctrl, color_ctrl, mcfg):
        log.append(epoch_log)
        containers.save_controllers(
            os.path.join(args.out, f"controllers_epoch{epoch_log[0]:02d}.msat"),
            size_ctrl, color_ctrl, meta={"epoch": epoch_log[0], "seed": seed})
        print(f"epoch {epoch_log[0]}: meta_loss={epoch_log[1]:.5f} "
              f"robust_acc={epoch_log[2]:.3f}")
    containers.save_controllers(os.path.join(args.out, "controllers.msat"),
                                size_ctrl, color_ctrl,
                                meta={"seed": seed, "epochs": mcfg.epochs})
    with open(os.path.join(args.out, "metatrain_log.csv"), "w") as fh:
        fh.write("# config " + json.dumps(mcfg.__dict__, sort_keys=True) + "\n")
        fh.write("epoch,meta_loss,robust_accuracy\n")
        for row in log:
            fh.write(",".join(str(v) for v in row) + "\n")


def cmd_attack(args):
    cfg = _load_config_file(args)
    data = containers.load_dataset(_resolve(args, cfg, "data"))
    clf = containers.load_classifier(_resolve(args, cfg, "model"))
    seed = int(_resolve(args, cfg, "seed", 0))
    config = _attack_config(args, cfg, seed)
    config = AttackConfig(**{**config.__dict__, "record_trajectory": True})
    bundle = _need_controllers(args, cfg, config)
    idx = _slice(data, _resolve(args, cfg, "indices"))
    results = run_batch(clf, data.images[idx], data.labels[idx], config,
                        controllers=bundle, image_ids=idx, workers=_threads(args))
    os.makedirs(args.out, exist_ok=True)
    write_trajectories(os.path.join(args.out, "trajectories.csv"), results, config)
    summary = summarize(results, checkpoints=_checkpoints(args, cfg, config.budget))
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))


def _checkpoints(args, cfg, budget):
    text = _resolve(args, cfg, "checkpoints")
    if text is None:
        return [budget]
    if isinstance(text, list):
        return [int(v) for v in text]
    return [int(v) for v in text.split(",")]


def cmd_evaluate(args):
    cfg = _load_config_file(args)
    data = containers.load_dataset(_resolve(args, cfg, "data"))
    clf = containers.load_classifier(_resolve(args, cfg, "model"))
    seeds = _parse_seeds(_resolve(args, cfg, "seeds", "0"))
    idx = _slice(data, _resolve(args, cfg, "indices"))
    checkpoints = None
    rows = []
    schedule = _resolve(args, cfg, "schedule", "sa")
    colors = _resolve(args, cfg, "colors", "uniform")
    per_seed = []
    for seed in seeds:
        config = _attack_config(args, cfg, seed)
        bundle = _need_controllers(args, cfg, config)
        checkpoints = _checkpoints(args, cfg, config.budget)
        results = run_batch(clf, data.images[idx], data.labels[idx], config,
                            controllers=bundle, image_ids=idx,
                            workers=_threads(args))
        per_seed.append(robust_accuracy_curve(results, checkpoints))
    arr = np.asarray(per_seed) * 100.0
    mean = arr.mean(axis=0)
    stderr = (arr.std(axis=0, ddof=1) / math.sqrt(len(seeds))
              if len(seeds) > 1 else np.zeros(arr.shape[1]))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"eval_{schedule}_{colors}.csv")
    with open(path, "w") as fh:
        fh.write("# config " + json.dumps({"schedule": schedule, "colors": colors,
                                           "seeds": seeds, "indices": len(idx)},
                                          sort_keys=True) + "\n")
        fh.write("schedule,colors,checkpoint,mean,stderr,seeds,cell\n")
        for q, m, se in zip(checkpoints, mean, stderr):
            cell = f"{m:.1f}±{se:.2f}"
            fh.write(f"{schedule},{colors},{q},{float(m)!r},{float(se)!r},"
                     f"{len(seeds)},{cell}\n")
            rows.append((schedule, colors, q, cell))
    width = max(len(r[3]) for r in rows) + 2
    print("schedule colors " + " ".join(f"@{q}".rjust(width) for q in checkpoints))
    print(f"{schedule:8s} {colors:6s} " +
          " ".join(r[3].rjust(width) for r in rows))
    print(f"wrote {path}")


def cmd_probe(args):
    cfg = _load_config_file(args)
    size_ctrl, _, _ = containers.load_controllers(_resolve(args, cfg, "controllers"))
    budget = int(_resolve(args, cfg, "budget", 5000))
    s_max = int(_resolve(args, cfg, "s-max", 16))
    runs = int(_resolve(args, cfg, "runs", 25))
    ps = [float(v) for v in str(_resolve(args, cfg, "p", "0,0.25,0.5,1")).split(",")]
    rng = np.random.default_rng(int(_resolve(args, cfg, "seed", 0)))
    traces = {p: controller.probe_controller(size_ctrl, p, budget, s_max, rng,
                                             n_runs=runs) for p in ps}
    with open(args.out, "w") as fh:
        fh.write("# config " + json.dumps({"budget": budget, "s_max": s_max,
                                           "runs": runs, "p": ps}) + "\n")
        fh.write("t," + ",".join(f"p={p}" for p in ps) + "\n")
        for t in range(budget):
            fh.write(f"{t}," + ",".join(repr(float(traces[p][t])) for p in ps) + "\n")
    print(f"wrote {args.out}")


def cmd_report(args):
    rows = []
    for path in args.inputs:
        with open(path) as fh:
            for line in fh:
                if line.startswith("#") or line.startswith("schedule,"):
                    continue
                sched, colors, q, mean, stderr, seeds, cell = line.strip().split(",")
                rows.append((sched, colors, int(q), cell))
    if not rows:
        _fail("empty-report", "no evaluation rows found in inputs")
    checkpoints = sorted({r[2] for r in rows})
    combos = sorted({(r[0], r[1]) for r in rows})
    cells = {(r[0], r[1], r[2]): r[3] for r in rows}
    lines = ["schedule,colors," + ",".join(str(q) for q in checkpoints)]
    for sched, colors in combos:
        lines.append(f"{sched},{colors}," +
                     ",".join(cells.get((sched, colors, q), "") for q in checkpoints))
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    width = 12
    print("schedule   colors    " + "".join(f"@{q}".rjust(width) for q in checkpoints))
    for sched, colors in combos:
        print(f"{sched:10s} {colors:9s}" +
              "".join(cells.get((sched, colors, q), "-").rjust(width)
                      for q in checkpoints))


# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int, help="worker count (MSA_THREADS fallback)")


def main(argv=None):
    ap = argparse.ArgumentParser(prog="msa", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("make-dataset", help="generate a synthetic dataset container")
    _add_common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--classes", type=int)
    sp.set_defaults(fn=cmd_make_dataset)

    sp = sub.add_parser("train-classifier", help="train a source model")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.add_argument("--arch", choices=("conv", "mlp"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--adversarial", type=_parse_bool)
    sp.set_defaults(fn=cmd_train_classifier)

    sp = sub.add_parser("meta-train", help="meta-train the proposal controllers")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--model")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--train-count", type=int)
    sp.set_defaults(fn=cmd_meta_train)

    for name, fn in (("attack", cmd_attack), ("evaluate", cmd_evaluate)):
        sp = sub.add_parser(name)
        _add_common(sp)
        sp.add_argument("--data")
        sp.add_argument("--model")
        sp.add_argument("--controllers")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--budget", type=int)
        sp.add_argument("--schedule", choices=("sa", "aa", "msa"))
        sp.add_argument("--colors", choices=("uniform", "msa"))
        sp.add_argument("--threat", choices=(LINF, L2))
        sp.add_argument("--eps", type=float)
        sp.add_argument("--p0", type=float)
        sp.add_argument("--targeted", help="class label or 'random'")
        sp.add_argument("--early-stop", type=_parse_bool)
        sp.add_argument("--checkpoints", help="comma-separated query counts")
        sp.add_argument("--indices", help="A..B inclusive index range")
        if name == "evaluate":
            sp.add_argument("--seeds", help="A..B inclusive seed range")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("probe", help="simulate the size controller offline")
    _add_common(sp)
    sp.add_argument("--controllers", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--budget", type=int)
    sp.add_argument("--p", help="comma-separated success probabilities")
    sp.add_argument("--s-max", type=int)
    sp.add_argument("--runs", type=int)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("report", help="merge evaluation CSVs into one table")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_report)

    args = ap.parse_args(argv)
    try:
        args.fn(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc.code}: {exc}\n")
        return 2
    except containers.ContainerError as exc:
        sys.stderr.write(f"error: bad-container: {exc}\n")
        return 2
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
