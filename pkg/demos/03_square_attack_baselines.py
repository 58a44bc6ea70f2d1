"""Run the random-search square attack with the hand-designed schedules.

Four runs against the adversarially trained model from demo 02, all
score-based (the attacker only sees class probabilities):

  * linf, standard schedule (p0 = 0.3)
  * linf, aggressive schedule (p0 = 0.8, virtual-budget halvings)
  * linf, targeted at a random wrong class (margin loss on the target)
  * l2, mound-shaped updates that recycle perturbation mass

Each prints the robust accuracy curve over query checkpoints: the fraction
of images still classified correctly after the attacker has spent that
many queries.

Run:  python demos/02_train_source_models.py   first
      python demos/03_square_attack_baselines.py     (~1 min)
"""

import os
import sys

import numpy as np

from metasquare.attack import (AttackConfig, robust_accuracy_curve, run_batch,
                               summarize)
from metasquare.containers import load_classifier, load_dataset
from metasquare.core import L2, LINF, LossSpec, ThreatModel

OUT = os.path.join(os.path.dirname(__file__), "out")
CHECKPOINTS = (50, 100, 200, 300)


def curve(results):
    accs = robust_accuracy_curve(results, CHECKPOINTS)
    return "  ".join(f"@{q}: {a:.3f}" for q, a in zip(CHECKPOINTS, accs))


def main():
    try:
        data = load_dataset(os.path.join(OUT, "dataset.msad"))
        clf = load_classifier(os.path.join(OUT, "model_adv.msat"))
    except OSError:
        sys.exit("artifacts missing; run demos/02_train_source_models.py first")
    x, y = data.images[1400:1500], data.labels[1400:1500]
    print(f"attacking the adversarially trained model on {len(x)} unseen images\n")

    runs = [
        ("linf / standard schedule",
         AttackConfig(threat=ThreatModel(LINF, 8 / 255), budget=300,
                      schedule="sa", seed=0)),
        ("linf / aggressive schedule",
         AttackConfig(threat=ThreatModel(LINF, 8 / 255), budget=300,
                      schedule="aa", seed=0)),
        ("linf / targeted (random wrong class)",
         AttackConfig(threat=ThreatModel(LINF, 8 / 255), budget=300,
                      schedule="sa", targeted="random",
                      loss=LossSpec("margin"), seed=0)),
        ("l2 / standard schedule",
         AttackConfig(threat=ThreatModel(L2, 1.0), budget=300,
                      schedule="sa", seed=0)),
    ]
    for name, config in runs:
        results = run_batch(clf, x, y, config)
        s = summarize(results, checkpoints=CHECKPOINTS)
        print(f"{name}")
        print(f"  robust accuracy  {curve(results)}")
        print(f"  broken {s['broken']}/{s['images']}, "
              f"mean queries per attacked image {s['mean_queries']:.0f}\n")

    print("reading the curves: lower is a stronger attack; the aggressive "
          "schedule usually wins at tiny budgets and the standard one "
          "catches up; targeted attacks need many more queries")


if __name__ == "__main__":
    main()
