"""Head-to-head: hand-designed schedules vs the meta-learned controllers.

Attacks the adversarially trained model on 100 images it has never seen,
with the same query budget and three different proposal policies:

  sa   standard hand-designed size schedule, uniform colors
  aa   aggressive hand-designed schedule, uniform colors
  msa  meta-learned size and color controllers (demo 04)

The comparison that matters is robust accuracy at a fixed budget: lower
means the attacker found more adversarial examples with the same number
of queries.  Controllers from the reduced demo-04 recipe typically shave
a few points off sa; the full-scale recipe in the acceptance suite is
substantially stronger.

Run:  python demos/02_train_source_models.py   first
      python demos/04_meta_train_controllers.py   first
      python demos/05_compare_attack_schedules.py     (~1 min)
"""

import os
import sys

from metasquare.attack import (AttackConfig, ControllerBundle,
                               robust_accuracy_curve, run_batch)
from metasquare.containers import (load_classifier, load_controllers,
                                   load_dataset)
from metasquare.core import LINF, ThreatModel

OUT = os.path.join(os.path.dirname(__file__), "out")
CHECKPOINTS = (50, 100, 200, 300)


def main():
    try:
        data = load_dataset(os.path.join(OUT, "dataset.msad"))
        clf = load_classifier(os.path.join(OUT, "model_adv.msat"))
        size_ctrl, color_ctrl, _ = load_controllers(
            os.path.join(OUT, "controllers.msat"))
    except OSError:
        sys.exit("artifacts missing; run demos 02 and 04 first")
    x, y = data.images[1400:1500], data.labels[1400:1500]
    bundle = ControllerBundle(size=size_ctrl, color=color_ctrl)

    rows = []
    for name in ("sa", "aa", "msa"):
        config = AttackConfig(
            threat=ThreatModel(LINF, 8 / 255), budget=300,
            schedule="controller" if name == "msa" else name,
            colors="controller" if name == "msa" else "uniform", seed=0)
        results = run_batch(clf, x, y, config,
                            controllers=bundle if name == "msa" else None)
        rows.append((name, robust_accuracy_curve(results, CHECKPOINTS)))

    print(f"robust accuracy on {len(x)} held-out images (lower = stronger attack)")
    print(f"{'policy':>8s}" + "".join(f"{f'@{q}':>8s}" for q in CHECKPOINTS))
    for name, accs in rows:
        print(f"{name:>8s}" + "".join(f"{a:8.3f}" for a in accs))


if __name__ == "__main__":
    main()
