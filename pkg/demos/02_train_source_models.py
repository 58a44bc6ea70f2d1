"""Build the synthetic task and train the two source classifiers.

The dataset is a ten-class synthetic image task (smooth class templates
under clutter) sized so everything trains in about a minute on a laptop.
Two convolutional twins are trained from the same seed: one standard, one
on PGD adversarial examples.  The standard model ends up accurate but
brittle; the adversarially trained one gives up a little clean accuracy
for a much wider margin, which is what the attack demos need.

Artifacts land in demos/out/ and the later demos load them from there.

Run:  python demos/02_train_source_models.py     (~30s)
"""

import os

import numpy as np

from metasquare.classifier import (PgdParams, TrainConfig, robust_accuracy_pgd,
                                   train_classifier)
from metasquare.containers import save_classifier, save_dataset
from metasquare.synth import synth_dataset

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    os.makedirs(OUT, exist_ok=True)
    pixels, labels = synth_dataset(1500, seed=0)
    save_dataset(os.path.join(OUT, "dataset.msad"), pixels, labels, 10)
    images = pixels.astype(np.float64) / 255.0
    train_x, train_y = images[:1200], labels[:1200]
    held_x, held_y = images[1200:1400], labels[1200:1400]
    print(f"dataset: {len(images)} images, 10 classes; 1200 train / 200 held out")

    for name, adv in (("std", None), ("adv", PgdParams(iters=7))):
        cfg = TrainConfig(epochs=10, seed=1, architecture="conv", adversarial=adv)
        f, log = train_classifier(train_x, train_y, cfg, num_classes=10)
        path = os.path.join(OUT, f"model_{name}.msat")
        save_classifier(path, f, meta={"train": {"epochs": cfg.epochs,
                                                 "seed": cfg.seed,
                                                 "adversarial": adv is not None}})
        clean = float(np.mean([f.predict(x).argmax() == y
                               for x, y in zip(held_x, held_y)]))
        robust = robust_accuracy_pgd(f, held_x, held_y, PgdParams())
        print(f"model_{name}: clean {clean:.3f}  robust (pgd-20) {robust:.3f}"
              f"  -> {path}")

    print("\nthe gap between the two robust accuracies is the point: the "
          "adversarially trained twin is the interesting attack target")


if __name__ == "__main__":
    main()
