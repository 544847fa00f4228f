"""Gated modular classification: one gating net, experts, three compositions.

Trains the shared components once on a small staged-wrist dataset, then
assembles the hard-gated, pairwise, and soft-weighted classifiers from the
same networks and compares them against a plain 4-way baseline. Ends by
dissecting a single weighted prediction into its gating and expert parts.
"""

import numpy as np

from modkit.composer import (
    TrainParams,
    predict_batch,
    predict_weighted,
    train_shared_components,
)
from modkit.nn import build_micro_resnet, forward_batched, make_optimizer, train
from modkit.seeding import derive_seed
from modkit.synth import (
    CLASSIFICATION_CLASSES,
    GenConfig,
    gen_dcss_dataset,
    split,
)

SEED = 3
pool = gen_dcss_dataset(GenConfig(counts=(40, 40, 40, 40), seed=SEED))
train_set, test_set = split(pool, (0.75, 0.25), seed=derive_seed(SEED, "split"))
test_images = np.stack([s.image for s in test_set])
test_labels = np.array([s.label for s in test_set])
params = TrainParams(epochs=10, batch_size=16)

# gating + stage experts train once; all three strategies share them
classifiers = train_shared_components(
    train_set, params, seed=SEED, width=8, blocks=2, init_seed=SEED
)

baseline = build_micro_resnet((3, 64, 64), 4, width=8, blocks=2,
                              seed=derive_seed(SEED, "init", "nonmodular"))
optimizer = make_optimizer(params.optimizer, baseline.parameters(), lr=params.lr)
train(baseline, np.stack([s.image for s in train_set]),
      np.array([s.label for s in train_set]), optimizer=optimizer,
      epochs=params.epochs, batch_size=params.batch_size,
      seed=derive_seed(SEED, "train", "nonmodular"))

accuracy = (forward_batched(baseline, test_images).argmax(axis=1)
            == test_labels).mean()
print(f"{'nonmodular':11s} accuracy {accuracy:.2%}")
for name in ("all", "one_vs_one", "weighted"):
    predictions = predict_batch(classifiers[name], test_images)
    predicted = np.array([p.predicted for p in predictions])
    print(f"{name:11s} accuracy {(predicted == test_labels).mean():.2%}")

# --- anatomy of one soft-weighted decision -----------------------------------
sample = test_set[0]
prediction = predict_weighted(classifiers["weighted"], sample.image)
gate = prediction.expert_probabilities["gating"]
stages = prediction.expert_probabilities["stages"]
print(f"\none test image (truth: {CLASSIFICATION_CLASSES[sample.label]})")
print(f"  gating    P(healthy)={gate[0]:.3f} P(pathological)={gate[1]:.3f}")
print("  expert    " + "  ".join(
    f"P({name})={value:.3f}"
    for name, value in zip(CLASSIFICATION_CLASSES[1:], stages)))
print("  composed  " + "  ".join(
    f"{name}={value:.3f}"
    for name, value in zip(prediction.probabilities.labels,
                           prediction.probabilities.values)))
print(f"  decision  {CLASSIFICATION_CLASSES[prediction.predicted]}")
