"""Where does the classifier look? Gradient CAM and Sobol region maps.

Trains a small staged-wrist classifier, then explains one pathological test
image two ways: gradient-weighted class activation from the last conv layer,
and variance-based total-order indices over a coarse region grid estimated
with quasi-Monte-Carlo mask designs. Writes overlay/raw pixmaps for both.
"""

from pathlib import Path

import numpy as np

from modkit.attribution import (
    class_score_fn,
    gradcam,
    sobol_attribution,
    write_attribution_maps,
)
from modkit.nn import build_micro_resnet, forward_batched, make_optimizer, train
from modkit.seeding import derive_seed
from modkit.synth import CLASSIFICATION_CLASSES, GenConfig, gen_dcss_dataset

SEED = 11
OUT = Path(__file__).resolve().parent / "output"
OUT.mkdir(exist_ok=True)

pool = gen_dcss_dataset(GenConfig(counts=(30, 30, 30, 30), seed=SEED))
images = np.stack([s.image for s in pool])
labels = np.array([s.label for s in pool])

net = build_micro_resnet((3, 64, 64), 4, width=8, blocks=2,
                         seed=derive_seed(SEED, "init"))
optimizer = make_optimizer("adam", net.parameters(), lr=1e-3)
train(net, images, labels, optimizer=optimizer, epochs=10, batch_size=16,
      seed=derive_seed(SEED, "train"))

# pick a stage-3 image the net gets right, if any
probabilities = forward_batched(net, images)
predicted = probabilities.argmax(axis=1)
print(f"train accuracy: {(predicted == labels).mean():.2%}")
candidates = np.flatnonzero((labels == 3) & (predicted == 3))
index = int(candidates[0]) if candidates.size else int(np.flatnonzero(labels == 3)[0])
image = images[index]
target = 3
print(f"explaining image {index} "
      f"(truth {CLASSIFICATION_CLASSES[labels[index]]}, "
      f"predicted {CLASSIFICATION_CLASSES[predicted[index]]}), "
      f"target class {CLASSIFICATION_CLASSES[target]}")

cam = gradcam(net, image, target)
write_attribution_maps(image, cam, OUT / "gradcam_overlay.ppm",
                       OUT / "gradcam_map.pgm")
hot = np.unravel_index(cam.heatmap.argmax(), cam.heatmap.shape)
print(f"gradcam: peak at pixel {hot}, "
      f"{(cam.heatmap > 0.5).mean():.1%} of pixels above half peak")

sobol = sobol_attribution(class_score_fn(net, target), image,
                          target_class=target, grid=8, n_designs=512,
                          seed=SEED)
write_attribution_maps(image, sobol, OUT / "sobol_overlay.ppm",
                       OUT / "sobol_map.pgm")
cells = sobol.heatmap[::8, ::8]  # one value per 8x8 region plateau
top = np.argsort(cells.ravel())[-3:][::-1]
print("sobol: top regions (row, col) "
      + ", ".join(str(tuple(np.unravel_index(i, cells.shape))) for i in top))
print(f"maps written to {OUT}")
