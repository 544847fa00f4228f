"""Seeded procedural datasets: staged-lesion classification and tendon segmentation.

Two generator families share one config type:

* ``gen_dcss_dataset`` builds 4-class images — a smooth textured disc that is
  either intact (class 0) or carries a procedural tear whose length and
  contrast grow with the stage. Stages 1 and 3 additionally receive a redness
  overlay, so the short/red vs long/red distinction is what separates them;
  stage 2 is the tear-without-redness class. The drawn latent parameters are
  recorded per sample, and ``classify_by_latents`` is the hand-coded rule that
  the generated data must satisfy by construction.

* ``gen_shoulder_dataset`` builds 5-class segmentation samples — one ribbon or
  ellipse structure per image over a dark textured background, with the mask
  being the exact rasterization of the placed structure. Class indices:
  0 background, 1 biceps (long thin ribbon), 2 subscapularis (wide ribbon),
  3 supraspinatus (short thick ribbon), 4 cartilage (ellipse).

Everything is a pure function of (config, seed): per-sample randomness comes
from a stream derived from (seed, "sample", index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, DegenerateInputError
from .seeding import derive_seed, ordered_parallel_map, rng_for

CLASSIFICATION_CLASSES = ("healthy", "stage1", "stage2", "stage3")
SEGMENTATION_CLASSES = (
    "background", "biceps", "subscapularis", "supraspinatus", "cartilage"
)

# default class mixes, expressed as fractions of the total image count
DCSS_PROPORTIONS = (0.125, 0.206, 0.222, 0.446)
SHOULDER_PRESENCE = (121, 181, 41, 116)  # biceps, subscapularis, supraspinatus, cartilage


@dataclass
class LabeledImage:
    image: np.ndarray  # (C, H, W) float in [0, 1]
    label: int  # 0 healthy, 1-3 instability stage
    latents: dict | None = None


@dataclass
class SegSample:
    image: np.ndarray  # (C, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) int in [0, 4]
    latents: dict | None = None


@dataclass(frozen=True)
class GenConfig:
    """Counts, geometry ranges, and the seed for one generated dataset.

    Geometry ranges are calibrated for 64x64 and scale linearly with
    ``image_size``. Classification ranges are per-stage and deliberately
    non-overlapping in tear length, so the latent-threshold rule stays exact.
    """

    counts: tuple[int, ...]
    image_size: int = 64
    noise: float = 0.03
    seed: int = 0
    # classification geometry
    disc_radius: tuple[float, float] = (16.0, 21.0)
    tear_length: tuple[tuple[float, float], ...] = ((8.0, 12.0), (15.0, 20.0), (23.0, 30.0))
    tear_contrast: tuple[float, ...] = (0.45, 0.62, 0.80)
    redness: tuple[float, float] = (0.35, 0.55)
    # segmentation geometry: (length range, width range) per structure kind;
    # kept fat enough that a few labeled images already carry a usable
    # per-class pixel budget (thin-ribbon variants starve the loss)
    ribbon_length: dict = field(default_factory=lambda: {
        "biceps": (32.0, 44.0), "subscapularis": (26.0, 40.0),
        "supraspinatus": (18.0, 28.0),
    })
    ribbon_width: dict = field(default_factory=lambda: {
        "biceps": (9.0, 14.0), "subscapularis": (12.0, 18.0),
        "supraspinatus": (12.0, 16.0),
    })
    ellipse_axes: tuple[tuple[float, float], tuple[float, float]] = ((11.0, 16.0), (8.0, 12.0))
    foreground_fraction: tuple[float, float] = (0.03, 0.40)

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise ContractError(f"class counts must be >= 0, got {self.counts}")
        if self.image_size < 32:
            raise ContractError(f"image size must be >= 32, got {self.image_size}")

    @property
    def scale(self) -> float:
        return self.image_size / 64.0


def proportional_counts(total: int, fractions) -> tuple[int, ...]:
    """Apportion ``total`` over fractions by largest remainder (sums exactly)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    quota = total * fractions / fractions.sum()
    counts = np.floor(quota).astype(int)
    for idx in np.argsort(-(quota - counts))[: total - counts.sum()]:
        counts[idx] += 1
    return tuple(int(c) for c in counts)


def default_dcss_config(total: int = 840, seed: int = 0, **overrides) -> GenConfig:
    return GenConfig(
        counts=proportional_counts(total, DCSS_PROPORTIONS), seed=seed, **overrides
    )


def default_shoulder_config(total: int = 459, seed: int = 0, **overrides) -> GenConfig:
    return GenConfig(
        counts=proportional_counts(total, SHOULDER_PRESENCE), seed=seed, **overrides
    )


def _assigned_labels(config: GenConfig, n_classes: int) -> np.ndarray:
    if len(config.counts) != n_classes:
        raise ContractError(
            f"expected {n_classes} class counts, got {len(config.counts)}"
        )
    total = sum(config.counts)
    if total == 0:
        raise DegenerateInputError("configured total count is zero")
    labels = np.repeat(np.arange(n_classes), config.counts)
    rng_for(config.seed, "assign").shuffle(labels)
    return labels


def _texture(rng, size: int, amplitude: float) -> np.ndarray:
    return gaussian_filter(rng.normal(size=(size, size)), sigma=1.5) * amplitude * 3.0


def _grid(size: int):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _capsule_distance(size: int, center, angle: float, length: float) -> np.ndarray:
    """Distance from each pixel to the segment of given center/angle/length."""
    yy, xx = _grid(size)
    dy, dx = yy - center[0], xx - center[1]
    uy, ux = math.sin(angle), math.cos(angle)
    t = np.clip(dy * uy + dx * ux, -length / 2.0, length / 2.0)
    return np.hypot(dy - t * uy, dx - t * ux)


def _ellipse_level(size: int, center, axes, angle: float) -> np.ndarray:
    """Quadratic-form level: <1 inside the rotated ellipse, 1 on its boundary."""
    yy, xx = _grid(size)
    dy, dx = yy - center[0], xx - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    major = dx * ca + dy * sa
    minor = -dx * sa + dy * ca
    return (major / axes[0]) ** 2 + (minor / axes[1]) ** 2


def _soft(alpha_distance: np.ndarray, feather: float = 1.2) -> np.ndarray:
    """Map a signed 'pixels outside the shape' distance to a [0,1] blend."""
    return np.clip(1.0 - alpha_distance / feather, 0.0, 1.0)


def _paint(image: np.ndarray, alpha: np.ndarray, color) -> None:
    for ch in range(3):
        image[ch] += alpha * (color[ch] - image[ch])


# ---------------------------------------------------------------------------
# classification generator
# ---------------------------------------------------------------------------


def _dcss_sample(config: GenConfig, index: int, stage: int) -> LabeledImage:
    rng = rng_for(config.seed, "sample", index)
    size, s = config.image_size, config.scale
    image = np.empty((3, size, size))
    tissue = (0.72, 0.55, 0.50)
    texture = _texture(rng, size, config.noise)
    for ch, tone in enumerate(tissue):
        image[ch] = tone * (1.0 + texture)

    center = (size / 2.0 + rng.uniform(-3, 3) * s, size / 2.0 + rng.uniform(-3, 3) * s)
    radius = rng.uniform(*config.disc_radius) * s
    yy, xx = _grid(size)
    disc_dist = np.hypot(yy - center[0], xx - center[1]) - radius
    _paint(image, _soft(disc_dist, 2.0), (0.88, 0.82, 0.78))

    tear_length = 0.0
    tear_contrast = 0.0
    redness = 0.0
    angle = rng.uniform(0.0, math.pi)
    if stage >= 1:
        tear_length = rng.uniform(*config.tear_length[stage - 1]) * s
        tear_contrast = config.tear_contrast[stage - 1] * rng.uniform(0.9, 1.1)
        width = rng.uniform(2.0, 3.2) * s
        tear = _soft(_capsule_distance(size, center, angle, tear_length) - width / 2.0)
        for ch in range(3):
            image[ch] *= 1.0 - tear_contrast * tear
    if stage in (1, 3):
        redness = rng.uniform(*config.redness)
        blob_center = (center[0] + rng.uniform(-2, 2) * s, center[1] + rng.uniform(-2, 2) * s)
        blob_axes = (radius * rng.uniform(0.55, 0.8), radius * rng.uniform(0.45, 0.7))
        blob = _soft((_ellipse_level(size, blob_center, blob_axes, rng.uniform(0, math.pi)) - 1.0) * 4.0)
        image[0] += redness * blob
        image[1] -= 0.35 * redness * blob
        image[2] -= 0.35 * redness * blob

    image += rng.normal(size=image.shape) * config.noise
    np.clip(image, 0.0, 1.0, out=image)
    latents = {
        "stage": int(stage),
        "disc_radius": radius / s,
        "tear_angle": angle,
        "tear_length": tear_length / s,
        "tear_contrast": tear_contrast,
        "redness": redness,
    }
    return LabeledImage(image=image, label=int(stage), latents=latents)


def gen_dcss_dataset(config: GenConfig, threads: int = 1) -> list[LabeledImage]:
    """Generate the 4-class staged-lesion classification dataset."""
    labels = _assigned_labels(config, len(CLASSIFICATION_CLASSES))
    return ordered_parallel_map(
        lambda args: _dcss_sample(config, *args), list(enumerate(labels)), threads
    )


def classify_by_latents(latents: dict) -> int:
    """The generator's own separating rule (thresholds on the latent draws).

    No tear -> healthy; tear without redness -> stage 2; a red tear is stage 1
    when short and stage 3 when long. The default tear-length ranges leave a
    gap around the 17.5-pixel threshold, so this rule is exact on generated data.
    """
    if latents["tear_length"] <= 0.0:
        return 0
    if latents["redness"] <= 0.0:
        return 2
    return 1 if latents["tear_length"] < 17.5 else 3


# ---------------------------------------------------------------------------
# segmentation generator
# ---------------------------------------------------------------------------

_STRUCTURE_COLORS = {
    "biceps": (0.88, 0.78, 0.50),
    "subscapularis": (0.55, 0.75, 0.45),
    "supraspinatus": (0.75, 0.55, 0.80),
    "cartilage": (0.58, 0.68, 0.85),
}


def _place_ribbon(rng, config: GenConfig, kind: str, size: int):
    s = config.scale
    length = rng.uniform(*config.ribbon_length[kind]) * s
    width = rng.uniform(*config.ribbon_width[kind]) * s
    angle = rng.uniform(0.0, math.pi)
    margin_y = abs(math.sin(angle)) * length / 2.0 + width / 2.0 + 1.5
    margin_x = abs(math.cos(angle)) * length / 2.0 + width / 2.0 + 1.5
    center = (
        rng.uniform(margin_y, size - 1 - margin_y),
        rng.uniform(margin_x, size - 1 - margin_x),
    )
    dist = _capsule_distance(size, center, angle, length) - width / 2.0
    geometry = {"length": length / s, "width": width / s, "angle": angle,
                "center": [c / s for c in center]}
    return dist, geometry


def _place_ellipse(rng, config: GenConfig, size: int):
    s = config.scale
    axes = (rng.uniform(*config.ellipse_axes[0]) * s,
            rng.uniform(*config.ellipse_axes[1]) * s)
    angle = rng.uniform(0.0, math.pi)
    margin = max(axes) + 1.5
    center = (
        rng.uniform(margin, size - 1 - margin),
        rng.uniform(margin, size - 1 - margin),
    )
    level = _ellipse_level(size, center, axes, angle)
    # convert the quadratic level to an approximate signed pixel distance
    dist = (level - 1.0) * min(axes) / 2.0
    geometry = {"axes": [a / s for a in axes], "angle": angle,
                "center": [c / s for c in center]}
    return dist, geometry


def _shoulder_sample(config: GenConfig, index: int, structure_class: int) -> SegSample:
    rng = rng_for(config.seed, "sample", index)
    size = config.image_size
    image = np.empty((3, size, size))
    backdrop = (0.38, 0.20, 0.18)
    texture = _texture(rng, size, config.noise)
    for ch, tone in enumerate(backdrop):
        image[ch] = tone * (1.0 + texture)
    mask = np.zeros((size, size), dtype=np.int64)

    kind = SEGMENTATION_CLASSES[structure_class]
    if kind == "cartilage":
        dist, geometry = _place_ellipse(rng, config, size)
    else:
        dist, geometry = _place_ribbon(rng, config, kind, size)
    base = _STRUCTURE_COLORS[kind]
    jitter = rng.uniform(-0.04, 0.04, size=3)
    color = tuple(np.clip(np.array(base) + jitter, 0.0, 1.0))
    _paint(image, _soft(dist), color)
    mask[dist <= 0.0] = structure_class

    image += rng.normal(size=image.shape) * config.noise
    np.clip(image, 0.0, 1.0, out=image)
    latents = {
        "structure_class": int(structure_class),
        "kind": kind,
        "geometry": geometry,
        "foreground_fraction": float((mask > 0).mean()),
    }
    return SegSample(image=image, mask=mask, latents=latents)


def gen_shoulder_dataset(config: GenConfig, threads: int = 1) -> list[SegSample]:
    """Generate the 5-class (background + 4 structures) segmentation dataset."""
    kinds = _assigned_labels(config, len(SEGMENTATION_CLASSES) - 1) + 1
    return ordered_parallel_map(
        lambda args: _shoulder_sample(config, *args), list(enumerate(kinds)), threads
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Ranges for the three augmentations: rotate, rescale brightness, zoom."""

    rotation_degrees: tuple[float, float] = (-15.0, 15.0)
    brightness: tuple[float, float] = (0.85, 1.15)
    zoom: tuple[float, float] = (1.0, 1.25)

    def __post_init__(self):
        if self.zoom[0] <= 0.0 or self.zoom[1] <= 0.0:
            raise ContractError(f"zoom factors must be > 0, got {self.zoom}")


def _bilinear(plane: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    sy = np.clip(sy, 0.0, h - 1.0)  # edge replication
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy, wx = sy - y0, sx - x0
    top = plane[y0, x0] * (1 - wx) + plane[y0, x1] * wx
    bottom = plane[y1, x0] * (1 - wx) + plane[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def _nearest(plane: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    iy = np.clip(np.rint(sy).astype(int), 0, h - 1)
    ix = np.clip(np.rint(sx).astype(int), 0, w - 1)
    return plane[iy, ix]


def _rotation_maps(h: int, w: int, degrees: float):
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(theta), math.sin(theta)
    return cy + dy * ca - dx * sa, cx + dy * sa + dx * ca


def _zoom_maps(h: int, w: int, factor: float):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return cy + (yy - cy) / factor, cx + (xx - cx) / factor


def _warp(image: np.ndarray, maps, sampler) -> np.ndarray:
    sy, sx = maps
    return np.stack([sampler(plane, sy, sx) for plane in image])


def augment(sample, policy: AugmentPolicy, seed: int):
    """Rotate, zoom, and rescale brightness; masks get the same geometry.

    The three transforms are applied in that order, each drawn uniformly from
    the policy ranges. Identity draws skip the resampling entirely, so an
    identity policy returns a pixel-identical copy. Images resample
    bilinearly with edge replication; masks use nearest neighbour.
    """
    rng = np.random.default_rng(seed)
    degrees = rng.uniform(*policy.rotation_degrees)
    brightness = rng.uniform(*policy.brightness)
    zoom = rng.uniform(*policy.zoom)
    if zoom <= 0.0:
        raise ContractError(f"zoom factor must be > 0, got {zoom}")

    image = np.array(sample.image, dtype=np.float64)
    mask = sample.mask.copy() if isinstance(sample, SegSample) else None
    h, w = image.shape[1:]
    for value, maps_of in ((degrees, _rotation_maps), (zoom, _zoom_maps)):
        if value == (0.0 if maps_of is _rotation_maps else 1.0):
            continue
        maps = maps_of(h, w, value)
        image = _warp(image, maps, _bilinear)
        if mask is not None:
            mask = _nearest(mask, *maps).astype(np.int64)
    if brightness != 1.0:
        image = np.clip(image * brightness, 0.0, 1.0)

    draw = {"rotation_degrees": degrees, "brightness": brightness, "zoom": zoom}
    if isinstance(sample, SegSample):
        return SegSample(image=image, mask=mask, latents=draw)
    return LabeledImage(image=image, label=sample.label, latents=draw)


def balance_by_augmentation(dataset, target_counts, policy: AugmentPolicy, seed: int):
    """Append augmented copies per class until the targets are met exactly.

    Originals are retained untouched; each appended copy keeps its source's
    label. Source samples are cycled in order so every original contributes.
    """
    if not dataset or not isinstance(dataset[0], LabeledImage):
        raise ContractError("balancing expects a non-empty classification dataset")
    by_class: dict[int, list[LabeledImage]] = {}
    for sample in dataset:
        by_class.setdefault(sample.label, []).append(sample)
    current = [len(by_class.get(c, [])) for c in range(len(target_counts))]
    for c, (have, want) in enumerate(zip(current, target_counts)):
        if want < have:
            raise ContractError(
                f"target count {want} for class {c} is below the current {have}"
            )
    out = list(dataset)
    for c, (have, want) in enumerate(zip(current, target_counts)):
        sources = by_class.get(c, [])
        for i in range(want - have):
            source = sources[i % len(sources)]
            out.append(augment(source, policy, derive_seed(seed, "balance", c, i)))
    return out


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------


def _stratum_key(sample) -> int:
    if isinstance(sample, LabeledImage):
        return sample.label
    foreground = sample.mask[sample.mask > 0]
    return int(np.bincount(foreground).argmax()) if foreground.size else 0


def split(dataset, fractions, seed: int):
    """Seeded stratified split into len(fractions) partitions.

    Each class is apportioned by largest remainder, then single samples are
    moved between partitions (always from the most over-quota class) until
    the partition totals equal the largest-remainder apportionment of the
    whole dataset, keeping every class within +-1 of its exact quota.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0.0):
        raise ContractError(f"fractions must be positive, got {fractions.tolist()}")
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ContractError(f"fractions must sum to 1, got {fractions.sum()!r}")
    n = len(dataset)
    if n == 0:
        raise DegenerateInputError("cannot split an empty dataset")
    keys = np.array([_stratum_key(s) for s in dataset])
    classes = sorted(set(keys.tolist()))
    targets = np.array(proportional_counts(n, fractions))

    alloc = {c: np.array(proportional_counts(int((keys == c).sum()), fractions))
             for c in classes}
    quota = {c: (keys == c).sum() * fractions for c in classes}
    column = lambda j: sum(alloc[c][j] for c in classes)
    while True:
        over = [j for j in range(len(fractions)) if column(j) > targets[j]]
        under = [j for j in range(len(fractions)) if column(j) < targets[j]]
        if not over:
            break
        j_over, j_under = over[0], under[0]
        c_best = max(
            (c for c in classes if alloc[c][j_over] > 0),
            key=lambda c: (alloc[c][j_over] - quota[c][j_over])
            - (alloc[c][j_under] - quota[c][j_under]),
        )
        alloc[c_best][j_over] -= 1
        alloc[c_best][j_under] += 1

    for c in classes:
        if (keys == c).sum() > 0 and np.any(alloc[c] == 0):
            raise DegenerateInputError(
                f"fractions leave class {c} empty in some partition"
            )

    partitions = [[] for _ in fractions]
    for c in classes:
        indices = np.flatnonzero(keys == c)
        rng_for(seed, "split", c).shuffle(indices)
        start = 0
        for j, take in enumerate(alloc[c]):
            for idx in indices[start : start + take]:
                partitions[j].append(dataset[idx])
            start += take
    for j, part in enumerate(partitions):
        rng_for(seed, "order", j).shuffle(part)
    return partitions
