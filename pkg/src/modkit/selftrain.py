"""Dual-threshold self-training for segmentation.

A two-stage segmenter (background/structure net, then a structure-class net
run on the background-zeroed image) is trained on a small labeled pool, then
repeatedly labels its own unlabeled pool: images whose mean per-pixel
confidence clears ``image_threshold`` are adopted, after pixels below
``pixel_threshold`` are demoted to background. Adopted pseudo-masks are
frozen — never re-predicted — so the pools move monotonically, and each
round's loss mixes the originally-labeled and pseudo-labeled parts with
weight ``lam`` on the labeled side.

``threshold_sweep`` and ``ratio_sweep`` rerun the loop from identical
initial conditions while varying one knob, emitting CSV/JSON tables.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError
from .metrics import iou, pixel_accuracy, write_csv, write_json
from .nn import build_micro_unet, forward_batched, make_optimizer, softmax, train
from .seeding import derive_seed, rng_for
from .synth import SEGMENTATION_CLASSES, SegSample, _stratum_key

IGNORE_INDEX = -1
HISTORY_HEADER = (
    "round", "selected", "pool_labeled", "pool_pseudo", "pool_unlabeled",
    "test_accuracy", "mean_iou",
)
# report columns follow the published table order, not class-index order
TABLE_STRUCTURES = ("biceps", "cartilage", "subscapularis", "supraspinatus")


def _unit_interval(value: float, name: str) -> float:
    if not 0.0 <= value <= 1.0:
        raise ContractError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


@dataclass(frozen=True)
class SelfTrainConfig:
    image_threshold: float = 0.7  # P: adopt an image iff mean confidence >= P
    pixel_threshold: float = 0.7  # T: keep a pixel iff its confidence >= T
    lam: float = 0.5  # loss weight on the originally-labeled part
    labeled_ratio: float = 0.1
    max_iterations: int = 2
    epochs: int = 15
    lr: float = 5e-3
    batch_size: int = 2
    optimizer: str = "adam"
    filter_enabled: bool = True
    # demote failing pixels to the loss ignore index rather than background:
    # an undertrained round-1 model keeps only ~1/3 of true foreground above
    # T, and feeding the demoted 2/3 back as *background* labels teaches the
    # next round to erase structures; abstaining keeps only the (measured
    # >99%-precise) surviving pixels as supervision
    filter_to_ignore: bool = True

    def __post_init__(self):
        _unit_interval(self.image_threshold, "image_threshold")
        _unit_interval(self.pixel_threshold, "pixel_threshold")
        _unit_interval(self.lam, "lam")
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ContractError(
                f"labeled_ratio must lie in (0, 1], got {self.labeled_ratio}"
            )
        if self.max_iterations < 1:
            raise ContractError(
                f"max_iterations must be >= 1, got {self.max_iterations}"
            )
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")


@dataclass(frozen=True)
class SegPrediction:
    mask: np.ndarray  # (H, W) predicted class per pixel
    confidence: np.ndarray  # (H, W) composite probability of that class

    @property
    def mean_confidence(self) -> float:
        return float(self.confidence.mean())


@dataclass(frozen=True)
class PseudoLabelBatch:
    indices: tuple[int, ...]  # into the unlabeled pool, confidence-descending
    masks: tuple[np.ndarray, ...]  # pixel-filtered pseudo-masks
    confidences: tuple[float, ...]  # per-image mean confidence

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class TwoStageSegmenter:
    stage_a: object  # 2-way per-pixel: background vs structure
    stage_b: object  # 4-way per-pixel over structure classes


def make_two_stage(
    input_shape: tuple[int, int, int],
    base_channels: int = 4,
    depth: int = 2,
    seed: int = 0,
) -> TwoStageSegmenter:
    return TwoStageSegmenter(
        stage_a=build_micro_unet(input_shape, 2, base_channels, depth,
                                 seed=derive_seed(seed, "stage", "a")),
        stage_b=build_micro_unet(input_shape, len(SEGMENTATION_CLASSES) - 1,
                                 base_channels, depth,
                                 seed=derive_seed(seed, "stage", "b")),
    )


def segment_batch(two_stage: TwoStageSegmenter, images: np.ndarray) -> list[SegPrediction]:
    """Two-pass segmentation of an (N, C, H, W) batch.

    Stage A's softmax decides foreground (p_structure >= 0.5, ties to
    foreground). Background pixels get class 0 with stage A's background
    probability as confidence; foreground pixels get 1 + stage B's argmax,
    run on the background-zeroed image, with confidence = product of the
    stage A foreground and stage B max probabilities. Stage B is skipped
    entirely when nothing is foreground.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected an (N, C, H, W) batch, got {images.shape}")
    p_a = softmax(forward_batched(two_stage.stage_a, images), axis=1)
    foreground = p_a[:, 1] >= 0.5
    masks = np.zeros(foreground.shape, dtype=np.int64)
    confidence = p_a[:, 0].copy()
    if foreground.any():
        p_b = softmax(
            forward_batched(two_stage.stage_b, images * foreground[:, None]), axis=1
        )
        masks[foreground] = 1 + np.argmax(p_b, axis=1)[foreground]
        confidence[foreground] = (p_a[:, 1] * p_b.max(axis=1))[foreground]
    return [SegPrediction(m, c) for m, c in zip(masks, confidence)]


def segment(two_stage: TwoStageSegmenter, image: np.ndarray) -> SegPrediction:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {image.shape}")
    return segment_batch(two_stage, image[None])[0]


def filter_pixels(
    mask: np.ndarray,
    confidence: np.ndarray,
    pixel_threshold: float,
    failing_to: int = 0,
) -> np.ndarray:
    """Keep a pixel's class iff its confidence >= threshold, else demote it.

    Failing pixels become background (0) by default, or the loss ignore
    index when ``failing_to=IGNORE_INDEX``. Idempotent for ``failing_to=0``
    because demoted pixels keep their (low) confidence and stay demoted.
    """
    _unit_interval(pixel_threshold, "pixel_threshold")
    mask = np.asarray(mask)
    confidence = np.asarray(confidence)
    if mask.shape != confidence.shape:
        raise ShapeError(
            f"mask {mask.shape} and confidence {confidence.shape} differ"
        )
    return np.where(confidence >= pixel_threshold, mask, failing_to)


def select_images(
    predictions: list[SegPrediction],
    image_threshold: float,
    pixel_threshold: float | None = None,
    failing_to: int = 0,
) -> PseudoLabelBatch:
    """Adopt predictions whose mean per-pixel confidence >= the threshold.

    The mean runs over every pixel, predicted background included. Adopted
    masks are pixel-filtered when ``pixel_threshold`` is given; the batch is
    sorted by confidence, highest first (stable for ties).
    """
    _unit_interval(image_threshold, "image_threshold")
    means = np.array([p.mean_confidence for p in predictions])
    chosen = np.flatnonzero(means >= image_threshold)
    order = chosen[np.argsort(-means[chosen], kind="stable")]
    masks = []
    for i in order:
        mask = predictions[i].mask
        if pixel_threshold is not None:
            mask = filter_pixels(mask, predictions[i].confidence,
                                 pixel_threshold, failing_to)
        masks.append(mask)
    return PseudoLabelBatch(
        indices=tuple(int(i) for i in order),
        masks=tuple(masks),
        confidences=tuple(float(means[i]) for i in order),
    )


def _fit_round(
    two_stage: TwoStageSegmenter,
    images: np.ndarray,
    masks: np.ndarray,
    pseudo_flags: np.ndarray,
    config: SelfTrainConfig,
    seed: int,
    round_index: int,
) -> None:
    """One round of training for both stages on labeled + frozen pseudo data.

    Stage A learns background vs structure; stage B learns the structure
    class on background-zeroed inputs, with background pixels ignored by the
    loss. Optimizer state is fresh each round.
    """
    a_targets = np.where(masks < 0, IGNORE_INDEX, (masks > 0).astype(np.int64))
    b_targets = np.where(masks <= 0, IGNORE_INDEX, masks - 1)
    for net, inputs, targets, tag in (
        (two_stage.stage_a, images, a_targets, "a"),
        (two_stage.stage_b, images * (masks > 0)[:, None], b_targets, "b"),
    ):
        # rows whose targets are all-ignored (e.g. pseudo-masks the pixel
        # filter emptied) carry no gradient signal for this stage; drop them
        # so batches never end up fully ignored
        valid = (targets != IGNORE_INDEX).any(axis=(1, 2))
        if not valid.any():
            continue
        flags = pseudo_flags[valid]
        train(
            net, inputs[valid], targets[valid],
            optimizer=make_optimizer(config.optimizer, net.parameters(), lr=config.lr),
            epochs=config.epochs, batch_size=config.batch_size,
            seed=derive_seed(seed, "round", round_index, tag),
            ignore_index=IGNORE_INDEX,
            pseudo_flags=flags if flags.any() else None, lam=config.lam,
        )


def evaluate_segmenter(two_stage: TwoStageSegmenter, test_set: list[SegSample]):
    """(overall pixel accuracy, per-class accuracy, per-class IoU) on a test set."""
    predictions = segment_batch(two_stage, np.stack([s.image for s in test_set]))
    predicted = np.stack([p.mask for p in predictions])
    true = np.stack([s.mask for s in test_set])
    k = len(SEGMENTATION_CLASSES)
    return pixel_accuracy(predicted, true, k=k), iou(predicted, true, k=k)


def _assert_pseudo_batch(
    batch: PseudoLabelBatch,
    predictions: list[SegPrediction],
    config: SelfTrainConfig,
    rng: np.random.Generator,
) -> None:
    """In-loop checks: thresholds honored, filtering matches a recomputation."""
    assert all(c >= config.image_threshold for c in batch.confidences)
    if not config.filter_enabled or not batch.indices:
        return
    failing_to = IGNORE_INDEX if config.filter_to_ignore else 0
    probe = rng.choice(len(batch.indices), size=min(3, len(batch.indices)),
                       replace=False)
    for j in probe:
        pred = predictions[batch.indices[j]]
        keep = pred.confidence >= config.pixel_threshold
        assert np.array_equal(
            batch.masks[j], np.where(keep, pred.mask, failing_to)
        )
        assert np.all(pred.confidence[batch.masks[j] != failing_to] >=
                      config.pixel_threshold)


def self_train(
    two_stage: TwoStageSegmenter,
    labeled_set: list[SegSample],
    unlabeled_set: list[SegSample],
    config: SelfTrainConfig,
    seed: int = 0,
    test_set: list[SegSample] | None = None,
) -> tuple[TwoStageSegmenter, list[dict]]:
    """Iterate train -> predict -> select -> adopt until a stopping rule fires.

    Stops when a round adopts nothing or ``max_iterations`` is reached. A
    round that empties the unlabeled pool is followed by one final round so
    the just-adopted pseudo-labels are actually trained on; that final round
    records ``selected=0`` and stops. Unlabeled samples' masks are never
    read; adopted pseudo-masks are frozen. Returns the trained segmenter and
    one history row per round with pool sizes and test metrics (NaN without
    a test set).
    """
    if not labeled_set:
        raise DegenerateInputError("labeled_set is empty")
    labeled_images = [s.image for s in labeled_set]
    labeled_masks = [s.mask for s in labeled_set]
    pseudo_images: list[np.ndarray] = []
    pseudo_masks: list[np.ndarray] = []
    unlabeled = list(unlabeled_set)
    pool_total = len(labeled_set) + len(unlabeled)
    failing_to = IGNORE_INDEX if config.filter_to_ignore else 0
    history: list[dict] = []
    for round_index in range(1, config.max_iterations + 1):
        images = np.stack(labeled_images + pseudo_images)
        masks = np.stack(labeled_masks + pseudo_masks)
        flags = np.arange(len(images)) >= len(labeled_images)
        _fit_round(two_stage, images, masks, flags, config, seed, round_index)

        selected = 0
        if unlabeled:
            predictions = segment_batch(
                two_stage, np.stack([s.image for s in unlabeled])
            )
            batch = select_images(
                predictions, config.image_threshold,
                config.pixel_threshold if config.filter_enabled else None,
                failing_to,
            )
            _assert_pseudo_batch(batch, predictions, config,
                                 rng_for(seed, "audit", round_index))
            for i, mask in zip(batch.indices, batch.masks):
                pseudo_images.append(unlabeled[i].image)
                pseudo_masks.append(mask)
            taken = set(batch.indices)
            unlabeled = [s for i, s in enumerate(unlabeled) if i not in taken]
            selected = len(batch)
        assert len(labeled_set) + len(pseudo_masks) + len(unlabeled) == pool_total

        if test_set:
            accuracy, overlap = evaluate_segmenter(two_stage, test_set)
            test_accuracy, mean_iou = accuracy.overall, overlap.mean_foreground
        else:
            test_accuracy = mean_iou = float("nan")
        history.append({
            "round": round_index,
            "selected": selected,
            "pool_labeled": len(labeled_set),
            "pool_pseudo": len(pseudo_masks),
            "pool_unlabeled": len(unlabeled),
            "test_accuracy": test_accuracy,
            "mean_iou": mean_iou,
        })
        if selected == 0:
            break
    return two_stage, history


def write_history_csv(history: list[dict], path) -> None:
    rows = [list(HISTORY_HEADER)]
    rows += [[row[key] for key in HISTORY_HEADER] for row in history]
    write_csv(path, rows)


# ---------------------------------------------------------------------------
# labeled/unlabeled pool construction
# ---------------------------------------------------------------------------


def labeled_split(pool: list, ratio: float, seed: int = 0) -> tuple[list, list]:
    """Stratified seeded labeled subset of round(ratio * n) samples.

    Samples are interleaved class-by-class in quota order (each prefix stays
    within one sample of proportional), so subsets are nested: the labeled
    set for a smaller ratio is a prefix of that for a larger one under the
    same seed.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"ratio must lie in (0, 1], got {ratio}")
    n = len(pool)
    target = int(round(ratio * n))
    if target == 0:
        raise DegenerateInputError(f"ratio {ratio} of {n} samples selects nothing")
    by_class: dict[int, list[int]] = {}
    for i, sample in enumerate(pool):
        by_class.setdefault(_stratum_key(sample), []).append(i)
    classes = sorted(by_class)
    for c in classes:
        rng_for(seed, "labeled", c).shuffle(by_class[c])
    taken = {c: 0 for c in classes}
    order: list[int] = []
    for step in range(1, n + 1):
        c = max(
            (c for c in classes if taken[c] < len(by_class[c])),
            key=lambda c: (len(by_class[c]) * step / n - taken[c], -c),
        )
        order.append(by_class[c][taken[c]])
        taken[c] += 1
    labeled = [pool[i] for i in order[:target]]
    unlabeled = [pool[i] for i in order[target:]]
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# sweep experiments
# ---------------------------------------------------------------------------


def _run_once(
    config: SelfTrainConfig,
    labeled: list[SegSample],
    unlabeled: list[SegSample],
    test_pool: list[SegSample],
    seed: int,
    base_channels: int,
    depth: int,
):
    two_stage = make_two_stage(
        tuple(labeled[0].image.shape), base_channels, depth,
        seed=derive_seed(seed, "init"),
    )
    two_stage, history = self_train(
        two_stage, labeled, unlabeled, config,
        seed=derive_seed(seed, "train"), test_set=test_pool,
    )
    return evaluate_segmenter(two_stage, test_pool), history


def _structure_cells(per_class: np.ndarray) -> list[float]:
    names = list(SEGMENTATION_CLASSES)
    return [float(per_class[names.index(s)]) for s in TABLE_STRUCTURES]


def threshold_sweep(
    base_config: SelfTrainConfig,
    thresholds: list[float],
    train_pool: list[SegSample],
    test_pool: list[SegSample],
    seed: int = 0,
    base_channels: int = 4,
    depth: int = 2,
) -> list[dict]:
    """Self-train once per threshold (applied to both P and T) and tabulate.

    Every run starts from the same initial weights and the same
    labeled/unlabeled pools. Rows carry mean and per-structure pixel
    accuracy and IoU; ``mean`` is the overall pixel accuracy for the
    accuracy rows and the foreground-mean for the IoU rows.
    """
    for t in thresholds:
        _unit_interval(t, "threshold")
    labeled, unlabeled = labeled_split(train_pool, base_config.labeled_ratio, seed)
    rows = []
    for t in thresholds:
        config = replace(base_config, image_threshold=t, pixel_threshold=t)
        (accuracy, overlap), _ = _run_once(
            config, labeled, unlabeled, test_pool, seed, base_channels, depth
        )
        for metric, mean, per_class in (
            ("accuracy", accuracy.overall, accuracy.per_class),
            ("iou", overlap.mean_foreground, overlap.per_class),
        ):
            cells = _structure_cells(per_class)
            rows.append({
                "threshold": t, "metric": metric, "mean": float(mean),
                **dict(zip(TABLE_STRUCTURES, cells)),
            })
    return rows


def ratio_sweep(
    base_config: SelfTrainConfig,
    ratios: list[float],
    train_pool: list[SegSample],
    test_pool: list[SegSample],
    seed: int = 0,
    base_channels: int = 4,
    depth: int = 2,
) -> list[dict]:
    """Self-train once per labeled ratio; labeled subsets are nested."""
    rows = []
    for ratio in ratios:
        config = replace(base_config, labeled_ratio=ratio)
        labeled, unlabeled = labeled_split(train_pool, ratio, seed)
        (accuracy, overlap), _ = _run_once(
            config, labeled, unlabeled, test_pool, seed, base_channels, depth
        )
        rows.append({
            "ratio": ratio,
            "labeled": len(labeled),
            "accuracy": accuracy.overall,
            "mean_iou": overlap.mean_foreground,
        })
    return rows


def write_sweep_table(rows: list[dict], csv_path, json_path=None) -> None:
    """Emit sweep rows as CSV (and optionally a JSON mirror)."""
    if not rows:
        raise DegenerateInputError("no sweep rows to write")
    header = list(rows[0])
    write_csv(csv_path, [header] + [[row[k] for k in header] for row in rows])
    if json_path is not None:
        write_json(json_path, rows)
