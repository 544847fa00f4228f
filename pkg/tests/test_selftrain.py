"""Self-training loop: filtering/selection arithmetic, bookkeeping, sweeps."""

import csv

import numpy as np
import pytest

from modkit.errors import ContractError, DegenerateInputError, ShapeError
from modkit.nn import forward_batched, softmax
from modkit.selftrain import (
    HISTORY_HEADER,
    IGNORE_INDEX,
    SegPrediction,
    SelfTrainConfig,
    TwoStageSegmenter,
    filter_pixels,
    labeled_split,
    make_two_stage,
    ratio_sweep,
    segment,
    segment_batch,
    select_images,
    self_train,
    threshold_sweep,
    write_history_csv,
    write_sweep_table,
)
from modkit.synth import (
    GenConfig,
    SegSample,
    default_shoulder_config,
    gen_shoulder_dataset,
    split,
)


@pytest.fixture(scope="module")
def shoulder_pools():
    config = default_shoulder_config(total=60, image_size=32, seed=3)
    pool = gen_shoulder_dataset(config)
    return split(pool, (0.7, 0.3), seed=1)


def quick_config(**overrides):
    base = dict(image_threshold=0.5, pixel_threshold=0.5, epochs=1,
                max_iterations=2, batch_size=8)
    base.update(overrides)
    return SelfTrainConfig(**base)


def zeroed_two_stage(background_bias: float = 0.0) -> TwoStageSegmenter:
    """All-zero segmenter; optional head bias pushing stage A to background."""
    two = make_two_stage((3, 16, 16), base_channels=4, depth=1, seed=0)
    for net in (two.stage_a, two.stage_b):
        for p in net.parameters():
            p.data[...] = 0.0
    two.stage_a.head.bias.data[0] = background_bias
    return two


class FailIfConsulted:
    def __call__(self, *args):
        raise AssertionError("stage B was consulted")

    def parameters(self):
        return []


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        {"image_threshold": 1.2},
        {"image_threshold": -0.1},
        {"pixel_threshold": 2.0},
        {"lam": -0.5},
        {"labeled_ratio": 0.0},
        {"labeled_ratio": 1.5},
        {"max_iterations": 0},
        {"epochs": 0},
    ],
)
def test_config_rejects_out_of_range(bad):
    with pytest.raises(ContractError):
        quick_config(**bad)


def test_config_accepts_boundaries():
    quick_config(image_threshold=0.0, pixel_threshold=1.0, lam=1.0,
                 labeled_ratio=1.0, max_iterations=1)


# ---------------------------------------------------------------------------
# two-stage segmentation
# ---------------------------------------------------------------------------


def test_all_background_never_consults_stage_b():
    two = zeroed_two_stage(background_bias=4.0)
    two.stage_b = FailIfConsulted()
    pred = segment(two, np.zeros((3, 16, 16)))
    assert np.all(pred.mask == 0)
    # confidence is stage A's background probability, here sigmoid(4)
    expected = 1.0 / (1.0 + np.exp(-4.0))
    np.testing.assert_allclose(pred.confidence, expected, atol=1e-12)


def test_all_foreground_uniform_stage_b_gives_class_one():
    # Zeroed nets emit uniform softmaxes: the 0.5 tie goes to foreground
    # and the 4-way tie goes to the first structure class.
    pred = segment(zeroed_two_stage(), np.zeros((3, 16, 16)))
    assert np.all(pred.mask == 1)
    np.testing.assert_allclose(pred.confidence, 0.5 * 0.25, atol=1e-12)


def test_composite_confidence_matches_hand_computation():
    two = make_two_stage((3, 16, 16), base_channels=4, depth=1, seed=7)
    image = np.random.default_rng(0).uniform(size=(3, 16, 16))
    pred = segment(two, image)

    p_a = softmax(forward_batched(two.stage_a, image[None]), axis=1)[0]
    foreground = p_a[1] >= 0.5
    p_b = softmax(
        forward_batched(two.stage_b, (image * foreground)[None]), axis=1
    )[0]
    expected_mask = np.where(foreground, 1 + np.argmax(p_b, axis=0), 0)
    expected_conf = np.where(foreground, p_a[1] * p_b.max(axis=0), p_a[0])
    np.testing.assert_array_equal(pred.mask, expected_mask)
    np.testing.assert_allclose(pred.confidence, expected_conf, atol=1e-12)
    assert foreground.any() and not foreground.all()  # both branches exercised


def test_segment_shape_contracts():
    two = zeroed_two_stage()
    with pytest.raises(ShapeError):
        segment(two, np.zeros((16, 16)))
    with pytest.raises(ShapeError):
        segment_batch(two, np.zeros((3, 16, 16)))


# ---------------------------------------------------------------------------
# pixel filtering
# ---------------------------------------------------------------------------


def test_filter_keeps_confident_pixels():
    mask = np.array([[1]])
    assert filter_pixels(mask, np.array([[0.75]]), 0.7) == 1


def test_filter_demotes_uncertain_pixels_to_background():
    mask = np.array([[1]])
    assert filter_pixels(mask, np.array([[0.5]]), 0.7) == 0


def test_filter_threshold_zero_is_identity():
    rng = np.random.default_rng(1)
    mask = rng.integers(0, 5, size=(6, 6))
    conf = rng.uniform(size=(6, 6))
    np.testing.assert_array_equal(filter_pixels(mask, conf, 0.0), mask)


def test_filter_is_idempotent():
    rng = np.random.default_rng(2)
    mask = rng.integers(0, 5, size=(8, 8))
    conf = rng.uniform(size=(8, 8))
    once = filter_pixels(mask, conf, 0.6)
    np.testing.assert_array_equal(filter_pixels(once, conf, 0.6), once)


def test_filter_can_demote_to_ignore_index():
    out = filter_pixels(np.array([[2, 3]]), np.array([[0.9, 0.1]]), 0.5,
                        failing_to=IGNORE_INDEX)
    assert out.tolist() == [[2, IGNORE_INDEX]]


def test_filter_contracts():
    with pytest.raises(ContractError):
        filter_pixels(np.array([[1]]), np.array([[0.5]]), 1.5)
    with pytest.raises(ShapeError):
        filter_pixels(np.zeros((2, 2)), np.zeros((3, 3)), 0.5)


# ---------------------------------------------------------------------------
# image selection
# ---------------------------------------------------------------------------


def uniform_prediction(value, shape=(4, 4), cls=1):
    return SegPrediction(np.full(shape, cls), np.full(shape, float(value)))


def test_selects_image_at_mean_confidence_threshold():
    batch = select_images([uniform_prediction(0.72)], 0.7)
    assert batch.indices == (0,)
    assert batch.confidences == (pytest.approx(0.72),)


def test_threshold_one_selects_nothing():
    batch = select_images([uniform_prediction(0.9), uniform_prediction(0.99)], 1.0)
    assert len(batch) == 0


def test_mixed_confidence_uses_the_plain_mean():
    # half the pixels at 0.9, half at 0.45: mean 0.675 misses P = 0.7
    conf = np.where(np.arange(16).reshape(4, 4) < 8, 0.9, 0.45)
    batch = select_images([SegPrediction(np.ones((4, 4), int), conf)], 0.7)
    assert len(batch) == 0
    batch = select_images([SegPrediction(np.ones((4, 4), int), conf)], 0.675)
    assert batch.indices == (0,)


def test_selection_sorted_by_confidence_descending():
    preds = [uniform_prediction(v) for v in (0.71, 0.93, 0.82, 0.4)]
    batch = select_images(preds, 0.7)
    assert batch.indices == (1, 2, 0)
    assert list(batch.confidences) == sorted(batch.confidences, reverse=True)


def test_selection_applies_pixel_filter_when_asked():
    conf = np.array([[0.9, 0.6], [0.8, 0.95]])
    pred = SegPrediction(np.array([[1, 2], [3, 4]]), conf)
    batch = select_images([pred], 0.7, pixel_threshold=0.7)
    assert batch.masks[0].tolist() == [[1, 0], [3, 4]]


# ---------------------------------------------------------------------------
# the self-training loop
# ---------------------------------------------------------------------------


def test_empty_labeled_set_is_degenerate(shoulder_pools):
    train_pool, _ = shoulder_pools
    two = make_two_stage((3, 32, 32), 4, 2, seed=0)
    with pytest.raises(DegenerateInputError):
        self_train(two, [], train_pool, quick_config())


def test_no_unlabeled_pool_means_one_supervised_round(shoulder_pools):
    train_pool, _ = shoulder_pools
    two = make_two_stage((3, 32, 32), 4, 2, seed=0)
    _, history = self_train(two, train_pool[:8], [], quick_config())
    assert len(history) == 1
    assert history[0]["selected"] == 0
    assert history[0]["pool_unlabeled"] == 0


def test_strict_image_threshold_stops_after_round_one(shoulder_pools):
    train_pool, _ = shoulder_pools
    two = make_two_stage((3, 32, 32), 4, 2, seed=0)
    _, history = self_train(
        two, train_pool[:8], train_pool[8:16],
        quick_config(image_threshold=1.0), seed=4,
    )
    assert len(history) == 1
    assert history[0]["selected"] == 0
    assert history[0]["pool_pseudo"] == 0


def test_zero_thresholds_adopt_everything(shoulder_pools):
    train_pool, _ = shoulder_pools
    labeled, unlabeled = train_pool[:8], train_pool[8:20]
    two = make_two_stage((3, 32, 32), 4, 2, seed=0)
    _, history = self_train(
        two, labeled, unlabeled,
        quick_config(image_threshold=0.0, pixel_threshold=0.0), seed=4,
    )
    assert history[0]["selected"] == len(unlabeled)
    assert history[0]["pool_unlabeled"] == 0
    # round 2 trains on every image, labeled or pseudo-labeled, then stops
    assert len(history) == 2
    assert history[1]["selected"] == 0
    assert history[1]["pool_pseudo"] == len(unlabeled)


def test_all_background_masks_do_not_break_training(shoulder_pools):
    # a strict pixel filter can demote every pixel of an adopted mask; such
    # rows carry no signal for the structure stage and are skipped rather
    # than crashing a round on a fully-ignored batch
    train_pool, _ = shoulder_pools
    blank = [SegSample(s.image, np.zeros_like(s.mask)) for s in train_pool[:6]]
    real = train_pool[6:12]
    two = make_two_stage((3, 32, 32), 4, 2, seed=0)
    _, history = self_train(two, real + blank, [], quick_config(batch_size=2),
                            seed=8)
    assert len(history) == 1
    # even with no foreground anywhere, the structure stage is skipped whole
    two = make_two_stage((3, 32, 32), 4, 2, seed=0)
    _, history = self_train(two, blank, [], quick_config(), seed=8)
    assert len(history) == 1


def test_history_bookkeeping_invariants(shoulder_pools):
    train_pool, test_pool = shoulder_pools
    labeled, unlabeled = labeled_split(train_pool, 0.3, seed=2)
    two = make_two_stage((3, 32, 32), 4, 2, seed=1)
    _, history = self_train(
        two, labeled, unlabeled,
        quick_config(image_threshold=0.2, max_iterations=3), seed=5,
        test_set=test_pool,
    )
    total = len(labeled) + len(unlabeled)
    previous = 0
    for row in history:
        assert row["pool_labeled"] + row["pool_pseudo"] + row["pool_unlabeled"] == total
        assert row["pool_pseudo"] >= previous
        assert row["pool_pseudo"] <= len(unlabeled)
        assert 0.0 <= row["test_accuracy"] <= 1.0
        previous = row["pool_pseudo"]
    assert len(history) <= 3


def test_self_train_is_deterministic(shoulder_pools):
    train_pool, test_pool = shoulder_pools

    def run():
        two = make_two_stage((3, 32, 32), 4, 2, seed=9)
        return self_train(
            two, train_pool[:10], train_pool[10:20],
            quick_config(image_threshold=0.2), seed=11, test_set=test_pool,
        )[1]

    assert run() == run()


def test_history_csv_layout(tmp_path, shoulder_pools):
    train_pool, _ = shoulder_pools
    two = make_two_stage((3, 32, 32), 4, 2, seed=0)
    _, history = self_train(two, train_pool[:8], [], quick_config())
    out = tmp_path / "history.csv"
    write_history_csv(history, out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == list(HISTORY_HEADER)
    assert len(rows) == len(history) + 1
    assert rows[1][0] == "1"


# ---------------------------------------------------------------------------
# labeled/unlabeled pool construction
# ---------------------------------------------------------------------------


def test_labeled_split_counts(shoulder_pools):
    train_pool, _ = shoulder_pools
    labeled, unlabeled = labeled_split(train_pool, 0.25, seed=2)
    assert len(labeled) == round(0.25 * len(train_pool))
    assert len(labeled) + len(unlabeled) == len(train_pool)


def test_labeled_split_ratio_one_keeps_everything(shoulder_pools):
    train_pool, _ = shoulder_pools
    labeled, unlabeled = labeled_split(train_pool, 1.0, seed=2)
    assert len(labeled) == len(train_pool)
    assert unlabeled == []


def test_labeled_subsets_are_nested(shoulder_pools):
    train_pool, _ = shoulder_pools
    previous: list = []
    for ratio in (0.1, 0.2, 0.4, 0.8):
        labeled, _ = labeled_split(train_pool, ratio, seed=6)
        assert [id(s) for s in labeled][: len(previous)] == [id(s) for s in previous]
        previous = labeled


def test_labeled_split_is_stratified(shoulder_pools):
    train_pool, _ = shoulder_pools
    ratio = 0.5
    labeled, _ = labeled_split(train_pool, ratio, seed=3)

    def counts(samples):
        out: dict[int, int] = {}
        for s in samples:
            c = int(s.latents["structure_class"])
            out[c] = out.get(c, 0) + 1
        return out

    pool_counts, labeled_counts = counts(train_pool), counts(labeled)
    for c, n_c in pool_counts.items():
        assert abs(labeled_counts.get(c, 0) - ratio * n_c) <= 1


def test_labeled_split_contracts(shoulder_pools):
    train_pool, _ = shoulder_pools
    with pytest.raises(ContractError):
        labeled_split(train_pool, 0.0, seed=0)
    with pytest.raises(ContractError):
        labeled_split(train_pool, 1.2, seed=0)
    with pytest.raises(DegenerateInputError):
        labeled_split(train_pool, 0.005, seed=0)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep_pools():
    config = default_shoulder_config(total=30, image_size=32, seed=8)
    pool = gen_shoulder_dataset(config)
    return split(pool, (0.7, 0.3), seed=2)


def test_threshold_sweep_table_shape(sweep_pools):
    train_pool, test_pool = sweep_pools
    rows = threshold_sweep(
        quick_config(labeled_ratio=0.4, max_iterations=1),
        [0.6, 0.9], train_pool, test_pool, seed=3, depth=2,
    )
    assert len(rows) == 4  # accuracy + iou per threshold
    assert list(rows[0]) == [
        "threshold", "metric", "mean",
        "biceps", "cartilage", "subscapularis", "supraspinatus",
    ]
    assert [r["metric"] for r in rows] == ["accuracy", "iou"] * 2
    assert [r["threshold"] for r in rows] == [0.6, 0.6, 0.9, 0.9]
    for row in rows:
        assert 0.0 <= row["mean"] <= 1.0 or np.isnan(row["mean"])


def test_threshold_sweep_is_deterministic(sweep_pools):
    train_pool, test_pool = sweep_pools
    config = quick_config(labeled_ratio=0.4, max_iterations=1)
    a = threshold_sweep(config, [0.7], train_pool, test_pool, seed=3)
    b = threshold_sweep(config, [0.7], train_pool, test_pool, seed=3)
    assert a == b


def test_single_threshold_matches_direct_run(sweep_pools):
    train_pool, test_pool = sweep_pools
    config = quick_config(labeled_ratio=0.4, max_iterations=1)
    rows = threshold_sweep(config, [0.7], train_pool, test_pool, seed=3)
    labeled, unlabeled = labeled_split(train_pool, 0.4, seed=3)
    from modkit.seeding import derive_seed
    from modkit.selftrain import evaluate_segmenter
    two = make_two_stage((3, 32, 32), 4, 2, seed=derive_seed(3, "init"))
    two, _ = self_train(two, labeled, unlabeled,
                        quick_config(labeled_ratio=0.4, max_iterations=1,
                                     image_threshold=0.7, pixel_threshold=0.7),
                        seed=derive_seed(3, "train"), test_set=test_pool)
    accuracy, overlap = evaluate_segmenter(two, test_pool)
    assert rows[0]["mean"] == pytest.approx(accuracy.overall)
    assert rows[1]["mean"] == pytest.approx(overlap.mean_foreground, nan_ok=True)


def test_threshold_sweep_rejects_bad_threshold(sweep_pools):
    train_pool, test_pool = sweep_pools
    with pytest.raises(ContractError):
        threshold_sweep(quick_config(), [0.5, 1.1], train_pool, test_pool)


def test_ratio_sweep_rows(sweep_pools):
    train_pool, test_pool = sweep_pools
    rows = ratio_sweep(
        quick_config(max_iterations=1), [0.4, 1.0], train_pool, test_pool, seed=5,
    )
    assert [r["ratio"] for r in rows] == [0.4, 1.0]
    assert rows[0]["labeled"] == round(0.4 * len(train_pool))
    # ratio 1.0 degenerates to supervised training on the whole pool
    assert rows[1]["labeled"] == len(train_pool)
    for row in rows:
        assert 0.0 <= row["accuracy"] <= 1.0


def test_ratio_sweep_empty_labeled_set_is_degenerate(sweep_pools):
    train_pool, test_pool = sweep_pools
    with pytest.raises(DegenerateInputError):
        ratio_sweep(quick_config(), [0.005], train_pool, test_pool)


def test_sweep_table_files(tmp_path, sweep_pools):
    train_pool, test_pool = sweep_pools
    rows = ratio_sweep(
        quick_config(max_iterations=1), [0.5], train_pool, test_pool, seed=5,
    )
    csv_path, json_path = tmp_path / "sweep.csv", tmp_path / "sweep.json"
    write_sweep_table(rows, csv_path, json_path)
    parsed = list(csv.reader(csv_path.open()))
    assert parsed[0] == ["ratio", "labeled", "accuracy", "mean_iou"]
    assert len(parsed) == 2
    import json
    mirror = json.loads(json_path.read_text())
    assert mirror[0]["labeled"] == rows[0]["labeled"]
    with pytest.raises(DegenerateInputError):
        write_sweep_table([], csv_path)
