"""End-to-end drivers: data prep, shared training, reports, determinism."""

from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from modkit.composer import (
    TrainParams,
    make_modular_classifier,
    train_modular,
    train_shared_components,
)
from modkit.config import make_config
from modkit.dataio import load_dataset, read_pnm
from modkit.errors import ConfigError, DegenerateInputError, ParseError
from modkit.experiments import (
    generation_config,
    load_net,
    prepare_classification_data,
    run_attribute,
    run_gen_data,
    run_report,
    run_self_train,
    run_train_eval,
    save_net,
)
from modkit.nn import forward_batched
from modkit.synth import GenConfig, gen_dcss_dataset


def classify_config(tmp_path, **overrides):
    values = {
        "seed": 7,
        "out": str(tmp_path / "run"),
        "data.total": 40,
        "data.image_size": 32,
        "augment.total": 48,
        "train.epochs": 1,
        "model.width": 4,
        "model.blocks": 1,
    }
    values.update(overrides)
    return make_config(values)


def segment_config(tmp_path, **overrides):
    values = {
        "task": "shoulder-segment",
        "seed": 7,
        "out": str(tmp_path / "run"),
        "data.total": 20,
        "data.image_size": 32,
        "selftrain.epochs": 1,
        "selftrain.max_iterations": 1,
        "model.base_channels": 2,
        "model.depth": 1,
    }
    values.update(overrides)
    return make_config(values)


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


# ---------------------------------------------------------------------------
# generation settings
# ---------------------------------------------------------------------------


def test_default_dcss_mix_is_the_published_breakdown(tmp_path):
    gen = generation_config(classify_config(tmp_path, **{"data.total": 0}))
    assert gen.counts == (105, 173, 187, 375)
    assert sum(gen.counts) == 840


def test_default_shoulder_mix_matches_structure_presence(tmp_path):
    gen = generation_config(segment_config(tmp_path, **{"data.total": 0}))
    assert gen.counts == (121, 181, 41, 116)
    assert sum(gen.counts) == 459


def test_explicit_counts_override_the_total(tmp_path):
    config = classify_config(tmp_path, **{"data.counts": (4, 5, 6, 7)})
    assert generation_config(config).counts == (4, 5, 6, 7)


def test_wrong_count_arity_names_the_field(tmp_path):
    config = classify_config(tmp_path, **{"data.counts": (4, 5, 6)})
    with pytest.raises(ConfigError, match="data.counts"):
        generation_config(config)


def test_task_mismatch_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="task"):
        run_train_eval(segment_config(tmp_path))
    with pytest.raises(ConfigError, match="task"):
        run_self_train(classify_config(tmp_path))


# ---------------------------------------------------------------------------
# classification data preparation
# ---------------------------------------------------------------------------


def test_balancing_tops_every_class_up_to_its_target(tmp_path):
    config = classify_config(tmp_path)
    train_set, test_set = prepare_classification_data(config)
    labels = np.array([s.label for s in train_set])
    # 48 images apportioned over (0.125, 0.206, 0.222, 0.446)
    assert [int((labels == c).sum()) for c in range(4)] == [6, 10, 11, 21]
    assert len(test_set) == 12  # 30% of 40, untouched by balancing


def test_balancing_never_discards_existing_samples(tmp_path):
    config = classify_config(tmp_path, **{"augment.total": 4})
    train_set, _ = prepare_classification_data(config)
    plain = classify_config(tmp_path, **{"augment.balance": False})
    unbalanced, _ = prepare_classification_data(plain)
    assert len(train_set) == len(unbalanced)  # targets all below current


# ---------------------------------------------------------------------------
# shared component training
# ---------------------------------------------------------------------------


def test_shared_components_match_independent_training():
    pool = gen_dcss_dataset(GenConfig(counts=(3, 3, 3, 3), image_size=32, seed=21))
    params = TrainParams(epochs=1, batch_size=4)
    shared = train_shared_components(
        pool, params, seed=5, input_shape=(3, 32, 32), width=4, blocks=1,
        init_seed=9,
    )
    for strategy in ("all", "one_vs_one", "weighted"):
        independent = make_modular_classifier(
            strategy, input_shape=(3, 32, 32), width=4, blocks=1, seed=9
        )
        train_modular(independent, pool, params, seed=5)
        for (name, got), (_, want) in zip(
            shared[strategy].gating.named_parameters(),
            independent.gating.named_parameters(),
        ):
            assert_array_equal(got.data, want.data, err_msg=f"gating {name}")
        assert shared[strategy].experts.keys() == independent.experts.keys()
        for key in independent.experts:
            for (name, got), (_, want) in zip(
                shared[strategy].experts[key].named_parameters(),
                independent.experts[key].named_parameters(),
            ):
                assert_array_equal(got.data, want.data,
                                   err_msg=f"{strategy} expert {key} {name}")


def test_hard_and_soft_strategies_share_the_same_networks():
    pool = gen_dcss_dataset(GenConfig(counts=(2, 2, 2, 2), image_size=32, seed=3))
    shared = train_shared_components(
        pool, TrainParams(epochs=1, batch_size=4), seed=1,
        input_shape=(3, 32, 32), width=4, blocks=1,
    )
    assert shared["all"].gating is shared["weighted"].gating
    assert shared["all"].experts["stages"] is shared["weighted"].experts["stages"]


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def test_gen_data_round_trips_and_counts(tmp_path):
    config = classify_config(tmp_path)
    result = run_gen_data(config)
    assert sum(result["counts"].values()) == 40
    assert set(result["counts"]) == {"healthy", "stage1", "stage2", "stage3"}
    samples, meta = load_dataset(result["dataset"])
    assert meta["kind"] == "classification"
    assert len(samples) == 40
    assert (result["run_dir"] / "counts.csv").read_text().startswith("class,count")


def test_gen_data_segmentation_counts_structures(tmp_path):
    config = segment_config(tmp_path)
    result = run_gen_data(config)
    assert set(result["counts"]) == {
        "biceps", "subscapularis", "supraspinatus", "cartilage"
    }
    assert sum(result["counts"].values()) == 20
    _, meta = load_dataset(result["dataset"])
    assert meta["kind"] == "segmentation"


def test_gen_data_rerun_is_byte_identical(tmp_path):
    config = classify_config(tmp_path)
    first = run_gen_data(config, out_dir=tmp_path / "a")
    second = run_gen_data(config, out_dir=tmp_path / "b")
    assert tree_bytes(first["run_dir"]) == tree_bytes(second["run_dir"])


def test_disk_source_feeds_training(tmp_path):
    generated = run_gen_data(classify_config(tmp_path), out_dir=tmp_path / "gen")
    config = classify_config(
        tmp_path,
        **{"data.source": "disk", "data.path": str(generated["dataset"]),
           "out": str(tmp_path / "run2")},
    )
    train_set, test_set = prepare_classification_data(config)
    assert len(train_set) == 48 and len(test_set) == 12


def test_disk_source_checks_dataset_kind(tmp_path):
    generated = run_gen_data(segment_config(tmp_path), out_dir=tmp_path / "gen")
    config = classify_config(
        tmp_path,
        **{"data.source": "disk", "data.path": str(generated["dataset"])},
    )
    with pytest.raises(ConfigError, match="segmentation"):
        prepare_classification_data(config)


# ---------------------------------------------------------------------------
# train-eval
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def train_eval_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train_eval")
    config = classify_config(tmp)
    return config, run_train_eval(config)


def test_train_eval_emits_one_row_per_architecture(train_eval_run):
    _, result = train_eval_run
    assert [name for name, _ in result["rows"]] == [
        "nonmodular", "all", "one_vs_one", "weighted"
    ]
    header = (result["run_dir"] / "summary.csv").read_text().splitlines()[0]
    assert header == "architecture,accuracy,ci_lower,ci_upper"


def test_confusion_row_sums_equal_test_class_counts(train_eval_run):
    config, result = train_eval_run
    _, test_set = prepare_classification_data(config)
    per_class = np.bincount([s.label for s in test_set], minlength=4)
    for name, cm in result["confusions"].items():
        assert_array_equal(cm.row_totals(), per_class, err_msg=name)
        assert (result["run_dir"] / f"confusion_{name}.csv").is_file()


def test_interval_bounds_bracket_the_estimate(train_eval_run):
    _, result = train_eval_run
    for _, ci in result["rows"]:
        assert 0.0 <= ci.lower <= ci.estimate <= ci.upper <= 1.0


def test_saved_models_reproduce_the_reported_predictions(train_eval_run):
    config, result = train_eval_run
    _, test_set = prepare_classification_data(config)
    images = np.stack([s.image for s in test_set])
    labels = np.array([s.label for s in test_set])
    net = load_net(result["run_dir"] / "models" / "nonmodular.bin")
    predicted = forward_batched(net, images).argmax(axis=1)
    cm = result["confusions"]["nonmodular"]
    assert cm.counts.trace() == int((predicted == labels).sum())


def test_strategy_subset_trains_only_whats_asked(tmp_path):
    config = classify_config(tmp_path, **{"train.strategies": ("weighted",)})
    result = run_train_eval(config)
    assert [name for name, _ in result["rows"]] == ["weighted"]
    assert not (result["run_dir"] / "models" / "nonmodular.bin").exists()


def test_train_eval_rerun_is_byte_identical(tmp_path):
    config = classify_config(tmp_path)
    first = run_train_eval(config, out_dir=tmp_path / "a")
    second = run_train_eval(config, out_dir=tmp_path / "b")
    assert tree_bytes(first["run_dir"]) == tree_bytes(second["run_dir"])


# ---------------------------------------------------------------------------
# self-train
# ---------------------------------------------------------------------------


def test_self_train_writes_history_and_models(tmp_path):
    result = run_self_train(segment_config(tmp_path))
    assert len(result["history"]) == 1  # single-round cap -> exactly one row
    text = (result["run_dir"] / "history.csv").read_text().splitlines()
    assert text[0] == ("round,selected,pool_labeled,pool_pseudo,"
                       "pool_unlabeled,test_accuracy,mean_iou")
    assert len(text) == 2
    for stage in ("stage_a", "stage_b"):
        assert load_net(result["run_dir"] / "models" / f"{stage}.bin") is not None


def test_self_train_threshold_sweep_table_shape(tmp_path):
    config = segment_config(tmp_path, **{"sweep.thresholds": (0.5, 0.9)})
    result = run_self_train(config)
    rows = result["threshold_rows"]
    assert len(rows) == 4  # accuracy + iou per threshold
    assert list(rows[0]) == [
        "threshold", "metric", "mean",
        "biceps", "cartilage", "subscapularis", "supraspinatus",
    ]
    assert (result["run_dir"] / "threshold_sweep.csv").is_file()
    assert (result["run_dir"] / "threshold_sweep.json").is_file()


def test_self_train_ratio_sweep_rows(tmp_path):
    config = segment_config(tmp_path, **{"sweep.ratios": (0.5, 1.0)})
    result = run_self_train(config)
    assert [row["ratio"] for row in result["ratio_rows"]] == [0.5, 1.0]
    assert (result["run_dir"] / "ratio_sweep.csv").is_file()


def test_self_train_rerun_is_byte_identical(tmp_path):
    config = segment_config(tmp_path)
    first = run_self_train(config, out_dir=tmp_path / "a")
    second = run_self_train(config, out_dir=tmp_path / "b")
    assert tree_bytes(first["run_dir"]) == tree_bytes(second["run_dir"])


# ---------------------------------------------------------------------------
# attribute / report / model files
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def saved_model(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("attr")
    config = classify_config(tmp, **{"train.strategies": ("nonmodular",)})
    result = run_train_eval(config)
    gen = run_gen_data(config, out_dir=tmp / "gen")
    image = gen["dataset"] / "images" / "00000.ppm"
    return config, result["run_dir"] / "models" / "nonmodular.bin", image


def test_attribute_gradcam_writes_both_maps(tmp_path, saved_model):
    _, model, image = saved_model
    config = classify_config(tmp_path, **{"attribute.target_class": 3})
    result = run_attribute(config, model, image)
    assert result["overlay"].read_bytes().startswith(b"P6")
    assert result["raw"].read_bytes().startswith(b"P5")
    raw = read_pnm(result["raw"])
    assert raw.shape == (32, 32)


def test_attribute_sobol_respects_grid(tmp_path, saved_model):
    _, model, image = saved_model
    config = classify_config(
        tmp_path,
        **{"attribute.method": "sobol", "attribute.grid": 2,
           "attribute.designs": 64},
    )
    result = run_attribute(config, model, image)
    heat = result["map"].heatmap
    values = {heat[:16, :16].mean(), heat[:16, 16:].mean(),
              heat[16:, :16].mean(), heat[16:, 16:].mean()}
    # nearest-neighbour plateaus: each quadrant is constant
    assert np.ptp(heat[:16, :16]) == 0.0
    assert len(values) <= 4


def test_load_net_error_paths(tmp_path, saved_model):
    _, model, _ = saved_model
    with pytest.raises(FileNotFoundError):
        load_net(tmp_path / "absent.bin")
    orphan = tmp_path / "orphan.bin"
    orphan.write_bytes(model.read_bytes())
    with pytest.raises(ParseError, match="sidecar"):
        load_net(orphan)
    orphan.with_suffix(".json").write_text("{not json")
    with pytest.raises(ParseError, match="valid JSON"):
        load_net(orphan)
    orphan.with_suffix(".json").write_text('{"weights": 3}\n')
    with pytest.raises(ParseError, match="arch"):
        load_net(orphan)


def test_save_net_round_trips_exactly(tmp_path, saved_model):
    _, model, _ = saved_model
    net = load_net(model)
    save_net(net, tmp_path / "copy.bin")
    again = load_net(tmp_path / "copy.bin")
    for (name, a), (_, b) in zip(net.named_parameters(), again.named_parameters()):
        assert_array_equal(a.data, b.data, err_msg=name)


def test_report_concatenates_run_artifacts(tmp_path):
    config = classify_config(tmp_path)
    run_gen_data(config)
    text = run_report(config)
    assert text.startswith("== config.txt ==")
    assert "== counts.csv ==" in text
    assert (Path(config["out"]) / "report.txt").read_text() == text


def test_report_on_missing_or_empty_directory(tmp_path):
    config = classify_config(tmp_path, out=str(tmp_path / "nowhere"))
    with pytest.raises(FileNotFoundError):
        run_report(config)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DegenerateInputError):
        run_report(classify_config(tmp_path, out=str(empty)))
