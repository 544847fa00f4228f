"""End-to-end experiment drivers shared by the command line and demo scripts.

Each ``run_*`` function performs one subcommand's work from an effective
RunConfig: it prepares the run directory (echoing the config under a
versioned format tag), does the computation, writes the reports, and returns
the in-memory results so callers can assert on them without re-reading
files. Every artifact write is deterministic — fixed key order, fixed float
formatting, no timestamps — so a rerun with the same config and seed
reproduces the directory byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attribution import class_score_fn, gradcam, sobol_attribution, write_attribution_maps
from .composer import (
    TrainParams,
    predict_batch,
    save_classifier,
    train_shared_components,
)
from .config import ARCHITECTURES, RunConfig
from .dataio import load_dataset, read_pnm, save_dataset, u8_to_image
from .errors import ConfigError, DegenerateInputError, ParseError
from .metrics import (
    confusion,
    wilson_interval,
    write_csv,
    write_summary_json,
    write_summary_table,
)
from .nn import (
    build_from_arch,
    build_micro_resnet,
    forward_batched,
    load_params,
    make_optimizer,
    save_params,
    train,
)
from .seeding import derive_seed
from .selftrain import (
    SelfTrainConfig,
    labeled_split,
    make_two_stage,
    ratio_sweep,
    self_train,
    threshold_sweep,
    write_history_csv,
    write_sweep_table,
)
from .synth import (
    CLASSIFICATION_CLASSES,
    DCSS_PROPORTIONS,
    SEGMENTATION_CLASSES,
    SHOULDER_PRESENCE,
    AugmentPolicy,
    GenConfig,
    balance_by_augmentation,
    gen_dcss_dataset,
    gen_shoulder_dataset,
    proportional_counts,
    split,
)


def prepare_run_dir(config: RunConfig, out_dir=None) -> Path:
    """Create the run directory and echo the effective config into it."""
    path = Path(out_dir if out_dir is not None else config["out"])
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(config.render())
    return path


def _require_task(config: RunConfig, expected: str, command: str) -> None:
    if config["task"] != expected:
        raise ConfigError(
            f"{command} requires task = {expected}, got {config['task']!r}"
        )


def generation_config(config: RunConfig) -> GenConfig:
    """The generator settings implied by the run config's data.* keys."""
    classification = config["task"] == "dcss-classify"
    mix = DCSS_PROPORTIONS if classification else SHOULDER_PRESENCE
    total = config["data.total"] or (840 if classification else 459)
    counts = config["data.counts"] or proportional_counts(total, mix)
    if len(counts) != len(mix):
        raise ConfigError(
            f"data.counts expects {len(mix)} entries for task "
            f"{config['task']!r}, got {len(counts)}"
        )
    return GenConfig(
        counts=tuple(int(c) for c in counts),
        image_size=config["data.image_size"],
        noise=config["data.noise"],
        seed=derive_seed(config["seed"], "data"),
    )


def _load_pool(config: RunConfig, expected_kind: str):
    samples, meta = load_dataset(config["data.path"])
    if meta.get("kind") != expected_kind:
        raise ConfigError(
            f"data.path points at a {meta.get('kind')!r} dataset, "
            f"task {config['task']!r} needs {expected_kind!r}"
        )
    return samples


def _pool(config: RunConfig):
    """The full sample pool, generated or loaded per data.source."""
    classification = config["task"] == "dcss-classify"
    if config["data.source"] == "disk":
        kind = "classification" if classification else "segmentation"
        return _load_pool(config, kind)
    gen = generation_config(config)
    threads = config["threads"]
    if classification:
        return gen_dcss_dataset(gen, threads=threads)
    return gen_shoulder_dataset(gen, threads=threads)


def prepare_classification_data(config: RunConfig):
    """(train, test) pools: stratified split, then balancing augmentation.

    Balancing targets are the configured class mix apportioned over
    augment.total, clipped from below by the counts already present so the
    balancer only ever appends.
    """
    pool = _pool(config)
    fraction = config["split.train_fraction"]
    train_set, test_set = split(
        pool, (fraction, 1.0 - fraction), seed=derive_seed(config["seed"], "split")
    )
    if config["augment.balance"]:
        wanted = proportional_counts(config["augment.total"], DCSS_PROPORTIONS)
        labels = np.array([s.label for s in train_set])
        have = [int((labels == c).sum()) for c in range(len(wanted))]
        targets = tuple(max(h, w) for h, w in zip(have, wanted))
        train_set = balance_by_augmentation(
            train_set, targets, AugmentPolicy(),
            seed=derive_seed(config["seed"], "augment"),
        )
    return train_set, test_set


def save_net(net, path) -> None:
    """Parameters plus an architecture sidecar so the net reloads standalone."""
    path = Path(path)
    save_params(net, path)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"arch": net.arch}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_net(path):
    """Rebuild a network from a .bin file and its .json architecture sidecar."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file {path} does not exist")
    sidecar = path.with_suffix(".json")
    try:
        payload = json.loads(sidecar.read_text())
    except FileNotFoundError:
        raise ParseError("architecture sidecar is missing", str(sidecar), 0) from None
    except json.JSONDecodeError as err:
        raise ParseError(f"architecture sidecar is not valid JSON: {err.msg}",
                         str(sidecar), err.pos) from None
    if "arch" not in payload:
        raise ParseError("architecture sidecar lacks an 'arch' entry", str(sidecar), 0)
    net = build_from_arch(payload["arch"])
    load_params(net, path)
    return net


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def run_gen_data(config: RunConfig, out_dir=None) -> dict:
    """Generate the configured dataset, save it, and tabulate class counts."""
    run = prepare_run_dir(config, out_dir)
    gen = generation_config(config)
    classification = config["task"] == "dcss-classify"
    if classification:
        samples = gen_dcss_dataset(gen, threads=config["threads"])
        names = CLASSIFICATION_CLASSES
        labels = [s.label for s in samples]
    else:
        samples = gen_shoulder_dataset(gen, threads=config["threads"])
        names = SEGMENTATION_CLASSES[1:]
        labels = [s.latents["structure_class"] - 1 for s in samples]
    save_dataset(samples, run / "dataset", config=asdict(gen), seed=gen.seed)
    counts = {name: int(np.sum(np.array(labels) == i)) for i, name in enumerate(names)}
    write_csv(run / "counts.csv",
              [["class", "count"], *[[n, c] for n, c in counts.items()]])
    return {"run_dir": run, "dataset": run / "dataset", "counts": counts}


# ---------------------------------------------------------------------------
# train-eval
# ---------------------------------------------------------------------------


def _fit_plain(net, images, labels, params: TrainParams, seed: int) -> None:
    optimizer = make_optimizer(params.optimizer, net.parameters(), lr=params.lr)
    train(net, images, labels, optimizer=optimizer, epochs=params.epochs,
          batch_size=params.batch_size, seed=seed)


def run_train_eval(config: RunConfig, out_dir=None) -> dict:
    """Train the requested architectures under one seed and tabulate accuracy.

    The gating and expert networks are shared across the modular strategies
    (their builds and fits are seed-identical whether trained jointly or per
    strategy), so each component trains exactly once.
    """
    _require_task(config, "dcss-classify", "train-eval")
    run = prepare_run_dir(config, out_dir)
    train_set, test_set = prepare_classification_data(config)
    seed = config["seed"]
    params = TrainParams(
        lr=config["train.lr"], epochs=config["train.epochs"],
        batch_size=config["train.batch_size"], optimizer=config["train.optimizer"],
    )
    size = config["data.image_size"]
    input_shape = (3, size, size)
    width, blocks = config["model.width"], config["model.blocks"]
    requested = [a for a in ARCHITECTURES if a in config["train.strategies"]]

    modular = {}
    if any(name != "nonmodular" for name in requested):
        modular = train_shared_components(
            train_set, params, seed=seed, input_shape=input_shape,
            width=width, blocks=blocks, init_seed=seed,
        )

    test_images = np.stack([s.image for s in test_set])
    test_labels = np.array([s.label for s in test_set])
    models_dir = run / "models"
    models_dir.mkdir(exist_ok=True)

    rows, confusions = [], {}
    for name in requested:
        if name == "nonmodular":
            net = build_micro_resnet(
                input_shape, len(CLASSIFICATION_CLASSES), width=width,
                blocks=blocks, seed=derive_seed(seed, "init", "nonmodular"),
            )
            _fit_plain(net, np.stack([s.image for s in train_set]),
                       np.array([s.label for s in train_set]), params,
                       derive_seed(seed, "train", "nonmodular"))
            predicted = forward_batched(net, test_images).argmax(axis=1)
            save_net(net, models_dir / "nonmodular.bin")
        else:
            classifier = modular[name]
            predicted = np.array(
                [p.predicted for p in predict_batch(classifier, test_images)]
            )
            save_classifier(classifier, models_dir / name)
        cm = confusion(predicted, test_labels, k=len(CLASSIFICATION_CLASSES),
                       class_names=CLASSIFICATION_CLASSES)
        accuracy = cm.counts.trace() / cm.total
        ci = wilson_interval(accuracy, cm.total, level=config["report.level"])
        cm.save_csv(run / f"confusion_{name}.csv")
        cm.save_json(run / f"confusion_{name}.json")
        rows.append((name, ci))
        confusions[name] = cm

    write_summary_table(run / "summary.csv", rows)
    write_summary_json(run / "summary.json", rows)
    return {
        "run_dir": run, "rows": rows, "confusions": confusions,
        "train_size": len(train_set), "test_size": len(test_set),
    }


# ---------------------------------------------------------------------------
# self-train
# ---------------------------------------------------------------------------


def _self_train_config(config: RunConfig) -> SelfTrainConfig:
    return SelfTrainConfig(
        image_threshold=config["selftrain.image_threshold"],
        pixel_threshold=config["selftrain.pixel_threshold"],
        lam=config["selftrain.lam"],
        labeled_ratio=config["selftrain.labeled_ratio"],
        max_iterations=config["selftrain.max_iterations"],
        epochs=config["selftrain.epochs"],
        lr=config["selftrain.lr"],
        batch_size=config["selftrain.batch_size"],
        optimizer=config["selftrain.optimizer"],
        filter_enabled=config["selftrain.filter_enabled"],
        filter_to_ignore=config["selftrain.filter_to_ignore"],
    )


def run_self_train(config: RunConfig, out_dir=None) -> dict:
    """Self-train on the shoulder pool; optionally sweep thresholds/ratios."""
    _require_task(config, "shoulder-segment", "self-train")
    run = prepare_run_dir(config, out_dir)
    pool = _pool(config)
    fraction = config["split.train_fraction"]
    train_pool, test_pool = split(
        pool, (fraction, 1.0 - fraction), seed=derive_seed(config["seed"], "split")
    )
    st_config = _self_train_config(config)
    seed = config["seed"]
    size = config["data.image_size"]
    base_channels, depth = config["model.base_channels"], config["model.depth"]

    labeled, unlabeled = labeled_split(
        train_pool, st_config.labeled_ratio, seed=derive_seed(seed, "labeled")
    )
    segmenter = make_two_stage((3, size, size), base_channels, depth,
                               seed=derive_seed(seed, "init"))
    segmenter, history = self_train(
        segmenter, labeled, unlabeled, st_config,
        seed=derive_seed(seed, "train"), test_set=test_pool,
    )
    write_history_csv(history, run / "history.csv")
    models_dir = run / "models"
    models_dir.mkdir(exist_ok=True)
    save_net(segmenter.stage_a, models_dir / "stage_a.bin")
    save_net(segmenter.stage_b, models_dir / "stage_b.bin")

    results = {
        "run_dir": run, "history": history,
        "labeled": len(labeled), "unlabeled": len(unlabeled),
        "test_size": len(test_pool),
    }
    if config["sweep.thresholds"]:
        rows = threshold_sweep(
            st_config, list(config["sweep.thresholds"]), train_pool, test_pool,
            seed=seed, base_channels=base_channels, depth=depth,
        )
        write_sweep_table(rows, run / "threshold_sweep.csv",
                          run / "threshold_sweep.json")
        results["threshold_rows"] = rows
    if config["sweep.ratios"]:
        rows = ratio_sweep(
            st_config, list(config["sweep.ratios"]), train_pool, test_pool,
            seed=seed, base_channels=base_channels, depth=depth,
        )
        write_sweep_table(rows, run / "ratio_sweep.csv", run / "ratio_sweep.json")
        results["ratio_rows"] = rows
    return results


# ---------------------------------------------------------------------------
# attribute
# ---------------------------------------------------------------------------


def run_attribute(config: RunConfig, model_path, image_path, out_dir=None) -> dict:
    """One attribution map (overlay + raw) for a saved net and an image file."""
    run = prepare_run_dir(config, out_dir)
    net = load_net(model_path)
    image = u8_to_image(read_pnm(image_path))
    method = config["attribute.method"]
    target = config["attribute.target_class"]
    if method == "gradcam":
        amap = gradcam(net, image, target)
    else:
        amap = sobol_attribution(
            class_score_fn(net, target), image, target_class=target,
            grid=config["attribute.grid"], n_designs=config["attribute.designs"],
            seed=config["seed"], operator=config["attribute.operator"],
        )
    overlay = run / f"{method}_overlay.ppm"
    raw = run / f"{method}_map.pgm"
    write_attribution_maps(image, amap, overlay, raw,
                           opacity=config["attribute.opacity"])
    return {"run_dir": run, "map": amap, "overlay": overlay, "raw": raw}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def run_report(config: RunConfig, out_dir=None) -> str:
    """Consolidate a run directory's artifacts into one report.txt."""
    run = Path(out_dir if out_dir is not None else config["out"])
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    sections = []
    names = ["config.txt"] + sorted(p.name for p in run.glob("*.csv"))
    for name in names:
        path = run / name
        if path.is_file():
            sections.append(f"== {name} ==\n{path.read_text()}")
    if not sections:
        raise DegenerateInputError(f"run directory {run} has no artifacts to report")
    text = "\n".join(sections)
    (run / "report.txt").write_text(text)
    return text
