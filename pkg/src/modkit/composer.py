"""Gating/expert decomposition with three composition strategies.

A modular classifier pairs a 2-way gating network (healthy vs pathological)
with stage experts and composes their probabilities:

* ``all``       — hard gate at 0.5 (ties go to healthy), otherwise a single
                  3-way expert decides the stage.
* ``one_vs_one``— three pairwise stage experts; every (stage, expert) score
                  P_m(stage | pathological) * P(pathological) competes, the
                  healthy branch contributing zero (a healthy structure has
                  no stage). Healthy is still answered by the 0.5 gate.
* ``weighted``  — soft composition: the 4-vector
                  (P(healthy), P(stage_i | pathological) * P(pathological))
                  is a proper distribution and a single argmax decides; no
                  hard gate anywhere.

The ``compose_*`` functions are pure vector arithmetic, kept separate from
the networks so their algebra can be exercised directly; ties always resolve
to the lowest class index, then the lowest expert key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError, ParseError
from .nn import (
    build_from_arch,
    build_micro_resnet,
    forward_batched,
    load_params,
    make_optimizer,
    save_params,
    softmax,
    train,
)
from .seeding import derive_seed
from .synth import CLASSIFICATION_CLASSES, LabeledImage

STRATEGIES = ("all", "one_vs_one", "weighted")
PAIR_KEYS = ("12", "13", "23")  # unordered stage pairs, lexicographic
GATE_THRESHOLD = 0.5


def _check_simplex(vector: np.ndarray, what: str) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    if np.any(vector < 0) or abs(vector.sum() - 1.0) > 1e-9:
        raise ContractError(
            f"{what} must be a probability vector, got {vector.tolist()}"
        )
    return vector


@dataclass(frozen=True)
class ClassProbabilities:
    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        if len(self.labels) != len(self.values):
            raise ContractError("labels and values differ in length")
        _check_simplex(self.values, f"probabilities over {self.labels}")


@dataclass(frozen=True)
class GatingOutput:
    p_healthy: float
    p_pathological: float

    def __post_init__(self):
        _check_simplex(
            np.array([self.p_healthy, self.p_pathological]), "gating output"
        )


@dataclass(frozen=True)
class Prediction:
    predicted: int  # 0 healthy, 1-3 stage
    probabilities: ClassProbabilities  # full 4-class vector
    expert_probabilities: dict  # raw per-expert vectors, keyed by expert


@dataclass
class ModularClassifier:
    strategy: str
    gating: object  # 2-way network
    experts: dict  # {"stages": 3-way net} or {"12"/"13"/"23": 2-way nets}

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        expected = set(PAIR_KEYS) if self.strategy == "one_vs_one" else {"stages"}
        if set(self.experts) != expected:
            raise ContractError(
                f"strategy {self.strategy!r} needs experts {sorted(expected)}, "
                f"got {sorted(self.experts)}"
            )


@dataclass(frozen=True)
class TrainParams:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "adam"


def make_modular_classifier(
    strategy: str,
    input_shape: tuple[int, int, int] = (3, 64, 64),
    width: int = 8,
    blocks: int = 2,
    seed: int = 0,
) -> ModularClassifier:
    """Fresh (untrained) gating + experts with per-role derived seeds."""
    build = lambda heads, *labels: build_micro_resnet(
        input_shape, heads, width=width, blocks=blocks,
        seed=derive_seed(seed, "init", *labels),
    )
    gating = build(2, "gating")
    if strategy == "one_vs_one":
        experts = {key: build(2, "expert", key) for key in PAIR_KEYS}
    else:
        experts = {"stages": build(3, "expert", "stages")}
    return ModularClassifier(strategy=strategy, gating=gating, experts=experts)


def _classification_arrays(train_set) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([s.label for s in train_set])
    for c in range(4):
        if not np.any(labels == c):
            raise DegenerateInputError(
                f"training set has no samples of class {c} "
                f"({CLASSIFICATION_CLASSES[c]})"
            )
    return np.stack([s.image for s in train_set]), labels


def _fit_role(net, x, y, params: TrainParams, seed: int, *labels_) -> None:
    optimizer = make_optimizer(params.optimizer, net.parameters(), lr=params.lr)
    train(
        net, x, y, optimizer=optimizer, epochs=params.epochs,
        batch_size=params.batch_size, seed=derive_seed(seed, "train", *labels_),
    )


def _fit_pair(net, key: str, images, labels, params, seed) -> None:
    i, j = int(key[0]), int(key[1])
    keep = (labels == i) | (labels == j)
    _fit_role(net, images[keep], (labels[keep] == j).astype(np.int64),
              params, seed, "expert", key)


def _fit_stages(net, images, labels, params, seed) -> None:
    keep = labels > 0
    _fit_role(net, images[keep], labels[keep] - 1, params, seed,
              "expert", "stages")


def train_modular(
    classifier: ModularClassifier,
    train_set: list[LabeledImage],
    params: TrainParams = TrainParams(),
    seed: int = 0,
) -> ModularClassifier:
    """Train gating on binarized labels and each expert on its stage stratum."""
    images, labels = _classification_arrays(train_set)
    _fit_role(classifier.gating, images, (labels > 0).astype(np.int64),
              params, seed, "gating")
    if classifier.strategy == "one_vs_one":
        for key, net in classifier.experts.items():
            _fit_pair(net, key, images, labels, params, seed)
    else:
        _fit_stages(classifier.experts["stages"], images, labels, params, seed)
    return classifier


def train_shared_components(
    train_set: list[LabeledImage],
    params: TrainParams = TrainParams(),
    seed: int = 0,
    input_shape: tuple[int, int, int] = (3, 64, 64),
    width: int = 8,
    blocks: int = 2,
    init_seed: int = 0,
) -> dict[str, ModularClassifier]:
    """All three strategies from one training pass per component.

    Each role (gating, shared 3-way expert, three pairwise experts) is built
    and fitted under the same derived seeds that make_modular_classifier and
    train_modular use, so the returned classifiers are parameter-identical to
    training every strategy independently — the gating and expert fits are
    just not repeated. The hard-gated and soft-weighted strategies share the
    same underlying networks (prediction never mutates them).
    """
    images, labels = _classification_arrays(train_set)
    build = lambda heads, *labels_: build_micro_resnet(
        input_shape, heads, width=width, blocks=blocks,
        seed=derive_seed(init_seed, "init", *labels_),
    )
    gating = build(2, "gating")
    stages = build(3, "expert", "stages")
    pairs = {key: build(2, "expert", key) for key in PAIR_KEYS}

    _fit_role(gating, images, (labels > 0).astype(np.int64), params, seed, "gating")
    _fit_stages(stages, images, labels, params, seed)
    for key, net in pairs.items():
        _fit_pair(net, key, images, labels, params, seed)
    return {
        "all": ModularClassifier("all", gating, {"stages": stages}),
        "weighted": ModularClassifier("weighted", gating, {"stages": stages}),
        "one_vs_one": ModularClassifier("one_vs_one", gating, pairs),
    }


# ---------------------------------------------------------------------------
# pure composition arithmetic
# ---------------------------------------------------------------------------


def compose_all(gating: np.ndarray, expert: np.ndarray) -> tuple[int, np.ndarray]:
    """Hard-gated composition; returns (class, 4-class vector)."""
    gating = _check_simplex(gating, "gating")
    expert = _check_simplex(expert, "stage expert")
    vector = np.concatenate(([gating[0]], gating[1] * expert))
    if gating[0] >= GATE_THRESHOLD:
        return 0, vector
    return 1 + int(np.argmax(expert)), vector


def compose_weighted(gating: np.ndarray, expert: np.ndarray) -> tuple[int, np.ndarray]:
    """Soft composition; a single argmax over the proper 4-class vector."""
    gating = _check_simplex(gating, "gating")
    expert = _check_simplex(expert, "stage expert")
    vector = np.concatenate(([gating[0]], gating[1] * expert))
    return int(np.argmax(vector)), vector


def compose_one_vs_one(
    gating: np.ndarray, pairwise: dict[str, np.ndarray]
) -> tuple[int, np.ndarray, dict[tuple[int, str], float]]:
    """Pairwise-expert composition (max score over (stage, expert) candidates).

    Returns (class, normalized 4-class vector, raw candidate scores). Each
    candidate score is P_expert(stage) * P(pathological); the healthy branch
    term is fixed to zero, and healthy itself is answered by the gate.
    """
    gating = _check_simplex(gating, "gating")
    scores: dict[tuple[int, str], float] = {}
    best = np.zeros(3)
    for key in PAIR_KEYS:
        probs = _check_simplex(pairwise[key], f"expert {key}")
        i, j = int(key[0]), int(key[1])
        scores[(i, key)] = float(probs[0] * gating[1])
        scores[(j, key)] = float(probs[1] * gating[1])
    for stage in (1, 2, 3):
        best[stage - 1] = max(
            scores[(stage, key)] for key in PAIR_KEYS if str(stage) in key
        )
    vector = np.concatenate(([gating[0]], best))
    vector = vector / vector.sum() if vector.sum() > 0 else np.array([1.0, 0, 0, 0])
    if gating[0] >= GATE_THRESHOLD:
        return 0, vector, scores
    winner = min(
        scores, key=lambda cand: (-scores[cand], cand[0], cand[1])
    )  # max score; ties -> lower stage, then lower expert key
    return winner[0], vector, scores


# ---------------------------------------------------------------------------
# network-level prediction
# ---------------------------------------------------------------------------


def _probabilities(net, images: np.ndarray) -> np.ndarray:
    return softmax(forward_batched(net, images), axis=-1)


def _as_batch(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 3 else image


def predict_batch(classifier: ModularClassifier, images: np.ndarray) -> list[Prediction]:
    """Vectorized prediction for a batch; one forward pass per network."""
    images = _as_batch(images)
    gate = _probabilities(classifier.gating, images)
    experts = {k: _probabilities(net, images) for k, net in classifier.experts.items()}
    out = []
    for n in range(len(images)):
        raw = {k: v[n] for k, v in experts.items()}
        if classifier.strategy == "all":
            cls, vector = compose_all(gate[n], raw["stages"])
        elif classifier.strategy == "weighted":
            cls, vector = compose_weighted(gate[n], raw["stages"])
        else:
            cls, vector, _ = compose_one_vs_one(gate[n], raw)
        raw["gating"] = gate[n]
        out.append(
            Prediction(
                predicted=cls,
                probabilities=ClassProbabilities(CLASSIFICATION_CLASSES, vector),
                expert_probabilities=raw,
            )
        )
    return out


def _single(classifier: ModularClassifier, image, strategy: str) -> Prediction:
    if classifier.strategy != strategy:
        raise ContractError(
            f"classifier strategy is {classifier.strategy!r}, not {strategy!r}"
        )
    return predict_batch(classifier, image)[0]


def predict_all(classifier: ModularClassifier, image) -> Prediction:
    return _single(classifier, image, "all")


def predict_one_vs_one(classifier: ModularClassifier, image) -> Prediction:
    return _single(classifier, image, "one_vs_one")


def predict_weighted(classifier: ModularClassifier, image) -> Prediction:
    return _single(classifier, image, "weighted")


def predict_nonmodular(net, image) -> Prediction:
    """Baseline: plain softmax over a 4-way head."""
    probs = _probabilities(net, _as_batch(image))[0]
    return Prediction(
        predicted=int(np.argmax(probs)),
        probabilities=ClassProbabilities(CLASSIFICATION_CLASSES, probs),
        expert_probabilities={},
    )


def prediction_difference_stats(
    classifier: ModularClassifier, dataset: list[LabeledImage]
) -> dict:
    """Per stage pair: |P(S_i) - P(S_j)| over pathological samples.

    Uses the 3-way expert of an ``all``/``weighted`` classifier; reports the
    raw differences with median and quartiles for each unordered pair.
    """
    if "stages" not in classifier.experts:
        raise ContractError("difference stats need a 3-way stage expert")
    pathological = [s for s in dataset if s.label > 0]
    if not pathological:
        raise DegenerateInputError("no pathological samples to analyze")
    images = np.stack([s.image for s in pathological])
    probs = _probabilities(classifier.experts["stages"], images)
    stats = {}
    for key in PAIR_KEYS:
        i, j = int(key[0]), int(key[1])
        diffs = np.abs(probs[:, i - 1] - probs[:, j - 1])
        q1, median, q3 = np.percentile(diffs, (25, 50, 75))
        stats[key] = {
            "differences": diffs,
            "median": float(median),
            "q1": float(q1),
            "q3": float(q3),
        }
    return stats


# ---------------------------------------------------------------------------
# classifier bundles on disk
# ---------------------------------------------------------------------------


def save_classifier(classifier: ModularClassifier, path) -> None:
    """Write gating.bin, expert_<key>.bin, and strategy.json into a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_params(classifier.gating, path / "gating.bin")
    for key, net in classifier.experts.items():
        save_params(net, path / f"expert_{key}.bin")
    manifest = {
        "strategy": classifier.strategy,
        "class_names": list(CLASSIFICATION_CLASSES),
        "gate_threshold": GATE_THRESHOLD,
        "gating_arch": classifier.gating.arch,
        "expert_archs": {k: net.arch for k, net in classifier.experts.items()},
    }
    with open(path / "strategy.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_classifier(path) -> ModularClassifier:
    path = Path(path)
    manifest_path = path / "strategy.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ParseError("strategy.json is missing", path=str(manifest_path), offset=0)
    except json.JSONDecodeError as err:
        raise ParseError(f"strategy.json invalid: {err.msg}",
                         path=str(manifest_path), offset=err.pos)
    gating = build_from_arch(manifest["gating_arch"])
    load_params(gating, path / "gating.bin")
    experts = {}
    for key, arch in manifest["expert_archs"].items():
        experts[key] = build_from_arch(arch)
        load_params(experts[key], path / f"expert_{key}.bin")
    return ModularClassifier(
        strategy=manifest["strategy"], gating=gating, experts=experts
    )
