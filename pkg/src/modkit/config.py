"""Flat key-value run configuration with typed keys and a stable echo.

A run is described by dotted keys (``train.lr = 0.001``) drawn from a fixed
schema. Values come from defaults, then an optional config file, then
command-line overrides, in that order. The merged result renders to a sorted
``key = value`` text block whose first line is a versioned format tag; that
block is echoed verbatim into every run directory so a run can be reproduced
from its own output.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

FORMAT_TAG = "# modkit-run-v1"

TASKS = ("dcss-classify", "shoulder-segment")
ARCHITECTURES = ("nonmodular", "all", "one_vs_one", "weighted")
ATTRIBUTION_METHODS = ("gradcam", "sobol")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(text)


def _parse_list(text: str, element) -> tuple:
    stripped = text.strip()
    if not stripped:
        return ()
    return tuple(element(part.strip()) for part in stripped.split(","))


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda text: text.strip(),
    "int_list": lambda text: _parse_list(text, int),
    "float_list": lambda text: _parse_list(text, float),
    "str_list": lambda text: _parse_list(text, lambda part: part),
}

# key -> (type tag, default). Every configurable knob in the package lives
# here; anything else in a config file or override is rejected by name.
SCHEMA: dict[str, tuple[str, object]] = {
    "task": ("str", "dcss-classify"),
    "seed": ("int", 0),
    "out": ("str", "runs/latest"),
    "threads": ("int", 1),
    "data.source": ("str", "generate"),
    "data.path": ("str", ""),
    "data.total": ("int", 0),  # 0 = task default (840 dcss / 459 shoulder)
    "data.counts": ("int_list", ()),
    "data.image_size": ("int", 64),
    "data.noise": ("float", 0.03),
    "split.train_fraction": ("float", 0.7),
    "augment.balance": ("bool", True),
    "augment.total": ("int", 1600),
    "train.strategies": ("str_list", ARCHITECTURES),
    "train.lr": ("float", 1e-3),
    "train.epochs": ("int", 10),
    "train.batch_size": ("int", 32),
    "train.optimizer": ("str", "adam"),
    "model.width": ("int", 8),
    "model.blocks": ("int", 2),
    "model.base_channels": ("int", 4),
    "model.depth": ("int", 2),
    "report.level": ("float", 0.95),
    "selftrain.image_threshold": ("float", 0.7),
    "selftrain.pixel_threshold": ("float", 0.7),
    "selftrain.lam": ("float", 0.5),
    "selftrain.labeled_ratio": ("float", 0.1),
    "selftrain.max_iterations": ("int", 2),
    "selftrain.epochs": ("int", 15),
    "selftrain.lr": ("float", 5e-3),
    "selftrain.batch_size": ("int", 2),
    "selftrain.optimizer": ("str", "adam"),
    "selftrain.filter_enabled": ("bool", True),
    "selftrain.filter_to_ignore": ("bool", True),
    "sweep.thresholds": ("float_list", ()),
    "sweep.ratios": ("float_list", ()),
    "attribute.method": ("str", "gradcam"),
    "attribute.target_class": ("int", 0),
    "attribute.grid": ("int", 8),
    "attribute.designs": ("int", 1024),
    "attribute.operator": ("str", "gray"),
    "attribute.opacity": ("float", 0.5),
}


@dataclass(frozen=True)
class RunConfig:
    """Immutable, fully-typed view of one run's effective settings."""

    values: dict

    def __getitem__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def render(self) -> str:
        """Sorted ``key = value`` lines under the format tag; parses back."""
        lines = [FORMAT_TAG]
        for key in sorted(self.values):
            lines.append(f"{key} = {_render_value(self.values[key])}")
        return "\n".join(lines) + "\n"


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Raw ``key = value`` pairs from config text; comments and blanks skip."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{origin}:{lineno}: expected 'key = value', got {stripped!r}"
            )
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, origin=str(path))


def parse_overrides(tokens) -> dict[str, str]:
    """``key=value`` command-line tokens into raw pairs."""
    pairs: dict[str, str] = {}
    for token in tokens:
        if "=" not in token:
            raise ConfigError(
                f"override {token!r} is not of the form key=value"
            )
        key, _, value = token.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def make_config(*sources: dict) -> RunConfig:
    """Defaults overlaid with raw string pairs, later sources winning."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for source in sources:
        for key, raw in source.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            kind = SCHEMA[key][0]
            if isinstance(raw, str):
                try:
                    values[key] = _PARSERS[kind](raw)
                except ValueError:
                    raise ConfigError(
                        f"config key {key!r} expects {kind}, got {raw!r}"
                    ) from None
            else:
                values[key] = raw
    config = RunConfig(values)
    validate_config(config)
    return config


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate_config(config: RunConfig) -> None:
    """Range and membership checks; every message names the offending key."""
    v = config.values
    _require(v["task"] in TASKS, f"task must be one of {TASKS}, got {v['task']!r}")
    _require(v["seed"] >= 0, f"seed must be >= 0, got {v['seed']}")
    _require(v["threads"] >= 1, f"threads must be >= 1, got {v['threads']}")
    _require(
        v["data.source"] in ("generate", "disk"),
        f"data.source must be 'generate' or 'disk', got {v['data.source']!r}",
    )
    _require(
        v["data.source"] != "disk" or bool(v["data.path"]),
        "data.path must be set when data.source = disk",
    )
    _require(v["data.total"] >= 0, f"data.total must be >= 0, got {v['data.total']}")
    for count in v["data.counts"]:
        _require(count >= 0, f"data.counts entries must be >= 0, got {count}")
    _require(
        v["data.image_size"] >= 32,
        f"data.image_size must be >= 32, got {v['data.image_size']}",
    )
    _require(
        0.0 < v["split.train_fraction"] < 1.0,
        f"split.train_fraction must lie in (0, 1), got {v['split.train_fraction']}",
    )
    _require(v["augment.total"] > 0, f"augment.total must be > 0, got {v['augment.total']}")
    strategies = v["train.strategies"]
    _require(bool(strategies), "train.strategies must not be empty")
    _require(
        len(set(strategies)) == len(strategies),
        f"train.strategies has duplicates: {strategies}",
    )
    for name in strategies:
        _require(
            name in ARCHITECTURES,
            f"train.strategies entries must be one of {ARCHITECTURES}, got {name!r}",
        )
    for key in ("train.lr", "selftrain.lr"):
        _require(v[key] > 0.0, f"{key} must be > 0, got {v[key]}")
    for key in ("train.epochs", "train.batch_size", "model.width", "model.blocks",
                "model.base_channels", "model.depth", "selftrain.max_iterations",
                "selftrain.epochs", "selftrain.batch_size"):
        _require(v[key] >= 1, f"{key} must be >= 1, got {v[key]}")
    _require(
        0.0 < v["report.level"] < 1.0,
        f"report.level must lie in (0, 1), got {v['report.level']}",
    )
    for key in ("selftrain.image_threshold", "selftrain.pixel_threshold",
                "selftrain.lam", "attribute.opacity"):
        _require(0.0 <= v[key] <= 1.0, f"{key} must lie in [0, 1], got {v[key]}")
    _require(
        0.0 < v["selftrain.labeled_ratio"] <= 1.0,
        f"selftrain.labeled_ratio must lie in (0, 1], got {v['selftrain.labeled_ratio']}",
    )
    for threshold in v["sweep.thresholds"]:
        _require(
            0.0 <= threshold <= 1.0,
            f"sweep.thresholds entries must lie in [0, 1], got {threshold}",
        )
    for ratio in v["sweep.ratios"]:
        _require(
            0.0 < ratio <= 1.0,
            f"sweep.ratios entries must lie in (0, 1], got {ratio}",
        )
    _require(
        v["attribute.method"] in ATTRIBUTION_METHODS,
        f"attribute.method must be one of {ATTRIBUTION_METHODS}, "
        f"got {v['attribute.method']!r}",
    )
    _require(
        v["attribute.target_class"] >= 0,
        f"attribute.target_class must be >= 0, got {v['attribute.target_class']}",
    )
    _require(v["attribute.grid"] >= 2, f"attribute.grid must be >= 2, got {v['attribute.grid']}")
    _require(
        v["attribute.designs"] >= 64,
        f"attribute.designs must be >= 64, got {v['attribute.designs']}",
    )
    _require(
        v["attribute.operator"] in ("gray", "blur"),
        f"attribute.operator must be 'gray' or 'blur', got {v['attribute.operator']!r}",
    )
