"""Dataset persistence: portable pixmaps plus a directory layout.

A dataset directory holds ``images/`` (P6 pixmaps, or P5 graymaps for
single-channel data), ``masks/`` (P5, pixel value = class index) for
segmentation, ``labels.csv`` (header ``filename,label``) for
classification, and ``meta.json`` carrying the generator config, seed,
and per-sample latent parameters. All parsing reports failures as
``ParseError`` with the offending file and byte offset.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

_WHITESPACE = b" \t\r\n"


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write uint8 pixels as P5 (H, W) or P6 (H, W, 3) with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ContractError(f"pnm pixels must be uint8, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ContractError(f"pnm pixels must be (H, W) or (H, W, 3), got {pixels.shape}")
    h, w = pixels.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file back into uint8 pixels; strict about malformations."""
    path = Path(path)
    blob = path.read_bytes()
    pos = 0

    def fail(message: str):
        raise ParseError(message, path=str(path), offset=pos)

    def skip_separators():
        nonlocal pos
        while pos < len(blob):
            if blob[pos] in _WHITESPACE:
                pos += 1
            elif blob[pos : pos + 1] == b"#":  # comment to end of line
                while pos < len(blob) and blob[pos] not in b"\n":
                    pos += 1
            else:
                return
        fail("file truncated inside header")

    def read_int() -> int:
        nonlocal pos
        skip_separators()
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            fail("expected an integer in header")
        return int(blob[start:pos])

    if len(blob) < 2:
        fail("file truncated inside header")
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        fail(f"unsupported magic {magic!r}, expected P5 or P6")
    pos = 2
    width, height = read_int(), read_int()
    maxval = read_int()
    if width <= 0 or height <= 0:
        fail(f"non-positive dimensions {width}x{height}")
    if maxval != 255:
        fail(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(blob) or blob[pos] not in _WHITESPACE:
        fail("expected single whitespace before raster")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = blob[pos : pos + need]
    if len(raster) < need:
        pos = len(blob)
        fail(f"file truncated: raster needs {need} bytes, found {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return pixels.reshape(height, width).copy()
    return pixels.reshape(height, width, 3).copy()


def image_to_u8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) float in [0,1] -> (H, W) or (H, W, 3) uint8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ContractError(f"expected (1|3, H, W) image, got {image.shape}")
    u8 = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return u8[0] if u8.shape[0] == 1 else u8.transpose(1, 2, 0)


def u8_to_image(pixels: np.ndarray) -> np.ndarray:
    """Inverse of image_to_u8 up to 8-bit quantization."""
    if pixels.ndim == 2:
        return (pixels[None].astype(np.float64)) / 255.0
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_dataset(samples, path, *, config=None, seed=None, latents=None) -> None:
    """Write samples (LabeledImage or SegSample lists) as a dataset directory."""
    from .synth import LabeledImage, SegSample  # local import to avoid a cycle

    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ContractError("refusing to save an empty dataset")
    segmentation = isinstance(samples[0], SegSample)
    if segmentation:
        (path / "masks").mkdir(exist_ok=True)
    rows = []
    ext = None
    for i, sample in enumerate(samples):
        u8 = image_to_u8(sample.image)
        ext = "pgm" if u8.ndim == 2 else "ppm"
        name = f"{i:05d}.{ext}"
        write_pnm(path / "images" / name, u8)
        if segmentation:
            if sample.mask.shape != sample.image.shape[1:]:
                raise ContractError(
                    f"mask shape {sample.mask.shape} does not match image "
                    f"{sample.image.shape[1:]}"
                )
            write_pnm(path / "masks" / f"{i:05d}.pgm", sample.mask.astype(np.uint8))
        else:
            rows.append((name, int(sample.label)))
    if not segmentation:
        with open(path / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", "label"])
            writer.writerows(rows)
    meta = {
        "kind": "segmentation" if segmentation else "classification",
        "count": len(samples),
        "image_format": "P5" if ext == "pgm" else "P6",
        "seed": seed,
        "config": config,
        "latents": latents,
    }
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    """Read a dataset directory back; returns (samples, meta)."""
    from .synth import LabeledImage, SegSample

    path = Path(path)
    meta_path = path / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise ParseError("meta.json is missing", path=str(meta_path), offset=0)
    except json.JSONDecodeError as err:
        raise ParseError(f"meta.json is not valid JSON: {err.msg}",
                         path=str(meta_path), offset=err.pos)
    kind = meta.get("kind")
    if kind not in ("classification", "segmentation"):
        raise ParseError(f"unknown dataset kind {kind!r}", path=str(meta_path), offset=0)
    image_dir = path / "images"
    names = sorted(p.name for p in image_dir.iterdir())
    samples = []
    if kind == "classification":
        labels = _read_labels_csv(path / "labels.csv")
        for name in names:
            image = u8_to_image(read_pnm(image_dir / name))
            if name not in labels:
                raise ParseError(f"no label for image {name!r}",
                                 path=str(path / "labels.csv"), offset=0)
            samples.append(LabeledImage(image=image, label=labels[name]))
    else:
        for name in names:
            image = u8_to_image(read_pnm(image_dir / name))
            mask = read_pnm(path / "masks" / (Path(name).stem + ".pgm"))
            samples.append(SegSample(image=image, mask=mask.astype(np.int64)))
    return samples, meta


def _read_labels_csv(path: Path) -> dict[str, int]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["filename", "label"]:
                raise ParseError(
                    f"labels.csv header must be 'filename,label', got {header}",
                    path=str(path), offset=0,
                )
            out = {}
            for row in reader:
                if len(row) != 2 or not row[1].lstrip("-").isdigit():
                    raise ParseError(f"malformed labels.csv row {row}",
                                     path=str(path), offset=0)
                out[row[0]] = int(row[1])
            return out
    except FileNotFoundError:
        raise ParseError("labels.csv is missing", path=str(path), offset=0)
