"""Attribution maps: gradient class activation and Sobol total-order indices.

Two complementary views of what a classifier looks at. ``gradcam`` averages
the target logit's gradient over the last convolution's spatial extent into
channel weights and rectifies the weighted activation sum. The Sobol route
treats the image as a coarse grid of regions, perturbs them with masks drawn
from a scrambled low-discrepancy sequence, and scores each region by the
Jansen total-order estimator over the model's output variance — a
gradient-free, model-agnostic measure including all interactions.

Both emit an ``AttributionMap``: a nonnegative heatmap at image resolution,
max-normalized to [0, 1] unless identically zero (a constant model has no
attribution; that degenerate case is flagged, never NaN).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import qmc

from .dataio import image_to_u8, write_pnm
from .errors import ContractError, DegenerateInputError, ShapeError
from .nn import Conv2d, Module, Tensor, reduce_sum, softmax
from .seeding import derive_seed
from .synth import _bilinear, _nearest

PERTURB_OPERATORS = ("gray", "blur")


@dataclass(frozen=True)
class AttributionMap:
    heatmap: np.ndarray  # (H, W), >= 0, max 1 unless identically zero
    method: str
    target_class: int
    degenerate: bool = False  # model output had zero variance

    def __post_init__(self):
        if np.any(self.heatmap < 0):
            raise ContractError("heatmap must be nonnegative")
        peak = float(self.heatmap.max(initial=0.0))
        if peak != 0.0 and abs(peak - 1.0) > 1e-9:
            raise ContractError(f"heatmap must be max-normalized, peak is {peak}")


def _normalized(raw: np.ndarray) -> np.ndarray:
    peak = raw.max(initial=0.0)
    return raw / peak if peak > 0 else raw


def _resample(plane: np.ndarray, height: int, width: int, sampler) -> np.ndarray:
    h, w = plane.shape
    sy = (np.arange(height, dtype=np.float64) + 0.5) * h / height - 0.5
    sx = (np.arange(width, dtype=np.float64) + 0.5) * w / width - 0.5
    return sampler(plane, *np.meshgrid(sy, sx, indexing="ij"))


# ---------------------------------------------------------------------------
# gradient class activation mapping
# ---------------------------------------------------------------------------


def _conv_layers(module: Module) -> list[Conv2d]:
    """All Conv2d layers in declaration order (== forward order here)."""
    found: list[Conv2d] = []
    if isinstance(module, Conv2d):
        found.append(module)
    for value in vars(module).values():
        children = value if isinstance(value, (list, tuple)) else [value]
        for child in children:
            if isinstance(child, Module):
                found.extend(_conv_layers(child))
    return found


def gradcam(net: Module, image: np.ndarray, target_class: int) -> AttributionMap:
    """Rectified, gradient-weighted activations of the last convolution.

    The target-class logit is backpropagated to the last conv layer's output;
    the gradient's spatial mean per channel weights that channel's activation
    map. The rectified weighted sum is bilinearly upsampled to image size and
    max-normalized. Adding a constant to the head leaves the map unchanged.
    """
    convs = _conv_layers(net)
    if not convs:
        raise ContractError("gradcam needs at least one convolutional layer")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {image.shape}")
    last = convs[-1]
    last.cache_output = True
    try:
        logits = net(Tensor(image[None]))
    finally:
        last.cache_output = False
    activations = last.last_output
    last.last_output = None
    if logits.ndim != 2:
        raise ShapeError(f"expected (1, K) class logits, got {logits.shape}")
    k = logits.shape[1]
    if not 0 <= target_class < k:
        raise ContractError(f"target class {target_class} outside 0..{k - 1}")
    one_hot = np.zeros((1, k))
    one_hot[0, target_class] = 1.0
    reduce_sum(logits * one_hot).backward()
    net.zero_grad()

    weights = activations.grad[0].mean(axis=(1, 2))  # per-channel pooled gradient
    cam = np.maximum(np.tensordot(weights, activations.data[0], axes=1), 0.0)
    _, height, width = image.shape
    return AttributionMap(
        heatmap=_normalized(_resample(cam, height, width, _bilinear)),
        method="gradcam",
        target_class=target_class,
    )


# ---------------------------------------------------------------------------
# Jansen total-order indices over quasi-Monte-Carlo mask designs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskDesign:
    a: np.ndarray  # (N_d, dims) base designs
    b: np.ndarray  # (N_d, dims) resample designs

    def hybrid(self, i: int) -> np.ndarray:
        """A with column i replaced from B."""
        out = self.a.copy()
        out[:, i] = self.b[:, i]
        return out


def make_mask_design(
    dims: int, n_designs: int, seed: int = 0, binary: bool = False
) -> MaskDesign:
    """N_d scrambled low-discrepancy points in [0,1]^(2·dims): columns A | B.

    A and B must come from separate coordinate blocks of one sequence, not
    from consecutive index blocks — successive index blocks of a (scrambled)
    digital sequence share dyadic intervals coordinate-wise, which would make
    A and B nearly equal and collapse the Jansen numerator. ``binary`` rounds
    entries to {0,1}, making the designs enumerable mask patterns.
    Power-of-two N_d preserves the sequence's balance properties.
    """
    if dims < 1:
        raise ContractError(f"dims must be >= 1, got {dims}")
    if n_designs < 1:
        raise ContractError(f"n_designs must be >= 1, got {n_designs}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # balance warning for non-power-of-two
        points = qmc.Sobol(d=2 * dims, scramble=True, seed=seed).random(n_designs)
    if binary:
        points = (points >= 0.5).astype(np.float64)
    return MaskDesign(a=points[:, :dims], b=points[:, dims:])


def jansen_total_indices(
    model_fn,
    dims: int,
    n_designs: int,
    seed: int = 0,
    binary: bool = False,
) -> tuple[np.ndarray, bool]:
    """Total-order sensitivity of ``model_fn`` to each of ``dims`` inputs.

    ``model_fn`` maps an (N, dims) design matrix to N scores. The index for
    input i is mean((f(A) - f(A with column i from B))^2) / 2 over the
    designs, divided by the empirical variance of f pooled over every
    evaluated design. Zero pooled variance (constant model) yields all-zero
    indices with the degenerate flag set.
    """
    design = make_mask_design(dims, n_designs, seed, binary)
    f_a = np.asarray(model_fn(design.a), dtype=np.float64)
    f_b = np.asarray(model_fn(design.b), dtype=np.float64)
    if f_a.shape != (n_designs,):
        raise ShapeError(
            f"model_fn must return {n_designs} scores, got shape {f_a.shape}"
        )
    numerators = np.empty(dims)
    pooled = [f_a, f_b]
    for i in range(dims):
        f_hybrid = np.asarray(model_fn(design.hybrid(i)), dtype=np.float64)
        numerators[i] = np.mean((f_a - f_hybrid) ** 2) / 2.0
        pooled.append(f_hybrid)
    evaluations = np.concatenate(pooled)
    variance = float(np.var(evaluations))
    # a constant model's variance may carry mean-subtraction float residue
    if variance == 0.0 or np.all(evaluations == evaluations[0]):
        return np.zeros(dims), True
    totals = numerators / variance
    assert np.all(totals >= 0.0)
    return totals, False


def brute_force_total_indices(model_fn, dims: int) -> tuple[np.ndarray, bool]:
    """Exact total-order indices over all 2^dims binary masks.

    Enumeration oracle for small grids: the index for input i is the mean
    over all other-bit patterns of the within-pair variance when bit i flips,
    over the variance across all patterns.
    """
    if not 1 <= dims <= 10:
        raise ContractError(f"enumeration needs 1 <= dims <= 10, got {dims}")
    rows = np.arange(2**dims)
    masks = ((rows[:, None] >> np.arange(dims)) & 1).astype(np.float64)
    values = np.asarray(model_fn(masks), dtype=np.float64)
    variance = float(np.var(values))
    if variance == 0.0:
        return np.zeros(dims), True
    totals = np.empty(dims)
    for i in range(dims):
        low = (rows >> i) & 1 == 0
        f0 = values[low]
        f1 = values[rows[low] | (1 << i)]
        # Var over {0,1} of the pair (f0, f1) is (f1 - f0)^2 / 4
        totals[i] = np.mean((f1 - f0) ** 2 / 4.0) / variance
    return totals, False


def perturb(image: np.ndarray, mask: np.ndarray, operator: str = "gray") -> np.ndarray:
    """Blend the image toward a baseline where the mask is low.

    ``gray`` blends toward constant 0.5; ``blur`` toward a Gaussian-blurred
    copy of the image. A mask of ones returns the image unchanged.
    """
    if operator not in PERTURB_OPERATORS:
        raise ContractError(
            f"operator must be one of {PERTURB_OPERATORS}, got {operator!r}"
        )
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise ShapeError(
            f"image {image.shape} and mask {mask.shape} spatial shapes differ"
        )
    if operator == "gray":
        baseline = 0.5
    else:
        baseline = np.stack([gaussian_filter(plane, sigma=3.0) for plane in image])
    return image * mask + baseline * (1.0 - mask)


def sobol_attribution(
    score_fn,
    image: np.ndarray,
    target_class: int = 0,
    grid: int = 8,
    n_designs: int = 1024,
    seed: int = 0,
    operator: str = "gray",
    binary: bool = False,
    batch_size: int = 256,
) -> AttributionMap:
    """Total-order attribution of ``score_fn`` over a grid x grid region tiling.

    ``score_fn`` maps an (N, C, H, W) batch to N class scores (typically the
    post-softmax probability of the target class — bounded, which stabilizes
    the variance estimate). Masks are upsampled bilinearly and applied with
    the perturbation operator; the resulting grid of Jansen indices becomes
    the heatmap as constant plateaus, max-normalized.
    """
    if grid < 2:
        raise ContractError(f"grid must be >= 2, got {grid}")
    if n_designs < 64:
        raise ContractError(f"n_designs must be >= 64, got {n_designs}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {image.shape}")
    _, height, width = image.shape

    def masked_scores(designs: np.ndarray) -> np.ndarray:
        scores = np.empty(len(designs))
        for start in range(0, len(designs), batch_size):
            chunk = designs[start : start + batch_size]
            batch = np.stack([
                perturb(image,
                        _resample(row.reshape(grid, grid), height, width, _bilinear),
                        operator)
                for row in chunk
            ])
            scores[start : start + len(chunk)] = score_fn(batch)
        return scores

    totals, degenerate = jansen_total_indices(
        masked_scores, grid * grid, n_designs,
        seed=derive_seed(seed, "qmc"), binary=binary,
    )
    heat = _resample(totals.reshape(grid, grid), height, width, _nearest)
    return AttributionMap(
        heatmap=_normalized(heat),
        method="sobol",
        target_class=target_class,
        degenerate=degenerate,
    )


def class_score_fn(net: Module, target_class: int):
    """Post-softmax probability of one class, as a batched score function."""

    def score(images: np.ndarray) -> np.ndarray:
        from .nn import forward_batched

        return softmax(forward_batched(net, images), axis=-1)[:, target_class]

    return score


# ---------------------------------------------------------------------------
# heatmap files
# ---------------------------------------------------------------------------


def _hot_colormap(values: np.ndarray) -> np.ndarray:
    """(H, W) in [0,1] -> (3, H, W): black through red and orange to white."""
    return np.stack([
        np.clip(3.0 * values, 0.0, 1.0),
        np.clip(3.0 * values - 1.0, 0.0, 1.0),
        np.clip(3.0 * values - 2.0, 0.0, 1.0),
    ])


def write_attribution_maps(
    image: np.ndarray,
    amap: AttributionMap,
    overlay_path,
    raw_path,
    opacity: float = 0.5,
) -> None:
    """Overlay (P6, hot colormap blended at ``opacity``) plus the raw map (P5)."""
    if not 0.0 <= opacity <= 1.0:
        raise ContractError(f"opacity must lie in [0, 1], got {opacity}")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[1:] != amap.heatmap.shape:
        raise ShapeError(
            f"image {image.shape} and heatmap {amap.heatmap.shape} differ"
        )
    overlay = (1.0 - opacity) * image + opacity * _hot_colormap(amap.heatmap)
    write_pnm(overlay_path, image_to_u8(np.clip(overlay, 0.0, 1.0)))
    write_pnm(raw_path, np.rint(amap.heatmap * 255.0).astype(np.uint8))
