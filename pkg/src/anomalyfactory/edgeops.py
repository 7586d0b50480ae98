"""Edge extraction, region proposal/refinement, region selection and edge editing.

Edits are strictly local: every strategy leaves pixels outside the selected
region untouched, and the returned mask is exactly the selected region (it is
the supervision target for the heatmap decoder).
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
from scipy import ndimage
from skimage.filters import apply_hysteresis_threshold, sobel_h, sobel_v
from sklearn.cluster import KMeans

from .datamodel import (
    check_aligned,
    mask_area_fraction,
    validate_edge,
    validate_image,
    validate_mask,
)
from .errors import ConfigError, ContractError, EditError, SelectionError

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "ANOMALYFACTORY_CACHE"


# ---------------------------------------------------------------------------
# edge extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeExtractorConfig:
    name: str = "sobel"
    low_threshold: float = 0.08
    high_threshold: float = 0.2


def _sobel_edges(image: np.ndarray, config: EdgeExtractorConfig) -> np.ndarray:
    gray = image @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    gx = sobel_v(gray)
    gy = sobel_h(gray)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak <= 0.0:
        return np.zeros((*gray.shape, 1), dtype=np.float32)
    mag = mag / peak
    keep = apply_hysteresis_threshold(mag, config.low_threshold, config.high_threshold)
    out = np.where(keep, mag, 0.0).astype(np.float32)
    return out[..., None]


_EDGE_EXTRACTORS: dict[str, Callable[[np.ndarray, EdgeExtractorConfig], np.ndarray]] = {
    "sobel": _sobel_edges,
}


def register_edge_extractor(
    name: str, fn: Callable[[np.ndarray, EdgeExtractorConfig], np.ndarray]
) -> None:
    """Register a drop-in edge extractor under a config name."""
    _EDGE_EXTRACTORS[name] = fn


def _cache_path(image: np.ndarray, config: EdgeExtractorConfig) -> Path | None:
    root = os.environ.get(CACHE_ENV_VAR)
    if not root:
        return None
    digest = hashlib.sha1(image.tobytes() + repr(config).encode()).hexdigest()
    return Path(root) / "edges" / f"{digest}.npy"


def extract_edges(
    image: np.ndarray, extractor: EdgeExtractorConfig | None = None
) -> np.ndarray:
    """Extract a single-channel edge map in [0, 1], deterministic per (image, config).

    With the ANOMALYFACTORY_CACHE environment variable set, results are cached
    on disk keyed by image content and extractor config.
    """
    validate_image(image)
    config = extractor or EdgeExtractorConfig()
    fn = _EDGE_EXTRACTORS.get(config.name)
    if fn is None:
        raise ConfigError(
            f"unknown edge extractor {config.name!r}; known: {sorted(_EDGE_EXTRACTORS)}"
        )
    cached = _cache_path(image, config)
    if cached is not None and cached.is_file():
        return np.load(cached)
    edge = validate_edge(fn(image, config))
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        np.save(cached, edge)
    return edge


# ---------------------------------------------------------------------------
# region proposal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionProposerConfig:
    name: str = "kmeans-components"
    n_colors: int = 4
    min_pixels: int = 8
    seed: int = 0


@dataclass
class CandidateRegionMap:
    """Candidate regions from one image plus where they came from."""

    regions: list[np.ndarray]
    source: str  # semantic | stochastic

    def __post_init__(self) -> None:
        if self.source not in ("semantic", "stochastic"):
            raise ContractError(f"unknown region source {self.source!r}")
        seen: list[np.ndarray] = []
        for mask in self.regions:
            validate_mask(mask)
            if mask_area_fraction(mask) == 0.0:
                raise ContractError("candidate region is empty")
            if any(np.array_equal(mask, other) for other in seen):
                raise ContractError("candidate regions must be pairwise distinct")
            seen.append(mask)

    def __len__(self) -> int:
        return len(self.regions)


def _kmeans_components(image: np.ndarray, config: RegionProposerConfig) -> list[np.ndarray]:
    h, w = image.shape[:2]
    flat = image.reshape(-1, 3).astype(np.float64)
    # quantized uniques keep KMeans well-posed on near-constant images
    uniq = np.unique(np.round(flat * 32.0), axis=0)
    k = int(min(config.n_colors, len(uniq)))
    if k < 1:
        return []
    if k == 1:
        labels = np.zeros(h * w, dtype=np.int32)
    else:
        km = KMeans(n_clusters=k, n_init=1, random_state=config.seed)
        labels = km.fit_predict(flat)
    masks: list[np.ndarray] = []
    for cluster in range(k):
        cluster_mask = (labels == cluster).reshape(h, w)
        if not cluster_mask.any():
            continue
        comp_labels, n_comp = ndimage.label(cluster_mask)
        for comp in range(1, n_comp + 1):
            comp_mask = comp_labels == comp
            if comp_mask.sum() < config.min_pixels:
                continue
            masks.append(comp_mask.astype(np.float32)[..., None])
    return masks


def propose_regions(
    image: np.ndarray, proposer: RegionProposerConfig | None = None
) -> CandidateRegionMap:
    """Propose rough semantic regions by color clustering + connected components."""
    validate_image(image)
    config = proposer or RegionProposerConfig()
    if config.name != "kmeans-components":
        raise ConfigError(f"unknown region proposer {config.name!r}")
    return CandidateRegionMap(regions=_kmeans_components(image, config), source="semantic")


# ---------------------------------------------------------------------------
# region refinement
# ---------------------------------------------------------------------------


def _perimeter_and_border(mask2d: np.ndarray) -> tuple[int, int]:
    interior = ndimage.binary_erosion(mask2d, border_value=0)
    boundary = mask2d & ~interior
    border_ring = np.zeros_like(mask2d)
    border_ring[0, :] = border_ring[-1, :] = True
    border_ring[:, 0] = border_ring[:, -1] = True
    return int(boundary.sum()), int((boundary & border_ring).sum())


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def _centroid(mask2d: np.ndarray) -> np.ndarray:
    return np.array(ndimage.center_of_mass(mask2d))


def refine_regions(
    candidates: CandidateRegionMap,
    min_area: float = 0.005,
    overlap_merge_iou: float = 0.5,
    background_border_fraction: float = 0.5,
) -> CandidateRegionMap:
    """Drop border-hugging background, group tiny regions, merge overlapping ones.

    Repeats the three passes until nothing changes. Each pass only removes or
    unions regions, so the region count is non-increasing and the loop
    terminates.
    """
    for value in (min_area, overlap_merge_iou, background_border_fraction):
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"threshold {value} outside [0, 1]")
    masks = [m[..., 0] > 0.5 for m in candidates.regions]

    changed = True
    while changed:
        changed = False

        kept = []
        for m in masks:
            perimeter, on_border = _perimeter_and_border(m)
            if perimeter and on_border / perimeter > background_border_fraction:
                changed = True
                continue
            kept.append(m)
        masks = kept

        total = masks and masks[0].size or 0
        small = [m for m in masks if m.sum() / total < min_area] if total else []
        large = [m for m in masks if m.sum() / total >= min_area] if total else []
        if small and large:
            for m in small:
                c = _centroid(m)
                nearest = min(range(len(large)), key=lambda i: np.sum((_centroid(large[i]) - c) ** 2))
                large[nearest] = large[nearest] | m
                changed = True
            masks = large

        merged = True
        while merged:
            merged = False
            for i in range(len(masks)):
                for j in range(i + 1, len(masks)):
                    if _iou(masks[i], masks[j]) > overlap_merge_iou:
                        union = masks[i] | masks[j]
                        masks = [m for idx, m in enumerate(masks) if idx not in (i, j)]
                        masks.append(union)
                        merged = True
                        changed = True
                        break
                if merged:
                    break

        # unioning can create duplicates; keep the first of each
        unique: list[np.ndarray] = []
        for m in masks:
            if not any(np.array_equal(m, u) for u in unique):
                unique.append(m)
        if len(unique) != len(masks):
            changed = True
        masks = unique

    return CandidateRegionMap(
        regions=[m.astype(np.float32)[..., None] for m in masks], source=candidates.source
    )


# ---------------------------------------------------------------------------
# region selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StochasticShapeParams:
    primitives: tuple[str, ...] = ("rectangle", "ellipse")
    scale_range: tuple[float, float] = (0.1, 0.45)
    aspect_range: tuple[float, float] = (0.4, 2.5)
    rotate: bool = True
    area_band: tuple[float, float] = (0.01, 0.4)
    max_retries: int = 25


def _raster_primitive(
    height: int, width: int, kind: str, rng: np.random.Generator, params: StochasticShapeParams
) -> np.ndarray:
    side = min(height, width)
    scale = rng.uniform(*params.scale_range)
    aspect = rng.uniform(*params.aspect_range)
    half_h = max(1.0, 0.5 * scale * side * np.sqrt(aspect))
    half_w = max(1.0, 0.5 * scale * side / np.sqrt(aspect))
    cy = rng.uniform(half_h, height - half_h) if height > 2 * half_h else height / 2
    cx = rng.uniform(half_w, width - half_w) if width > 2 * half_w else width / 2
    angle = rng.uniform(0.0, np.pi) if params.rotate else 0.0

    if kind == "rectangle" and angle == 0.0:
        # axis-aligned rectangles rasterize exactly: area == h_px * w_px
        h_px, w_px = int(round(2 * half_h)), int(round(2 * half_w))
        r0 = int(np.clip(round(cy - h_px / 2), 0, height - h_px))
        c0 = int(np.clip(round(cx - w_px / 2), 0, width - w_px))
        mask = np.zeros((height, width), dtype=bool)
        mask[r0 : r0 + h_px, c0 : c0 + w_px] = True
        return mask

    yy, xx = np.mgrid[0:height, 0:width]
    y = (yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle)
    x = -(yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle)
    if kind == "rectangle":
        return (np.abs(y) <= half_h) & (np.abs(x) <= half_w)
    return (y / half_h) ** 2 + (x / half_w) ** 2 <= 1.0


def select_stochastic_region(
    height: int,
    width: int,
    count_range: tuple[int, int] = (1, 3),
    params: StochasticShapeParams | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Union of random rectangles/ellipses whose total area falls in a band.

    Retries with fresh draws when the area lands outside the band; after
    max_retries it falls back to a centered rectangle at the band midpoint.
    """
    params = params or StochasticShapeParams()
    if count_range[0] < 1:
        raise ContractError(f"count_range min must be >= 1, got {count_range}")
    rng = np.random.default_rng(seed)
    lo, hi = params.area_band
    for _ in range(params.max_retries):
        count = int(rng.integers(count_range[0], count_range[1] + 1))
        mask = np.zeros((height, width), dtype=bool)
        for _ in range(count):
            kind = params.primitives[int(rng.integers(0, len(params.primitives)))]
            mask |= _raster_primitive(height, width, kind, rng, params)
        area = mask.sum() / mask.size
        if lo <= area <= hi:
            return mask.astype(np.float32)[..., None]

    logger.warning(
        "stochastic region: area band %s unmet after %d retries; using fallback rectangle",
        params.area_band,
        params.max_retries,
    )
    target = 0.5 * (lo + hi)
    h_px = max(1, int(round(np.sqrt(target) * height)))
    w_px = max(1, int(round(np.sqrt(target) * width)))
    mask = np.zeros((height, width), dtype=bool)
    r0, c0 = (height - h_px) // 2, (width - w_px) // 2
    mask[r0 : r0 + h_px, c0 : c0 + w_px] = True
    return mask.astype(np.float32)[..., None]


def select_semantic_region(
    candidates: CandidateRegionMap, count_range: tuple[int, int] = (1, 3), seed: int = 0
) -> np.ndarray:
    """Union of a seeded sample of candidate regions."""
    if len(candidates) == 0:
        raise SelectionError("no candidate regions to select from")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(count_range[0], count_range[1] + 1))
    k = max(1, min(k, len(candidates)))
    chosen = rng.choice(len(candidates), size=k, replace=False)
    mask = np.zeros_like(candidates.regions[0])
    for idx in chosen:
        mask = np.maximum(mask, candidates.regions[int(idx)])
    return validate_mask(mask)


# ---------------------------------------------------------------------------
# edge editing
# ---------------------------------------------------------------------------


@dataclass
class EditStrategy:
    """How to edit edges inside a region: remove, replace or merge donor content."""

    kind: str
    donor: tuple[np.ndarray, np.ndarray] | None = None  # (edge, region)

    def __post_init__(self) -> None:
        if self.kind not in ("remove", "replace", "merge"):
            raise ContractError(f"unknown edit strategy {self.kind!r}")
        if self.kind == "remove" and self.donor is not None:
            raise ContractError("remove strategy forbids a donor")
        if self.kind in ("replace", "merge") and self.donor is None:
            raise ContractError(f"{self.kind} strategy requires a donor")


def _bbox(mask2d: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask2d.any(axis=1))
    cols = np.flatnonzero(mask2d.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _fit_donor(
    donor_edge: np.ndarray, donor_region: np.ndarray, target_region: np.ndarray
) -> np.ndarray:
    """Crop donor edges to the donor bbox, resize to the target bbox, mask to region."""
    donor2d = donor_region[..., 0] > 0.5
    if not donor2d.any():
        raise EditError("donor region is empty")
    t2d = target_region[..., 0] > 0.5
    if not t2d.any():
        return np.zeros_like(target_region)
    dr0, dr1, dc0, dc1 = _bbox(donor2d)
    tr0, tr1, tc0, tc1 = _bbox(t2d)
    crop = donor_edge[dr0:dr1, dc0:dc1, 0]
    th, tw = tr1 - tr0, tc1 - tc0
    if crop.shape != (th, tw):
        crop = cv2.resize(crop, (tw, th), interpolation=cv2.INTER_LINEAR)
    fitted = np.zeros_like(target_region)
    fitted[tr0:tr1, tc0:tc1, 0] = crop
    return (fitted * target_region).clip(0.0, 1.0)


def edit_edges(
    edge: np.ndarray, region: np.ndarray, strategy: EditStrategy
) -> tuple[np.ndarray, np.ndarray]:
    """Edit edges inside the region; return (edited edge, the region as mask M)."""
    validate_edge(edge)
    validate_mask(region)
    check_aligned(edge, region)

    if strategy.kind == "remove":
        edited = edge * (1.0 - region)
    else:
        donor_edge, donor_region = strategy.donor
        validate_edge(donor_edge, name="donor edge")
        validate_mask(donor_region, name="donor region")
        fitted = _fit_donor(donor_edge, donor_region, region)
        if strategy.kind == "replace":
            edited = edge * (1.0 - region) + fitted
        else:  # merge
            edited = np.maximum(edge, fitted)
    return edited.astype(np.float32), region.copy()
