"""Geometric training augmentations and construction of the stage-1 triplet.

All operations are pure functions of (inputs, params, seed): the same seed
always yields bitwise-identical output. An image and its edge map are always
transformed by the identical warp field so the pair stays aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import map_coordinates

from .datamodel import check_aligned, validate_edge, validate_image
from .errors import ParameterError

FLIP_MODES = ("none", "top_bottom", "left_right")


@dataclass(frozen=True)
class AugmentParams:
    """Knobs for the three augmentations and the probability each is applied."""

    tps_grid: int = 3
    tps_patch_fraction: float = 0.5
    tps_max_shift: float = 0.1
    rtp_scale_range: tuple[float, float] = (0.6, 1.0)
    rtp_translate_range: tuple[float, float] = (-0.15, 0.15)
    pad_value: float = 0.0
    flip_modes: tuple[str, ...] = ("top_bottom", "left_right")
    apply_prob: float = 0.5

    def __post_init__(self) -> None:
        if self.tps_grid < 2:
            raise ParameterError(f"tps_grid must be >= 2, got {self.tps_grid}")
        if not 0.0 <= self.tps_max_shift <= 0.5:
            raise ParameterError(f"tps_max_shift must be in [0, 0.5], got {self.tps_max_shift}")
        if not 0.0 < self.tps_patch_fraction <= 1.0:
            raise ParameterError(
                f"tps_patch_fraction must be in (0, 1], got {self.tps_patch_fraction}"
            )
        for mode in self.flip_modes:
            if mode not in FLIP_MODES:
                raise ParameterError(f"unknown flip mode {mode!r}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        """Params under which every augmentation is an exact no-op."""
        return cls(
            tps_max_shift=0.0,
            rtp_scale_range=(1.0, 1.0),
            rtp_translate_range=(0.0, 0.0),
            flip_modes=("none",),
            apply_prob=1.0,
        )


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # r^2 * log(r) = 0.5 * r^2 * log(r^2), defined as 0 at r = 0
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


def _fit_tps(source: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve for weights/affine of a TPS interpolating values at source points."""
    n = source.shape[0]
    d2 = ((source[:, None, :] - source[None, :, :]) ** 2).sum(-1)
    k = _tps_kernel(d2)
    p = np.concatenate([np.ones((n, 1)), source], axis=1)
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = k
    a[:n, n:] = p
    a[n:, :n] = p.T
    b = np.zeros((n + 3, values.shape[1]))
    b[:n] = values
    sol = np.linalg.solve(a, b)
    return sol[:n], sol[n:]


def _eval_tps(
    points: np.ndarray, source: np.ndarray, weights: np.ndarray, affine: np.ndarray
) -> np.ndarray:
    d2 = ((points[:, None, :] - source[None, :, :]) ** 2).sum(-1)
    k = _tps_kernel(d2)
    p = np.concatenate([np.ones((points.shape[0], 1)), points], axis=1)
    return k @ weights + p @ affine


def _warp_patch(channels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear gather at float (row, col) coordinates, one channel at a time."""
    sampled = [
        map_coordinates(channels[..., c], [rows, cols], order=1, mode="nearest")
        for c in range(channels.shape[2])
    ]
    return np.stack(sampled, axis=-1).astype(np.float32)


def local_tps_warp(
    image: np.ndarray, edge: np.ndarray, params: AugmentParams, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Warp one random square patch with a thin-plate spline; leave the rest alone.

    Control points form a tps_grid x tps_grid lattice over the patch and are
    displaced by at most tps_max_shift * patch_side per axis. The spline
    interpolates the displaced points exactly and both inputs are resampled
    through the same backward field with bilinear interpolation.
    """
    validate_image(image)
    validate_edge(edge)
    check_aligned(image, edge)
    h, w = image.shape[:2]
    side = int(round(params.tps_patch_fraction * min(h, w)))
    if side > min(h, w):
        raise ParameterError(f"TPS patch side {side} exceeds image side {min(h, w)}")
    if params.tps_max_shift == 0.0 or side < 2:
        return image.copy(), edge.copy()

    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))

    lattice = np.linspace(0.0, side - 1.0, params.tps_grid)
    grid_r, grid_c = np.meshgrid(lattice, lattice, indexing="ij")
    control = np.stack([grid_r.ravel() + top, grid_c.ravel() + left], axis=1)
    max_shift = params.tps_max_shift * side
    offsets = rng.uniform(-max_shift, max_shift, size=control.shape)
    if not offsets.any():
        return image.copy(), edge.copy()

    # Backward warp: fit the spline from displaced points to their origins so
    # sampling at an output pixel pulls the content that moved onto it.
    weights, affine = _fit_tps(control + offsets, control)
    rr, cc = np.meshgrid(
        np.arange(top, top + side, dtype=np.float64),
        np.arange(left, left + side, dtype=np.float64),
        indexing="ij",
    )
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1)
    src = _eval_tps(pts, control + offsets, weights, affine)
    rows = src[:, 0].clip(0, h - 1).reshape(side, side)
    cols = src[:, 1].clip(0, w - 1).reshape(side, side)

    out_image = image.copy()
    out_edge = edge.copy()
    out_image[top : top + side, left : left + side] = _warp_patch(image, rows, cols)
    out_edge[top : top + side, left : left + side] = _warp_patch(edge, rows, cols)
    return out_image.clip(0.0, 1.0), out_edge.clip(0.0, 1.0)


def resize_translate_pad(
    image: np.ndarray, edge: np.ndarray, params: AugmentParams, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Scale the content, shift it, and pad back to the original resolution."""
    validate_image(image)
    validate_edge(edge)
    check_aligned(image, edge)
    rng = np.random.default_rng(seed)
    scale = float(rng.uniform(*params.rtp_scale_range))
    lo, hi = params.rtp_translate_range
    tr = float(rng.uniform(lo, hi))
    tc = float(rng.uniform(lo, hi))
    if scale <= 0.0:
        raise ParameterError(f"scale must be positive, got {scale}")
    if scale == 1.0 and tr == 0.0 and tc == 0.0:
        return image.copy(), edge.copy()

    h, w = image.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    dr, dc = int(round(tr * h)), int(round(tc * w))

    def place(arr: np.ndarray) -> np.ndarray:
        scaled = cv2.resize(arr, (nw, nh), interpolation=cv2.INTER_LINEAR)
        if scaled.ndim == 2:
            scaled = scaled[..., None]
        canvas = np.full((h, w, arr.shape[2]), params.pad_value, dtype=np.float32)
        top = (h - nh) // 2 + dr
        left = (w - nw) // 2 + dc
        # clip the paste window to the canvas
        src_t, src_l = max(0, -top), max(0, -left)
        dst_t, dst_l = max(0, top), max(0, left)
        hh = min(nh - src_t, h - dst_t)
        ww = min(nw - src_l, w - dst_l)
        if hh > 0 and ww > 0:
            canvas[dst_t : dst_t + hh, dst_l : dst_l + ww] = scaled[
                src_t : src_t + hh, src_l : src_l + ww
            ]
        return canvas.clip(0.0, 1.0)

    return place(image), place(edge)


def flip(
    image: np.ndarray, edge: np.ndarray, mode: str
) -> tuple[np.ndarray, np.ndarray]:
    """Flip both inputs identically. mode: none | top_bottom | left_right."""
    if mode not in FLIP_MODES:
        raise ParameterError(f"unknown flip mode {mode!r}")
    check_aligned(image, edge)
    if mode == "none":
        return image.copy(), edge.copy()
    axis = 0 if mode == "top_bottom" else 1
    return np.flip(image, axis=axis).copy(), np.flip(edge, axis=axis).copy()


def _chain_plan(params: AugmentParams, rng: np.random.Generator) -> dict:
    """Draw which augmentations apply and their sub-seeds, in a fixed order."""
    plan = {
        "tps": rng.random() < params.apply_prob,
        "tps_seed": int(rng.integers(0, 2**31 - 1)),
        "rtp": rng.random() < params.apply_prob,
        "rtp_seed": int(rng.integers(0, 2**31 - 1)),
        "flip": rng.random() < params.apply_prob,
        "flip_mode": "none",
    }
    if params.flip_modes:
        plan["flip_mode"] = params.flip_modes[int(rng.integers(0, len(params.flip_modes)))]
    return plan


def apply_chain(
    image: np.ndarray, edge: np.ndarray, params: AugmentParams, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Apply a seeded TPS -> resize/translate/pad -> flip composition to the pair.

    Each augmentation fires independently with probability ``apply_prob``.
    """
    rng = np.random.default_rng(seed)
    plan = _chain_plan(params, rng)
    if plan["tps"] and params.tps_max_shift > 0.0:
        image, edge = local_tps_warp(image, edge, params, plan["tps_seed"])
    if plan["rtp"]:
        image, edge = resize_translate_pad(image, edge, params, plan["rtp_seed"])
    if plan["flip"]:
        image, edge = flip(image, edge, plan["flip_mode"])
    return image.copy(), edge.copy()


def build_boot_triplet(
    edge: np.ndarray, image: np.ndarray, params: AugmentParams, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build the (target edge, reference image, target image) training triplet.

    Two independent augmentation chains are drawn: chain A produces the target
    edge map, chain B the reference image. The target image receives chain A,
    i.e. exactly the transform that shaped the target edge map.
    """
    validate_image(image)
    validate_edge(edge)
    check_aligned(image, edge)
    ss = np.random.SeedSequence(seed).spawn(2)
    seed_a = int(ss[0].generate_state(1)[0])
    seed_b = int(ss[1].generate_state(1)[0])
    i_t, e_t = apply_chain(image, edge, params, seed_a)
    i_r, _ = apply_chain(image, edge, params, seed_b)
    return e_t, i_r, i_t
