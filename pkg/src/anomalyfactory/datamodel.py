"""Core image/mask types, manifest ingestion, balanced sampling and sample loading.

Pixel data is carried as plain ``numpy`` arrays with fixed conventions:

* image:   ``(H, W, 3) float32`` in ``[0, 1]``
* edge:    ``(H, W, 1) float32`` in ``[0, 1]``
* mask:    ``(H, W, 1) float32`` with values in ``{0, 1}``
* heatmap: ``(H, W, 1) float32`` in ``[0, 1]``

The validators below are called at every I/O boundary so downstream code can
rely on the conventions without re-checking.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import ContractError, ManifestParseError, ManifestValidationError, ParameterError

MANIFEST_FIELDS = ("image_path", "edge_path", "regions_path", "category", "dataset")


def validate_image(pixels: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the (H, W, 3) float-in-[0,1] convention and return the array."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ContractError(f"{name}: expected (H, W, 3), got {pixels.shape}")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ContractError(f"{name}: values outside [0, 1]")
    return pixels


def validate_single_channel(pixels: np.ndarray, name: str = "map") -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 1:
        raise ContractError(f"{name}: expected (H, W, 1), got {pixels.shape}")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ContractError(f"{name}: values outside [0, 1]")
    return pixels


def validate_edge(pixels: np.ndarray, name: str = "edge") -> np.ndarray:
    return validate_single_channel(pixels, name)


def validate_heatmap(pixels: np.ndarray, name: str = "heatmap") -> np.ndarray:
    return validate_single_channel(pixels, name)


def validate_mask(pixels: np.ndarray, name: str = "mask") -> np.ndarray:
    pixels = validate_single_channel(pixels, name)
    if pixels.size and not np.all((pixels == 0.0) | (pixels == 1.0)):
        raise ContractError(f"{name}: values must be binary 0/1")
    return pixels


def mask_area_fraction(mask: np.ndarray) -> float:
    """Fraction of pixels set in a binary mask."""
    mask = np.asarray(mask)
    if mask.size == 0:
        return 0.0
    return float(mask.sum() / float(mask.shape[0] * mask.shape[1]))


def check_aligned(*arrays: np.ndarray) -> None:
    """Raise if the arrays do not share the same spatial (H, W) extent."""
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) > 1:
        raise ContractError(f"spatially misaligned inputs: {sorted(shapes)}")


@dataclass(frozen=True)
class SampleRecord:
    """One training sample: paths to a color image, its edge map and region labels."""

    image_path: str
    edge_path: str
    regions_path: str
    category: str
    dataset: str

    def to_line(self) -> str:
        return "\t".join(
            (self.image_path, self.edge_path, self.regions_path, self.category, self.dataset)
        )


@dataclass
class DatasetManifest:
    """An immutable, ordered list of records plus the sorted category set."""

    records: list[SampleRecord]
    categories: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.categories:
            self.categories = sorted({r.category for r in self.records})
        missing = {r.category for r in self.records} - set(self.categories)
        if missing:
            raise ContractError(f"records reference unknown categories: {sorted(missing)}")

    def by_category(self, category: str) -> list[SampleRecord]:
        return [r for r in self.records if r.category == category]

    def __len__(self) -> int:
        return len(self.records)


def _png_size(path: Path) -> tuple[int, int]:
    # PIL reads only the header here; no full decode.
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def load_manifest(path: str | Path, validate: bool = True) -> DatasetManifest:
    """Read a tab-separated manifest file (one record per line, UTF-8).

    Relative record paths are resolved against the manifest's directory.
    With ``validate`` set, every record's three paths must exist and agree
    on spatial dimensions.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records: list[SampleRecord] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise ManifestParseError(
                f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} tab-separated fields, "
                f"got {len(parts)}"
            )
        img, edge, regions, category, dataset = parts
        resolved = [
            str(p if p.is_absolute() else base / p) for p in (Path(img), Path(edge), Path(regions))
        ]
        records.append(SampleRecord(resolved[0], resolved[1], resolved[2], category, dataset))

    if validate:
        for rec in records:
            paths = (rec.image_path, rec.edge_path, rec.regions_path)
            for p in paths:
                if not Path(p).is_file():
                    raise ManifestValidationError(f"record {rec.image_path!r}: missing file {p}")
            sizes = {_png_size(Path(p)) for p in paths}
            if len(sizes) > 1:
                raise ManifestValidationError(
                    f"record {rec.image_path!r}: mismatched dimensions {sorted(sizes)}"
                )
    return DatasetManifest(records=records)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest in the tab-separated line format read by load_manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(rec.to_line() + "\n" for rec in manifest.records)
    path.write_text(text, encoding="utf-8")


def balanced_sample(
    manifest: DatasetManifest, per_category_cap: int, seed: int
) -> list[SampleRecord]:
    """Seeded uniform sample of up to ``per_category_cap`` records per category.

    Categories are processed in sorted order and each gets an independent RNG
    stream, so adding a category never perturbs the others' selections.
    """
    if per_category_cap < 1:
        raise ParameterError(f"per_category_cap must be >= 1, got {per_category_cap}")
    out: list[SampleRecord] = []
    for category in manifest.categories:
        pool = manifest.by_category(category)
        k = min(per_category_cap, len(pool))
        if k == 0:
            continue
        rng = random.Random(f"{seed}:{category}")
        out.extend(rng.sample(pool, k))
    return out


def _to_float01(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)


def _resize(arr: np.ndarray, resolution: int, nearest: bool) -> np.ndarray:
    if arr.shape[0] == resolution and arr.shape[1] == resolution:
        return arr
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.resize(arr, (resolution, resolution), interpolation=interp)
    return out


def load_image(path: str | Path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    pixels = _to_float01(arr)
    if resolution is not None:
        pixels = _resize(pixels, resolution, nearest=False)
    return validate_image(pixels, name=str(path))


def load_edge(path: str | Path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    pixels = _to_float01(arr)
    if resolution is not None:
        pixels = _resize(pixels, resolution, nearest=True)
    return validate_edge(pixels[..., None], name=str(path))


def load_regions(path: str | Path, resolution: int | None = None) -> list[np.ndarray]:
    """Read an index-labeled region image: label k > 0 marks region k."""
    with Image.open(path) as im:
        labels = np.asarray(im.convert("I"))
    if resolution is not None:
        labels = _resize(labels.astype(np.int32), resolution, nearest=True)
    masks = []
    for k in np.unique(labels):
        if k <= 0:
            continue
        masks.append((labels == k).astype(np.float32)[..., None])
    return masks


def load_sample(
    record: SampleRecord, resolution: int
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Load and resize one record. Images use bilinear, edge/masks nearest-neighbor."""
    try:
        image = load_image(record.image_path, resolution)
        edge = load_edge(record.edge_path, resolution)
        masks = load_regions(record.regions_path, resolution)
    except (OSError, SyntaxError) as exc:
        raise IOError(f"failed to decode sample {record.image_path!r}: {exc}") from exc
    assert image.shape[:2] == edge.shape[:2] == (resolution, resolution)
    for m in masks:
        assert m.shape[:2] == (resolution, resolution)
        validate_mask(m)
    return image, edge, masks


def save_image_png(pixels: np.ndarray, path: str | Path) -> None:
    validate_image(pixels)
    arr = np.round(pixels * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def save_gray_png(pixels: np.ndarray, path: str | Path) -> None:
    """Save a single-channel [0,1] map (edge, heatmap or mask) as 8-bit PNG."""
    validate_single_channel(pixels)
    arr = np.round(pixels[..., 0] * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def save_regions_png(masks: list[np.ndarray], shape: tuple[int, int], path: str | Path) -> None:
    """Write region masks as one index-labeled image (region k gets label k)."""
    if len(masks) > 255:
        raise ContractError(f"at most 255 regions per labeled image, got {len(masks)}")
    labels = np.zeros(shape, dtype=np.uint8)
    for k, mask in enumerate(masks, start=1):
        validate_mask(mask)
        labels[mask[..., 0] > 0.5] = k
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels, mode="L").save(path)
