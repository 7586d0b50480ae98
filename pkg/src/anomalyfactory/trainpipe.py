"""Progressive three-stage training, generation/detection entry points and the
synthetic toy corpus builder.

Stage order is enforced: the flare stage consumes frozen boot weights as its
on-the-fly teacher, and the blaze stage consumes frozen flare weights. Every
run is a pure function of (manifest, schedule, config, seed): loss logs are
bitwise reproducible on the same backend.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .augment import AugmentParams, apply_chain, build_boot_triplet
from .datamodel import (
    DatasetManifest,
    SampleRecord,
    load_manifest,
    load_sample,
    save_gray_png,
    save_image_png,
    save_manifest,
    save_regions_png,
    validate_edge,
    validate_image,
)
from .edgeops import (
    CandidateRegionMap,
    EditStrategy,
    StochasticShapeParams,
    edit_edges,
    extract_edges,
    select_semantic_region,
    select_stochastic_region,
)
from .errors import ContractError, NumericalError, SelectionError
from .losses import (
    LossWeights,
    build_feature_extractor,
    d_objective_from_logits,
    g_loss_from_logits,
    heatmap_loss,
    perceptual_loss,
    total_loss,
)
from .netarch import (
    GeneratorConfig,
    StageWeights,
    generator_forward,
    make_noise,
    save_checkpoint,
    to_tensor,
)

STAGE_IDS = {"boot": 0, "flare": 1, "blaze": 2}


@dataclass(frozen=True)
class StageSchedule:
    stage: str
    epochs: int
    batch_size: int
    resolution: int
    lr: float = 2e-4
    lr_decay: str = "linear"
    optimizer: str = "adam"
    use_local_tps: bool = False
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGE_IDS:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.lr_decay != "linear" or self.optimizer != "adam":
            raise ContractError("only linear decay with adam is supported")


def default_schedule(stage: str, resolution: int = 256) -> StageSchedule:
    if stage == "boot":
        return StageSchedule("boot", epochs=30, batch_size=32, resolution=resolution,
                             lr=2e-4, use_local_tps=True)
    return StageSchedule(stage, epochs=5, batch_size=32, resolution=resolution,
                         lr=2e-4, use_local_tps=False)


def linear_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Linear decay from base_lr at step 0 toward 0 at step == total_steps."""
    return base_lr * (1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# edge manipulation planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManipulationSpec:
    """Policy for forging anomaly edges: where to select and how to edit."""

    enabled: bool = True
    region_source: str = "mix"  # semantic | stochastic | mix
    semantic_ratio: float = 0.5
    strategies: tuple[str, ...] = ("remove", "replace", "merge")
    count_range: tuple[int, int] = (1, 2)
    stochastic: StochasticShapeParams = field(default_factory=StochasticShapeParams)


def plan_manipulation(
    edge: np.ndarray,
    regions: list[np.ndarray],
    donor: tuple[np.ndarray, list[np.ndarray]] | None,
    spec: ManipulationSpec,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Select a region and apply one seeded edit; returns (edited edge, mask M)."""
    if not spec.enabled:
        return edge.copy(), np.zeros_like(edge)
    rng = np.random.default_rng(seed)
    h, w = edge.shape[:2]

    use_semantic = spec.region_source == "semantic" or (
        spec.region_source == "mix" and rng.random() < spec.semantic_ratio
    )
    region_seed = int(rng.integers(0, 2**31 - 1))
    region = None
    if use_semantic and regions:
        try:
            region = select_semantic_region(
                CandidateRegionMap(regions, "semantic"), spec.count_range, seed=region_seed
            )
        except SelectionError:
            region = None
    if region is None:
        region = select_stochastic_region(
            h, w, spec.count_range, spec.stochastic, seed=region_seed
        )

    kind = spec.strategies[int(rng.integers(0, len(spec.strategies)))]
    if donor is None and kind in ("replace", "merge"):
        kind = "remove"
    if kind == "remove":
        strategy = EditStrategy("remove")
    else:
        donor_edge, donor_regions = donor
        if donor_regions:
            idx = int(rng.integers(0, len(donor_regions)))
            donor_region = donor_regions[idx]
        else:
            donor_region = select_stochastic_region(
                donor_edge.shape[0], donor_edge.shape[1],
                spec.count_range, spec.stochastic, seed=int(rng.integers(0, 2**31 - 1)),
            )
        strategy = EditStrategy(kind, donor=(donor_edge, donor_region))
    return edit_edges(edge, region, strategy)


# ---------------------------------------------------------------------------
# training internals
# ---------------------------------------------------------------------------


class _SampleBank:
    """In-memory cache of decoded samples at the training resolution."""

    def __init__(self, records: list[SampleRecord], resolution: int):
        if not records:
            raise ContractError("empty record list")
        self.records = records
        self.resolution = resolution
        self._cache: dict[str, tuple[np.ndarray, np.ndarray, list[np.ndarray]]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def get(self, idx: int) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        rec = self.records[idx]
        key = rec.image_path
        if key not in self._cache:
            self._cache[key] = load_sample(rec, self.resolution)
        return self._cache[key]


class _LossLog:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w", encoding="utf-8")
        else:
            self._fh = None

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def read_loss_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines()]


def _total_steps(schedule: StageSchedule, n_records: int) -> tuple[int, int]:
    batch = min(schedule.batch_size, n_records)
    per_epoch = max(1, n_records // batch)
    total = schedule.epochs * per_epoch
    if schedule.max_steps is not None:
        total = schedule.max_steps
    return total, batch


def _stack(arrays: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([a.transpose(2, 0, 1) for a in arrays])).float()


def _stage_aug(aug: AugmentParams, schedule: StageSchedule) -> AugmentParams:
    if schedule.use_local_tps:
        return aug
    return dataclasses.replace(aug, tps_max_shift=0.0)


def _gan_step(
    weights: StageWeights,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    fx: torch.nn.Module,
    loss_weights: LossWeights,
    e_t: torch.Tensor,
    i_r: torch.Tensor,
    i_t: torch.Tensor,
    noise: torch.Tensor | None,
    heat_target: torch.Tensor | None,
) -> dict:
    gen, disc = weights.generator, weights.discriminator
    texture, heat, i_out = gen(e_t, i_r, noise)

    opt_d.zero_grad()
    d_obj = d_objective_from_logits(disc(e_t, i_r, i_t), disc(e_t, i_r, i_out.detach()))
    (-d_obj).backward()
    opt_d.step()

    opt_g.zero_grad()
    g_adv = g_loss_from_logits(disc(e_t, i_r, i_out))
    l_perc = perceptual_loss(i_out, i_t, fx, loss_weights)
    g_total = l_perc + g_adv
    l_heat = None
    if heat_target is not None:
        l_heat = heatmap_loss(heat, heat_target)
        w = loss_weights.w_fh if weights.stage == "flare" else loss_weights.w_bh
        g_total = g_total + w * l_heat
    g_total.backward()
    opt_g.step()

    return {
        "l_perc": float(l_perc.detach()),
        "d_obj": float(d_obj.detach()),
        "g_adv": float(g_adv.detach()),
        "l_heat": float(l_heat.detach()) if l_heat is not None else None,
    }


def _run_stage(
    stage: str,
    bank: _SampleBank,
    schedule: StageSchedule,
    weights: StageWeights,
    seed: int,
    make_batch,
    log_path: str | Path | None,
    loss_weights: LossWeights,
    checkpoint_dir: str | Path | None,
) -> StageWeights:
    total_steps, batch = _total_steps(schedule, len(bank))
    if total_steps == 0:
        return weights
    rng = np.random.default_rng(np.random.SeedSequence([seed, STAGE_IDS[stage], 97]))
    fx = build_feature_extractor("fixed-random-conv", seed=seed)
    opt_g = torch.optim.Adam(weights.generator.parameters(), lr=schedule.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(weights.discriminator.parameters(), lr=schedule.lr, betas=(0.5, 0.999))
    log = _LossLog(log_path)
    weights.generator.train()
    weights.discriminator.train()

    step = 0
    try:
        while step < total_steps:
            perm = rng.permutation(len(bank))
            for start in range(0, len(bank) - batch + 1, batch):
                if step >= total_steps:
                    break
                lr_t = linear_lr(schedule.lr, step, total_steps)
                for opt in (opt_g, opt_d):
                    for group in opt.param_groups:
                        group["lr"] = lr_t
                idxs = [int(i) for i in perm[start : start + batch]]
                batch_tensors = make_batch(idxs, rng)
                parts = _gan_step(weights, opt_g, opt_d, fx, loss_weights, *batch_tensors)
                w = loss_weights.w_fh if stage == "flare" else loss_weights.w_bh
                total = total_loss(
                    stage, parts["l_perc"], parts["d_obj"],
                    parts["l_heat"] if stage != "boot" else None, loss_weights,
                )
                row = {"step": step, "stage": stage, "lr": lr_t, **parts, "total": total}
                if not all(math.isfinite(v) for v in
                           (parts["l_perc"], parts["d_obj"], parts["g_adv"])):
                    if checkpoint_dir:
                        save_checkpoint(weights, Path(checkpoint_dir) / f"{stage}_abort.pt")
                    raise NumericalError(f"non-finite loss at step {step}: {row}")
                log.write(row)
                step += 1
    finally:
        log.close()
    return weights


def train_boot(
    manifest: DatasetManifest,
    schedule: StageSchedule,
    config: GeneratorConfig,
    seed: int,
    aug_params: AugmentParams | None = None,
    loss_weights: LossWeights | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> StageWeights:
    """Stage 1: learn to combine a target edge map with a reference appearance."""
    if schedule.stage != "boot":
        raise ContractError(f"schedule stage {schedule.stage!r}, expected 'boot'")
    aug = _stage_aug(aug_params or AugmentParams(), schedule)
    loss_weights = loss_weights or LossWeights()
    bank = _SampleBank(list(manifest.records), schedule.resolution)
    config.check_resolution(schedule.resolution, schedule.resolution)
    weights = StageWeights.initialize("boot", config, seed=seed)

    def make_batch(idxs: list[int], rng: np.random.Generator):
        e_t, i_r, i_t = [], [], []
        for idx in idxs:
            image, edge, _ = bank.get(idx)
            et, ir, it = build_boot_triplet(edge, image, aug, int(rng.integers(0, 2**31 - 1)))
            e_t.append(et)
            i_r.append(ir)
            i_t.append(it)
        noise = make_noise(config, schedule.resolution, schedule.resolution,
                           int(rng.integers(0, 2**31 - 1)), batch=len(idxs))
        return _stack(e_t), _stack(i_r), _stack(i_t), noise, None

    return _run_stage("boot", bank, schedule, weights, seed, make_batch,
                      log_path, loss_weights, checkpoint_dir)


def _manipulated_batch(
    bank: _SampleBank,
    idxs: list[int],
    rng: np.random.Generator,
    aug: AugmentParams,
    spec: ManipulationSpec,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Shared flare/blaze batch prep: augment, forge anomaly edges, keep masks."""
    images, edges, edited, masks = [], [], [], []
    for idx in idxs:
        image, edge, regions = bank.get(idx)
        image, edge = apply_chain(image, edge, aug, int(rng.integers(0, 2**31 - 1)))
        donor_idx = int(rng.integers(0, len(bank)))
        d_image, d_edge, d_regions = bank.get(donor_idx)
        edited_edge, mask = plan_manipulation(
            edge, regions, (d_edge, d_regions), spec, int(rng.integers(0, 2**31 - 1))
        )
        images.append(image)
        edges.append(edge)
        edited.append(edited_edge)
        masks.append(mask)
    return images, edges, edited, masks


def train_flare(
    manifest: DatasetManifest,
    schedule: StageSchedule,
    boot: StageWeights,
    seed: int,
    aug_params: AugmentParams | None = None,
    manip_spec: ManipulationSpec | None = None,
    loss_weights: LossWeights | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> StageWeights:
    """Stage 2: learn anomaly heatmaps against the frozen stage-1 teacher.

    Per batch the teacher generates the ground-truth image for the forged
    anomaly edges on the fly; the heatmap decoder is supervised by the edited
    region mask.
    """
    if schedule.stage != "flare":
        raise ContractError(f"schedule stage {schedule.stage!r}, expected 'flare'")
    if boot.stage != "boot":
        raise ContractError(f"flare training requires boot weights, got {boot.stage!r}")
    aug = _stage_aug(aug_params or AugmentParams(), schedule)
    spec = manip_spec or ManipulationSpec()
    loss_weights = loss_weights or LossWeights()
    bank = _SampleBank(list(manifest.records), schedule.resolution)
    config = boot.config
    config.check_resolution(schedule.resolution, schedule.resolution)

    weights = boot.clone_as("flare")
    teacher = boot.generator
    teacher.eval()
    teacher.requires_grad_(False)

    def make_batch(idxs: list[int], rng: np.random.Generator):
        images, _, edited, masks = _manipulated_batch(bank, idxs, rng, aug, spec)
        e_t = _stack(edited)
        i_r = _stack(images)
        m = _stack(masks)
        teacher_noise = make_noise(config, schedule.resolution, schedule.resolution,
                                   int(rng.integers(0, 2**31 - 1)), batch=len(idxs))
        with torch.no_grad():
            _, _, i_t = teacher(e_t, i_r, teacher_noise)
        noise = make_noise(config, schedule.resolution, schedule.resolution,
                           int(rng.integers(0, 2**31 - 1)), batch=len(idxs))
        return e_t, i_r, i_t, noise, m

    out = _run_stage("flare", bank, schedule, weights, seed, make_batch,
                     log_path, loss_weights, checkpoint_dir)
    teacher.requires_grad_(True)
    return out


def train_blaze(
    manifest: DatasetManifest,
    schedule: StageSchedule,
    flare: StageWeights,
    seed: int,
    aug_params: AugmentParams | None = None,
    manip_spec: ManipulationSpec | None = None,
    loss_weights: LossWeights | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    recompute_edges: bool = False,
) -> StageWeights:
    """Stage 3: swap roles — learn to map generated anomalies back to normal.

    The frozen stage-2 teacher generates (anomaly image, heatmap) pairs; the
    detector reconstructs the original normal image and its heatmap is
    supervised by the teacher's heatmap. With ``recompute_edges`` the input
    edge map is re-extracted from the generated anomaly image instead of
    reusing the manipulated one.
    """
    if schedule.stage != "blaze":
        raise ContractError(f"schedule stage {schedule.stage!r}, expected 'blaze'")
    if flare.stage != "flare":
        raise ContractError(f"blaze training requires flare weights, got {flare.stage!r}")
    aug = _stage_aug(aug_params or AugmentParams(), schedule)
    spec = manip_spec or ManipulationSpec()
    loss_weights = loss_weights or LossWeights()
    bank = _SampleBank(list(manifest.records), schedule.resolution)
    config = flare.config
    config.check_resolution(schedule.resolution, schedule.resolution)

    weights = flare.clone_as("blaze")
    teacher = flare.generator
    teacher.eval()
    teacher.requires_grad_(False)

    def make_batch(idxs: list[int], rng: np.random.Generator):
        images, _, edited, _ = _manipulated_batch(bank, idxs, rng, aug, spec)
        e_t = _stack(edited)
        i_normal = _stack(images)
        teacher_noise = make_noise(config, schedule.resolution, schedule.resolution,
                                   int(rng.integers(0, 2**31 - 1)), batch=len(idxs))
        with torch.no_grad():
            _, fh, anomaly = teacher(e_t, i_normal, teacher_noise)
        if recompute_edges:
            recomputed = [extract_edges(to_hwc(anomaly[i])) for i in range(anomaly.shape[0])]
            e_t = _stack(recomputed)
        # detector sees the anomaly pair, reconstructs the normal image
        return e_t, anomaly, i_normal, None, fh

    out = _run_stage("blaze", bank, schedule, weights, seed, make_batch,
                     log_path, loss_weights, checkpoint_dir)
    teacher.requires_grad_(True)
    return out


def to_hwc(tensor: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor -> clipped (H, W, C) float32 array."""
    return tensor.permute(1, 2, 0).cpu().numpy().clip(0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# generation / detection
# ---------------------------------------------------------------------------


def generate_anomaly(
    flare: StageWeights,
    edge: np.ndarray,
    ref: np.ndarray,
    manipulation: ManipulationSpec | None,
    noise_seed: int,
    regions: list[np.ndarray] | None = None,
    donor: tuple[np.ndarray, list[np.ndarray]] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forge anomaly edges per the spec, generate, return (image, heatmap, mask)."""
    if flare.stage != "flare":
        raise ContractError(f"generation requires flare weights, got {flare.stage!r}")
    validate_edge(edge)
    validate_image(ref)
    if manipulation is None or not manipulation.enabled:
        edited, mask = edge.copy(), np.zeros_like(edge)
    else:
        edited, mask = plan_manipulation(edge, regions or [], donor, manipulation, noise_seed)
    _, heat, image = generator_forward(edited, ref, noise_seed, flare)
    return image, heat, mask


def detect(
    blaze: StageWeights, edge: np.ndarray, image: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Run the detector: returns (reconstructed normal image, anomaly heatmap)."""
    if blaze.stage != "blaze":
        raise ContractError(f"detection requires blaze weights, got {blaze.stage!r}")
    _, heat, recon = generator_forward(edge, image, None, blaze)
    return recon, heat


# ---------------------------------------------------------------------------
# held-out evaluation helpers
# ---------------------------------------------------------------------------


@dataclass
class ManipulationCase:
    image: np.ndarray
    edge: np.ndarray
    edited_edge: np.ndarray
    mask: np.ndarray


def build_manipulation_cases(
    manifest: DatasetManifest,
    resolution: int,
    spec: ManipulationSpec,
    n: int,
    seed: int,
) -> list[ManipulationCase]:
    """Fixed, seeded manipulation cases for before/after heatmap evaluation."""
    bank = _SampleBank(list(manifest.records), resolution)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    cases = []
    for i in range(n):
        idx = int(rng.integers(0, len(bank)))
        image, edge, regions = bank.get(idx)
        donor_idx = int(rng.integers(0, len(bank)))
        _, d_edge, d_regions = bank.get(donor_idx)
        edited, mask = plan_manipulation(
            edge, regions, (d_edge, d_regions), spec, int(rng.integers(0, 2**31 - 1))
        )
        cases.append(ManipulationCase(image, edge, edited, mask))
    return cases


def mean_case_heatmap_loss(weights: StageWeights, cases: list[ManipulationCase]) -> float:
    """Mean squared heatmap error against the edited-region masks."""
    losses = []
    for case in cases:
        _, heat, _ = generator_forward(case.edited_edge, case.image, None, weights)
        losses.append(float(np.mean((heat - case.mask) ** 2)))
    return float(np.mean(losses))


def mean_heatmap_value(
    weights: StageWeights, cases: list[ManipulationCase], manipulated: bool
) -> float:
    """Mean heatmap activation with either the edited or the pristine edges."""
    values = []
    for case in cases:
        edge = case.edited_edge if manipulated else case.edge
        _, heat, _ = generator_forward(edge, case.image, None, weights)
        values.append(float(heat.mean()))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# synthetic toy corpus
# ---------------------------------------------------------------------------


def _category_palette(category: int, rng: np.random.Generator) -> dict:
    base_hue = (0.13 + 0.37 * category) % 1.0
    def col(h, s, v):
        r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
        return np.array([r, g, b], dtype=np.float32)

    return {
        "background": col(base_hue + 0.5, 0.15, 0.25),
        "base": col(base_hue, 0.7, 0.8),
        "parts": [col(base_hue + 0.12 * (i + 1), 0.8, 0.9) for i in range(4)],
    }


def _layout_parts(category: int, resolution: int, rng: np.random.Generator) -> list[dict]:
    """Per-category part list: center/size jittered circles, squares and bars."""
    r = resolution
    jitter = lambda s: float(rng.uniform(-s, s)) * r
    parts = []
    if category % 2 == 0:
        cx, cy = 0.5 * r + jitter(0.02), 0.5 * r + jitter(0.02)
        parts.append({"kind": "disk", "cx": cx, "cy": cy, "radius": 0.26 * r + jitter(0.01)})
        for i, (dx, dy) in enumerate([(0, -0.36), (0.36, 0), (0, 0.36), (-0.36, 0)]):
            parts.append({
                "kind": "disk",
                "cx": cx + dx * r + jitter(0.015),
                "cy": cy + dy * r + jitter(0.015),
                "radius": 0.085 * r + jitter(0.008),
            })
    else:
        cx, cy = 0.5 * r + jitter(0.02), 0.5 * r + jitter(0.02)
        side = 0.55 * r + jitter(0.02)
        parts.append({"kind": "square", "cx": cx, "cy": cy, "side": side})
        for i in range(3):
            parts.append({
                "kind": "bar",
                "cx": cx + jitter(0.01),
                "cy": cy + (i - 1) * 0.16 * r + jitter(0.01),
                "width": 0.38 * r + jitter(0.02),
                "height": 0.055 * r + jitter(0.005),
            })
    return parts


def _part_mask(part: dict, resolution: int) -> np.ndarray:
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    if part["kind"] == "disk":
        return (yy - part["cy"]) ** 2 + (xx - part["cx"]) ** 2 <= part["radius"] ** 2
    if part["kind"] == "square":
        half = part["side"] / 2
        return (np.abs(yy - part["cy"]) <= half) & (np.abs(xx - part["cx"]) <= half)
    return (np.abs(yy - part["cy"]) <= part["height"] / 2) & (
        np.abs(xx - part["cx"]) <= part["width"] / 2
    )


def _render_toy(
    category: int, resolution: int, rng: np.random.Generator, skip_part: int | None = None
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Render one toy object; returns (image, per-part masks). Skipping a part
    simulates a missing-component defect."""
    palette = _category_palette(category, rng)
    parts = _layout_parts(category, resolution, rng)
    supersample = 4
    hi = resolution * supersample
    canvas = np.empty((hi, hi, 3), dtype=np.float32)
    bg = (palette["background"] + rng.uniform(-0.03, 0.03, 3)).clip(0, 1)
    canvas[:] = bg
    masks = []
    colors = [palette["base"]] + palette["parts"]
    for i, part in enumerate(parts):
        hi_part = {
            k: (v * supersample if isinstance(v, float) else v) for k, v in part.items()
        }
        color = (colors[i % len(colors)] + rng.uniform(-0.04, 0.04, 3)).clip(0, 1)
        if skip_part is not None and i == skip_part:
            masks.append(_part_mask(part, resolution))
            continue
        mask_hi = _part_mask(hi_part, hi)
        canvas[mask_hi] = color
        masks.append(_part_mask(part, resolution))
    image = cv2.resize(canvas, (resolution, resolution), interpolation=cv2.INTER_AREA)
    return image.clip(0.0, 1.0), [m.astype(np.float32)[..., None] for m in masks]


def _write_toy_sample(
    out_dir: Path,
    split: str,
    category_name: str,
    index: int,
    image: np.ndarray,
    region_masks: list[np.ndarray],
) -> SampleRecord:
    stem = f"{split}/{category_name}/img_{index:04d}"
    image_path = out_dir / f"{stem}.png"
    edge_path = out_dir / f"{stem}_edge.png"
    regions_path = out_dir / f"{stem}_regions.png"
    save_image_png(image, image_path)
    save_gray_png(extract_edges(image), edge_path)
    save_regions_png(region_masks, image.shape[:2], regions_path)
    return SampleRecord(
        image_path=f"{stem}.png",
        edge_path=f"{stem}_edge.png",
        regions_path=f"{stem}_regions.png",
        category=category_name,
        dataset=f"toy-{split}",
    )


def build_toy_corpus(
    out_dir: str | Path,
    n_per_category: int,
    categories: int,
    resolution: int,
    seed: int,
) -> DatasetManifest:
    """Render a deterministic synthetic corpus with edges and region labels.

    Writes three manifests under out_dir: manifest.tsv (training normals),
    heldout_normal.tsv and heldout_defect.tsv (defect records carry their
    ground-truth mask as the region map). Returns the training manifest.
    """
    if categories < 2:
        raise ContractError(f"need at least 2 categories, got {categories}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_heldout = max(2, n_per_category // 4)

    train_records, normal_records, defect_records = [], [], []
    for cat in range(categories):
        name = f"cat{cat:02d}"
        for i in range(n_per_category):
            rng = np.random.default_rng(np.random.SeedSequence([seed, cat, 0, i]))
            image, masks = _render_toy(cat, resolution, rng)
            train_records.append(_write_toy_sample(out_dir, "train", name, i, image, masks))
        for i in range(n_heldout):
            rng = np.random.default_rng(np.random.SeedSequence([seed, cat, 1, i]))
            image, masks = _render_toy(cat, resolution, rng)
            normal_records.append(
                _write_toy_sample(out_dir, "heldout_normal", name, i, image, masks)
            )
        for i in range(n_heldout):
            rng = np.random.default_rng(np.random.SeedSequence([seed, cat, 2, i]))
            defect_kind = "missing" if i % 2 == 0 else "patch"
            if defect_kind == "missing":
                n_parts = len(_layout_parts(cat, resolution, np.random.default_rng(0)))
                skip = 1 + int(rng.integers(0, n_parts - 1))
                image, masks = _render_toy(cat, resolution, rng, skip_part=skip)
                gt = masks[skip]
            else:
                image, masks = _render_toy(cat, resolution, rng)
                donor_rng = np.random.default_rng(np.random.SeedSequence([seed, cat, 3, i]))
                donor, _ = _render_toy((cat + 1) % categories, resolution, donor_rng)
                side = int(round(resolution * float(rng.uniform(0.18, 0.3))))
                hi_bound = max(resolution // 4 + 1, 3 * resolution // 4 - side)
                r0 = int(rng.integers(resolution // 4, hi_bound))
                c0 = int(rng.integers(resolution // 4, hi_bound))
                sr = int(rng.integers(0, resolution - side))
                sc = int(rng.integers(0, resolution - side))
                image = image.copy()
                image[r0 : r0 + side, c0 : c0 + side] = donor[sr : sr + side, sc : sc + side]
                gt = np.zeros((resolution, resolution, 1), dtype=np.float32)
                gt[r0 : r0 + side, c0 : c0 + side] = 1.0
            defect_records.append(
                _write_toy_sample(out_dir, "heldout_defect", name, i, image, [gt])
            )

    save_manifest(DatasetManifest(records=train_records), out_dir / "manifest.tsv")
    save_manifest(DatasetManifest(records=normal_records), out_dir / "heldout_normal.tsv")
    save_manifest(DatasetManifest(records=defect_records), out_dir / "heldout_defect.tsv")
    # reload so the returned records carry resolved absolute paths, validated
    return load_manifest(out_dir / "manifest.tsv")


def toy_manifest_paths(out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "train": out_dir / "manifest.tsv",
        "heldout_normal": out_dir / "heldout_normal.tsv",
        "heldout_defect": out_dir / "heldout_defect.tsv",
    }
