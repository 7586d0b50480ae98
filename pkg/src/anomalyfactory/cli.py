"""Batch command-line interface: corpus building, staged training, generation,
detection and evaluation.

All outputs land under --out with a fixed layout: checkpoints/, logs/,
samples/ and reports/. Every command honors --seed and --config; the resolved
run configuration is persisted next to the outputs so a run can be reproduced
exactly.

Exit codes: 0 success, 2 usage or contract violation, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .augment import AugmentParams
from .datamodel import (
    DatasetManifest,
    load_image,
    load_manifest,
    load_sample,
    save_gray_png,
    save_image_png,
    save_manifest,
)
from .edgeops import StochasticShapeParams
from .errors import ContractError
from .evalmetrics import (
    EvalProtocol,
    NearestCentroidClassifier,
    cluster_lpips,
    fixed_eval_list,
    inception_score,
    perceptual_distance,
    pixel_auroc,
    write_report,
)
from .losses import LossWeights, build_feature_extractor
from .netarch import GeneratorConfig, load_checkpoint, save_checkpoint
from .trainpipe import (
    ManipulationSpec,
    StageSchedule,
    build_toy_corpus,
    default_schedule,
    detect,
    generate_anomaly,
    train_blaze,
    train_boot,
    train_flare,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


@dataclass
class RunConfig:
    """Everything a run needs; round-trips through JSON bit-for-bit."""

    manifest: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    resolution: int = 256
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_protocol: EvalProtocol = field(default_factory=EvalProtocol)
    manipulation: ManipulationSpec = field(default_factory=ManipulationSpec)
    schedules: dict[str, StageSchedule] = field(default_factory=dict)
    feature_extractor: str = "fixed-random-conv"
    per_category_cap: int | None = None

    def __post_init__(self) -> None:
        for stage in ("boot", "flare", "blaze"):
            if stage not in self.schedules:
                self.schedules[stage] = default_schedule(stage, self.resolution)

    def schedule(self, stage: str) -> StageSchedule:
        return self.schedules[stage]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["schedules"] = {k: dataclasses.asdict(v) for k, v in self.schedules.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "generator" in data:
            data["generator"] = GeneratorConfig(**data["generator"])
        if "augment" in data:
            aug = dict(data["augment"])
            for key in ("rtp_scale_range", "rtp_translate_range"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            if "flip_modes" in aug:
                aug["flip_modes"] = tuple(aug["flip_modes"])
            data["augment"] = AugmentParams(**aug)
        if "loss_weights" in data:
            lw = dict(data["loss_weights"])
            if "perceptual_layer_weights" in lw:
                lw["perceptual_layer_weights"] = tuple(lw["perceptual_layer_weights"])
            data["loss_weights"] = LossWeights(**lw)
        if "eval_protocol" in data:
            data["eval_protocol"] = EvalProtocol(**data["eval_protocol"])
        if "manipulation" in data:
            manip = dict(data["manipulation"])
            if "stochastic" in manip:
                sto = dict(manip["stochastic"])
                for key in ("primitives", "scale_range", "aspect_range", "area_band"):
                    if key in sto:
                        sto[key] = tuple(sto[key])
                manip["stochastic"] = StochasticShapeParams(**sto)
            for key in ("strategies", "count_range"):
                if key in manip:
                    manip[key] = tuple(manip[key])
            data["manipulation"] = ManipulationSpec(**manip)
        if "schedules" in data:
            data["schedules"] = {
                k: StageSchedule(**v) for k, v in data["schedules"].items()
            }
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _out_paths(out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "checkpoints": out / "checkpoints",
        "logs": out / "logs",
        "samples": out / "samples",
        "reports": out / "reports",
    }


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "out", None):
        config.out_dir = args.out
    if getattr(args, "manifest", None):
        config.manifest = args.manifest
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "resolution", None):
        config.resolution = args.resolution
        config.schedules = {
            k: dataclasses.replace(v, resolution=args.resolution)
            for k, v in config.schedules.items()
        }
    if getattr(args, "epochs", None) is not None and getattr(args, "stage", None):
        config.schedules[args.stage] = dataclasses.replace(
            config.schedules[args.stage], epochs=args.epochs
        )
    if getattr(args, "max_steps", None) is not None and getattr(args, "stage", None):
        config.schedules[args.stage] = dataclasses.replace(
            config.schedules[args.stage], max_steps=args.max_steps
        )
    return config


def _require_manifest(config: RunConfig) -> DatasetManifest:
    if not config.manifest:
        raise ContractError("a manifest is required; pass --manifest or set it in --config")
    return load_manifest(config.manifest)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_build_corpus(args) -> int:
    manifest = build_toy_corpus(
        args.out, n_per_category=args.n, categories=args.categories,
        resolution=args.resolution, seed=args.seed,
    )
    print(f"wrote {len(manifest.records)} training records "
          f"({len(manifest.categories)} categories) under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    paths = _out_paths(config.out_dir)
    manifest = _require_manifest(config)
    if config.per_category_cap:
        from .datamodel import balanced_sample

        records = balanced_sample(manifest, config.per_category_cap, config.seed)
        manifest = DatasetManifest(records=records)
    schedule = config.schedule(args.stage)
    log_path = paths["logs"] / f"{args.stage}.jsonl"
    ckpt_path = paths["checkpoints"] / f"{args.stage}.pt"
    config.save(Path(config.out_dir) / "run_config.json")

    if args.stage == "boot":
        weights = train_boot(
            manifest, schedule, config.generator, config.seed,
            aug_params=config.augment, loss_weights=config.loss_weights,
            log_path=log_path, checkpoint_dir=paths["checkpoints"],
        )
    else:
        prev_stage = "boot" if args.stage == "flare" else "flare"
        prev_path = paths["checkpoints"] / f"{prev_stage}.pt"
        if not prev_path.is_file():
            raise ContractError(
                f"stage {args.stage!r} requires a {prev_stage!r} checkpoint at {prev_path}"
            )
        prev = load_checkpoint(prev_path, expect_stage=prev_stage)
        train_fn = train_flare if args.stage == "flare" else train_blaze
        weights = train_fn(
            manifest, schedule, prev, config.seed,
            aug_params=config.augment, manip_spec=config.manipulation,
            loss_weights=config.loss_weights,
            log_path=log_path, checkpoint_dir=paths["checkpoints"],
        )
    save_checkpoint(weights, ckpt_path)
    last = _tail_log(log_path)
    print(f"stage {args.stage}: checkpoint {ckpt_path}")
    if last is not None:
        print(f"final losses: {json.dumps(last, sort_keys=True)}")
    return EXIT_OK


def _tail_log(log_path: Path) -> dict | None:
    if not log_path.is_file():
        return None
    lines = log_path.read_text().splitlines()
    return json.loads(lines[-1]) if lines else None


def _contact_sheet(rows: list[list[np.ndarray]], path: Path) -> None:
    """Stack sample rows of [normal | regions | edges | anomaly | heatmap] panels."""
    rendered = []
    for panels in rows:
        rendered.append(np.concatenate(panels, axis=1))
    sheet = np.concatenate(rendered, axis=0)
    save_image_png(sheet.clip(0.0, 1.0), path)


def _colorize_heat(heat: np.ndarray) -> np.ndarray:
    u8 = np.round(heat[..., 0] * 255.0).astype(np.uint8)
    bgr = cv2.applyColorMap(u8, cv2.COLORMAP_JET)
    return bgr[..., ::-1].astype(np.float32) / 255.0


def _colorize_labels(masks: list[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    import colorsys

    out = np.zeros((*shape, 3), dtype=np.float32)
    for k, mask in enumerate(masks):
        rgb = colorsys.hsv_to_rgb((0.17 * (k + 1)) % 1.0, 0.9, 0.9)
        out[mask[..., 0] > 0.5] = rgb
    return out.clip(0.0, 1.0)


def _gray3(single: np.ndarray) -> np.ndarray:
    return np.repeat(single, 3, axis=2)


def cmd_generate(args) -> int:
    config = _load_config(args)
    paths = _out_paths(config.out_dir)
    manifest = _require_manifest(config)
    flare = load_checkpoint(paths["checkpoints"] / "flare.pt", expect_stage="flare")
    resolution = config.schedule("flare").resolution
    rng = np.random.default_rng(config.seed)
    manip = None if args.no_edit else config.manipulation

    sheet_rows = []
    for i in range(args.count):
        idx = int(rng.integers(0, len(manifest.records)))
        image, edge, regions = load_sample(manifest.records[idx], resolution)
        donor_idx = int(rng.integers(0, len(manifest.records)))
        _, d_edge, d_regions = load_sample(manifest.records[donor_idx], resolution)
        gen_image, heat, mask = generate_anomaly(
            flare, edge, image, manip, noise_seed=int(rng.integers(0, 2**31 - 1)),
            regions=regions, donor=(d_edge, d_regions),
        )
        stem = paths["samples"] / f"gen_{i:04d}"
        save_image_png(gen_image, stem.with_suffix(".png"))
        save_gray_png(heat, Path(f"{stem}_heat.png"))
        save_gray_png(mask, Path(f"{stem}_mask.png"))
        save_gray_png(edge, Path(f"{stem}_edge.png"))
        if len(sheet_rows) < 8:
            sheet_rows.append([
                image, _colorize_labels(regions, image.shape[:2]), _gray3(edge),
                gen_image, _colorize_heat(heat),
            ])
    _contact_sheet(sheet_rows, paths["samples"] / "contact_sheet.png")
    print(f"wrote {args.count} generated samples under {paths['samples']}")
    return EXIT_OK


def cmd_detect(args) -> int:
    config = _load_config(args)
    paths = _out_paths(config.out_dir)
    manifest = _require_manifest(config)
    blaze = load_checkpoint(paths["checkpoints"] / "blaze.pt", expect_stage="blaze")
    resolution = config.schedule("blaze").resolution
    count = 0
    for i, record in enumerate(manifest.records):
        image, edge, _ = load_sample(record, resolution)
        recon, heat = detect(blaze, edge, image)
        stem = paths["samples"] / f"det_{i:04d}"
        save_image_png(recon, Path(f"{stem}_recon.png"))
        save_gray_png(heat, Path(f"{stem}_heat.png"))
        count += 1
    print(f"detected on {count} records; outputs under {paths['samples']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    paths = _out_paths(config.out_dir)
    manifest = _require_manifest(config)
    protocol = config.eval_protocol
    resolution = config.schedule("flare").resolution

    train_images, train_labels = [], []
    for record in manifest.records:
        train_images.append(load_image(record.image_path, resolution))
        train_labels.append(record.category)
    classifier = NearestCentroidClassifier().fit(train_images, train_labels)

    if args.samples:
        files = sorted(Path(args.samples).glob("*.png"))
        files = [f for f in files if not f.stem.endswith(("_heat", "_mask", "_edge"))]
        generated = [load_image(f, resolution) for f in files]
    else:
        flare = load_checkpoint(paths["checkpoints"] / "flare.pt", expect_stage="flare")
        keys = fixed_eval_list(
            [r.image_path for r in manifest.records], protocol.gen_list_size,
            protocol.fixed_seed,
        )
        (paths["reports"]).mkdir(parents=True, exist_ok=True)
        (paths["reports"] / "eval_list.txt").write_text("\n".join(keys) + "\n")
        by_path = {r.image_path: r for r in manifest.records}
        rng = np.random.default_rng(protocol.fixed_seed)
        generated = []
        for key in keys:
            image, edge, regions = load_sample(by_path[key], resolution)
            donor = by_path[keys[int(rng.integers(0, len(keys)))]]
            _, d_edge, d_regions = load_sample(donor, resolution)
            gen_image, _, _ = generate_anomaly(
                flare, edge, image, config.manipulation,
                noise_seed=int(rng.integers(0, 2**31 - 1)),
                regions=regions, donor=(d_edge, d_regions),
            )
            generated.append(gen_image)

    if len(generated) % protocol.n_groups:
        raise ContractError(
            f"{len(generated)} generated images not divisible by n_groups={protocol.n_groups}"
        )
    fx = build_feature_extractor(config.feature_extractor, seed=config.seed)
    is_mean, is_std = inception_score(generated, classifier, protocol.is_splits)
    lpips = cluster_lpips(
        generated, protocol.n_groups, lambda a, b: perceptual_distance(a, b, fx)
    )
    rows = [{
        "category": "all", "n_images": len(generated),
        "is_mean": is_mean, "is_std": is_std,
        "cluster_lpips": lpips, "cluster_lpips_x10": 10.0 * lpips,
    }]

    if args.defects:
        blaze = load_checkpoint(paths["checkpoints"] / "blaze.pt", expect_stage="blaze")
        defect_manifest = load_manifest(args.defects)
        heatmaps, gts = [], []
        for record in defect_manifest.records:
            image, edge, gt_masks = load_sample(record, resolution)
            _, heat = detect(blaze, edge, image)
            gt = gt_masks[0] if gt_masks else np.zeros_like(heat)
            heatmaps.append(heat)
            gts.append(gt)
        rows[0]["pixel_auroc"] = pixel_auroc(heatmaps, gts)

    report_path = write_report(rows, paths["reports"])
    print(f"report: {report_path}")
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomalyfactory",
        description="Edge-conditioned anomaly synthesis and localization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("build-corpus", help="render the synthetic toy corpus")
    corpus.add_argument("--out", required=True)
    corpus.add_argument("--n", type=int, default=100, help="images per category")
    corpus.add_argument("--categories", type=int, default=2)
    corpus.add_argument("--resolution", type=int, default=64)
    corpus.add_argument("--seed", type=int, default=0)
    corpus.set_defaults(fn=cmd_build_corpus)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--manifest", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--resolution", type=int, default=None)

    train = sub.add_parser("train", help="run one training stage")
    common(train)
    train.add_argument("--stage", required=True, choices=("boot", "flare", "blaze"))
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    train.set_defaults(fn=cmd_train)

    gen = sub.add_parser("generate", help="generate anomaly samples with heatmaps")
    common(gen)
    gen.add_argument("--count", type=int, default=16)
    gen.add_argument("--no-edit", action="store_true")
    gen.set_defaults(fn=cmd_generate)

    det = sub.add_parser("detect", help="run the detector over a manifest")
    common(det)
    det.set_defaults(fn=cmd_detect)

    ev = sub.add_parser("evaluate", help="compute generation/detection metrics")
    common(ev)
    ev.add_argument("--samples", default=None, help="directory of pre-generated images")
    ev.add_argument("--defects", default=None, help="manifest of defect records with GT masks")
    ev.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
