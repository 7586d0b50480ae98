import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

import anomalyfactory.trainpipe as trainpipe
from anomalyfactory.datamodel import load_manifest, load_sample
from anomalyfactory.errors import ContractError, NumericalError
from anomalyfactory.netarch import GeneratorConfig, StageWeights
from anomalyfactory.trainpipe import (
    ManipulationSpec,
    StageSchedule,
    build_manipulation_cases,
    build_toy_corpus,
    default_schedule,
    detect,
    generate_anomaly,
    linear_lr,
    plan_manipulation,
    read_loss_log,
    toy_manifest_paths,
    train_blaze,
    train_boot,
    train_flare,
)

TINY = GeneratorConfig(base_channels=8, channel_cap_mult=2, noise_dim=8, disc_layers=2)


def _tiny_schedule(stage, steps, batch=4, tps=None):
    return StageSchedule(
        stage, epochs=1000, batch_size=batch, resolution=64,
        use_local_tps=(stage == "boot") if tps is None else tps, max_steps=steps,
    )


class TestSchedules:
    def test_boot_defaults(self):
        sched = default_schedule("boot")
        assert (sched.epochs, sched.batch_size, sched.resolution) == (30, 32, 256)
        assert sched.lr == 2e-4
        assert sched.use_local_tps

    @pytest.mark.parametrize("stage", ["flare", "blaze"])
    def test_later_stage_defaults(self, stage):
        sched = default_schedule(stage)
        assert sched.epochs == 5
        assert not sched.use_local_tps

    def test_linear_lr_trajectory(self):
        total = 40
        values = [linear_lr(2e-4, t, total) for t in range(total)]
        assert values[0] == 2e-4
        diffs = np.diff(values)
        assert np.allclose(diffs, diffs[0])
        assert values[-1] == pytest.approx(2e-4 / total)


class TestToyCorpus:
    def test_counts_and_validation(self, toy_corpus):
        out, manifest = toy_corpus
        assert len(manifest.records) == 12
        assert manifest.categories == ["cat00", "cat01"]
        paths = toy_manifest_paths(out)
        assert all(p.is_file() for p in paths.values())

    def test_defect_ground_truth_nonempty(self, toy_corpus):
        out, _ = toy_corpus
        defects = load_manifest(toy_manifest_paths(out)["heldout_defect"])
        assert len(defects.records) > 0
        for record in defects.records:
            _, _, masks = load_sample(record, 64)
            assert masks and masks[0].sum() > 0

    def test_rebuild_is_bitwise_identical(self, toy_corpus, tmp_path):
        out, _ = toy_corpus
        rebuilt = tmp_path / "again"
        build_toy_corpus(rebuilt, n_per_category=6, categories=2, resolution=64, seed=7)
        for original in sorted(Path(out).rglob("*.png")):
            twin = rebuilt / original.relative_to(out)
            assert twin.is_file()
            assert (
                hashlib.sha256(original.read_bytes()).hexdigest()
                == hashlib.sha256(twin.read_bytes()).hexdigest()
            ), original


class TestStageContracts:
    def test_zero_epochs_returns_untouched_init(self, toy_corpus):
        _, manifest = toy_corpus
        sched = StageSchedule("boot", epochs=0, batch_size=4, resolution=64)
        weights = train_boot(manifest, sched, TINY, seed=5)
        fresh = StageWeights.initialize("boot", TINY, seed=5)
        assert weights.fingerprint() == fresh.fingerprint()

    def test_schedule_stage_mismatch(self, toy_corpus):
        _, manifest = toy_corpus
        with pytest.raises(ContractError):
            train_boot(manifest, _tiny_schedule("flare", 1), TINY, seed=0)

    def test_flare_requires_boot_weights(self, toy_corpus):
        _, manifest = toy_corpus
        not_boot = StageWeights.initialize("flare", TINY, seed=0)
        with pytest.raises(ContractError):
            train_flare(manifest, _tiny_schedule("flare", 1), not_boot, seed=0)

    def test_blaze_requires_flare_weights(self, toy_corpus):
        _, manifest = toy_corpus
        not_flare = StageWeights.initialize("boot", TINY, seed=0)
        with pytest.raises(ContractError):
            train_blaze(manifest, _tiny_schedule("blaze", 1), not_flare, seed=0)

    def test_non_finite_loss_aborts_with_checkpoint(self, toy_corpus, tmp_path, monkeypatch):
        _, manifest = toy_corpus

        def poisoned(*args, **kwargs):
            return {"l_perc": float("nan"), "d_obj": 0.0, "g_adv": 0.0, "l_heat": None}

        monkeypatch.setattr(trainpipe, "_gan_step", poisoned)
        with pytest.raises(NumericalError):
            train_boot(manifest, _tiny_schedule("boot", 2), TINY, seed=0,
                       checkpoint_dir=tmp_path)
        assert (tmp_path / "boot_abort.pt").is_file()


class TestShortRuns:
    def test_boot_deterministic_loss_log(self, toy_corpus, tmp_path):
        _, manifest = toy_corpus
        logs = []
        for run in range(2):
            log = tmp_path / f"boot_{run}.jsonl"
            train_boot(manifest, _tiny_schedule("boot", 6), TINY, seed=11, log_path=log)
            logs.append(log.read_bytes())
        assert logs[0] == logs[1]

    def test_lr_logged_exactly_linear(self, toy_corpus, tmp_path):
        _, manifest = toy_corpus
        log = tmp_path / "boot.jsonl"
        sched = _tiny_schedule("boot", 5)
        train_boot(manifest, sched, TINY, seed=1, log_path=log)
        rows = read_loss_log(log)
        assert len(rows) == 5
        for row in rows:
            assert row["lr"] == linear_lr(sched.lr, row["step"], 5)

    def test_teachers_stay_frozen_and_stages_chain(self, toy_corpus, tmp_path):
        _, manifest = toy_corpus
        boot = train_boot(manifest, _tiny_schedule("boot", 4), TINY, seed=2)
        boot_print = boot.fingerprint()
        flare = train_flare(manifest, _tiny_schedule("flare", 4), boot, seed=2,
                            log_path=tmp_path / "flare.jsonl")
        assert boot.fingerprint() == boot_print  # frozen teacher
        assert flare.stage == "flare"
        flare_print = flare.fingerprint()
        blaze = train_blaze(manifest, _tiny_schedule("blaze", 4), flare, seed=2,
                            log_path=tmp_path / "blaze.jsonl")
        assert flare.fingerprint() == flare_print
        assert blaze.stage == "blaze"
        # unification: all three stages share one architecture signature
        assert boot.parameter_shapes() == flare.parameter_shapes() == blaze.parameter_shapes()
        rows = read_loss_log(tmp_path / "flare.jsonl")
        assert all(row["l_heat"] is not None for row in rows)

    def test_boot_smoothed_loss_decreases_over_200_steps(self, toy_corpus, tmp_path):
        _, manifest = toy_corpus
        log = tmp_path / "boot200.jsonl"
        train_boot(manifest, _tiny_schedule("boot", 200), TINY, seed=3, log_path=log)
        l_g = [row["l_perc"] for row in read_loss_log(log)]
        window = 20
        first = float(np.mean(l_g[:window]))
        last = float(np.mean(l_g[-window:]))
        assert last < first, f"smoothed L_G did not decrease: {first} -> {last}"


class TestGenerateAndDetect:
    def _flare_and_sample(self, toy_corpus):
        _, manifest = toy_corpus
        weights = StageWeights.initialize("flare", TINY, seed=4)
        image, edge, regions = load_sample(manifest.records[0], 64)
        return weights, image, edge, regions

    def test_no_edit_yields_zero_mask(self, toy_corpus):
        weights, image, edge, _ = self._flare_and_sample(toy_corpus)
        gen, heat, mask = generate_anomaly(weights, edge, image, None, noise_seed=0)
        assert np.array_equal(mask, np.zeros_like(mask))
        assert gen.shape == image.shape
        assert heat.shape == (64, 64, 1)

    def test_shapes_and_determinism(self, toy_corpus):
        weights, image, edge, regions = self._flare_and_sample(toy_corpus)
        spec = ManipulationSpec()
        a = generate_anomaly(weights, edge, image, spec, noise_seed=9, regions=regions)
        b = generate_anomaly(weights, edge, image, spec, noise_seed=9, regions=regions)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        assert a[2].sum() > 0  # an edit happened

    def test_generate_requires_flare(self, toy_corpus):
        _, manifest = toy_corpus
        image, edge, _ = load_sample(manifest.records[0], 64)
        boot = StageWeights.initialize("boot", TINY, seed=0)
        with pytest.raises(ContractError):
            generate_anomaly(boot, edge, image, None, noise_seed=0)

    def test_detect_contract(self, toy_corpus):
        _, manifest = toy_corpus
        image, edge, _ = load_sample(manifest.records[0], 64)
        blaze = StageWeights.initialize("blaze", TINY, seed=1)
        recon_a, heat_a = detect(blaze, edge, image)
        recon_b, heat_b = detect(blaze, edge, image)
        assert recon_a.shape == image.shape
        assert heat_a.shape == (64, 64, 1)
        assert np.array_equal(recon_a, recon_b)
        assert np.array_equal(heat_a, heat_b)
        boot = StageWeights.initialize("boot", TINY, seed=2)
        with pytest.raises(ContractError):
            detect(boot, edge, image)


class TestManipulationPlanning:
    def test_disabled_spec_is_identity(self, toy_corpus):
        _, manifest = toy_corpus
        image, edge, regions = load_sample(manifest.records[0], 64)
        edited, mask = plan_manipulation(
            edge, regions, None, ManipulationSpec(enabled=False), seed=0
        )
        assert np.array_equal(edited, edge)
        assert mask.sum() == 0

    def test_without_donor_falls_back_to_remove(self, toy_corpus):
        _, manifest = toy_corpus
        image, edge, regions = load_sample(manifest.records[0], 64)
        spec = ManipulationSpec(strategies=("replace", "merge"))
        for seed in range(5):
            edited, mask = plan_manipulation(edge, regions, None, spec, seed=seed)
            inside = mask[..., 0] > 0.5
            assert np.all(edited[inside] == 0.0)  # remove semantics

    def test_heldout_cases_deterministic(self, toy_corpus):
        _, manifest = toy_corpus
        a = build_manipulation_cases(manifest, 64, ManipulationSpec(), n=4, seed=5)
        b = build_manipulation_cases(manifest, 64, ManipulationSpec(), n=4, seed=5)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.edited_edge, cb.edited_edge)
            assert np.array_equal(ca.mask, cb.mask)
