import numpy as np
import pytest
import torch

from dqsal.core import InvariantError, StageOrderError
from dqsal.data import SynthSpec, load_checkpoint, save_checkpoint, synthesize_dataset
from dqsal.networks import ModelBundle
from dqsal.pseudo_gt import build_dca_training_set
from dqsal.training import (
    SplitPlan,
    TrainConfig,
    TrainLog,
    holdout_split,
    run_full_pipeline,
    seed_all,
    split_training_set,
    stage1_train_subnets,
    stage2_train_dca,
    stage3_finetune_rgb_with_cross,
    stage4_joint_finetune,
    train_dca_on_pairs,
)


def tiny_cfg(**kw):
    defaults = dict(
        working_resolution=16, batch_size=4, seed=1,
        epochs_stage1=1, epochs_stage2=1, epochs_stage3=1, epochs_stage4=1,
        holdout_fraction=0.25,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def tiny_samples(n=8, size=16, seed=2, modes=None):
    return synthesize_dataset(
        SynthSpec(seed=seed, n_samples=n, size=size,
                  depth_modes=modes or {"clean": 0.5, "misleading": 0.25, "flat": 0.25})
    )


def _state_clone(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _state_equal(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


class TestConfig:
    def test_validation(self):
        with pytest.raises(InvariantError):
            TrainConfig(batch_size=0)
        with pytest.raises(InvariantError):
            TrainConfig(lr_stage1=0.0)
        with pytest.raises(InvariantError):
            TrainConfig(split_ratio=1.0)
        with pytest.raises(InvariantError):
            TrainConfig(pgt_mode="x")


class TestSplit:
    def test_even_split_reproducible(self):
        ids = [f"s{i}" for i in range(10)]
        a = split_training_set(ids, seed=7)
        b = split_training_set(ids, seed=7)
        assert a == b
        assert len(a.half_a) == len(a.half_b) == 5
        assert not set(a.half_a) & set(a.half_b)
        a.verify(ids)

    def test_odd_split_sizes(self):
        plan = split_training_set([f"s{i:02d}" for i in range(11)], seed=7)
        assert (len(plan.half_a), len(plan.half_b)) == (6, 5)

    def test_seed_changes_plan_regression(self):
        ids = [f"s{i}" for i in range(10)]
        assert split_training_set(ids, seed=7).half_a == ["s8", "s0", "s7", "s1", "s3"]
        assert split_training_set(ids, seed=8).half_a == ["s0", "s7", "s3", "s6", "s9"]

    def test_too_few_samples(self):
        with pytest.raises(InvariantError, match="at least 2"):
            split_training_set(["only"], seed=0)

    def test_verify_rejects_overlap(self):
        plan = SplitPlan(half_a=["a", "b"], half_b=["b", "c"], seed=0)
        with pytest.raises(InvariantError, match="overlap"):
            plan.verify(["a", "b", "c"])


class TestStageOrdering:
    def test_stage1_requires_fresh_bundle(self):
        bundle = ModelBundle(working_resolution=16)
        bundle.stages_done.add(1)
        with pytest.raises(StageOrderError, match="fresh"):
            stage1_train_subnets(bundle, tiny_samples(4), tiny_cfg())

    def test_later_stages_require_predecessor(self):
        samples = tiny_samples(4)
        cfg = tiny_cfg()
        bundle = ModelBundle(working_resolution=16)
        with pytest.raises(StageOrderError):
            stage2_train_dca(bundle, samples, cfg)
        with pytest.raises(StageOrderError):
            stage3_finetune_rgb_with_cross(bundle, samples, cfg)
        with pytest.raises(StageOrderError):
            stage4_joint_finetune(bundle, samples, cfg)

    def test_stage_cannot_rerun(self):
        samples = tiny_samples(4)
        cfg = tiny_cfg(epochs_stage1=0, epochs_stage2=0)
        bundle = ModelBundle(working_resolution=16)
        with pytest.warns(RuntimeWarning):
            stage1_train_subnets(bundle, samples, cfg)
        with pytest.warns(RuntimeWarning):
            stage2_train_dca(bundle, samples, cfg)
        with pytest.raises(StageOrderError, match="already complete"):
            stage2_train_dca(bundle, samples, cfg)


class TestStage1:
    def test_zero_epochs_warns_but_flags(self):
        bundle = ModelBundle(working_resolution=16)
        before = _state_clone(bundle)
        with pytest.warns(RuntimeWarning, match="zero epochs"):
            stage1_train_subnets(bundle, tiny_samples(4), tiny_cfg(epochs_stage1=0))
        assert 1 in bundle.stages_done
        assert _state_equal(before, _state_clone(bundle))

    def test_steps_per_epoch_arithmetic(self):
        bundle = ModelBundle(working_resolution=16)
        log = TrainLog()
        cfg = tiny_cfg(epochs_stage1=2)
        stage1_train_subnets(bundle, tiny_samples(20), cfg, log)
        rgb_records = log.stage_records(1, subnet="rgb")
        assert len(rgb_records) == 2 * 5  # ceil(20 / 4) steps per epoch

    def test_loss_decreases(self):
        seed_all(0)
        bundle = ModelBundle(working_resolution=16)
        log = TrainLog()
        cfg = tiny_cfg(epochs_stage1=6, lr_stage1=1e-3, seed=3)
        stage1_train_subnets(bundle, tiny_samples(12), cfg, log)
        for name in ("rgb", "d"):
            means = log.epoch_mean_losses(1, subnet=name)
            assert means[-1] < means[0]


class TestStage2:
    def _stage1_bundle(self, samples, cfg):
        seed_all(cfg.seed)
        bundle = ModelBundle(working_resolution=cfg.working_resolution)
        stage1_train_subnets(bundle, samples, cfg)
        return bundle

    def test_p_mode_targets_supported_only_on_mask(self):
        samples = tiny_samples(6)
        cfg = tiny_cfg(pgt_mode="p")
        bundle = self._stage1_bundle(samples[:3], cfg)
        pairs = build_dca_training_set(samples[3:], bundle)
        for s, pgt in pairs:
            assert np.all(pgt.target("p")[s.gt == 0.0] == 0.0)

    def test_loss_decreases(self):
        samples = tiny_samples(8, seed=5)
        cfg = tiny_cfg(epochs_stage2=8, lr_stage2=1e-3)
        bundle = self._stage1_bundle(samples[:4], cfg)
        log = TrainLog()
        stage2_train_dca(bundle, samples[4:], cfg, log)
        means = log.epoch_mean_losses(2)
        assert means[-1] < means[0]
        assert 2 in bundle.stages_done

    def test_max_steps_cap(self):
        samples = tiny_samples(8, seed=6)
        cfg = tiny_cfg()
        bundle = self._stage1_bundle(samples[:4], cfg)
        pairs = build_dca_training_set(samples[4:], bundle)
        losses = train_dca_on_pairs(bundle, pairs, cfg, max_steps=3)
        assert len(losses) == 3


def _bundle_through(samples, cfg, upto):
    seed_all(cfg.seed)
    bundle = ModelBundle(
        working_resolution=cfg.working_resolution, arch=cfg.arch,
        fusion_mode=cfg.fusion_mode,
    )
    plan = split_training_set(samples, cfg.seed)
    by_id = {s.id: s for s in samples}
    half_a = [by_id[i] for i in plan.half_a]
    half_b = [by_id[i] for i in plan.half_b]
    stage1_train_subnets(bundle, half_a, cfg)
    if upto >= 2:
        stage2_train_dca(bundle, half_b, cfg)
    if upto >= 3:
        stage3_finetune_rgb_with_cross(bundle, samples, cfg)
    return bundle


class TestStage3:
    def test_enables_cross_and_freezes_depth_stream(self):
        samples = tiny_samples(8, seed=7)
        cfg = tiny_cfg()
        bundle = _bundle_through(samples, cfg, upto=2)
        d_state = _state_clone(bundle.d_subnet)
        assert not bundle.cross_connections_enabled
        stage3_finetune_rgb_with_cross(bundle, samples, cfg)
        assert bundle.cross_connections_enabled
        assert 3 in bundle.stages_done
        assert _state_equal(d_state, _state_clone(bundle.d_subnet))

    def test_no_cross_for_rgb_d_arch(self):
        samples = tiny_samples(8, seed=8)
        cfg = tiny_cfg(arch="msf-rgb-d")
        bundle = _bundle_through(samples, cfg, upto=2)
        stage3_finetune_rgb_with_cross(bundle, samples, cfg)
        assert not bundle.cross_connections_enabled

    def test_loss_decreases(self):
        samples = tiny_samples(8, seed=9)
        cfg = tiny_cfg(epochs_stage3=6, lr_stage3=1e-3)
        bundle = _bundle_through(samples, cfg, upto=2)
        log = TrainLog()
        stage3_finetune_rgb_with_cross(bundle, samples, cfg, log)
        means = log.epoch_mean_losses(3)
        assert means[-1] < means[0]


class TestStage4:
    def test_lr_schedule_endpoints(self):
        samples = tiny_samples(8, seed=10)
        cfg = tiny_cfg(epochs_stage4=3)
        bundle = _bundle_through(samples, cfg, upto=3)
        log = TrainLog()
        stage4_joint_finetune(bundle, samples, cfg, log)
        lrs = [r["lr"] for r in log.stage_records(4)]
        assert lrs[0] == pytest.approx(cfg.lr_stage4_start, rel=1e-12)
        assert lrs[-1] == pytest.approx(cfg.lr_stage4_end, rel=1e-12)
        # exponential decay: constant ratio between consecutive steps
        ratios = [b / a for a, b in zip(lrs, lrs[1:])]
        assert max(ratios) - min(ratios) < 1e-9

    def test_output_range_and_flag(self):
        samples = tiny_samples(8, seed=11)
        cfg = tiny_cfg()
        bundle = _bundle_through(samples, cfg, upto=3)
        stage4_joint_finetune(bundle, samples, cfg)
        assert 4 in bundle.stages_done
        out = bundle.predict_full(samples[0])
        assert out["fsal"].min() >= 0.0 and out["fsal"].max() <= 1.0

    def test_frozen_omega_leaves_dca_unchanged(self):
        samples = tiny_samples(8, seed=12)
        cfg = tiny_cfg(freeze_omega_stage4=True)
        bundle = _bundle_through(samples, cfg, upto=3)
        dca_state = _state_clone(bundle.dca_subnet)
        stage4_joint_finetune(bundle, samples, cfg)
        assert _state_equal(dca_state, _state_clone(bundle.dca_subnet))

    def test_live_omega_updates_dca(self):
        samples = tiny_samples(8, seed=13)
        cfg = tiny_cfg(epochs_stage4=2, lr_stage4_start=1e-3, lr_stage4_end=1e-4)
        bundle = _bundle_through(samples, cfg, upto=3)
        dca_state = _state_clone(bundle.dca_subnet)
        stage4_joint_finetune(bundle, samples, cfg)
        assert not _state_equal(dca_state, _state_clone(bundle.dca_subnet))

    def test_checkpoint_round_trip_mid_pipeline(self, tmp_path):
        samples = tiny_samples(8, seed=14)
        cfg = tiny_cfg()
        bundle = _bundle_through(samples, cfg, upto=3)
        p = tmp_path / "mid.ckpt"
        save_checkpoint(bundle, p)
        loaded = load_checkpoint(p)
        a = bundle.predict_full(samples[0])
        b = loaded.predict_full(samples[0])
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        stage4_joint_finetune(loaded, samples, cfg)
        assert 4 in loaded.stages_done


class TestPipeline:
    def test_missing_gt_rejected_before_training(self):
        samples = tiny_samples(6)
        samples[2].gt = None
        with pytest.raises(InvariantError, match="missing GT"):
            run_full_pipeline(samples, tiny_cfg())

    def test_holdout_split_deterministic(self):
        samples = tiny_samples(8)
        a = holdout_split(samples, seed=1, fraction=0.25)
        b = holdout_split(samples, seed=1, fraction=0.25)
        assert [s.id for s in a[0]] == [s.id for s in b[0]]
        assert [s.id for s in a[1]] == [s.id for s in b[1]]
        assert len(a[1]) == 2

    def test_same_seed_same_report_and_losses(self, tmp_path):
        samples = tiny_samples(8, seed=15)
        cfg = tiny_cfg(seed=4)
        _, rep1 = run_full_pipeline(samples, cfg, run_dir=tmp_path / "a")
        _, rep2 = run_full_pipeline(samples, cfg, run_dir=tmp_path / "b")
        assert rep1.sm == rep2.sm
        assert rep1.mean_f == rep2.mean_f
        assert rep1.mae == rep2.mae
        import json

        def losses(d):
            return [json.loads(line)["loss"]
                    for line in (d / "train_log.jsonl").read_text().splitlines()]

        assert losses(tmp_path / "a") == losses(tmp_path / "b")

    def test_run_dir_artifacts(self, tmp_path):
        samples = tiny_samples(8, seed=16)
        bundle, report = run_full_pipeline(samples, tiny_cfg(), run_dir=tmp_path)
        for k in range(1, 5):
            assert (tmp_path / f"stage{k}.ckpt").is_file()
        assert (tmp_path / "train_log.jsonl").is_file()
        assert (tmp_path / "metrics.csv").is_file()
        assert bundle.stages_done == {1, 2, 3, 4}
        assert report.sample_count == 2
