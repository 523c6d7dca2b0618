"""Four-stage training: saliency streams first, then the weakly supervised
contribution subnet on pseudo targets, then RGB fine-tuning with encoder
cross-connections, then joint end-to-end fine-tuning.

The training set is halved so the pseudo targets are formed on samples the
saliency streams never fit; forming them on the fitting half would make
the targets degenerate.
"""

from __future__ import annotations

import json
import math
import random
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import InvariantError, RgbdSample, StageOrderError
from .fusion import FUSION_MODES
from .metrics import MetricReport, evaluate_dataset
from .networks import ARCHES, BackboneConfig, ModelBundle, bce_tensor
from .pseudo_gt import PGT_MODES, build_dca_training_set


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


@dataclass
class TrainConfig:
    working_resolution: int = 224
    batch_size: int = 4
    seed: int = 0
    split_ratio: float = 0.5
    holdout_fraction: float = 0.2
    epochs_stage1: int = 15
    epochs_stage2: int = 15
    epochs_stage3: int = 5
    epochs_stage4: int = 12
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-4
    lr_stage3: float = 1e-4
    lr_stage4_start: float = 1e-4
    lr_stage4_end: float = 1e-5
    adam_betas: tuple = (0.9, 0.999)
    pgt_mode: str = "pb"
    fusion_mode: str = "omega"
    arch: str = "msf-rgbd-d"
    freeze_omega_stage4: bool = False
    backbone: str = "toy"
    backbone_channels: tuple = (16, 32, 64, 64, 64)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvariantError("batch_size must be >= 1")
        for lr in (self.lr_stage1, self.lr_stage2, self.lr_stage3,
                   self.lr_stage4_start, self.lr_stage4_end):
            if lr <= 0:
                raise InvariantError("learning rates must be positive")
        if not 0.0 < self.split_ratio < 1.0:
            raise InvariantError("split_ratio must lie in (0, 1)")
        if self.pgt_mode not in PGT_MODES:
            raise InvariantError(f"pgt_mode must be one of {PGT_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise InvariantError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.arch not in ARCHES:
            raise InvariantError(f"arch must be one of {ARCHES}")

    def make_bundle(self) -> ModelBundle:
        return ModelBundle(
            backbone=BackboneConfig(self.backbone, tuple(self.backbone_channels)),
            working_resolution=self.working_resolution,
            arch=self.arch,
            fusion_mode=self.fusion_mode,
        )


@dataclass
class SplitPlan:
    half_a: list  # sample ids used to fit the saliency streams
    half_b: list  # sample ids reserved for pseudo-target formulation
    seed: int

    def verify(self, all_ids) -> None:
        a, b = set(self.half_a), set(self.half_b)
        if a & b:
            raise InvariantError(f"split halves overlap: {sorted(a & b)}")
        if a | b != set(all_ids):
            raise InvariantError("split halves do not cover the sample set")
        if abs(len(a) - len(b)) > 1:
            raise InvariantError(
                f"split halves differ by more than one sample: {len(a)} vs {len(b)}"
            )


def split_training_set(samples, seed: int, ratio: float = 0.5) -> SplitPlan:
    """Seeded shuffle then split; half_a receives the ceiling share."""
    ids = sorted(s.id if isinstance(s, RgbdSample) else str(s) for s in samples)
    if len(ids) < 2:
        raise InvariantError(f"need at least 2 samples to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_a = math.ceil(len(order) * ratio)
    return SplitPlan(half_a=order[:n_a], half_b=order[n_a:], seed=seed)


class TrainLog:
    """Line-delimited step records; optionally mirrored to a jsonl file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._t0 = time.monotonic()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def add(self, stage: int, epoch: int, step: int, loss: float, lr: float, **extra):
        rec = {
            "stage": stage,
            "epoch": epoch,
            "step": step,
            "loss": float(loss),
            "lr": float(lr),
            "wall_time": time.monotonic() - self._t0,
            **extra,
        }
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec) + "\n")

    def stage_records(self, stage: int, **filters) -> list[dict]:
        out = []
        for r in self.records:
            if r["stage"] != stage:
                continue
            if any(r.get(k) != v for k, v in filters.items()):
                continue
            out.append(r)
        return out

    def epoch_mean_losses(self, stage: int, **filters) -> list[float]:
        per_epoch: dict[int, list[float]] = {}
        for r in self.stage_records(stage, **filters):
            per_epoch.setdefault(r["epoch"], []).append(r["loss"])
        return [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]


# ---- batch plumbing ----------------------------------------------------------


def prepare_tensors(samples, resolution: int, need_gt: bool = True):
    """Stack samples into (N,3,H,W) rgb, (N,1,H,W) depth and gt tensors."""
    rgbs, depths, gts = [], [], []
    for s in samples:
        r = s.resized(resolution, resolution)
        rgbs.append(torch.from_numpy(r.rgb.astype(np.float32)).permute(2, 0, 1))
        depths.append(torch.from_numpy(r.depth.astype(np.float32)).unsqueeze(0))
        if need_gt:
            if r.gt is None:
                raise InvariantError(f"missing GT in training sample {s.id}")
            gts.append(torch.from_numpy(r.gt.astype(np.float32)).unsqueeze(0))
    rgb = torch.stack(rgbs)
    depth = torch.stack(depths)
    gt = torch.stack(gts) if need_gt else None
    return rgb, depth, gt


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start:start + batch_size].copy())


def _batch_rng(cfg: TrainConfig, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng((cfg.seed, stage, epoch))


def _require_order(bundle: ModelBundle, stage: int) -> None:
    if stage == 1:
        if bundle.stages_done:
            raise StageOrderError(
                f"stage ordering violated: stage 1 must run on a fresh bundle, "
                f"but stages {sorted(bundle.stages_done)} are already complete"
            )
        return
    if (stage - 1) not in bundle.stages_done:
        raise StageOrderError(
            f"stage ordering violated: stage {stage} requires stage {stage - 1} "
            f"to be complete (done: {sorted(bundle.stages_done)})"
        )
    if stage in bundle.stages_done:
        raise StageOrderError(f"stage ordering violated: stage {stage} already complete")


def _warn_if_zero_epochs(stage: int, epochs: int) -> None:
    if epochs == 0:
        warnings.warn(
            f"stage {stage} configured with zero epochs; parameters unchanged",
            RuntimeWarning,
            stacklevel=3,
        )


# ---- stages ------------------------------------------------------------------


def stage1_train_subnets(bundle: ModelBundle, half_a, cfg: TrainConfig,
                         log: TrainLog | None = None) -> ModelBundle:
    """Fit the RGB stream on (rgb -> gt) and the depth stream on (depth -> gt)."""
    _require_order(bundle, 1)
    log = log or TrainLog()
    rgb, depth, gt = prepare_tensors(half_a, cfg.working_resolution)
    _warn_if_zero_epochs(1, cfg.epochs_stage1)
    bundle.train()
    for name, subnet, x in (("rgb", bundle.rgb_subnet, rgb), ("d", bundle.d_subnet, depth)):
        opt = torch.optim.Adam(subnet.parameters(), lr=cfg.lr_stage1, betas=cfg.adam_betas)
        step = 0
        for epoch in range(cfg.epochs_stage1):
            for idx in _epoch_batches(len(half_a), cfg.batch_size, _batch_rng(cfg, 1, epoch)):
                opt.zero_grad()
                pred = subnet(x[idx]).saliency
                loss = bce_tensor(pred, gt[idx])
                loss.backward()
                opt.step()
                log.add(1, epoch, step, loss.item(), cfg.lr_stage1, subnet=name)
                step += 1
    bundle.eval()
    bundle.stages_done.add(1)
    return bundle


def train_dca_on_pairs(bundle: ModelBundle, pairs, cfg: TrainConfig,
                       epochs: int | None = None, max_steps: int | None = None,
                       log: TrainLog | None = None) -> list[float]:
    """Stage-2 inner loop: fit the contribution subnet on (rgbd -> target) pairs."""
    log = log or TrainLog()
    res = cfg.working_resolution
    samples = [s for s, _ in pairs]
    rgb, depth, _ = prepare_tensors(samples, res, need_gt=False)
    x = torch.cat([rgb, depth], dim=1)
    targets = torch.stack(
        [
            torch.from_numpy(pgt.target(cfg.pgt_mode).astype(np.float32)).unsqueeze(0)
            for _, pgt in pairs
        ]
    )
    opt = torch.optim.Adam(bundle.dca_subnet.parameters(), lr=cfg.lr_stage2,
                           betas=cfg.adam_betas)
    n_epochs = epochs if epochs is not None else cfg.epochs_stage2
    if max_steps is not None and epochs is None:
        steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
        n_epochs = math.ceil(max_steps / steps_per_epoch)
    losses = []
    step = 0
    bundle.train()
    for epoch in range(n_epochs):
        for idx in _epoch_batches(len(pairs), cfg.batch_size, _batch_rng(cfg, 2, epoch)):
            if max_steps is not None and step >= max_steps:
                break
            opt.zero_grad()
            omega = bundle.dca_subnet(x[idx]).saliency
            loss = bce_tensor(omega, targets[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
            log.add(2, epoch, step, loss.item(), cfg.lr_stage2)
            step += 1
    bundle.eval()
    return losses


def stage2_train_dca(bundle: ModelBundle, half_b, cfg: TrainConfig,
                     log: TrainLog | None = None) -> ModelBundle:
    """Weakly fit the contribution subnet on pseudo targets built over half_b."""
    _require_order(bundle, 2)
    _warn_if_zero_epochs(2, cfg.epochs_stage2)
    pairs = build_dca_training_set(half_b, bundle)
    if pairs:
        train_dca_on_pairs(bundle, pairs, cfg, epochs=cfg.epochs_stage2, log=log)
    bundle.stages_done.add(2)
    return bundle


def stage3_finetune_rgb_with_cross(bundle: ModelBundle, all_train, cfg: TrainConfig,
                                   log: TrainLog | None = None) -> ModelBundle:
    """Enable encoder cross-connections (for the architectures that use them)
    and fine-tune the RGB stream; the depth stream stays frozen."""
    _require_order(bundle, 3)
    log = log or TrainLog()
    if bundle.arch.endswith("rgbd-d"):
        bundle.cross_connections_enabled = True
    rgb, depth, gt = prepare_tensors(all_train, cfg.working_resolution)
    _warn_if_zero_epochs(3, cfg.epochs_stage3)
    params = list(bundle.rgb_subnet.parameters())
    if bundle.cross_connections_enabled:
        params += list(bundle.cross.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr_stage3, betas=cfg.adam_betas)
    step = 0
    bundle.train()
    for epoch in range(cfg.epochs_stage3):
        for idx in _epoch_batches(len(all_train), cfg.batch_size, _batch_rng(cfg, 3, epoch)):
            opt.zero_grad()
            pred = bundle.rgb_stream(rgb[idx], depth[idx]).saliency
            loss = bce_tensor(pred, gt[idx])
            loss.backward()
            opt.step()
            log.add(3, epoch, step, loss.item(), cfg.lr_stage3)
            step += 1
    bundle.eval()
    bundle.stages_done.add(3)
    return bundle


def stage4_joint_finetune(bundle: ModelBundle, all_train, cfg: TrainConfig,
                          log: TrainLog | None = None) -> ModelBundle:
    """End-to-end fine-tuning of every component with the loss on the fused
    output; the learning rate decays exponentially between the configured
    endpoints."""
    _require_order(bundle, 4)
    log = log or TrainLog()
    rgb, depth, gt = prepare_tensors(all_train, cfg.working_resolution)
    _warn_if_zero_epochs(4, cfg.epochs_stage4)
    params = (
        list(bundle.rgb_subnet.parameters())
        + list(bundle.d_subnet.parameters())
        + list(bundle.msf_head.parameters())
        + list(bundle.flat_head.parameters())
        + list(bundle.concat_fusion.parameters())
    )
    if bundle.cross_connections_enabled:
        params += list(bundle.cross.parameters())
    train_omega = bundle.uses_omega() and not cfg.freeze_omega_stage4
    if train_omega:
        params += list(bundle.dca_subnet.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr_stage4_start, betas=cfg.adam_betas)
    steps_per_epoch = math.ceil(len(all_train) / cfg.batch_size)
    total_steps = cfg.epochs_stage4 * steps_per_epoch
    decay = (
        (cfg.lr_stage4_end / cfg.lr_stage4_start) ** (1.0 / (total_steps - 1))
        if total_steps > 1
        else 1.0
    )
    step = 0
    bundle.train()
    for epoch in range(cfg.epochs_stage4):
        for idx in _epoch_batches(len(all_train), cfg.batch_size, _batch_rng(cfg, 4, epoch)):
            lr = cfg.lr_stage4_start * decay ** step
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            out = bundle.fused_forward(
                rgb[idx], depth[idx], detach_omega=cfg.freeze_omega_stage4
            )
            loss = bce_tensor(out["fsal"], gt[idx])
            loss.backward()
            opt.step()
            log.add(4, epoch, step, loss.item(), lr)
            step += 1
    bundle.eval()
    bundle.stages_done.add(4)
    return bundle


# ---- orchestration -----------------------------------------------------------


def holdout_split(samples, seed: int, fraction: float):
    """Deterministic train/test carve-out by id order and a seeded shuffle."""
    ids = sorted(range(len(samples)), key=lambda i: samples[i].id)
    rng = np.random.default_rng((seed, 97))
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = int(round(fraction * len(samples)))
    test_idx = set(order[:n_test])
    train = [samples[i] for i in order[n_test:]]
    test = [samples[i] for i in order[:n_test]]
    return sorted(train, key=lambda s: s.id), sorted(test, key=lambda s: s.id)


def evaluate_bundle(bundle: ModelBundle, samples, dataset_name: str = "holdout",
                    with_omega: bool = True) -> MetricReport:
    """Run full inference and score it at the working resolution."""
    res = bundle.working_resolution
    preds, gts, omegas, dsals = {}, {}, {}, {}
    for s in samples:
        if s.gt is None:
            raise InvariantError(f"cannot evaluate sample {s.id} without GT")
        r = s.resized(res, res)
        out = bundle.predict_full(r)
        preds[s.id] = out["fsal"]
        gts[s.id] = r.gt
        if with_omega and "omega" in out:
            omegas[s.id] = out["omega"]
            dsals[s.id] = out["dsal"]
    return evaluate_dataset(
        preds, gts, dataset_name=dataset_name,
        omegas=omegas or None, dsals=dsals or None,
    )


def run_full_pipeline(samples, cfg: TrainConfig, test_samples=None,
                      run_dir=None) -> tuple[ModelBundle, MetricReport]:
    """split -> stage 1 -> stage 2 -> stage 3 -> stage 4 -> evaluation."""
    from .data import save_checkpoint  # local import to avoid a module cycle

    seed_all(cfg.seed)
    if test_samples is None:
        train, test = holdout_split(samples, cfg.seed, cfg.holdout_fraction)
    else:
        train, test = list(samples), list(test_samples)
    for s in train:
        if s.gt is None:
            raise InvariantError(f"missing GT in training sample {s.id}")
    plan = split_training_set(train, cfg.seed, cfg.split_ratio)
    plan.verify([s.id for s in train])
    by_id = {s.id: s for s in train}
    half_a = [by_id[i] for i in plan.half_a]
    half_b = [by_id[i] for i in plan.half_b]

    run_dir = Path(run_dir) if run_dir is not None else None
    log = TrainLog(run_dir / "train_log.jsonl" if run_dir else None)
    bundle = cfg.make_bundle()

    def checkpoint(stage: int):
        if run_dir is not None:
            save_checkpoint(bundle, run_dir / f"stage{stage}.ckpt")

    stage1_train_subnets(bundle, half_a, cfg, log)
    checkpoint(1)
    stage2_train_dca(bundle, half_b, cfg, log)
    checkpoint(2)
    stage3_finetune_rgb_with_cross(bundle, train, cfg, log)
    checkpoint(3)
    stage4_joint_finetune(bundle, train, cfg, log)
    checkpoint(4)

    report = evaluate_bundle(bundle, test) if test else MetricReport(
        dataset_name="holdout", sm=float("nan"), mean_f=float("nan"),
        mae=float("nan"), sample_count=0,
    )
    if run_dir is not None:
        from .metrics import reports_to_csv

        (run_dir / "metrics.csv").write_text(reports_to_csv([report]))
    return bundle, report
