"""Command-line surface: synth, pseudo-gt, train, infer, fuse, eval, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant violation.
Every command that owns an output directory writes its fully resolved
configuration there, so a run can be replayed from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .core import DataError, InvariantError, SaliencyError, StageOrderError
from .data import (
    SynthSpec,
    load_checkpoint,
    load_dataset,
    load_map,
    save_checkpoint,
    save_map,
    synthesize_dataset,
    write_dataset,
)
from .fusion import simple_fusion
from .metrics import MetricReport, evaluate_dataset, format_table, reports_to_csv
from .pseudo_gt import build_dca_training_set
from .training import (
    TrainConfig,
    TrainLog,
    evaluate_bundle,
    run_full_pipeline,
    seed_all,
    split_training_set,
    stage1_train_subnets,
    stage2_train_dca,
    stage3_finetune_rgb_with_cross,
    stage4_joint_finetune,
)

CONFIG_ENV = "DQSAL_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config_file(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    with open(p) as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise DataError(f"config file {p} must contain a key/value mapping")
    return cfg


def _write_resolved(outdir: Path, command: str, resolved: dict, outputs: list[str]):
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "resolved_config.yaml", "w") as f:
        yaml.safe_dump({"command": command, **resolved}, f, sort_keys=True)
    with open(outdir / "manifest.json", "w") as f:
        json.dump({"command": command, "outputs": sorted(outputs)}, f, indent=1)


def _read_map_dir(d: Path) -> dict:
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"map directory not found: {d}")
    maps = {p.stem: load_map(p) for p in sorted(d.iterdir()) if p.is_file()}
    if not maps:
        raise DataError(f"map directory {d} is empty")
    return maps


# ---- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.depth_mode == "mix":
        modes = {"clean": 0.5, "noisy": 0.0, "misleading": 0.25, "flat": 0.25}
    else:
        modes = {args.depth_mode: 1.0}
    spec = SynthSpec(
        seed=args.seed, n_samples=args.n, size=args.size, depth_modes=modes,
        clutter=args.clutter, contrast_range=(args.contrast_lo, args.contrast_hi),
    )
    samples = synthesize_dataset(spec)
    out = Path(args.out)
    write_dataset(samples, out, force=args.force)
    _write_resolved(
        out, "synth",
        {"spec": {**asdict(spec), "contrast_range": list(spec.contrast_range),
                  "shapes": list(spec.shapes)}},
        [f"{sub}/{s.id}.png" for s in samples for sub in ("RGB", "depth", "GT")],
    )
    print(f"wrote {len(samples)} samples to {out}")
    return 0


# ---- pseudo-gt ---------------------------------------------------------------


def cmd_pseudo_gt(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data, resolution=bundle.working_resolution)
    pairs = build_dca_training_set(samples, bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample, pgt in pairs:
        save_map(pgt.pgt, out / f"{sample.id}_pgt.png")
    _write_resolved(out, "pseudo-gt",
                    {"ckpt": str(args.ckpt), "data": str(args.data)},
                    [f"{s.id}_pgt.png" for s, _ in pairs])
    print(f"wrote {len(pairs)} pseudo targets to {out}")
    return 0


# ---- train -------------------------------------------------------------------


def _parse_stages(text: str) -> tuple[int, int]:
    try:
        if "-" in text:
            lo, hi = text.split("-", 1)
            lo, hi = int(lo), int(hi)
        else:
            lo = hi = int(text)
    except ValueError as err:
        raise UsageError(f"cannot parse --stages {text!r}: {err}") from err
    if not (1 <= lo <= hi <= 4):
        raise UsageError(f"--stages must select a range within 1-4, got {text!r}")
    return lo, hi


def _train_config(args) -> TrainConfig:
    resolved = {}
    resolved.update(_load_config_file(args.config))
    for key in (
        "working_resolution", "batch_size", "seed", "split_ratio", "holdout_fraction",
        "epochs_stage1", "epochs_stage2", "epochs_stage3", "epochs_stage4",
        "lr_stage1", "lr_stage2", "lr_stage3", "lr_stage4_start", "lr_stage4_end",
        "pgt_mode", "fusion_mode", "arch", "freeze_omega_stage4",
    ):
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    if getattr(args, "epochs", None) is not None:
        for k in ("epochs_stage1", "epochs_stage2", "epochs_stage3", "epochs_stage4"):
            resolved.setdefault(k, args.epochs)
            if getattr(args, k, None) is None:
                resolved[k] = args.epochs
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(resolved) - known
    if unknown:
        raise UsageError(f"unknown training config keys: {sorted(unknown)}")
    return TrainConfig(**resolved)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    lo, hi = _parse_stages(args.stages)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(args.data, resolution=cfg.working_resolution)
    test = (
        load_dataset(args.test_data, resolution=cfg.working_resolution)
        if args.test_data else None
    )

    outputs = ["train_log.jsonl"]
    if lo == 1 and hi == 4:
        _, report = run_full_pipeline(samples, cfg, test_samples=test, run_dir=run_dir)
        outputs += [f"stage{k}.ckpt" for k in range(1, 5)] + ["metrics.csv"]
        print(format_table([report]), end="")
    else:
        seed_all(cfg.seed)
        if lo == 1:
            bundle = cfg.make_bundle()
        else:
            ckpt = Path(args.from_ckpt) if args.from_ckpt else run_dir / f"stage{lo - 1}.ckpt"
            if not ckpt.is_file():
                raise StageOrderError(
                    f"stage ordering violated: stage {lo} needs the stage {lo - 1} "
                    f"checkpoint; run the earlier stages first or point --from-ckpt "
                    f"at an existing stage{lo - 1}.ckpt (looked for {ckpt})"
                )
            bundle = load_checkpoint(ckpt)
        log = TrainLog(run_dir / "train_log.jsonl")
        plan = split_training_set(samples, cfg.seed, cfg.split_ratio)
        by_id = {s.id: s for s in samples}
        half_a = [by_id[i] for i in plan.half_a]
        half_b = [by_id[i] for i in plan.half_b]
        runners = {
            1: lambda: stage1_train_subnets(bundle, half_a, cfg, log),
            2: lambda: stage2_train_dca(bundle, half_b, cfg, log),
            3: lambda: stage3_finetune_rgb_with_cross(bundle, samples, cfg, log),
            4: lambda: stage4_joint_finetune(bundle, samples, cfg, log),
        }
        for k in range(lo, hi + 1):
            runners[k]()
            save_checkpoint(bundle, run_dir / f"stage{k}.ckpt")
            outputs.append(f"stage{k}.ckpt")
        if 4 in bundle.stages_done and test:
            report = evaluate_bundle(bundle, test, dataset_name="test")
            (run_dir / "metrics.csv").write_text(reports_to_csv([report]))
            outputs.append("metrics.csv")
            print(format_table([report]), end="")
    _write_resolved(
        run_dir, "train",
        {"data": str(args.data), "test_data": args.test_data,
         "stages": args.stages, "config": asdict_config(cfg)},
        outputs,
    )
    return 0


def asdict_config(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    d["backbone_channels"] = list(cfg.backbone_channels)
    return d


# ---- infer -------------------------------------------------------------------


def cmd_infer(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    seed_all(args.seed if args.seed is not None else 0)
    samples = load_dataset(args.data, resolution=bundle.working_resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for s in samples:
        maps = bundle.predict_full(s)
        save_map(maps["fsal"], out / f"{s.id}.png")
        outputs.append(f"{s.id}.png")
        for flag, key in (
            (args.emit_omega, "omega"),
            (args.emit_rgbsal, "rgbsal"),
            (args.emit_dsal, "dsal"),
        ):
            if flag:
                save_map(maps[key], out / key / f"{s.id}.png")
                outputs.append(f"{key}/{s.id}.png")
    _write_resolved(out, "infer", {"ckpt": str(args.ckpt), "data": str(args.data)},
                    outputs)
    print(f"wrote {len(samples)} saliency maps to {out}")
    return 0


# ---- fuse --------------------------------------------------------------------


def cmd_fuse(args) -> int:
    omegas = _read_map_dir(args.omega_dir)
    dsals = _read_map_dir(args.dsal_dir)
    rgbsals = _read_map_dir(args.rgbsal_dir)
    ids = set(omegas)
    if ids != set(dsals) or ids != set(rgbsals):
        raise DataError(
            "fuse inputs disagree on ids: "
            f"omega={len(omegas)}, dsal={len(dsals)}, rgbsal={len(rgbsals)}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in sorted(ids):
        save_map(simple_fusion(omegas[i], dsals[i], rgbsals[i]), out / f"{i}.png")
    _write_resolved(out, "fuse",
                    {"omega_dir": str(args.omega_dir), "dsal_dir": str(args.dsal_dir),
                     "rgbsal_dir": str(args.rgbsal_dir)},
                    [f"{i}.png" for i in ids])
    print(f"wrote {len(ids)} fused maps to {out}")
    return 0


# ---- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    preds = _read_map_dir(args.pred_dir)
    gts_raw = _read_map_dir(args.gt_dir)
    gts = {k: (v > 0.5).astype(np.float64) for k, v in gts_raw.items()}
    # predictions are resampled onto the mask grid when sizes differ
    from .core import resize_map

    for k in list(preds):
        if k in gts and preds[k].shape != gts[k].shape:
            preds[k] = resize_map(preds[k], *gts[k].shape)
    omegas = dsals = None
    if args.omega_dir:
        omegas = _read_map_dir(args.omega_dir)
        for k in list(omegas):
            if k in gts and omegas[k].shape != gts[k].shape:
                omegas[k] = resize_map(omegas[k], *gts[k].shape)
    if args.dsal_dir:
        dsals = _read_map_dir(args.dsal_dir)
        for k in list(dsals):
            if k in gts and dsals[k].shape != gts[k].shape:
                dsals[k] = resize_map(dsals[k], *gts[k].shape)
    report = evaluate_dataset(
        preds, gts, dataset_name=args.dataset_name,
        omegas=omegas, dsals=dsals if omegas is not None else None,
    )
    print(format_table([report]), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(reports_to_csv([report]))
        _write_resolved(out, "eval",
                        {"pred_dir": str(args.pred_dir), "gt_dir": str(args.gt_dir),
                         "dataset_name": args.dataset_name},
                        ["metrics.csv"])
    return 0


# ---- report ------------------------------------------------------------------


def _parse_csv_reports(path: Path, run_name: str) -> list[MetricReport]:
    lines = path.read_text().strip().splitlines()
    if not lines:
        return []
    header = lines[0].split(",")
    reports = []
    for line in lines[1:]:
        cells = dict(zip(header, line.split(",")))

        def num(key):
            v = cells.get(key, "")
            return float(v) if v not in ("", None) else None

        reports.append(
            MetricReport(
                dataset_name=f"{run_name}:{cells.get('dataset', '')}",
                sm=num("sm"), mean_f=num("meanf"), mae=num("mae"),
                e_measure=num("emeasure"),
                omega1=num("omega1"), omega2=num("omega2"),
                omega1_invalid=int(cells.get("invalid_omega_n") or 0),
                sample_count=int(cells.get("n") or 0),
            )
        )
    return reports


def cmd_report(args) -> int:
    rows = []
    for run in sorted(args.run_dirs, key=lambda p: Path(p).name):
        run = Path(run)
        csv_path = run / "metrics.csv"
        if not csv_path.is_file():
            rows.append(MetricReport(dataset_name=f"{run.name}:", sm=None,
                                     mean_f=None, mae=None))
            continue
        rows.extend(_parse_csv_reports(csv_path, run.name))
    table = format_table(rows)
    print(table, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(reports_to_csv(rows))
    return 0


# ---- entry point ---------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dqsal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RGB-D dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth-mode", default="mix",
                   choices=["mix", "clean", "noisy", "misleading", "flat"])
    p.add_argument("--clutter", type=float, default=0.6)
    p.add_argument("--contrast-lo", type=float, default=0.04)
    p.add_argument("--contrast-hi", type=float, default=0.28)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pseudo-gt", help="export pseudo targets for inspection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_gt)

    p = sub.add_parser("train", help="run the staged training pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-data")
    p.add_argument("--stages", default="1-4")
    p.add_argument("--from-ckpt")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", dest="working_resolution", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    for k in range(1, 5):
        p.add_argument(f"--epochs-stage{k}", dest=f"epochs_stage{k}", type=int)
    p.add_argument("--pgt-mode", dest="pgt_mode", choices=["p", "b", "pb"])
    p.add_argument("--fusion-mode", dest="fusion_mode", choices=["add", "con", "omega"])
    p.add_argument("--arch", choices=["simple", "omega-rgb-d", "omega-rgbd-d",
                                      "msf-rgb-d", "msf-rgbd-d"])
    p.add_argument("--holdout", dest="holdout_fraction", type=float)
    p.add_argument("--freeze-omega", dest="freeze_omega_stage4", action="store_const",
                   const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run inference over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--emit-omega", action="store_true")
    p.add_argument("--emit-rgbsal", action="store_true")
    p.add_argument("--emit-dsal", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="explicit map-level fusion of saved maps")
    p.add_argument("--omega-dir", required=True)
    p.add_argument("--dsal-dir", required=True)
    p.add_argument("--rgbsal-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a directory of prediction maps")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--omega-dir")
    p.add_argument("--dsal-dir")
    p.add_argument("--dataset-name", default="dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="combine metrics from several run dirs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (StageOrderError, InvariantError) as err:
        print(f"invariant violation: {err}", file=sys.stderr)
        return 3
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except SaliencyError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
