"""Dataset loading, synthetic scene generation, and persistence.

Disk layout for a dataset split::

    root/
      RGB/<id>.png     8-bit color
      depth/<id>.png   8- or 16-bit grayscale, min-max normalized at load
      GT/<id>.png      8-bit grayscale, binarized at 127.5 (optional dir)
      meta.json        optional {"<id>": {"depth_mode": ...}}

Synthetic scenes render a single salient object over a cluttered
background; the depth channel is generated per a quality mode so that
depth is sometimes decisive, sometimes useless, and sometimes actively
wrong. Object color contrast is drawn from a range that keeps the RGB
stream learnable but imperfect, which keeps the depth channel relevant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import DataError, InvariantError, RgbdSample, as_scalar_map
from .networks import BackboneConfig, ModelBundle

DEPTH_MODES = ("clean", "noisy", "misleading", "flat")
CKPT_VERSION = 1


class CheckpointError(DataError):
    pass


# ---- map persistence ---------------------------------------------------------


def save_map(m, path) -> None:
    """Write a [0, 1] map as an 8-bit grayscale PNG."""
    arr = as_scalar_map(m)
    img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        img.save(path)
    except OSError as err:
        raise DataError(f"failed to write map {path}: {err}") from err


def load_map(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as err:
        raise DataError(f"failed to read map {path}: {err}") from err
    return arr / 255.0


# ---- dataset loading ---------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    split: str | None
    entries: list  # of {"id", "rgb_path", "depth_path", "gt_path"}
    resolution: int | None = None


def normalize_depth(arr: np.ndarray) -> np.ndarray:
    """Per-image min-max normalization; constant maps become 0.5."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.full_like(arr, 0.5)
    return (arr - lo) / (hi - lo)


def _read_image(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, ValueError) as err:
        raise DataError(f"undecodable image {path}: {err}") from err


def scan_dataset(root, split: str | None = None) -> DatasetManifest:
    """Enumerate a dataset directory; entry order is lexicographic by id."""
    base = Path(root)
    if split is not None and (base / split).is_dir():
        base = base / split
    rgb_dir, depth_dir, gt_dir = base / "RGB", base / "depth", base / "GT"
    if not rgb_dir.is_dir() or not depth_dir.is_dir():
        raise DataError(f"dataset root {base} must contain RGB/ and depth/ subfolders")
    has_gt = gt_dir.is_dir()

    def stems(d: Path) -> dict:
        return {p.stem: p for p in sorted(d.iterdir()) if p.is_file()}

    rgb_files = stems(rgb_dir)
    depth_files = stems(depth_dir)
    gt_files = stems(gt_dir) if has_gt else {}
    entries = []
    for stem in sorted(rgb_files):
        if stem not in depth_files:
            raise DataError(f"missing depth counterpart for stem {stem!r}")
        if has_gt and stem not in gt_files:
            raise DataError(f"missing GT counterpart for stem {stem!r}")
        entries.append(
            {
                "id": stem,
                "rgb_path": rgb_files[stem],
                "depth_path": depth_files[stem],
                "gt_path": gt_files.get(stem),
            }
        )
    for stem in depth_files:
        if stem not in rgb_files:
            raise DataError(f"missing RGB counterpart for stem {stem!r}")
    return DatasetManifest(root=base, split=split, entries=entries)


def load_dataset(root, split: str | None = None, resolution: int | None = None):
    """Load every sample of a split: decode, normalize depth, binarize GT,
    and resize to the working resolution when one is given."""
    manifest = scan_dataset(root, split)
    meta_path = manifest.root / "meta.json"
    meta = {}
    if meta_path.is_file():
        with open(meta_path) as f:
            meta = json.load(f)
    samples = []
    for entry in manifest.entries:
        with _read_image(entry["rgb_path"]) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        with _read_image(entry["depth_path"]) as img:
            if img.mode in ("I", "I;16", "I;16B", "I;16L"):
                depth_raw = np.asarray(img, dtype=np.float64)
            else:
                depth_raw = np.asarray(img.convert("L"), dtype=np.float64)
        depth = normalize_depth(depth_raw)
        gt = None
        if entry["gt_path"] is not None:
            with _read_image(entry["gt_path"]) as img:
                gt_raw = np.asarray(img.convert("L"), dtype=np.float64)
            gt = (gt_raw > 127.5).astype(np.float64)
        sample = RgbdSample(
            id=entry["id"], rgb=rgb, depth=depth, gt=gt,
            meta=dict(meta.get(entry["id"], {})),
        )
        if resolution is not None:
            sample = sample.resized(resolution, resolution)
        samples.append(sample)
    return samples


def write_dataset(samples, root, force: bool = False, with_meta: bool = True) -> None:
    """Write samples in the standard layout; refuses non-empty targets."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"target directory {root} is not empty (use force to overwrite)")
    for sub in ("RGB", "depth", "GT"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    meta = {}
    for s in samples:
        rgb8 = np.round(s.rgb * 255.0).astype(np.uint8)
        Image.fromarray(rgb8, mode="RGB").save(root / "RGB" / f"{s.id}.png")
        save_map(s.depth, root / "depth" / f"{s.id}.png")
        if s.gt is None:
            raise DataError(f"sample {s.id} has no GT mask; cannot write GT folder")
        save_map(s.gt, root / "GT" / f"{s.id}.png")
        if s.meta:
            meta[s.id] = s.meta
    if with_meta and meta:
        with open(root / "meta.json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)


# ---- synthetic scenes --------------------------------------------------------


@dataclass
class SynthSpec:
    seed: int = 0
    n_samples: int = 50
    size: int = 64
    depth_modes: dict = field(
        default_factory=lambda: {"clean": 0.25, "noisy": 0.25, "misleading": 0.25, "flat": 0.25}
    )
    shapes: tuple = ("rect", "ellipse", "polygon")
    clutter: float = 1.3
    contrast_range: tuple = (0.04, 0.28)
    object_frac: tuple = (0.34, 0.58)  # object area as a fraction of the canvas
    decoy_frac: tuple = (0.08, 0.18)   # misleading-depth blob area fraction

    def __post_init__(self):
        total = sum(self.depth_modes.values())
        if abs(total - 1.0) > 1e-9:
            raise InvariantError(f"depth_mode proportions must sum to 1, got {total}")
        for mode in self.depth_modes:
            if mode not in DEPTH_MODES:
                raise InvariantError(f"unknown depth mode {mode!r}; expected {DEPTH_MODES}")
        if self.n_samples < 0 or self.size < 8:
            raise InvariantError("n_samples must be >= 0 and size >= 8")


def _mode_assignment(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    modes = [m for m in DEPTH_MODES if spec.depth_modes.get(m, 0.0) > 0.0]
    counts = {m: int(math.floor(spec.depth_modes[m] * spec.n_samples)) for m in modes}
    seq = [m for m in modes for _ in range(counts[m])]
    while len(seq) < spec.n_samples:  # rounding remainder goes to the largest share
        seq.append(max(modes, key=lambda m: spec.depth_modes[m]))
    rng.shuffle(seq)
    return seq


def _ramp(size: int, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * math.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    g = math.cos(theta) * xs + math.sin(theta) * ys
    return normalize_depth(g)


def _shape_mask(size: int, shape: str, rng: np.random.Generator,
                frac: float = 0.12) -> np.ndarray:
    # half-extent from the requested area fraction, clamped to fit the canvas
    r = min(size * math.sqrt(frac) / 1.6, size / 2.0 - 2.0)
    cx = rng.uniform(r + 1, size - r - 1)
    cy = rng.uniform(r + 1, size - r - 1)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "rect":
        rx = r * rng.uniform(0.6, 1.0)
        ry = r * rng.uniform(0.6, 1.0)
        return ((np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)).astype(np.float64)
    if shape == "ellipse":
        rx = r * rng.uniform(0.6, 1.0)
        ry = r * rng.uniform(0.6, 1.0)
        return ((((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2) <= 1.0).astype(np.float64)
    # convex polygon: 5-7 vertices at jittered angles, inside = all half-planes
    k = int(rng.integers(5, 8))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
    radii = r * rng.uniform(0.65, 1.0, size=k)
    vx = cx + radii * np.cos(angles)
    vy = cy + radii * np.sin(angles)
    inside = np.ones((size, size), dtype=bool)
    for i in range(k):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % k], vy[(i + 1) % k]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= 0.0
    if not inside.any():  # degenerate vertex order; fall back to a disc
        return (((xs - cx) ** 2 + (ys - cy) ** 2) <= r * r).astype(np.float64)
    return inside.astype(np.float64)


def _box_blur(a: np.ndarray, passes: int = 1) -> np.ndarray:
    out = a
    for _ in range(passes):
        p = np.pad(out, 1, mode="edge")
        out = (
            p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
            + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
            + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
        ) / 9.0
    return out


def _clean_depth(mask: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    bg = 0.10 + 0.20 * _ramp(size, rng)
    fg = 0.70 + 0.22 * _ramp(size, rng)
    return np.where(mask > 0.5, fg, bg)


def _disjoint_mask(size: int, spec: "SynthSpec", avoid: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """A small blob dodging an existing one; leftover overlap is carved out."""
    best, best_overlap = None, None
    for _ in range(12):
        shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        cand = _shape_mask(size, shape, rng, frac=rng.uniform(*spec.decoy_frac))
        overlap = float((cand * avoid).sum() / max(cand.sum(), 1.0))
        if best is None or overlap < best_overlap:
            best, best_overlap = cand, overlap
        if overlap < 0.05:
            break
    return best * (1.0 - avoid)


def _synth_one(spec: SynthSpec, mode: str, rng: np.random.Generator, sample_id: str) -> RgbdSample:
    size = spec.size
    # background: gentle two-color gradient
    c0 = rng.uniform(0.15, 0.85, size=3)
    c1 = np.clip(c0 + rng.uniform(-0.25, 0.25, size=3), 0.0, 1.0)
    g = _ramp(size, rng)[:, :, None]
    rgb = c0[None, None, :] * (1.0 - g) + c1[None, None, :] * g

    # the object color sits at a controlled, often small, distance from the
    # background, so the RGB stream stays learnable but imperfect
    mask = _shape_mask(
        size, spec.shapes[int(rng.integers(0, len(spec.shapes)))], rng,
        frac=rng.uniform(*spec.object_frac),
    )
    contrast = rng.uniform(*spec.contrast_range)
    bg_mean = rgb[mask > 0.5].mean(axis=0)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction) + 1e-12
    obj_color = np.clip(bg_mean + contrast * direction, 0.0, 1.0)
    rgb = np.where(mask[:, :, None] > 0.5, obj_color[None, None, :], rgb)

    # clutter blobs add RGB false-alarm material; some reuse the object color
    n_blob = int(round(spec.clutter * rng.integers(1, 6)))
    for _ in range(n_blob):
        blob = _shape_mask(size, "ellipse", rng, frac=rng.uniform(0.02, 0.08))
        blob = blob * (1.0 - mask)
        if rng.uniform() < 0.65:
            color = np.clip(obj_color + rng.normal(scale=0.08, size=3), 0.0, 1.0)
        else:
            color = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.5, 0.95)
        rgb = np.where(
            blob[:, :, None] > 0.5,
            (1.0 - alpha) * rgb + alpha * color[None, None, :],
            rgb,
        )
    rgb = np.clip(rgb + rng.normal(scale=0.02, size=rgb.shape), 0.0, 1.0)

    if mode == "clean":
        depth = _clean_depth(mask, size, rng)
    elif mode == "noisy":
        # lightly degraded sensing at the true object
        depth = _clean_depth(mask, size, rng)
        depth = depth + rng.normal(scale=0.10, size=depth.shape)
        depth = _box_blur(np.clip(depth, 0.0, 1.0), passes=1)
    elif mode == "misleading":
        # visibly low-quality: a heavily smeared blob at an unrelated
        # location, uncorrelated with the object
        decoy = _disjoint_mask(size, spec, mask, rng)
        depth = _clean_depth(decoy, size, rng)
        depth = depth + rng.normal(scale=0.22, size=depth.shape)
        depth = _box_blur(np.clip(depth, 0.0, 1.0), passes=2)
    elif mode == "flat":
        depth = np.full((size, size), rng.uniform(0.25, 0.75))
    else:
        raise InvariantError(f"unknown depth mode {mode!r}")
    depth = normalize_depth(depth)

    if mode == "clean":
        # generator self-check: object and background depth must be separable
        fg_min = depth[mask > 0.5].min()
        bg_max = depth[mask <= 0.5].max()
        mid = 0.5 * (fg_min + bg_max)
        if not np.array_equal((depth > mid).astype(np.float64), mask):
            raise InvariantError(
                f"clean depth self-check failed for {sample_id}: midpoint threshold "
                "does not recover the mask"
            )

    return RgbdSample(
        id=sample_id, rgb=np.clip(rgb, 0.0, 1.0), depth=depth, gt=mask,
        meta={"depth_mode": mode},
    )


def synthesize_dataset(spec: SynthSpec) -> list[RgbdSample]:
    """Deterministic scene generation; each sample is tagged with its depth mode."""
    rng = np.random.default_rng(spec.seed)
    modes = _mode_assignment(spec, rng)
    return [
        _synth_one(spec, mode, rng, f"s{i:04d}")
        for i, mode in enumerate(modes)
    ]


# ---- checkpoints -------------------------------------------------------------


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Versioned container: parameter tensors keyed by module path plus the
    bundle configuration and training-stage provenance."""
    payload = {
        "version": CKPT_VERSION,
        "backbone": bundle.backbone_config.to_dict(),
        "working_resolution": bundle.working_resolution,
        "arch": bundle.arch,
        "fusion_mode": bundle.fusion_mode,
        "stages_done": sorted(bundle.stages_done),
        "cross_connections_enabled": bundle.cross_connections_enabled,
        "state": bundle.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:
        raise CheckpointError(f"unreadable or truncated checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"checkpoint {path} has no version field")
    if payload["version"] != CKPT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch in {path}: file has "
            f"{payload['version']!r}, expected {CKPT_VERSION}"
        )
    bundle = ModelBundle(
        backbone=BackboneConfig.from_dict(payload["backbone"]),
        working_resolution=payload["working_resolution"],
        arch=payload["arch"],
        fusion_mode=payload["fusion_mode"],
    )
    try:
        bundle.load_state_dict(payload["state"])
    except RuntimeError as err:
        raise CheckpointError(f"checkpoint {path} does not match the model: {err}") from err
    bundle.stages_done = set(payload["stages_done"])
    bundle.cross_connections_enabled = bool(payload["cross_connections_enabled"])
    bundle.eval()
    return bundle
