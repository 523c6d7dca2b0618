"""Quantitative evaluation: structural similarity, threshold-averaged F,
mean absolute error, the optional enhanced-alignment measure, and the
hard-threshold contribution diagnostics.

All per-image metrics take a prediction map in [0, 1] and a binary mask;
dataset scores are per-image metrics averaged over images, never pooled
over pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, as_binary_mask, as_scalar_map, ensure_same_shape

_EPS = float(np.finfo(np.float64).eps)
BETA2 = 0.3
OMEGA_HI = 0.8   # confidence threshold on the contribution map
DSAL_LO = 0.1    # suppression threshold on the depth-stream prediction


def mae(s, gt) -> float:
    """Mean absolute error over all pixels."""
    s = as_scalar_map(s, "s")
    gt = as_binary_mask(gt, "gt")
    ensure_same_shape(s, gt, "s/gt")
    return float(np.abs(s - gt).mean())


def precision_recall(s, gt, threshold: float) -> tuple[float, float]:
    """Binarize ``s`` strictly above ``threshold`` and count agreement.

    Precision is 0 by convention when nothing is predicted positive.
    """
    s = as_scalar_map(s, "s")
    gt = as_binary_mask(gt, "gt")
    ensure_same_shape(s, gt, "s/gt")
    positives = int(gt.sum())
    if positives == 0:
        raise DataError("undefined recall: ground truth has no positive pixel")
    pred = s > threshold
    tp = int(np.count_nonzero(pred & (gt == 1.0)))
    predicted = int(np.count_nonzero(pred))
    precision = tp / predicted if predicted > 0 else 0.0
    recall = tp / positives
    return precision, recall


def f_measure(precision: float, recall: float, beta2: float = BETA2) -> float:
    """Weighted harmonic mean of precision and recall; 0 when both vanish."""
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise ValueError(f"precision/recall out of range: {precision}, {recall}")
    denom = beta2 * precision + recall
    if denom == 0.0:
        return 0.0
    return (beta2 + 1.0) * precision * recall / denom


def mean_f(s, gt, beta2: float = BETA2) -> float:
    """F averaged over the 256 uniform thresholds k/255, k = 0..255.

    At threshold 1.0 no pixel can be predicted positive, so that term is
    0 by the empty-prediction convention.
    """
    total = 0.0
    for k in range(256):
        p, r = precision_recall(s, gt, k / 255.0)
        total += f_measure(p, r, beta2)
    return total / 256.0


# ---- structural similarity -------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std())
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(s: np.ndarray, gt: np.ndarray) -> float:
    fg = s[gt == 1.0]
    bg = (1.0 - s)[gt == 0.0]
    u = float(gt.mean())
    return u * _object_score(fg) + (1.0 - u) * _object_score(bg)


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    # returns the row/column counts of the top-left region (1-based split)
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return int(round(h / 2)), int(round(w / 2))
    rows = np.arange(1, h + 1, dtype=np.float64)
    cols = np.arange(1, w + 1, dtype=np.float64)
    cy = int(round(float((gt.sum(axis=1) * rows).sum() / total)))
    cx = int(round(float((gt.sum(axis=0) * cols).sum() / total)))
    return cy, cx


def _block_ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    if n == 0:
        return 0.0
    mx, my = float(x.mean()), float(y.mean())
    denom = max(n - 1, 1)
    sx = float(((x - mx) ** 2).sum() / denom)
    sy = float(((y - my) ** 2).sum() / denom)
    sxy = float(((x - mx) * (y - my)).sum() / denom)
    a = 4.0 * mx * my * sxy
    b = (mx * mx + my * my) * (sx + sy)
    if a != 0.0:
        return a / (b + _EPS)
    if b == 0.0:
        return 1.0
    return 0.0


def _s_region(s: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cy, cx = _centroid(gt)
    area = float(h * w)
    score = 0.0
    for rows, cols in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ):
        gt_blk = gt[rows, cols]
        weight = gt_blk.size / area
        if weight == 0.0:
            continue
        score += weight * _block_ssim(s[rows, cols], gt_blk)
    return score


def s_measure(s, gt, alpha: float = 0.5) -> float:
    """Structural similarity: alpha-weighted blend of the object-aware and
    region-aware terms; degenerate all-background / all-foreground masks
    fall back to the mean-prediction conventions."""
    s = as_scalar_map(s, "s")
    gt = as_binary_mask(gt, "gt")
    ensure_same_shape(s, gt, "s/gt")
    y = float(gt.mean())
    if y == 0.0:
        score = 1.0 - float(s.mean())
    elif y == 1.0:
        score = float(s.mean())
    else:
        score = alpha * _s_object(s, gt) + (1.0 - alpha) * _s_region(s, gt)
    return min(1.0, max(0.0, score))


def e_measure(s, gt) -> float:
    """Enhanced-alignment measure with the adaptive 2x-mean binarization."""
    s = as_scalar_map(s, "s")
    gt = as_binary_mask(gt, "gt")
    ensure_same_shape(s, gt, "s/gt")
    thr = min(2.0 * float(s.mean()), 1.0)
    fm = (s >= thr).astype(np.float64)
    n = s.size
    if gt.sum() == 0:
        enhanced = 1.0 - fm
    elif gt.sum() == n:
        enhanced = fm
    else:
        d_gt = gt - gt.mean()
        d_fm = fm - fm.mean()
        align = 2.0 * d_gt * d_fm / (d_gt ** 2 + d_fm ** 2 + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    score = float(enhanced.sum() / (n - 1 + _EPS))
    return min(1.0, max(0.0, score))


# ---- contribution diagnostics ----------------------------------------------


def omega1(omega, gt) -> float | None:
    """Fraction of confidently-weighted pixels lying in the non-salient
    region. None when no pixel clears the confidence threshold (invalid,
    never coerced to 0). Strict positivity is used for counting, so values
    exactly at the threshold do not count."""
    omega = as_scalar_map(omega, "omega")
    gt = as_binary_mask(gt, "gt")
    ensure_same_shape(omega, gt, "omega/gt")
    conf = np.maximum(omega - OMEGA_HI, 0.0)
    denom = int(np.count_nonzero(conf > 0.0))
    if denom == 0:
        return None
    num = int(np.count_nonzero(((1.0 - gt) * conf) > 0.0))
    return num / denom


def omega2(omega, gt, dsal) -> float | None:
    """Among the confident non-salient pixels, the fraction where the depth
    stream genuinely suppresses (prediction below the suppression
    threshold). None when the non-salient confident set is empty."""
    omega = as_scalar_map(omega, "omega")
    gt = as_binary_mask(gt, "gt")
    dsal = as_scalar_map(dsal, "dsal")
    ensure_same_shape(omega, gt, "omega/gt")
    ensure_same_shape(omega, dsal, "omega/dsal")
    conf = np.maximum(omega - OMEGA_HI, 0.0)
    off = 1.0 - gt
    denom = int(np.count_nonzero((off * conf) > 0.0))
    if denom == 0:
        return None
    low = np.maximum(DSAL_LO - dsal, 0.0)
    num = int(np.count_nonzero((off * low * conf) > 0.0))
    return num / denom


# ---- dataset aggregation ----------------------------------------------------


@dataclass
class MetricReport:
    """One evaluation row; optional fields stay None when not computed."""

    dataset_name: str
    sm: float
    mean_f: float
    mae: float
    e_measure: float | None = None
    omega1: float | None = None
    omega2: float | None = None
    omega1_invalid: int = 0
    omega2_invalid: int = 0
    sample_count: int = 0

    def __post_init__(self):
        for name in ("sm", "mean_f", "mae", "e_measure", "omega1", "omega2"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0 or np.isnan(v)):
                raise ValueError(f"metric {name}={v} outside [0, 1]")

    @property
    def invalid_omega_n(self) -> int:
        return max(self.omega1_invalid, self.omega2_invalid)


CSV_HEADER = "dataset,sm,meanf,mae,emeasure,omega1,omega2,n,invalid_omega_n"


def _fmt(v, digits: int = 4) -> str:
    return "" if v is None else f"{v:.{digits}f}"


def report_to_csv_row(r: MetricReport) -> str:
    return ",".join(
        [
            r.dataset_name,
            _fmt(r.sm),
            _fmt(r.mean_f),
            _fmt(r.mae),
            _fmt(r.e_measure),
            _fmt(r.omega1),
            _fmt(r.omega2),
            str(r.sample_count),
            str(r.invalid_omega_n),
        ]
    )


def reports_to_csv(reports) -> str:
    return "\n".join([CSV_HEADER] + [report_to_csv_row(r) for r in reports]) + "\n"


def format_table(reports) -> str:
    """Aligned text table, one row per dataset/run."""
    headers = ["dataset", "Sm^", "meanF^", "MAE v", "E", "w1", "w2", "n", "inv"]
    rows = [
        [
            r.dataset_name,
            _fmt(r.sm, 3),
            _fmt(r.mean_f, 3),
            _fmt(r.mae, 3),
            _fmt(r.e_measure, 3),
            _fmt(r.omega1, 3),
            _fmt(r.omega2, 3),
            str(r.sample_count),
            str(r.invalid_omega_n),
        ]
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(headers)] + [line(row) for row in rows]) + "\n"


def evaluate_dataset(
    predictions: dict,
    gts: dict,
    dataset_name: str = "dataset",
    omegas: dict | None = None,
    dsals: dict | None = None,
    with_e_measure: bool = True,
) -> MetricReport:
    """Average per-image metrics over a prediction/ground-truth directory pair.

    Invalid (zero-denominator) contribution diagnostics are excluded from
    their averages; their count is reported instead of being scored as 0.
    """
    pred_ids = set(predictions)
    gt_ids = set(gts)
    if pred_ids != gt_ids:
        missing = sorted(gt_ids - pred_ids)
        extra = sorted(pred_ids - gt_ids)
        raise DataError(
            f"prediction/ground-truth id mismatch: missing predictions for "
            f"{missing}, predictions without ground truth {extra}"
        )
    for name, maps in (("omega", omegas), ("dsal", dsals)):
        if maps is not None and set(maps) != gt_ids:
            raise DataError(
                f"{name} map ids do not match the ground-truth ids: "
                f"{sorted(set(maps) ^ gt_ids)}"
            )
    ids = sorted(gt_ids)
    sms, mfs, maes, es = [], [], [], []
    o1s, o2s = [], []
    o1_invalid = o2_invalid = 0
    for i in ids:
        s, g = predictions[i], gts[i]
        sms.append(s_measure(s, g))
        mfs.append(mean_f(s, g))
        maes.append(mae(s, g))
        if with_e_measure:
            es.append(e_measure(s, g))
        if omegas is not None:
            v1 = omega1(omegas[i], g)
            if v1 is None:
                o1_invalid += 1
            else:
                o1s.append(v1)
            if dsals is not None:
                v2 = omega2(omegas[i], g, dsals[i])
                if v2 is None:
                    o2_invalid += 1
                else:
                    o2s.append(v2)
    return MetricReport(
        dataset_name=dataset_name,
        sm=float(np.mean(sms)),
        mean_f=float(np.mean(mfs)),
        mae=float(np.mean(maes)),
        e_measure=float(np.mean(es)) if es else None,
        omega1=float(np.mean(o1s)) if o1s else None,
        omega2=float(np.mean(o2s)) if o2s else None,
        omega1_invalid=o1_invalid,
        omega2_invalid=o2_invalid,
        sample_count=len(ids),
    )
