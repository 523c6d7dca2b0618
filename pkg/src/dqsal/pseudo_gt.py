"""Weakly supervised training targets for the depth-contribution subnet.

The target rewards two complementary depth behaviours, relative to the
RGB stream's prediction: highlighting the annotated salient region more
strongly, and suppressing the non-salient surround more strongly. Both
components live on disjoint supports, so their sum stays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    RgbdSample,
    StageOrderError,
    as_binary_mask,
    as_scalar_map,
    ensure_same_shape,
    hadamard,
    pos,
)

PGT_MODES = ("p", "b", "pb")


@dataclass
class PseudoGt:
    p: np.ndarray    # salient-side component, zero outside gt==1
    b: np.ndarray    # non-salient-side component, zero outside gt==0
    pgt: np.ndarray  # p + b

    def target(self, mode: str = "pb") -> np.ndarray:
        if mode == "p":
            return self.p
        if mode == "b":
            return self.b
        if mode == "pb":
            return self.pgt
        raise ValueError(f"unknown pseudo-target mode {mode!r}; expected one of {PGT_MODES}")


def _validated(dsal, rgbsal, gt):
    dsal = as_scalar_map(dsal, "dsal")
    rgbsal = as_scalar_map(rgbsal, "rgbsal")
    gt = as_binary_mask(gt, "gt")
    ensure_same_shape(dsal, rgbsal, "dsal/rgbsal")
    ensure_same_shape(dsal, gt, "dsal/gt")
    return dsal, rgbsal, gt


def compute_p(dsal, rgbsal, gt) -> np.ndarray:
    """Where the mask is on, reward depth saliency exceeding RGB saliency."""
    dsal, rgbsal, gt = _validated(dsal, rgbsal, gt)
    return hadamard(pos(dsal - rgbsal), gt)


def compute_b(dsal, rgbsal, gt) -> np.ndarray:
    """Where the mask is off, reward depth saliency staying below RGB saliency."""
    dsal, rgbsal, gt = _validated(dsal, rgbsal, gt)
    return hadamard(pos(rgbsal - dsal), 1.0 - gt)


def compute_pgt(dsal, rgbsal, gt) -> PseudoGt:
    """Full soft target: sum of the two disjoint-support components.

    Kept continuous in [0, 1]; never binarized or renormalized.
    """
    p = compute_p(dsal, rgbsal, gt)
    b = compute_b(dsal, rgbsal, gt)
    return PseudoGt(p=p, b=b, pgt=p + b)


def build_dca_training_set(samples, bundle) -> list[tuple[RgbdSample, PseudoGt]]:
    """Run both saliency subnets and pair every sample with its pseudo target.

    ``samples`` must come from the half of the training split reserved for
    target formulation; ``bundle`` must have completed stage 1. Pairs with
    an all-zero target are kept: they teach the assessment subnet to emit
    low weights when depth adds nothing.
    """
    if 1 not in bundle.stages_done:
        raise StageOrderError(
            "stage ordering violated: saliency subnets are untrained "
            "(stage 1 incomplete), cannot form pseudo targets"
        )
    res = bundle.working_resolution
    pairs = []
    for sample in samples:
        if sample.gt is None:
            raise StageOrderError(
                f"sample {sample.id} has no ground-truth mask; pseudo targets "
                "require annotated samples"
            )
        # everything at working resolution so the mask is interpolated once
        s = sample.resized(res, res)
        rgbsal = bundle.predict_rgb(s)
        dsal = bundle.predict_d(s)
        pairs.append((s, compute_pgt(dsal, rgbsal, s.gt)))
    return pairs
