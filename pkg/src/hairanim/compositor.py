"""Deterministic mask-guided hair transfer between portrait frames.

The compositor realigns a reference hairstyle to the input head pose,
paints over the input's old hair with a nearest-neighbor background fill,
pastes the realigned hair on top and feathers only a narrow band around
the new silhouette. Everything outside the old-hair region and the
feathered new-hair region is preserved bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .synthdata import pose_transfer_matrix

__all__ = [
    "CompositeConfig",
    "transfer_hair",
    "make_pseudo_driving",
    "synthesize_anchor",
    "classify_hair_style",
]

_XY_SWAP = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CompositeConfig:
    alignment_mode: str = "pose_aware"  # "pose_aware" or "naive_paste"
    blur_sigma: float = 1.0

    def band_radius(self):
        return int(math.ceil(3.0 * self.blur_sigma)) if self.blur_sigma > 0 else 0


def _warp_image(image, matrix_xy, order=1):
    """Resample image content through an (x, y)-convention homogeneous matrix."""
    inv = _XY_SWAP @ np.linalg.inv(matrix_xy) @ _XY_SWAP  # row/col convention, output -> source
    if image.ndim == 2:
        return ndimage.affine_transform(image, inv[:2, :2], offset=inv[:2, 2], order=order, mode="constant", cval=0.0)
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.affine_transform(image[:, :, c], inv[:2, :2], offset=inv[:2, 2], order=order, mode="constant", cval=0.0)
    return out


def _fill_region(frame, region):
    """Replace region pixels with the value of the nearest pixel outside it."""
    if not region.any():
        return frame.copy()
    _, (iy, ix) = ndimage.distance_transform_edt(region, return_indices=True)
    filled = frame.copy()
    filled[region] = frame[iy[region], ix[region]]
    return filled


def transfer_hair(input_frame, input_hair_mask, reference_frame, reference_hair_mask, input_pose, reference_pose, cfg=CompositeConfig()):
    """Composite the reference hairstyle onto the input frame.

    Returns (output_frame, new_hair_mask). The new mask is the realigned
    reference silhouette. Output pixels outside the union of the input's
    old hair and the new silhouette dilated by the blur band equal the
    input bit-exactly.
    """
    if input_frame.shape != reference_frame.shape:
        raise ValueError(f"frame shapes differ: {input_frame.shape} vs {reference_frame.shape}")
    ref_mask = np.asarray(reference_hair_mask) > 0.5
    if not ref_mask.any():
        raise ValueError("reference hair mask is empty; nothing to transfer")
    h, w = input_frame.shape[:2]

    if cfg.alignment_mode == "pose_aware":
        matrix = pose_transfer_matrix(reference_pose, input_pose, h, w)
        hair_layer = _warp_image(reference_frame, matrix)
        new_mask = _warp_image(ref_mask.astype(np.float64), matrix) >= 0.5
    elif cfg.alignment_mode == "naive_paste":
        hair_layer = np.asarray(reference_frame, dtype=np.float64).copy()
        new_mask = ref_mask.copy()
    else:
        raise ValueError(f"unknown alignment mode {cfg.alignment_mode!r}")
    if not new_mask.any():
        raise ValueError("realigned reference hair left the frame entirely")

    old_mask = np.asarray(input_hair_mask) > 0.5
    base = _fill_region(np.asarray(input_frame, dtype=np.float64), old_mask)

    if cfg.blur_sigma > 0:
        band = cfg.band_radius()
        blurred = ndimage.gaussian_filter(new_mask.astype(np.float64), cfg.blur_sigma, truncate=3.0)
        inner = ndimage.binary_erosion(new_mask, iterations=band)
        outer = ndimage.binary_dilation(new_mask, iterations=band)
        alpha = np.where(inner, 1.0, np.where(outer, blurred, 0.0))
        out = alpha[..., None] * hair_layer + (1.0 - alpha)[..., None] * base
        # exact-preservation contract: untouched wherever alpha is exactly 0 or 1
        out[alpha == 0.0] = base[alpha == 0.0]
        out[alpha == 1.0] = hair_layer[alpha == 1.0]
    else:
        out = np.where(new_mask[..., None], hair_layer, base)
    return out, new_mask.astype(np.float64)


def make_pseudo_driving(driving_frame, driving_hair_mask, driving_pose, bank_entry, cfg=CompositeConfig()):
    """Build a wrong-hair driving frame from a hair-bank entry."""
    return transfer_hair(
        driving_frame,
        driving_hair_mask,
        bank_entry.frame,
        bank_entry.hair_mask,
        driving_pose,
        bank_entry.pose,
        cfg,
    )


def synthesize_anchor(anchor_frame, anchor_hair_mask, anchor_pose, reference_frame, reference_hair_mask, reference_pose, cfg=CompositeConfig()):
    """Put the target hairstyle onto the chosen anchor frame."""
    return transfer_hair(anchor_frame, anchor_hair_mask, reference_frame, reference_hair_mask, anchor_pose, reference_pose, cfg)


def _style_features(frame, hair_mask):
    mask = hair_mask > 0.5
    area = float(mask.sum())
    if area == 0.0:
        return None
    color = frame[mask].mean(axis=0)
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    # second central moments normalized by area, scale-comparable silhouette shape
    myy = float(((ys - cy) ** 2).mean()) / area
    mxx = float(((xs - cx) ** 2).mean()) / area
    mxy = float(((ys - cy) * (xs - cx)).mean()) / area
    h = frame.shape[0]
    return np.concatenate([color, [area / frame.size * 3.0, cy / h, cx / h, mxx, myy, mxy]])


def classify_hair_style(frame, hair_mask, pose, bank):
    """Nearest-style index in the bank, judged at the bank's canonical pose."""
    h, w = frame.shape[:2]
    matrix = pose_transfer_matrix(pose, bank[0].pose, h, w)
    canon_frame = _warp_image(frame, matrix)
    canon_mask = _warp_image((hair_mask > 0.5).astype(np.float64), matrix) >= 0.5
    best, best_score = -1, np.inf
    color = canon_frame[canon_mask].mean(axis=0) if canon_mask.any() else np.zeros(3)
    for k, entry in enumerate(bank):
        entry_mask = entry.hair_mask > 0.5
        inter = float((canon_mask & entry_mask).sum())
        union = float((canon_mask | entry_mask).sum())
        iou = inter / union if union else 0.0
        score = np.abs(color - np.asarray(entry.hair_color)).sum() + 2.0 * (1.0 - iou)
        if score < best_score:
            best, best_score = k, score
    return best
