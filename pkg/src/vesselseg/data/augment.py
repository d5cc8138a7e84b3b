"""Paired image/mask augmentation.

Geometric ops warp image and mask identically (image bilinearly, mask by
nearest neighbor, re-binarized); out-of-frame regions are filled with the
bright background (1.0) on the image and 0 on the mask. Intensity ops touch
the image only. ``random_augment`` samples each op independently by its
policy probability and applies them in a fixed order: hflip, vflip, rotate,
scale, crop, shift, gauss_noise, gauss_blur.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import UsageError
from .synth import Sample

IMAGE_FILL = 1.0
MASK_FILL = 0

OP_KINDS = ("hflip", "vflip", "rotate", "scale", "crop", "shift",
            "gauss_noise", "gauss_blur")


@dataclass
class AugmentPolicy:
    """Per-op application probabilities and parameter ranges."""

    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotate_prob: float = 0.5
    rotate_max_deg: float = 15.0
    scale_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    crop_prob: float = 0.25
    crop_frac_range: tuple[float, float] = (0.7, 0.95)
    shift_prob: float = 0.5
    shift_max_frac: float = 0.10
    gauss_noise_prob: float = 0.25
    noise_sigma_range: tuple[float, float] = (0.01, 0.05)
    gauss_blur_prob: float = 0.25
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(hflip_prob=0, vflip_prob=0, rotate_prob=0, scale_prob=0,
                   crop_prob=0, shift_prob=0, gauss_noise_prob=0, gauss_blur_prob=0)


# ---------------------------------------------------------------------------
# Sampling helpers shared by the warping ops


def _bilinear_sample(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray,
                     fill: float) -> np.ndarray:
    h, w = img.shape
    valid = (src_r >= 0) & (src_r <= h - 1) & (src_c >= 0) & (src_c <= w - 1)
    r = np.clip(src_r, 0, h - 1)
    c = np.clip(src_c, 0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    tr = (r - r0).astype(img.dtype)
    tc = (c - c0).astype(img.dtype)
    top = img[r0, c0] * (1 - tc) + img[r0, c1] * tc
    bot = img[r1, c0] * (1 - tc) + img[r1, c1] * tc
    out = top * (1 - tr) + bot * tr
    out[~valid] = fill
    return out.astype(img.dtype)


def _nearest_sample(mask: np.ndarray, src_r: np.ndarray, src_c: np.ndarray,
                    fill: int) -> np.ndarray:
    h, w = mask.shape
    r = np.rint(src_r).astype(np.int64)
    c = np.rint(src_c).astype(np.int64)
    valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = np.full(mask.shape, fill, dtype=mask.dtype)
    out[valid] = mask[r[valid], c[valid]]
    return out


def _rebinarize(mask: np.ndarray) -> np.ndarray:
    return (mask > 0).astype(np.uint8)


def _warp(sample: Sample, src_r: np.ndarray, src_c: np.ndarray) -> Sample:
    image = _bilinear_sample(sample.image, src_r, src_c, IMAGE_FILL)
    mask = _rebinarize(_nearest_sample(sample.mask, src_r, src_c, MASK_FILL))
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), mask,
                  sample.spacing, sample.patient_id, sample.view_tag)


# ---------------------------------------------------------------------------
# Deterministic kernels (parameters explicit)


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(),
                  sample.spacing, sample.patient_id, sample.view_tag)


def vflip(sample: Sample) -> Sample:
    return Sample(sample.image[::-1, :].copy(), sample.mask[::-1, :].copy(),
                  sample.spacing, sample.patient_id, sample.view_tag)


def rotate(sample: Sample, angle_deg: float) -> Sample:
    h, w = sample.image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    # inverse mapping: rotate output coordinates by -theta
    src_r = cy + np.cos(theta) * dy + np.sin(theta) * dx
    src_c = cx - np.sin(theta) * dy + np.cos(theta) * dx
    return _warp(sample, src_r, src_c)


def scale(sample: Sample, factor: float) -> Sample:
    if factor <= 0:
        raise UsageError(f"scale factor must be positive, got {factor}")
    h, w = sample.image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    src_r = cy + (rr - cy) / factor
    src_c = cx + (cc - cx) / factor
    return _warp(sample, src_r, src_c)


def shift(sample: Sample, dy: int, dx: int) -> Sample:
    h, w = sample.image.shape
    image = np.full_like(sample.image, IMAGE_FILL)
    mask = np.full_like(sample.mask, MASK_FILL)
    r0, r1 = max(0, dy), min(h, h + dy)
    c0, c1 = max(0, dx), min(w, w + dx)
    if r0 < r1 and c0 < c1:
        image[r0:r1, c0:c1] = sample.image[r0 - dy:r1 - dy, c0 - dx:c1 - dx]
        mask[r0:r1, c0:c1] = sample.mask[r0 - dy:r1 - dy, c0 - dx:c1 - dx]
    return Sample(image, mask, sample.spacing, sample.patient_id, sample.view_tag)


def crop(sample: Sample, top: int, left: int, height: int, width: int) -> Sample:
    """Keep the window in place; everything outside becomes fill ("re-pad")."""
    h, w = sample.image.shape
    if not (0 <= top < h and 0 <= left < w and height >= 1 and width >= 1
            and top + height <= h and left + width <= w):
        raise UsageError("crop window must lie inside the image")
    image = np.full_like(sample.image, IMAGE_FILL)
    mask = np.full_like(sample.mask, MASK_FILL)
    image[top:top + height, left:left + width] = \
        sample.image[top:top + height, left:left + width]
    mask[top:top + height, left:left + width] = \
        sample.mask[top:top + height, left:left + width]
    return Sample(image, mask, sample.spacing, sample.patient_id, sample.view_tag)


def gauss_noise(sample: Sample, sigma: float, noise_seed: int) -> Sample:
    rng = np.random.default_rng(noise_seed)
    image = sample.image + rng.normal(0.0, sigma, sample.image.shape).astype(np.float32)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), sample.mask.copy(),
                  sample.spacing, sample.patient_id, sample.view_tag)


def gauss_blur(sample: Sample, sigma: float) -> Sample:
    image = gaussian_filter(sample.image, sigma, mode="nearest")
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), sample.mask.copy(),
                  sample.spacing, sample.patient_id, sample.view_tag)


# ---------------------------------------------------------------------------
# Randomized dispatch


def _draw_params(op_kind: str, rng: np.random.Generator,
                 policy: AugmentPolicy) -> dict:
    if op_kind in ("hflip", "vflip"):
        return {}
    if op_kind == "rotate":
        return {"angle_deg": float(rng.uniform(-policy.rotate_max_deg,
                                               policy.rotate_max_deg))}
    if op_kind == "scale":
        return {"factor": float(rng.uniform(*policy.scale_range))}
    if op_kind == "crop":
        return {"frac": float(rng.uniform(*policy.crop_frac_range)),
                "u": float(rng.random()), "v": float(rng.random())}
    if op_kind == "shift":
        return {"u": float(rng.random()), "v": float(rng.random())}
    if op_kind == "gauss_noise":
        return {"sigma": float(rng.uniform(*policy.noise_sigma_range)),
                "noise_seed": int(rng.integers(0, 2 ** 63 - 1))}
    if op_kind == "gauss_blur":
        return {"sigma": float(rng.uniform(*policy.blur_sigma_range))}
    raise UsageError(f"unknown augmentation op '{op_kind}'")


def _apply(sample: Sample, op_kind: str, params: dict) -> Sample:
    h, w = sample.image.shape
    if op_kind == "hflip":
        return hflip(sample)
    if op_kind == "vflip":
        return vflip(sample)
    if op_kind == "rotate":
        return rotate(sample, params["angle_deg"])
    if op_kind == "scale":
        return scale(sample, params["factor"])
    if op_kind == "crop":
        ch = max(1, int(round(h * params["frac"])))
        cw = max(1, int(round(w * params["frac"])))
        top = int(round(params["u"] * (h - ch)))
        left = int(round(params["v"] * (w - cw)))
        return crop(sample, top, left, ch, cw)
    if op_kind == "shift":
        max_d = int(round(h * 0.10))
        dy = int(round((2 * params["u"] - 1) * max_d))
        dx = int(round((2 * params["v"] - 1) * max_d))
        return shift(sample, dy, dx)
    if op_kind == "gauss_noise":
        return gauss_noise(sample, params["sigma"], params["noise_seed"])
    if op_kind == "gauss_blur":
        return gauss_blur(sample, params["sigma"])
    raise UsageError(f"unknown augmentation op '{op_kind}'")


def augment(sample: Sample, op_kind: str, rng: np.random.Generator,
            policy: AugmentPolicy | None = None) -> Sample:
    """Apply one op with parameters drawn from the policy ranges."""
    if op_kind not in OP_KINDS:
        raise UsageError(f"unknown augmentation op '{op_kind}'")
    return _apply(sample, op_kind, _draw_params(op_kind, rng,
                                                policy or AugmentPolicy()))


def sample_plan(rng: np.random.Generator, policy: AugmentPolicy):
    """Draw the list of (op, params) to apply, in the fixed op order."""
    probs = {
        "hflip": policy.hflip_prob, "vflip": policy.vflip_prob,
        "rotate": policy.rotate_prob, "scale": policy.scale_prob,
        "crop": policy.crop_prob, "shift": policy.shift_prob,
        "gauss_noise": policy.gauss_noise_prob, "gauss_blur": policy.gauss_blur_prob,
    }
    plan = []
    for op in OP_KINDS:
        if rng.random() < probs[op]:
            plan.append((op, _draw_params(op, rng, policy)))
    return plan


def apply_plan(sample: Sample, plan) -> Sample:
    for op, params in plan:
        sample = _apply(sample, op, params)
    return sample


def random_augment(sample: Sample, rng: np.random.Generator,
                   policy: AugmentPolicy) -> Sample:
    """Independently sample each op by its probability; apply in fixed order."""
    return apply_plan(sample, sample_plan(rng, policy))
