"""Warping a source frame into the target view and scoring the result.

A target pixel ``p_t`` with distance ``L`` is lifted to ``X = L * ray(p_t)``,
moved into the source camera with the real-scale relative pose and projected
with the source intrinsics. The source image is sampled bilinearly at the
resulting continuous coordinates.

Images are ``(H, W)`` or ``(H, W, C)`` float arrays in ``[0, 1]``; pixel
``(i, j)`` is centered at continuous coordinate ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import OK, VALID_EPS, MeiIntrinsics, project_points
from .errors import DimensionMismatch, EmptyInput, EmptyMask
from .pose import RigidTransform
from .ray_cache import RayTable

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
ALPHA = 0.85
# continuous coordinates may overshoot the last pixel center by rounding only
BOUNDS_TOL = 1e-9

# 3x3 neighborhood, row-major; index 4 is the center
OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
CENTER = 4


@dataclass(frozen=True, eq=False)
class PixelMapping:
    coords: np.ndarray  # (H, W, 2) continuous source (u', v'); NaN where invalid
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def as_channels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[..., None]
    if image.ndim != 3:
        raise DimensionMismatch(f"expected (H, W) or (H, W, C) image, got {image.shape}")
    return image


def in_source_bounds(coords: np.ndarray, width: int, height: int) -> np.ndarray:
    """True where bilinear sampling at ``coords`` touches only existing pixels."""
    x = coords[..., 0] - 0.5
    y = coords[..., 1] - 0.5
    with np.errstate(invalid="ignore"):
        return (
            (x >= -BOUNDS_TOL)
            & (x <= width - 1 + BOUNDS_TOL)
            & (y >= -BOUNDS_TOL)
            & (y <= height - 1 + BOUNDS_TOL)
        )


def transform_and_project(
    points: np.ndarray, pose: RigidTransform, cam_s: MeiIntrinsics, eps: float = VALID_EPS
) -> tuple[np.ndarray, np.ndarray]:
    """Source-pixel coordinates and in-bounds validity of target-frame points."""
    uv, status = project_points(pose.apply(points), cam_s, eps)
    valid = (status == OK) & in_source_bounds(uv, cam_s.width, cam_s.height)
    return uv, valid


def pixel_map(
    distance: np.ndarray,
    pose: RigidTransform,
    cam_t: MeiIntrinsics,
    cam_s: MeiIntrinsics,
    rays: RayTable,
    eps: float = VALID_EPS,
) -> PixelMapping:
    """Source coordinates for every target pixel given its distance and the pose.

    Pixels are invalid where the distance is not a positive finite number, the
    ray table has no ray, the transformed point cannot be projected, or the
    projection falls outside the source image.
    """
    distance = np.asarray(distance, dtype=np.float64)
    if distance.shape != cam_t.shape:
        raise DimensionMismatch(f"distance map {distance.shape} vs camera {cam_t.shape}")
    if rays.shape != cam_t.shape:
        raise DimensionMismatch(f"ray table {rays.shape} vs camera {cam_t.shape}")
    with np.errstate(invalid="ignore"):
        usable = rays.valid & np.isfinite(distance) & (distance > 0)
    points = rays.rays * np.where(usable, distance, np.nan)[..., None]
    uv, valid = transform_and_project(points, pose, cam_s, eps)
    valid &= usable
    uv[~valid] = np.nan
    return PixelMapping(coords=uv, valid=valid)


def bilinear_sample(image: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``(H, W, C)`` ``image`` at ``(..., 2)`` continuous coordinates.

    Returns ``(values, inside)``; values are 0 where ``inside`` is False.
    """
    image = as_channels(image)
    height, width = image.shape[:2]
    inside = in_source_bounds(coords, width, height)
    x = np.where(inside, coords[..., 0] - 0.5, 0.0).clip(0, width - 1)
    y = np.where(inside, coords[..., 1] - 0.5, 0.0).clip(0, height - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    values = top * (1.0 - fy) + bottom * fy
    values[~inside] = 0.0
    return values, inside


def warp(source: np.ndarray, mapping: PixelMapping) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``source`` into the target view described by ``mapping``."""
    squeeze = np.ndim(source) == 2
    src = as_channels(source)
    coords = np.where(mapping.valid[..., None], mapping.coords, np.nan)
    values, inside = bilinear_sample(src, coords)
    mask = mapping.valid & inside
    values[~mask] = 0.0
    return (values[..., 0] if squeeze else values), mask


# ---------------------------------------------------------------------------
# Photometric loss
# ---------------------------------------------------------------------------


def reflect_index(index: np.ndarray, size: int) -> np.ndarray:
    """Mirror out-of-range indices by one pixel (reflection padding)."""
    index = np.where(index < 0, -index, index)
    return np.where(index >= size, 2 * (size - 1) - index, index)


def neighborhood_indices(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """``(9, H, W)`` row and column indices of each pixel's reflected 3x3 patch."""
    if height < 2 or width < 2:
        raise DimensionMismatch("3x3 neighborhoods need images of at least 2x2 pixels")
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    ri = np.stack([np.broadcast_to(reflect_index(rows + dy, height), (height, width)) for dy, _ in OFFSETS])
    ci = np.stack([np.broadcast_to(reflect_index(cols + dx, width), (height, width)) for _, dx in OFFSETS])
    return ri, ci


def image_patches(image: np.ndarray) -> np.ndarray:
    """``(9, H, W, C)`` stack of each pixel's reflected 3x3 neighborhood."""
    image = as_channels(image)
    ri, ci = neighborhood_indices(*image.shape[:2])
    return image[ri, ci]


def patch_loss(target_patches: np.ndarray, warped_patches: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    """Per-pixel ``alpha (1 - SSIM) / 2 + (1 - alpha) |delta|`` from 3x3 patch stacks.

    Inputs are ``(9, ..., C)``; the result is averaged over channels.
    """
    n = target_patches.shape[0]
    x = target_patches
    y = warped_patches
    mu_x = x.sum(axis=0) / n
    mu_y = y.sum(axis=0) / n
    sigma_x = (x * x).sum(axis=0) / n - mu_x * mu_x
    sigma_y = (y * y).sum(axis=0) / n - mu_y * mu_y
    sigma_xy = (x * y).sum(axis=0) / n - mu_x * mu_y
    ssim_n = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    ssim_d = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    dssim = np.clip((1.0 - ssim_n / ssim_d) / 2.0, 0.0, 1.0)
    l1 = np.abs(x[CENTER] - y[CENTER])
    return (alpha * dssim + (1.0 - alpha) * l1).mean(axis=-1)


def per_pixel_loss(target: np.ndarray, warped: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    target = as_channels(target)
    warped = as_channels(warped)
    if target.shape != warped.shape:
        raise DimensionMismatch(f"target {target.shape} vs warped {warped.shape}")
    return patch_loss(image_patches(target), image_patches(warped), alpha)


def masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
    """Mean over ``mask`` with numpy's pairwise summation (run-to-run stable)."""
    selected = np.ascontiguousarray(values[mask], dtype=np.float64)
    if selected.size == 0:
        raise EmptyMask("no valid pixels to average")
    return float(selected.sum() / selected.size)


def photometric_loss(
    target: np.ndarray, warped: np.ndarray, mask: np.ndarray, alpha: float = ALPHA
) -> tuple[float, np.ndarray]:
    """Masked photometric reconstruction loss.

    Returns ``(mean_loss, per_pixel)``; ``per_pixel`` is ``inf`` outside the
    mask so that per-pixel minima over several sources ignore those entries.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != np.shape(target)[:2]:
        raise DimensionMismatch(f"mask {mask.shape} vs image {np.shape(target)[:2]}")
    if not mask.any():
        raise EmptyMask("photometric loss needs at least one valid pixel")
    loss = per_pixel_loss(target, warped, alpha)
    loss = np.where(mask, loss, np.inf)
    return masked_mean(loss, mask), loss


def min_reprojection_loss(losses: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel minimum over the losses of several source frames."""
    if len(losses) == 0:
        raise EmptyInput("need at least one loss grid")
    first = np.asarray(losses[0])
    for grid in losses[1:]:
        if np.shape(grid) != first.shape:
            raise DimensionMismatch(f"loss grid {np.shape(grid)} vs {first.shape}")
    return np.minimum.reduce([np.asarray(g) for g in losses]) if len(losses) > 1 else first.copy()


def erode_mask(mask: np.ndarray) -> np.ndarray:
    """Keep pixels whose whole 3x3 neighborhood is valid (border pixels drop out)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    height, width = mask.shape
    out = np.ones_like(mask)
    for dy, dx in OFFSETS:
        out &= padded[1 + dy : 1 + dy + height, 1 + dx : 1 + dx + width]
    return out


def combine_masks(*masks: np.ndarray | None) -> np.ndarray:
    """Intersection of validity masks; ``None`` entries are skipped."""
    present = [np.asarray(m, dtype=bool) for m in masks if m is not None]
    if not present:
        raise EmptyInput("no masks given")
    out = present[0].copy()
    for m in present[1:]:
        if m.shape != out.shape:
            raise DimensionMismatch(f"mask {m.shape} vs {out.shape}")
        out &= m
    return out


def synthesize(
    source: np.ndarray,
    distance: np.ndarray,
    pose: RigidTransform,
    cam_t: MeiIntrinsics,
    cam_s: MeiIntrinsics,
    rays: RayTable,
) -> tuple[np.ndarray, np.ndarray]:
    """Convenience: ``warp(source, pixel_map(...))``."""
    return warp(source, pixel_map(distance, pose, cam_t, cam_s, rays))
