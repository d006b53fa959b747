"""Direct per-pixel distance estimation from frames with known real-scale poses.

Stands in for a trained depth network: it minimizes the same photometric
objective through the same fisheye warping, but per pixel and without
learned weights.

Pipeline per pyramid level (coarse to fine):

1. hypothesis sweep: constant-distance warps, cost volume, argmin
   (the coarsest level sweeps every hypothesis, finer levels only a window
   around the upsampled coarse estimate);
2. golden-section refinement of each pixel inside one hypothesis interval;
3. edge-aware weighted-median cleanup of outliers and interpolation jitter.

Finally, pixels whose cost barely varies across hypotheses are marked
low-confidence and filled from confident neighbors with similar intensity.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import MeiIntrinsics
from .errors import DimensionMismatch, EmptyInput, NoParallax
from .pose import RigidTransform
from .ray_cache import RayTable, build_ray_table
from .view_synthesis import (
    ALPHA,
    OFFSETS,
    as_channels,
    bilinear_sample,
    image_patches,
    neighborhood_indices,
    patch_loss,
    per_pixel_loss,
    pixel_map,
    reflect_index,
    transform_and_project,
    warp,
)

log = logging.getLogger(__name__)

MIN_BASELINE = 1e-6
INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0
TIE_TOL = 1e-10  # cost differences below this are rounding noise


@dataclass(frozen=True)
class EstimatorConfig:
    n_hyps: int = 64
    l_min: float = 0.3
    l_max: float = 80.0
    levels: int = 3
    local_window: int = 3  # hypothesis indices searched on each side at finer levels
    refine_iters: int = 40
    confidence_threshold: float = 1e-3
    fill_low_confidence: bool = True
    fill_radius: int = 2
    fill_intensity_tol: float = 0.1
    cleanup_radius: int = 3
    cleanup_sigma: float = 0.1  # intensity scale of the edge-aware weights
    cleanup_iters: int = 2  # 0 disables the median cleanup
    alpha: float = ALPHA
    shiftable_windows: bool = True

    def __post_init__(self) -> None:
        if self.n_hyps < 2:
            raise ValueError("need at least two hypotheses")
        if not 0 < self.l_min < self.l_max:
            raise ValueError(f"need 0 < l_min < l_max, got {self.l_min}, {self.l_max}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


@dataclass(frozen=True, eq=False)
class SourceView:
    """A source frame and the camera_source-from-camera_target transform."""

    image: np.ndarray
    pose: RigidTransform
    cam: MeiIntrinsics | None = None  # defaults to the target camera
    mask: np.ndarray | None = None  # False where the source pixel must not be sampled


@dataclass(frozen=True, eq=False)
class Diagnostics:
    cost: np.ndarray  # photometric cost at the returned distance
    cost_spread: np.ndarray  # max - min over the coarsest sweep, upsampled
    low_confidence: np.ndarray
    filled: np.ndarray
    smoothness: float
    level_seconds: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class EstimateResult:
    distance: np.ndarray  # NaN where no estimate exists
    confidence: np.ndarray  # cost spread; larger is more reliable
    valid: np.ndarray
    diagnostics: Diagnostics


def inverse_depth_hypotheses(n: int = 64, l_min: float = 0.3, l_max: float = 80.0) -> np.ndarray:
    """``n`` distances, uniform in inverse distance, strictly increasing."""
    if n < 2 or not 0 < l_min < l_max:
        raise ValueError("invalid hypothesis range")
    inv = np.linspace(1.0 / l_max, 1.0 / l_min, n)[::-1]
    hyps = 1.0 / inv
    hyps[0], hyps[-1] = l_min, l_max
    return hyps


def textured_mask(image: np.ndarray, threshold: float = 0.02) -> np.ndarray:
    """Pixels whose 3x3 intensity standard deviation exceeds ``threshold``."""
    patches = image_patches(image)
    return patches.std(axis=0).mean(axis=-1) > threshold


# ---------------------------------------------------------------------------
# Cost evaluation
# ---------------------------------------------------------------------------


class PatchCost:
    """Photometric patch cost of each target pixel at a per-pixel distance.

    For pixel ``p`` at distance ``L`` every pixel ``q`` of a reflected 3x3
    patch is lifted along its own ray to distance ``L`` and warped into each
    source; the patch's SSIM + L1 loss is taken and the minimum over sources
    returned. With ``shiftable=True`` the cost is the minimum over the nine
    in-image 3x3 patches that contain ``p`` (shiftable windows), which keeps
    pixels next to depth discontinuities from being judged by a patch that
    straddles two surfaces.

    For a constant distance map the non-shiftable cost equals the image-level
    photometric loss of :mod:`view_synthesis`, and the shiftable cost is its
    3x3 minimum filter.
    """

    def __init__(
        self,
        target: np.ndarray,
        sources: Sequence[SourceView],
        cam: MeiIntrinsics,
        rays: RayTable,
        alpha: float = ALPHA,
        target_mask: np.ndarray | None = None,
        shiftable: bool = True,
    ):
        if not sources:
            raise EmptyInput("need at least one source view")
        self.target = as_channels(target)
        if self.target.shape[:2] != cam.shape or rays.shape != cam.shape:
            raise DimensionMismatch("target image, camera and ray table sizes differ")
        self.sources = list(sources)
        for src in self.sources:
            if as_channels(src.image).shape[2] != self.target.shape[2]:
                raise DimensionMismatch("source and target channel counts differ")
        self.cam = cam
        self.rays = rays
        self.alpha = alpha
        self.shiftable = shiftable
        height, width = cam.shape
        usable = rays.valid if target_mask is None else rays.valid & np.asarray(target_mask, bool)
        self.usable = usable
        self.ri3, self.ci3 = neighborhood_indices(height, width)
        self.patch_usable = usable[self.ri3, self.ci3].all(axis=0)

        if shiftable:
            radius = 2
            # window shifts whose center stays inside the image
            rows = np.arange(height)[:, None]
            cols = np.arange(width)[None, :]
            self.shift_inside = np.stack(
                [(rows + dy >= 0) & (rows + dy < height) & (cols + dx >= 0) & (cols + dx < width)
                 for dy, dx in OFFSETS]
            )
            grid = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)]
            self.ri = np.stack([np.broadcast_to(reflect_index(rows + dy, height), (height, width)) for dy, _ in grid])
            self.ci = np.stack([np.broadcast_to(reflect_index(cols + dx, width), (height, width)) for _, dx in grid])
            # the nine 5x5-grid entries forming the window centered at each shift
            self.windows = [
                [(sy + oy + radius) * 5 + (sx + ox + radius) for oy, ox in OFFSETS] for sy, sx in OFFSETS
            ]
        else:
            self.ri, self.ci = self.ri3, self.ci3
            self.windows = [list(range(9))]
            self.shift_inside = np.ones((1, height, width), dtype=bool)
        self.target_samples = self.target[self.ri, self.ci]
        self.sample_rays = rays.rays[self.ri, self.ci]
        self.sample_usable = usable[self.ri, self.ci]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cam.shape

    def _source_mask(self, src: SourceView, coords: np.ndarray) -> np.ndarray:
        if src.mask is None:
            return np.ones(coords.shape[:-1], dtype=bool)
        values, inside = bilinear_sample(np.asarray(src.mask, dtype=np.float64), coords)
        return inside & (values[..., 0] >= 1.0)

    def per_source(self, distance: np.ndarray) -> list[np.ndarray]:
        """Cost for each source, ``inf`` where no fully valid patch exists."""
        distance = np.asarray(distance, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            ok = self.usable & np.isfinite(distance) & (distance > 0)
        dist = np.where(ok, distance, 1.0)
        points = self.sample_rays * dist[None, :, :, None]
        costs = []
        for src in self.sources:
            cam_s = src.cam or self.cam
            uv, valid = transform_and_project(points, src.pose, cam_s)
            values, inside = bilinear_sample(as_channels(src.image), uv)
            valid &= inside & self.sample_usable & self._source_mask(src, uv)
            best = np.full(self.shape, np.inf)
            for window, inside_img in zip(self.windows, self.shift_inside):
                loss = patch_loss(self.target_samples[window], values[window], self.alpha)
                good = inside_img & valid[window].all(axis=0)
                best = np.minimum(best, np.where(good, loss, np.inf))
            costs.append(np.where(ok, best, np.inf))
        return costs

    def __call__(self, distance: np.ndarray) -> np.ndarray:
        return np.minimum.reduce(self.per_source(distance))

    def constant(self, value: float) -> np.ndarray:
        """Cost of a constant distance via one full-image warp per source.

        Equivalent to ``self(np.full(shape, value))`` but warps each pixel once.
        """
        distance = np.full(self.shape, float(value))
        costs = []
        for src in self.sources:
            cam_s = src.cam or self.cam
            mapping = pixel_map(distance, src.pose, self.cam, cam_s, self.rays)
            warped, mask = warp(as_channels(src.image), mapping)
            if src.mask is not None:
                mask &= self._source_mask(src, mapping.coords)
            loss = per_pixel_loss(self.target, warped, self.alpha)
            full = self.patch_usable & mask[self.ri3, self.ci3].all(axis=0)
            loss = np.where(full, loss, np.inf)
            if self.shiftable:
                loss = min_filter3(loss)
            costs.append(np.where(self.usable, loss, np.inf))
        return np.minimum.reduce(costs)


def min_filter3(values: np.ndarray) -> np.ndarray:
    """3x3 minimum over in-image neighbors."""
    height, width = values.shape
    padded = np.pad(values, 1, constant_values=np.inf)
    return np.minimum.reduce(
        [padded[1 + dy : 1 + dy + height, 1 + dx : 1 + dx + width] for dy, dx in OFFSETS]
    )


def hypothesis_sweep(
    target: np.ndarray,
    sources: Sequence[SourceView],
    cam: MeiIntrinsics,
    rays: RayTable,
    hyps: np.ndarray,
    alpha: float = ALPHA,
    target_mask: np.ndarray | None = None,
    shiftable: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Cost volume ``(H, W, K)`` and per-pixel argmin distance.

    Ties resolve to the smaller distance; pixels with no finite cost get NaN.
    """
    hyps = _check_hyps(hyps)
    cost_fn = PatchCost(target, sources, cam, rays, alpha, target_mask, shiftable)
    volume = np.stack([cost_fn.constant(h) for h in hyps], axis=-1)
    return volume, argmin_distance(volume, hyps)


def _check_hyps(hyps) -> np.ndarray:
    hyps = np.asarray(hyps, dtype=np.float64)
    if hyps.ndim != 1 or hyps.size < 2 or not np.all(np.diff(hyps) > 0) or not hyps[0] > 0:
        raise ValueError("hypotheses must be >= 2 positive, strictly increasing distances")
    return hyps


def argmin_distance(volume: np.ndarray, hyps: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """Per-pixel distance of the cheapest hypothesis.

    Costs within ``tie_tol`` of the minimum count as ties and resolve to the
    smallest distance, so rounding noise cannot override the tie-break.
    """
    best = volume.min(axis=-1, keepdims=True)
    index = np.argmax(volume <= best + tie_tol, axis=-1)  # first near-minimum
    return np.where(np.isfinite(best[..., 0]), hyps[index], np.nan)


def cost_spread(volume: np.ndarray) -> np.ndarray:
    finite = np.isfinite(volume)
    hi = np.where(finite, volume, -np.inf).max(axis=-1)
    lo = np.where(finite, volume, np.inf).min(axis=-1)
    return np.where(finite.any(axis=-1), hi - lo, 0.0)


def _bracket(distance: np.ndarray, hyps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Neighboring hypotheses around each distance (one interval each side)."""
    d = np.where(np.isfinite(distance), distance, hyps[0])
    k = np.clip(np.searchsorted(hyps, d), 0, hyps.size - 1)
    below = np.clip(k - 1, 0, hyps.size - 1)
    exact = hyps[k] == d
    above = np.clip(np.where(exact, k + 1, k), 0, hyps.size - 1)
    return hyps[below], hyps[above]


def refine_local(
    init: np.ndarray,
    cost_fn: PatchCost,
    hyps: np.ndarray,
    iters: int = 40,
) -> tuple[np.ndarray, np.ndarray]:
    """Golden-section search per pixel within one hypothesis interval of ``init``.

    The search runs in inverse distance. Each pixel keeps whichever of its
    initial and refined distances has the lower cost, so the cost never
    increases. Returns ``(distance, cost)``.
    """
    hyps = _check_hyps(hyps)
    init = np.asarray(init, dtype=np.float64)
    init_cost = cost_fn(init)
    lo_d, hi_d = _bracket(init, hyps)
    a = 1.0 / hi_d  # inverse distance: a < b
    b = 1.0 / lo_d
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc = cost_fn(1.0 / c)
    fd = cost_fn(1.0 / d)
    for _ in range(iters):
        left = fc <= fd
        # minimum in [a, d] when f(c) <= f(d), else in [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - INV_PHI * (b - a)
        new_d = a + INV_PHI * (b - a)
        probe = np.where(left, new_c, new_d)
        fprobe = cost_fn(1.0 / probe)
        c, d, fc, fd = (
            np.where(left, new_c, d),
            np.where(left, c, new_d),
            np.where(left, fprobe, fd),
            np.where(left, fc, fprobe),
        )
    best_inv = np.where(fc <= fd, c, d)
    best_cost = np.minimum(fc, fd)
    improved = best_cost < init_cost
    distance = np.where(improved, 1.0 / best_inv, init)
    cost = np.where(improved, best_cost, init_cost)
    return distance, cost


def local_sweep(
    init: np.ndarray, cost_fn: PatchCost, hyps: np.ndarray, window: int
) -> tuple[np.ndarray, np.ndarray]:
    """Re-sweep ``2 * window + 1`` hypotheses around each pixel's initial distance."""
    d = np.where(np.isfinite(init), init, hyps[0])
    center = np.clip(np.searchsorted(hyps, d), 0, hyps.size - 1)
    # snap to the closer neighbor in inverse distance
    prev = np.clip(center - 1, 0, hyps.size - 1)
    center = np.where(np.abs(1 / hyps[prev] - 1 / d) < np.abs(1 / hyps[center] - 1 / d), prev, center)
    best = np.full(init.shape, np.nan)
    best_cost = np.full(init.shape, np.inf)
    for offset in range(-window, window + 1):
        idx = np.clip(center + offset, 0, hyps.size - 1)
        cand = hyps[idx]
        cost = cost_fn(cand)
        better = (cost < best_cost) | ((cost == best_cost) & (cand < best))
        best = np.where(better & np.isfinite(cost), cand, best)
        best_cost = np.where(better, cost, best_cost)
    return best, best_cost


def smoothness(distance: np.ndarray, image: np.ndarray) -> float:
    """Edge-aware smoothness of a mean-normalized distance map.

    ``mean|dx L*| exp(-|dx I|) + mean|dy L*| exp(-|dy I|)`` with
    ``L* = L / mean(L)``; image gradients are averaged over channels. Pairs
    involving non-finite distances are skipped.
    """
    distance = np.asarray(distance, dtype=np.float64)
    image = as_channels(image)
    if distance.shape != image.shape[:2]:
        raise DimensionMismatch(f"distance {distance.shape} vs image {image.shape[:2]}")
    finite = np.isfinite(distance)
    if not finite.any():
        return 0.0
    norm = distance / distance[finite].mean()
    total = 0.0
    for axis in (1, 0):
        grad_l = np.abs(np.diff(norm, axis=axis))
        grad_i = np.abs(np.diff(image, axis=axis)).mean(axis=-1)
        term = grad_l * np.exp(-grad_i)
        ok = np.isfinite(term)
        if ok.any():
            total += float(term[ok].sum() / ok.sum())
    return total


def fill_low_confidence(
    distance: np.ndarray,
    confident: np.ndarray,
    image: np.ndarray,
    radius: int = 2,
    intensity_tol: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Replace unconfident pixels by the median of similar-looking confident neighbors.

    Returns ``(distance, filled_mask)``; pixels with no usable neighbor stay as
    they were.
    """
    gray = as_channels(image).mean(axis=-1)
    height, width = distance.shape
    out = distance.copy()
    filled = np.zeros(distance.shape, dtype=bool)
    rows, cols = np.nonzero(~confident & np.isfinite(distance))
    for r, c in zip(rows, cols):
        r0, r1 = max(0, r - radius), min(height, r + radius + 1)
        c0, c1 = max(0, c - radius), min(width, c + radius + 1)
        near = confident[r0:r1, c0:c1] & (np.abs(gray[r0:r1, c0:c1] - gray[r, c]) <= intensity_tol)
        near &= np.isfinite(distance[r0:r1, c0:c1])
        if near.any():
            out[r, c] = np.median(distance[r0:r1, c0:c1][near])
            filled[r, c] = True
    return out, filled


def median_cleanup(
    distance: np.ndarray,
    image: np.ndarray,
    radius: int = 3,
    sigma: float = 0.1,
    iterations: int = 1,
) -> np.ndarray:
    """Edge-aware weighted median of a distance map.

    Each finite pixel becomes the weighted median of the finite distances in
    its ``(2r+1)^2`` window, neighbor ``q`` weighted by
    ``exp(-|I(q) - I(p)| / sigma)``. Removes isolated outliers and
    interpolation jitter while keeping steps that coincide with intensity
    edges. Windows are clamped at the image border.
    """
    distance = np.asarray(distance, dtype=np.float64)
    gray = as_channels(image).mean(axis=-1)
    if gray.shape != distance.shape:
        raise DimensionMismatch(f"distance {distance.shape} vs image {gray.shape}")
    if radius < 1 or iterations < 1:
        return distance.copy()
    height, width = distance.shape
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    shifts = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    ri = np.stack([np.broadcast_to(np.clip(rows + dy, 0, height - 1), (height, width)) for dy, _ in shifts])
    ci = np.stack([np.broadcast_to(np.clip(cols + dx, 0, width - 1), (height, width)) for _, dx in shifts])
    weights = np.exp(-np.abs(gray[ri, ci] - gray[None]) / sigma)
    out = distance
    for _ in range(iterations):
        values = out[ri, ci]
        finite = np.isfinite(values)
        w = np.where(finite, weights, 0.0)
        order = np.argsort(np.where(finite, values, np.inf), axis=0, kind="stable")
        values = np.take_along_axis(values, order, axis=0)
        cum = np.cumsum(np.take_along_axis(w, order, axis=0), axis=0)
        k = np.argmax(cum >= 0.5 * cum[-1][None], axis=0)
        median = np.take_along_axis(values, k[None], axis=0)[0]
        out = np.where(np.isfinite(out) & (cum[-1] > 0), median, out)
    return out


# ---------------------------------------------------------------------------
# Pyramid driver
# ---------------------------------------------------------------------------


def downsample(image: np.ndarray) -> np.ndarray:
    """2x2 box average; dimensions must be even."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    return image.reshape(h // 2, 2, w // 2, 2, *image.shape[2:]).mean(axis=(1, 3))


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // 2, 2, w // 2, 2).all(axis=(1, 3))


def upsample_nearest(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows = np.minimum(np.arange(shape[0]) * values.shape[0] // shape[0], values.shape[0] - 1)
    cols = np.minimum(np.arange(shape[1]) * values.shape[1] // shape[1], values.shape[1] - 1)
    return values[rows[:, None], cols[None, :]]


def _usable_levels(cam: MeiIntrinsics, requested: int) -> int:
    levels = 1
    while levels < requested:
        factor = 2**levels
        if cam.width % factor or cam.height % factor or min(cam.width, cam.height) // factor < 8:
            break
        levels += 1
    return levels


def _check_parallax(sources: Sequence[SourceView]) -> None:
    for i, src in enumerate(sources):
        baseline = float(np.linalg.norm(src.pose.translation))
        if baseline < MIN_BASELINE:
            raise NoParallax(
                f"source {i} has baseline {baseline:.3g} m < {MIN_BASELINE} m; distance is unobservable"
            )


def estimate(
    target: np.ndarray,
    sources: Sequence[SourceView],
    cam: MeiIntrinsics,
    config: EstimatorConfig = EstimatorConfig(),
    rays: RayTable | None = None,
    target_mask: np.ndarray | None = None,
) -> EstimateResult:
    """Recover a metric distance map for ``target``.

    Raises:
        NoParallax: a source has (near) zero translation.
        EmptyInput: no sources.
    """
    if not sources:
        raise EmptyInput("need at least one source view")
    _check_parallax(sources)
    hyps = inverse_depth_hypotheses(config.n_hyps, config.l_min, config.l_max)
    levels = _usable_levels(cam, config.levels)

    # level 0 is full resolution
    pyramid = [(as_channels(target), list(sources), cam, rays, target_mask)]
    for _ in range(1, levels):
        tgt, srcs, c, _, tm = pyramid[-1]
        small = [
            SourceView(
                image=downsample(as_channels(s.image)),
                pose=s.pose,
                cam=None if s.cam is None else s.cam.scaled(0.5),
                mask=None if s.mask is None else downsample_mask(np.asarray(s.mask, dtype=bool)),
            )
            for s in srcs
        ]
        pyramid.append((downsample(tgt), small, c.scaled(0.5), None, None if tm is None else downsample_mask(tm)))

    distance = None
    spread = None
    timings = []
    for level in range(levels - 1, -1, -1):
        start = time.perf_counter()
        tgt, srcs, c, r, tm = pyramid[level]
        r = r if r is not None else build_ray_table(c)
        cost_fn = PatchCost(tgt, srcs, c, r, config.alpha, tm, config.shiftable_windows)
        if distance is None:
            volume = np.stack([cost_fn.constant(h) for h in hyps], axis=-1)
            distance = argmin_distance(volume, hyps)
            spread = cost_spread(volume)
        else:
            init = upsample_nearest(distance, c.shape)
            spread = upsample_nearest(spread, c.shape)
            distance, _ = local_sweep(init, cost_fn, hyps, config.local_window)
        distance, cost = refine_local(distance, cost_fn, hyps, config.refine_iters)
        distance = np.where(np.isfinite(cost), distance, np.nan)
        if config.cleanup_iters:
            distance = median_cleanup(distance, tgt, config.cleanup_radius, config.cleanup_sigma, config.cleanup_iters)
        timings.append(time.perf_counter() - start)
        log.debug("level %d (%dx%d) done in %.2fs", level, c.width, c.height, timings[-1])

    valid = np.isfinite(distance)
    low = valid & (spread < config.confidence_threshold)
    filled = np.zeros_like(low)
    if config.fill_low_confidence and low.any():
        distance, filled = fill_low_confidence(
            distance, ~low & valid, target, config.fill_radius, config.fill_intensity_tol
        )
    if config.cleanup_iters or filled.any():
        cost = cost_fn(distance)
    return EstimateResult(
        distance=distance,
        confidence=spread,
        valid=valid,
        diagnostics=Diagnostics(
            cost=cost,
            cost_spread=spread,
            low_confidence=low,
            filled=filled,
            smoothness=smoothness(distance, target),
            level_seconds=tuple(timings),
        ),
    )
