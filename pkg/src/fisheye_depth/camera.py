"""Mei unified camera model.

Forward projection of a camera-frame point ``X``::

    X' = X / |X|                          (unit sphere)
    x  = X'_x / (Z' + xi),  y = X'_y / (Z' + xi)
    x_d = x (1 + k1 r^2 + k2 r^4)         (r^2 = x^2 + y^2)
    u  = gamma1 x_d + u0,   v = gamma2 y_d + v0

Reprojection inverts the chain: the radial polynomial is inverted with
Newton-Raphson on ``f(r) = r (1 + k1 r^2 + k2 r^4) - r_d`` and the mirror
step is inverted by bisection on the sphere constraint
``(x^2 + y^2)(Z' + xi)^2 + Z'^2 = 1``.

Every operation exists in two flavours: array functions
(``project_points``, ``unproject_pixels``, ...) that return a status code per
element and never raise, and scalar functions (``project``, ``unproject``,
...) that raise a typed error on failure.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BehindCamera,
    CalibrationParseError,
    InvalidIntrinsics,
    NoConvergence,
    NonMonotonicDomain,
    NonPositiveDistance,
    NoRealRoot,
    ZeroNormPoint,
)

VALID_EPS = 1e-6
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-10
BISECTION_MAX_ITER = 200

# per-element status codes of the array API
OK = 0
ZERO_NORM = 1
BEHIND = 2
NO_CONVERGENCE = 3
NON_MONOTONIC = 4
NO_REAL_ROOT = 5

_STATUS_ERRORS = {
    ZERO_NORM: (ZeroNormPoint, "point is at the projection center"),
    BEHIND: (BehindCamera, "point is outside the valid field of view (Z' + xi <= eps)"),
    NO_CONVERGENCE: (NoConvergence, "distortion inversion did not converge"),
    NON_MONOTONIC: (NonMonotonicDomain, "distorted radius lies beyond the invertible range"),
    NO_REAL_ROOT: (NoRealRoot, "pixel has no viewing ray on the unit sphere"),
}


@dataclass(frozen=True)
class MeiIntrinsics:
    """Full parameter set of a Mei fisheye camera.

    ``gamma1``/``gamma2`` are the generalized focal lengths in pixels and
    ``(u0, v0)`` the principal point. Pixel ``(i, j)`` (row, column) has its
    center at continuous coordinate ``(j + 0.5, i + 0.5)``.
    """

    xi: float
    k1: float
    k2: float
    gamma1: float
    gamma2: float
    u0: float
    v0: float
    width: int
    height: int

    def __post_init__(self) -> None:
        for name in ("xi", "k1", "k2", "gamma1", "gamma2", "u0", "v0"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidIntrinsics(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        for name in ("width", "height"):
            value = getattr(self, name)
            if int(value) != value:
                raise InvalidIntrinsics(f"{name} must be an integer, got {value}")
            object.__setattr__(self, name, int(value))
        problem = _invariant_violation(asdict(self))
        if problem:
            raise InvalidIntrinsics(problem)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "MeiIntrinsics":
        """Intrinsics of the same lens imaged at ``factor`` times the resolution.

        Continuous pixel coordinates scale linearly with the pixel-center
        convention, so ``u0`` and ``gamma`` scale by the same factor.
        """
        width = max(1, int(round(self.width * factor)))
        height = max(1, int(round(self.height * factor)))
        return replace(
            self,
            gamma1=self.gamma1 * factor,
            gamma2=self.gamma2 * factor,
            u0=self.u0 * factor,
            v0=self.v0 * factor,
            width=width,
            height=height,
        )

    def identity_token(self) -> str:
        """Stable hex digest identifying this exact parameter set."""
        payload = ",".join(repr(v) for v in asdict(self).values())
        return hashlib.sha256(payload.encode()).hexdigest()


def _invariant_violation(params: dict) -> str | None:
    if params["gamma1"] <= 0:
        return f"gamma1 must be > 0, got {params['gamma1']}"
    if params["gamma2"] <= 0:
        return f"gamma2 must be > 0, got {params['gamma2']}"
    if params["width"] < 1 or params["height"] < 1:
        return f"image size must be >= 1, got {params['width']}x{params['height']}"
    if not 0 <= params["u0"] < params["width"]:
        return f"u0 must lie in [0, width), got {params['u0']}"
    if not 0 <= params["v0"] < params["height"]:
        return f"v0 must lie in [0, height), got {params['v0']}"
    if params["xi"] < 0:
        return f"xi must be >= 0, got {params['xi']}"
    return None


class SolverCounter:
    """Counts per-pixel iterative unprojections (Newton + bisection chains)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    @property
    def count(self) -> int:
        return self._count

    def add(self, n: int) -> None:
        with self._lock:
            self._count += int(n)

    def reset(self) -> None:
        with self._lock:
            self._count = 0


solver_counter = SolverCounter()


def raise_for_status(status: int, context: str = "") -> None:
    """Raise the typed error matching a per-point status code (no-op for OK)."""
    if status != OK:
        error, message = _STATUS_ERRORS[int(status)]
        raise error(f"{context}: {message}" if context else message)


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------


def distortion_factor(r2, k1: float, k2: float):
    return 1.0 + k1 * r2 + k2 * r2 * r2


def project_points(
    points: np.ndarray, cam: MeiIntrinsics, eps: float = VALID_EPS
) -> tuple[np.ndarray, np.ndarray]:
    """Project ``(..., 3)`` camera-frame points to ``(..., 2)`` pixels.

    Returns ``(uv, status)``; ``uv`` is NaN wherever ``status != OK``.
    """
    points = np.asarray(points, dtype=np.float64)
    norm = np.linalg.norm(points, axis=-1)
    status = np.zeros(norm.shape, dtype=np.int8)
    status[~(norm > 0)] = ZERO_NORM
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = points / norm[..., None]
        denom = unit[..., 2] + cam.xi
        status[(status == OK) & ~(denom > eps)] = BEHIND
        x = unit[..., 0] / denom
        y = unit[..., 1] / denom
        factor = distortion_factor(x * x + y * y, cam.k1, cam.k2)
        uv = np.stack(
            [cam.gamma1 * x * factor + cam.u0, cam.gamma2 * y * factor + cam.v0], axis=-1
        )
    uv[status != OK] = np.nan
    return uv, status


def project(point: Sequence[float], cam: MeiIntrinsics, eps: float = VALID_EPS) -> np.ndarray:
    """Project one 3D point to continuous pixel coordinates ``(u, v)``.

    Raises:
        ZeroNormPoint: the point is the camera center.
        BehindCamera: ``Z' + xi <= eps``; the ray is outside the model's domain.
    """
    point = np.asarray(point, dtype=np.float64)
    uv, status = project_points(point[None], cam, eps)
    if status[0] == ZERO_NORM:
        raise ZeroNormPoint(f"cannot project the camera center {tuple(point)}")
    if status[0] == BEHIND:
        raise BehindCamera(f"point {tuple(point)} has Z' + xi <= {eps}")
    return uv[0]


def distort(x, y, cam: MeiIntrinsics):
    factor = distortion_factor(np.asarray(x) ** 2 + np.asarray(y) ** 2, cam.k1, cam.k2)
    return x * factor, y * factor


# ---------------------------------------------------------------------------
# Inverse model
# ---------------------------------------------------------------------------


def radius_newton_array(
    r_d: np.ndarray,
    k1: float,
    k2: float,
    max_iter: int = NEWTON_MAX_ITER,
    tol: float = NEWTON_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Newton-Raphson inversion of ``r (1 + k1 r^2 + k2 r^4) = r_d``.

    Starts from ``r = r_d``. Returns ``(r, status)``.
    """
    r_d = np.asarray(r_d, dtype=np.float64)
    r = r_d.copy()
    status = np.full(r.shape, NO_CONVERGENCE, dtype=np.int8)
    active = np.ones(r.shape, dtype=bool)
    for _ in range(max_iter + 1):
        r2 = r * r
        f = r * (1.0 + k1 * r2 + k2 * r2 * r2) - r_d
        done = active & (np.abs(f) < tol)
        status[done] = OK
        active &= ~done
        if not active.any():
            break
        fp = 1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2
        bad = active & ~(fp > 0)
        status[bad] = NON_MONOTONIC
        active &= ~bad
        step = np.where(active, f / np.where(active, fp, 1.0), 0.0)
        r = r - step
    return r, status


def newton_raphson_radius(
    r_d: float, k1: float, k2: float, max_iter: int = NEWTON_MAX_ITER, tol: float = NEWTON_TOL
) -> float:
    """Undistorted radius ``r`` for a distorted radius ``r_d``.

    Raises:
        NoConvergence: ``|f(r)| >= tol`` after ``max_iter`` Newton steps.
        NonMonotonicDomain: ``f'(r) <= 0`` was hit during the iteration.
    """
    if not r_d >= 0:
        raise ValueError(f"r_d must be >= 0, got {r_d}")
    r, status = radius_newton_array(np.array([r_d]), k1, k2, max_iter, tol)
    if status[0] == NON_MONOTONIC:
        raise NonMonotonicDomain(
            f"f'(r) <= 0 while inverting r_d={r_d} with k1={k1}, k2={k2}"
        )
    if status[0] == NO_CONVERGENCE:
        raise NoConvergence(f"no convergence for r_d={r_d} with k1={k1}, k2={k2}")
    return float(r[0])


def undistort_array(x_d, y_d, cam: MeiIntrinsics):
    x_d = np.asarray(x_d, dtype=np.float64)
    y_d = np.asarray(y_d, dtype=np.float64)
    r, status = radius_newton_array(np.hypot(x_d, y_d), cam.k1, cam.k2)
    factor = distortion_factor(r * r, cam.k1, cam.k2)
    return x_d / factor, y_d / factor, status


def undistort(x_d: float, y_d: float, cam: MeiIntrinsics) -> tuple[float, float]:
    """Remove radial distortion from normalized-plane coordinates."""
    r = newton_raphson_radius(math.hypot(x_d, y_d), cam.k1, cam.k2)
    factor = float(distortion_factor(r * r, cam.k1, cam.k2))
    return x_d / factor, y_d / factor


def _sphere_residual(z, rho2, xi):
    s = z + xi
    return rho2 * s * s + z * z - 1.0


def invert_mirror_array(
    x, y, xi: float, max_iter: int = BISECTION_MAX_ITER
) -> tuple[np.ndarray, np.ndarray]:
    """Lift undistorted normalized-plane points onto the unit sphere.

    Solves ``rho^2 (Z' + xi)^2 + Z'^2 = 1`` for the forward-facing (largest)
    root by bisection on ``[-xi rho^2 / (1 + rho^2), 1]``. The lower end is
    the vertex of the convex residual, so the residual is monotone on the
    bracket and the root is unique there.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rho2 = x * x + y * y
    lo = -xi * rho2 / (1.0 + rho2)
    hi = np.ones_like(rho2)
    status = np.zeros(rho2.shape, dtype=np.int8)
    g_lo = _sphere_residual(lo, rho2, xi)
    status[~(g_lo <= 0)] = NO_REAL_ROOT
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        open_ = (mid > lo) & (mid < hi)
        if not open_.any():
            break
        below = _sphere_residual(mid, rho2, xi) < 0
        lo = np.where(open_ & below, mid, lo)
        hi = np.where(open_ & ~below, mid, hi)
    pick_hi = np.abs(_sphere_residual(hi, rho2, xi)) <= np.abs(_sphere_residual(lo, rho2, xi))
    z = np.where(pick_hi, hi, lo)
    s = z + xi
    rays = np.stack([x * s, y * s, z], axis=-1)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    rays[status != OK] = np.nan
    return rays, status


def invert_mirror(x: float, y: float, xi: float) -> np.ndarray:
    """Unit direction for an undistorted normalized-plane point.

    Raises:
        NoRealRoot: the point lies outside the image region reachable for ``xi``.
    """
    rays, status = invert_mirror_array(np.array([x]), np.array([y]), xi)
    if status[0] != OK:
        raise NoRealRoot(f"({x}, {y}) is outside the valid region for xi={xi}")
    return rays[0]


def mirror_closed_form(x, y, xi: float) -> np.ndarray:
    """Closed-form forward-facing root of the mirror inversion.

    Used as an independent check on the bisection path.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rho2 = x * x + y * y
    with np.errstate(invalid="ignore"):
        z = (-xi * rho2 + np.sqrt(1.0 + (1.0 - xi * xi) * rho2)) / (rho2 + 1.0)
    s = z + xi
    return np.stack([x * s, y * s, z], axis=-1)


def unproject_pixels(
    uv: np.ndarray, cam: MeiIntrinsics, eps: float = VALID_EPS
) -> tuple[np.ndarray, np.ndarray]:
    """Map ``(..., 2)`` pixel coordinates to ``(..., 3)`` unit rays.

    Returns ``(rays, status)``; rays are NaN where the inverse chain failed.
    """
    uv = np.asarray(uv, dtype=np.float64)
    solver_counter.add(uv[..., 0].size)
    x_d = (uv[..., 0] - cam.u0) / cam.gamma1
    y_d = (uv[..., 1] - cam.v0) / cam.gamma2
    x, y, status = undistort_array(x_d, y_d, cam)
    rays, mirror_status = invert_mirror_array(x, y, cam.xi)
    status = np.where(status == OK, mirror_status, status)
    # keep the inverse consistent with the forward domain check
    status[(status == OK) & ~(rays[..., 2] + cam.xi > eps)] = BEHIND
    rays[status != OK] = np.nan
    return rays, status


def unproject(u: float, v: float, cam: MeiIntrinsics, eps: float = VALID_EPS) -> np.ndarray:
    """Unit ray direction through continuous pixel ``(u, v)``."""
    rays, status = unproject_pixels(np.array([[u, v]]), cam, eps)
    raise_for_status(int(status[0]), f"pixel ({u}, {v})")
    return rays[0]


def lift_to_point(direction: Sequence[float], distance: float) -> np.ndarray:
    """Scale a unit ray by a Euclidean distance (meters)."""
    if not distance > 0:
        raise NonPositiveDistance(f"distance must be > 0, got {distance}")
    return np.asarray(direction, dtype=np.float64) * distance


def distance_of(point: Sequence[float]) -> float:
    """Euclidean distance of a camera-frame point, as stored in distance maps."""
    x, y, z = (float(c) for c in point)
    return math.hypot(x, y, z)  # scaled, so no underflow for tiny components


# ---------------------------------------------------------------------------
# Calibration files
# ---------------------------------------------------------------------------

CALIBRATION_KEYS = ("xi", "k1", "k2", "gamma1", "gamma2", "u0", "v0", "width", "height")
_INT_KEYS = {"width", "height"}
# the invariant each key participates in, for line-numbered reporting
_KEY_CHECKS = {
    "gamma1": lambda p: p["gamma1"] > 0,
    "gamma2": lambda p: p["gamma2"] > 0,
    "width": lambda p: p["width"] >= 1,
    "height": lambda p: p["height"] >= 1,
    "u0": lambda p: 0 <= p["u0"] < p["width"],
    "v0": lambda p: 0 <= p["v0"] < p["height"],
    "xi": lambda p: p["xi"] >= 0,
}


def parse_calibration(text: str, source: str = "<calibration>") -> MeiIntrinsics:
    """Parse ``key = value`` lines into :class:`MeiIntrinsics`.

    Blank lines and ``#`` comments are ignored. Errors name the offending line.
    """
    values: dict[str, float] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CalibrationParseError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CALIBRATION_KEYS:
            raise CalibrationParseError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise CalibrationParseError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            number = float(value)
        except ValueError:
            raise CalibrationParseError(
                f"{source}:{lineno}: value for {key!r} is not a number: {value!r}"
            ) from None
        if not math.isfinite(number):
            raise CalibrationParseError(f"{source}:{lineno}: {key} must be finite")
        if key in _INT_KEYS:
            if number != int(number):
                raise CalibrationParseError(f"{source}:{lineno}: {key} must be an integer")
            number = int(number)
        values[key] = number
        lines[key] = lineno
    missing = [k for k in CALIBRATION_KEYS if k not in values]
    if missing:
        raise CalibrationParseError(
            f"{source}: missing key(s) {', '.join(missing)} (after line {len(text.splitlines())})"
        )
    for key, check in _KEY_CHECKS.items():
        if not check(values):
            raise CalibrationParseError(
                f"{source}:{lines[key]}: {key} = {values[key]} violates its invariant"
            )
    return MeiIntrinsics(**values)


def read_calibration(path: str | Path) -> MeiIntrinsics:
    path = Path(path)
    return parse_calibration(path.read_text(), source=str(path))


def format_calibration(cam: MeiIntrinsics) -> str:
    return "".join(f"{key} = {getattr(cam, key)!r}\n" for key in CALIBRATION_KEYS)
