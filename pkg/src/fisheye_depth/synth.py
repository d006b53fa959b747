"""Synthetic fisheye scenes with exact ground-truth distance.

Each pixel's cached ray is cast into a scene of textured planes, spheres and
axis-aligned boxes. Shading is Lambertian under one directional light with no
shadows, so a surface point has the same intensity from every viewpoint, and
textures are sums of a few 3D sinusoids so they stay band-limited.

Scene files use INI sections::

    [scene]
    background = 0.15
    light = 0.25, 0.5, 1.0       # direction the light travels
    ambient = 0.35

    [plane.wall]
    center = 0, 0, 4
    normal = 0, 0, -1
    up = 0, 1, 0
    half_size = 4, 4
    frequency = 2.0              # cycles per meter
    albedo = 0.15, 0.95
    seed = 1

    [sphere.ball]
    center = 0.8, -0.3, 2.5
    radius = 0.6

    [box.crate]
    min = -1, 0.5, 2
    max = -0.4, 1.1, 2.6
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .camera import OK, MeiIntrinsics, unproject_pixels
from .errors import SceneParseError
from .pose import RigidTransform, compose, inverse
from .ray_cache import RayTable, build_ray_table, pixel_centers

T_MIN = 1e-6
N_WAVES = 8


@dataclass(frozen=True)
class Texture:
    frequency: float = 2.0
    albedo: tuple[float, float] = (0.15, 0.95)
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.albedo
        if not (0.0 <= lo <= hi <= 1.0):
            raise SceneParseError(f"albedo range must satisfy 0 <= lo <= hi <= 1, got {self.albedo}")
        if not self.frequency >= 0:
            raise SceneParseError(f"frequency must be >= 0, got {self.frequency}")

    def waves(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        dirs = rng.normal(size=(N_WAVES, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        # octaves from frequency / 8 up to frequency; coarse pyramid levels keep texture
        freqs = self.frequency * 2.0 ** np.linspace(-3.0, 0.0, N_WAVES)
        phases = rng.uniform(0, 2 * np.pi, N_WAVES)
        return dirs * freqs[:, None], phases, np.ones(N_WAVES)

    def albedo_at(self, points: np.ndarray) -> np.ndarray:
        wavevecs, phases, amps = self.waves()
        signal = np.sin(2 * np.pi * points @ wavevecs.T + phases) @ amps / amps.sum()
        lo, hi = self.albedo
        return lo + (hi - lo) * (0.5 + 0.5 * signal)


@dataclass(frozen=True)
class Plane:
    """Finite rectangle centred at ``center`` spanning ``half_size`` along its in-plane axes."""

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    half_size: tuple[float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self) -> None:
        if min(self.half_size) <= 0:
            raise SceneParseError("plane half_size must be positive")
        if np.linalg.norm(np.cross(self.normal, self.up)) < 1e-9:
            raise SceneParseError("plane 'up' must not be parallel to its normal")

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = np.asarray(self.normal, dtype=np.float64)
        n /= np.linalg.norm(n)
        a = np.cross(np.asarray(self.up, dtype=np.float64), n)
        a /= np.linalg.norm(a)
        return n, a, np.cross(n, a)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n, a, b = self.axes()
        c = np.asarray(self.center, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        hit = origin + t[..., None] * dirs - c
        inside = (np.abs(hit @ a) <= self.half_size[0]) & (np.abs(hit @ b) <= self.half_size[1])
        t = np.where((t > T_MIN) & inside, t, np.inf)
        normals = np.broadcast_to(n, dirs.shape)
        return t, normals


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise SceneParseError("sphere radius must be positive")

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        oc = origin - np.asarray(self.center, dtype=np.float64)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        near = -b - root
        far = -b + root
        t = np.where(near > T_MIN, near, np.where(far > T_MIN, far, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        with np.errstate(invalid="ignore"):
            normals = (oc + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs) / self.radius
        return t, normals


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self) -> None:
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise SceneParseError("box max corner must exceed min corner on every axis")

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        t_enter_axes = np.fmin(t1, t2)
        t_exit_axes = np.fmax(t1, t2)
        t_enter = np.max(t_enter_axes, axis=-1)
        t_exit = np.min(t_exit_axes, axis=-1)
        use_exit = t_enter <= T_MIN
        t = np.where(use_exit, t_exit, t_enter)
        t = np.where((t_exit >= t_enter) & (t > T_MIN), t, np.inf)
        axis = np.where(use_exit, np.argmin(t_exit_axes, axis=-1), np.argmax(t_enter_axes, axis=-1))
        normals = np.zeros(dirs.shape)
        np.put_along_axis(normals, axis[..., None], 1.0, axis=-1)
        normals *= -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))
        return t, normals


Primitive = Union[Plane, Sphere, Box]


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    background: float = 0.15
    light: tuple[float, float, float] = (0.25, 0.5, 1.0)
    ambient: float = 0.35

    def __post_init__(self) -> None:
        if not 0 <= self.background <= 1:
            raise SceneParseError("background albedo must be in [0, 1]")
        if not 0 <= self.ambient <= 1:
            raise SceneParseError("ambient must be in [0, 1]")
        if np.linalg.norm(self.light) == 0:
            raise SceneParseError("light direction must be nonzero")


@dataclass(frozen=True, eq=False)
class Frame:
    image: np.ndarray  # (H, W) in [0, 1]
    distance: np.ndarray  # (H, W) meters, NaN where no surface was hit
    valid: np.ndarray  # (H, W) bool


def cast(
    scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit of world-frame rays: ``(t, primitive index, normal)``."""
    best_t = np.full(dirs.shape[:-1], np.inf)
    best_idx = np.full(dirs.shape[:-1], -1)
    best_n = np.zeros(dirs.shape)
    for idx, prim in enumerate(scene.primitives):
        t, normals = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, idx, best_idx)
        best_n = np.where(closer[..., None], normals, best_n)
    return best_t, best_idx, best_n


def _shade(
    scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray, usable: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Radiance, hit distance and hit mask of world-frame rays."""
    t, idx, normals = cast(scene, origin, dirs)
    hit = np.isfinite(t) & usable

    light = -np.asarray(scene.light, dtype=np.float64)
    light /= np.linalg.norm(light)
    # two-sided surfaces: orient normals against the viewing ray
    flip = np.sum(normals * dirs, axis=-1) > 0
    normals = np.where(flip[..., None], -normals, normals)
    shade = scene.ambient + (1.0 - scene.ambient) * np.clip(normals @ light, 0.0, 1.0)

    image = np.full(t.shape, scene.background)
    points = origin + np.where(hit, t, 0.0)[..., None] * dirs
    for i, prim in enumerate(scene.primitives):
        sel = hit & (idx == i)
        if sel.any():
            image[sel] = prim.texture.albedo_at(points[sel]) * shade[sel]
    return image, t, hit


def render(
    scene: SceneSpec,
    cam: MeiIntrinsics,
    pose: RigidTransform,
    rays: RayTable | None = None,
    samples: int = 1,
) -> Frame:
    """Render the view of a camera with world-from-camera ``pose``.

    Distance and validity come from the ray through each pixel center. With
    ``samples > 1`` the intensity is the mean over a ``samples x samples``
    grid of sub-pixel rays, approximating a sensor that integrates over the
    pixel footprint instead of point-sampling the texture.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if rays is None:
        rays = build_ray_table(cam)
    origin = pose.translation
    cam_dirs = np.where(rays.valid[..., None], rays.rays, 0.0)
    image, t, hit = _shade(scene, origin, cam_dirs @ pose.rotation.T, rays.valid)
    if samples > 1:
        centers = pixel_centers(cam.width, cam.height)
        total = np.zeros(image.shape)
        count = np.zeros(image.shape)
        for k in range(samples * samples):
            offset = (np.array([k % samples, k // samples]) + 0.5) / samples - 0.5
            sub_rays, status = unproject_pixels(centers + offset, cam)
            ok = status == OK
            sub_dirs = np.where(ok[..., None], sub_rays, 0.0) @ pose.rotation.T
            sub_image, _, _ = _shade(scene, origin, sub_dirs, ok)
            total += np.where(ok, sub_image, 0.0)
            count += ok
        image = np.where(count > 0, total / np.maximum(count, 1), image)
    distance = np.where(hit, t, np.nan)
    return Frame(image=np.clip(image, 0.0, 1.0), distance=distance, valid=hit)


def render_depth(frame: Frame, rays: RayTable) -> np.ndarray:
    """Z coordinate of each camera-frame hit point."""
    return frame.distance * rays.rays[..., 2]


def generate_pair(
    scene: SceneSpec,
    cam: MeiIntrinsics,
    pose_t: RigidTransform,
    pose_t_prime: RigidTransform,
    rays: RayTable | None = None,
    samples: int = 1,
) -> tuple[Frame, Frame, RigidTransform]:
    """Render two frames and the camera_{t'}-from-camera_t transform between them."""
    if rays is None:
        rays = build_ray_table(cam)
    frame_t = render(scene, cam, pose_t, rays, samples)
    frame_tp = render(scene, cam, pose_t_prime, rays, samples)
    return frame_t, frame_tp, compose(inverse(pose_t_prime), pose_t)


def demo_scene(seed: int = 0) -> SceneSpec:
    """Textured back wall plus a sphere in front of it."""
    return SceneSpec(
        primitives=(
            Plane(
                center=(0.0, 0.0, 4.0),
                normal=(0.0, 0.0, -1.0),
                half_size=(6.0, 6.0),
                texture=Texture(frequency=1.6, albedo=(0.1, 0.95), seed=seed + 1),
            ),
            Sphere(
                center=(0.7, -0.35, 2.4),
                radius=0.6,
                texture=Texture(frequency=2.5, albedo=(0.15, 0.95), seed=seed + 2),
            ),
        ),
    )


def demo_camera() -> MeiIntrinsics:
    """160x160 fisheye with strong mirror parameter and mild radial distortion."""
    return MeiIntrinsics(
        xi=0.9, k1=0.05, k2=-0.005, gamma1=120.0, gamma2=120.0, u0=80.0, v0=80.0, width=160, height=160
    )


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------


def _vec(section, key, n, default=None):
    if key not in section:
        if default is None:
            raise SceneParseError(f"[{section.name}] missing key {key!r}")
        return default
    try:
        values = tuple(float(v) for v in section[key].replace(",", " ").split())
    except ValueError:
        raise SceneParseError(f"[{section.name}] {key} is not numeric: {section[key]!r}") from None
    if len(values) != n:
        raise SceneParseError(f"[{section.name}] {key} needs {n} values, got {len(values)}")
    return values


def _texture(section) -> Texture:
    defaults = Texture()
    return Texture(
        frequency=_vec(section, "frequency", 1, (defaults.frequency,))[0],
        albedo=_vec(section, "albedo", 2, defaults.albedo),
        seed=int(_vec(section, "seed", 1, (float(defaults.seed),))[0]),
    )


def parse_scene(text: str, source: str = "<scene>") -> SceneSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise SceneParseError(f"{source}: {exc}") from None
    primitives = []
    for name in parser.sections():
        sec = parser[name]
        kind = name.split(".", 1)[0]
        if kind == "scene":
            continue
        if kind == "plane":
            primitives.append(
                Plane(
                    center=_vec(sec, "center", 3),
                    normal=_vec(sec, "normal", 3),
                    half_size=_vec(sec, "half_size", 2),
                    up=_vec(sec, "up", 3, (0.0, 1.0, 0.0)),
                    texture=_texture(sec),
                )
            )
        elif kind == "sphere":
            primitives.append(
                Sphere(center=_vec(sec, "center", 3), radius=_vec(sec, "radius", 1)[0], texture=_texture(sec))
            )
        elif kind == "box":
            primitives.append(Box(lo=_vec(sec, "min", 3), hi=_vec(sec, "max", 3), texture=_texture(sec)))
        else:
            raise SceneParseError(f"{source}: unknown section [{name}]")
    if not primitives:
        raise SceneParseError(f"{source}: scene has no primitives")
    defaults = SceneSpec(primitives=())
    if parser.has_section("scene"):
        sec = parser["scene"]
        return SceneSpec(
            primitives=tuple(primitives),
            background=_vec(sec, "background", 1, (defaults.background,))[0],
            light=_vec(sec, "light", 3, defaults.light),
            ambient=_vec(sec, "ambient", 1, (defaults.ambient,))[0],
        )
    return SceneSpec(primitives=tuple(primitives))


def read_scene(path: str | Path) -> SceneSpec:
    path = Path(path)
    return parse_scene(path.read_text(), source=str(path))


def format_scene(scene: SceneSpec) -> str:
    def fmt(values):
        return ", ".join(repr(float(v)) for v in values)

    lines = [
        "[scene]",
        f"background = {scene.background!r}",
        f"light = {fmt(scene.light)}",
        f"ambient = {scene.ambient!r}",
    ]
    for i, prim in enumerate(scene.primitives):
        lines.append("")
        if isinstance(prim, Plane):
            lines += [
                f"[plane.{i}]",
                f"center = {fmt(prim.center)}",
                f"normal = {fmt(prim.normal)}",
                f"up = {fmt(prim.up)}",
                f"half_size = {fmt(prim.half_size)}",
            ]
        elif isinstance(prim, Sphere):
            lines += [f"[sphere.{i}]", f"center = {fmt(prim.center)}", f"radius = {prim.radius!r}"]
        else:
            lines += [f"[box.{i}]", f"min = {fmt(prim.lo)}", f"max = {fmt(prim.hi)}"]
        tex = prim.texture
        lines += [f"frequency = {tex.frequency!r}", f"albedo = {fmt(tex.albedo)}", f"seed = {tex.seed}"]
    return "\n".join(lines) + "\n"
