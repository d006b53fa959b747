"""Image and distance-map codecs, dataset layout, configuration files.

Dataset layout, one directory per camera::

    <root>/<camera_id>/calib.txt          Mei intrinsics, ``key = value`` lines
    <root>/<camera_id>/poses.txt          world-from-camera pose per frame
    <root>/<camera_id>/images/NNNNNN.png  8-bit grayscale or RGB frames
    <root>/<camera_id>/mask.png           optional vehicle mask, 0 = masked
    <root>/<camera_id>/gt/NNNNNN.pfm      optional ground-truth distance maps

Distance maps are stored either as single-channel little-endian PFM
(float32, lossless for float32 values, NaN for "no value") or as 16-bit PNG
holding ``round(256 * L)`` with 0 meaning "no value"; the PNG form quantizes
at 1/256 m and saturates at 65535/256 (about 255 m).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from .camera import MeiIntrinsics, format_calibration, parse_calibration
from .errors import (
    CalibrationParseError,
    CorruptFile,
    DimensionMismatch,
    InvalidIntrinsics,
    IoFailure,
    LossyConversion,
    MissingCalibration,
    MissingPoseForFrame,
    UnreadableImage,
    UnsupportedFormat,
)
from .estimator import EstimatorConfig
from .fileutil import atomic_write_bytes, atomic_write_text
from .pose import RigidTransform, Trajectory, format_poses, read_poses

log = logging.getLogger(__name__)

PNG_DEPTH_SCALE = 256.0
PNG_DEPTH_MAX = 65535 / PNG_DEPTH_SCALE
FRAME_DIGITS = 6


# ---------------------------------------------------------------------------
# Images and masks
# ---------------------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit PNG as floats in ``[0, 1]``: ``(H, W)`` gray or ``(H, W, 3)``.

    Alpha channels are dropped and palette images expanded to RGB.

    Raises:
        UnreadableImage: missing, undecodable or not 8 bits per channel.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "P":
                img, mode = img.convert("RGB"), "RGB"
            elif mode in ("RGBA", "LA"):
                img, mode = img.convert(mode[:-1]), mode[:-1]
            if mode not in ("L", "RGB"):
                raise UnreadableImage(f"{path}: expected an 8-bit gray or RGB image, got mode {mode}")
            data = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    return data.astype(np.float64) / 255.0


def encode_image(image: np.ndarray) -> bytes:
    """PNG bytes of a ``[0, 1]`` float image, rounded to 8 bits."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise DimensionMismatch(f"expected (H, W) or (H, W, 3) image, got {image.shape}")
    data = np.round(np.clip(np.nan_to_num(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(data).save(buffer, format="PNG")
    return buffer.getvalue()


def write_image(path: str | Path, image: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_image(image))


def read_mask(path: str | Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Vehicle mask as booleans, True where pixels may be used (nonzero)."""
    image = read_image(path)
    if image.ndim == 3:
        image = image.mean(axis=-1)
    if shape is not None and image.shape != tuple(shape):
        raise DimensionMismatch(f"mask {path} is {image.shape}, expected {tuple(shape)}")
    return image > 0


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    return write_image(path, np.asarray(mask, dtype=np.float64))


# ---------------------------------------------------------------------------
# Distance maps
# ---------------------------------------------------------------------------


def encode_pfm(distance: np.ndarray) -> bytes:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    distance = np.asarray(distance)
    if distance.ndim != 2:
        raise DimensionMismatch(f"distance map must be 2-D, got {distance.shape}")
    height, width = distance.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(distance[::-1], dtype="<f4").tobytes()


def decode_pfm(data: bytes, source: str = "<pfm>") -> np.ndarray:
    """Parse a single-channel PFM of either byte order into float64."""
    match = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not match:
        raise CorruptFile(f"{source}: not a PFM file (bad header)")
    kind, width, height, scale = match.groups()
    if kind == b"PF":
        raise UnsupportedFormat(f"{source}: color PFM is not a distance map")
    try:
        scale = float(scale)
    except ValueError:
        raise CorruptFile(f"{source}: bad PFM scale {scale!r}") from None
    if scale == 0:
        raise CorruptFile(f"{source}: PFM scale must be nonzero")
    width, height = int(width), int(height)
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[match.end() :]
    expected = width * height * 4
    if len(body) != expected:
        raise CorruptFile(f"{source}: expected {expected} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype=dtype).reshape(height, width)[::-1]
    return values.astype(np.float64)


def encode_png16(distance: np.ndarray) -> bytes:
    """16-bit PNG holding ``round(256 L)``; invalid or non-positive values map to 0."""
    distance = np.asarray(distance, dtype=np.float64)
    if distance.ndim != 2:
        raise DimensionMismatch(f"distance map must be 2-D, got {distance.shape}")
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(distance) & (distance > 0)
    units = np.where(ok, np.round(np.clip(np.where(ok, distance, 0.0), 0, PNG_DEPTH_MAX) * PNG_DEPTH_SCALE), 0)
    buffer = io.BytesIO()
    Image.fromarray(units.astype(np.uint16)).save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png16(data: bytes, source: str = "<png>") -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode not in ("I;16", "I;16B", "I"):
                raise UnsupportedFormat(f"{source}: expected a 16-bit PNG distance map, got mode {img.mode}")
            units = np.asarray(img).astype(np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise CorruptFile(f"{source}: {exc}") from exc
    return np.where(units > 0, units / PNG_DEPTH_SCALE, np.nan)


def read_distance_map(path: str | Path) -> np.ndarray:
    """Load a ``.pfm`` or 16-bit ``.png`` distance map; NaN marks missing values."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".pfm", ".png"):
        raise UnsupportedFormat(f"{path}: unsupported distance-map extension {path.suffix!r}")
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_pfm(data, str(path)) if suffix == ".pfm" else decode_png16(data, str(path))


def write_distance_map(path: str | Path, distance: np.ndarray) -> Path:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        data = encode_pfm(distance)
    elif suffix == ".png":
        data = encode_png16(distance)
    else:
        raise UnsupportedFormat(f"{path}: unsupported distance-map extension {path.suffix!r}")
    return atomic_write_bytes(path, data)


# ---------------------------------------------------------------------------
# Dataset layout
# ---------------------------------------------------------------------------


def frame_name(frame_id: int, suffix: str) -> str:
    return f"{frame_id:0{FRAME_DIGITS}d}{suffix}"


@dataclass(frozen=True)
class CameraData:
    camera_id: str
    directory: Path
    cam: MeiIntrinsics
    calibration_text: str
    frames: tuple[int, ...]
    trajectory: Trajectory | None
    mask_path: Path | None = None
    gt_frames: tuple[int, ...] = ()

    def image_path(self, frame_id: int) -> Path:
        return self.directory / "images" / frame_name(frame_id, ".png")

    def gt_path(self, frame_id: int) -> Path:
        return self.directory / "gt" / frame_name(frame_id, ".pfm")

    def image(self, frame_id: int) -> np.ndarray:
        return read_image(self.image_path(frame_id))

    def gt(self, frame_id: int) -> np.ndarray:
        return read_distance_map(self.gt_path(frame_id))

    def mask(self) -> np.ndarray | None:
        return None if self.mask_path is None else read_mask(self.mask_path, self.cam.shape)

    def pose(self, frame_id: int) -> RigidTransform:
        if self.trajectory is None or frame_id not in self.trajectory:
            raise MissingPoseForFrame(f"camera {self.camera_id}: no pose for frame {frame_id}")
        return self.trajectory[frame_id]


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    cameras: Mapping[str, CameraData]
    warnings: tuple[str, ...] = field(default=())

    def __getitem__(self, camera_id: str) -> CameraData:
        return self.cameras[camera_id]

    @property
    def camera_ids(self) -> list[str]:
        return sorted(self.cameras)


def _frame_ids(directory: Path, suffix: str, camera_id: str, warnings: list[str]) -> tuple[int, ...]:
    ids = []
    for path in sorted(directory.glob(f"*{suffix}")):
        if path.stem.isdigit():
            ids.append(int(path.stem))
        else:
            warnings.append(f"{camera_id}: ignoring {path.name} (name is not a frame number)")
    return tuple(sorted(ids))


def _check_image(path: Path, cam: MeiIntrinsics) -> None:
    try:
        with Image.open(path) as img:
            size = img.size
            img.verify()
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    if size != (cam.width, cam.height):
        raise UnreadableImage(f"{path}: size {size[0]}x{size[1]} does not match calibration {cam.width}x{cam.height}")


def load_camera(
    directory: str | Path, require_poses: bool = True, check_images: bool = True
) -> tuple[CameraData, list[str]]:
    """Index one camera directory; returns the camera and any warnings."""
    directory = Path(directory)
    camera_id = directory.name
    warnings: list[str] = []
    calib_path = directory / "calib.txt"
    if not calib_path.is_file():
        raise MissingCalibration(f"camera {camera_id}: {calib_path} not found")
    text = calib_path.read_text()
    try:
        cam = parse_calibration(text, str(calib_path))
    except (CalibrationParseError, InvalidIntrinsics) as exc:
        raise MissingCalibration(f"camera {camera_id}: {exc}") from exc

    frames = _frame_ids(directory / "images", ".png", camera_id, warnings)
    if check_images:
        for frame_id in frames:
            _check_image(directory / "images" / frame_name(frame_id, ".png"), cam)

    pose_path = directory / "poses.txt"
    trajectory = read_poses(pose_path) if pose_path.is_file() else None
    if require_poses:
        if trajectory is None:
            raise MissingPoseForFrame(f"camera {camera_id}: {pose_path} not found")
        missing = [f for f in frames if f not in trajectory]
        if missing:
            shown = ", ".join(str(f) for f in missing[:5]) + (" ..." if len(missing) > 5 else "")
            raise MissingPoseForFrame(f"camera {camera_id}: no pose for frame(s) {shown} in {pose_path}")

    mask_path = directory / "mask.png"
    gt_frames = _frame_ids(directory / "gt", ".pfm", camera_id, warnings)
    orphans = sorted(set(gt_frames) - set(frames))
    if orphans:
        warnings.append(f"{camera_id}: ground truth without image for frame(s) {orphans[:5]}")
    for message in warnings:
        log.warning(message)
    return CameraData(
        camera_id=camera_id,
        directory=directory,
        cam=cam,
        calibration_text=text,
        frames=frames,
        trajectory=trajectory,
        mask_path=mask_path if mask_path.is_file() else None,
        gt_frames=gt_frames,
    ), warnings


def load_dataset(root: str | Path, require_poses: bool = True, check_images: bool = True) -> DatasetIndex:
    """Index every camera directory (one holding ``images/`` or ``calib.txt``) under ``root``.

    Raises:
        MissingCalibration: a camera directory lacks a usable ``calib.txt``.
        MissingPoseForFrame: with ``require_poses``, a frame has no pose.
        UnreadableImage: an image cannot be decoded or has the wrong size.
        IoFailure: ``root`` is not a directory.
    """
    root = Path(root)
    if not root.is_dir():
        raise IoFailure(f"dataset root {root} is not a directory")
    cameras = {}
    warnings: list[str] = []
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        if not ((directory / "images").is_dir() or (directory / "calib.txt").exists()):
            continue
        camera, notes = load_camera(directory, require_poses, check_images)
        cameras[camera.camera_id] = camera
        warnings.extend(notes)
    if not cameras:
        warnings.append(f"{root}: no camera directories found")
    return DatasetIndex(root=root, cameras=cameras, warnings=tuple(warnings))


def write_camera(
    root: str | Path,
    camera_id: str,
    cam: MeiIntrinsics,
    trajectory: Trajectory,
    images: Mapping[int, np.ndarray],
    distances: Mapping[int, np.ndarray] | None = None,
    mask: np.ndarray | None = None,
) -> Path:
    """Write one camera directory in the dataset layout; returns its path."""
    directory = Path(root) / camera_id
    atomic_write_text(directory / "calib.txt", format_calibration(cam))
    atomic_write_text(directory / "poses.txt", format_poses(trajectory))
    for frame_id, image in sorted(images.items()):
        write_image(directory / "images" / frame_name(frame_id, ".png"), image)
    for frame_id, distance in sorted((distances or {}).items()):
        write_distance_map(directory / "gt" / frame_name(frame_id, ".pfm"), distance)
    if mask is not None:
        write_mask(directory / "mask.png", mask)
    return directory


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def read_config(path: str | Path | None) -> configparser.ConfigParser:
    """Parse a sectioned ``key = value`` file; ``None`` gives an empty config."""
    parser = configparser.ConfigParser()
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh, source=str(path))
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise CorruptFile(f"{path}: {exc}") from exc
    return parser


def _coerce(value: str, like: Any, where: str) -> Any:
    try:
        if isinstance(like, bool):
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return type(like)(value)
    except ValueError:
        raise CorruptFile(f"{where}: cannot interpret {value!r} as {type(like).__name__}") from None


def estimator_config(
    parser: configparser.ConfigParser | None = None, overrides: Mapping[str, Any] | None = None
) -> EstimatorConfig:
    """Build an :class:`EstimatorConfig`: defaults, then ``[estimator]``, then ``overrides``.

    ``None`` values in ``overrides`` mean "not given" and do not override.
    """
    defaults = EstimatorConfig()
    values = {}
    if parser is not None and parser.has_section("estimator"):
        known = {f.name for f in dataclasses.fields(EstimatorConfig)}
        for key, raw in parser.items("estimator"):
            if key not in known:
                raise CorruptFile(f"[estimator]: unknown key {key!r}")
            values[key] = _coerce(raw, getattr(defaults, key), f"[estimator] {key}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return dataclasses.replace(defaults, **values)
    except ValueError as exc:
        raise CorruptFile(f"invalid estimator configuration: {exc}") from exc


def config_value(parser: configparser.ConfigParser, section: str, key: str, default: Any = None) -> Any:
    """Typed lookup with the type taken from ``default``; missing keys give ``default``."""
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    return raw if default is None else _coerce(raw, default, f"[{section}] {key}")


# ---------------------------------------------------------------------------
# KITTI-360 fisheye calibration
# ---------------------------------------------------------------------------


def parse_kitti360_fisheye(text: str, allow_lossy: bool = False, source: str = "<yaml>") -> MeiIntrinsics:
    """Convert a KITTI-360 ``MEI`` fisheye calibration (OpenCV-style YAML).

    The file carries tangential terms ``p1``/``p2`` that the camera model here
    lacks. Nonzero values raise :class:`LossyConversion` unless
    ``allow_lossy`` is set, in which case they are dropped with a warning.
    KITTI-360 puts pixel centers at integer coordinates, so the principal
    point is shifted by +0.5 into the half-integer convention used here.
    """
    body = "\n".join(line for line in text.splitlines() if not line.lstrip().startswith("%"))
    try:
        data = yaml.safe_load(body)
        if not isinstance(data, dict):
            raise ValueError("top level is not a mapping")
        model = str(data.get("model_type", "MEI")).upper()
        if model != "MEI":
            raise UnsupportedFormat(f"{source}: model_type {model} is not MEI")
        mirror = data["mirror_parameters"]
        dist = data["distortion_parameters"]
        proj = data["projection_parameters"]
        params = dict(
            xi=float(mirror["xi"]),
            k1=float(dist["k1"]),
            k2=float(dist["k2"]),
            gamma1=float(proj["gamma1"]),
            gamma2=float(proj["gamma2"]),
            u0=float(proj["u0"]) + 0.5,
            v0=float(proj["v0"]) + 0.5,
            width=int(data["image_width"]),
            height=int(data["image_height"]),
        )
        tangential = (float(dist.get("p1", 0.0)), float(dist.get("p2", 0.0)))
    except UnsupportedFormat:
        raise
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise CalibrationParseError(f"{source}: not a KITTI-360 fisheye calibration: {exc}") from exc
    if any(tangential):
        message = f"{source}: tangential distortion p1={tangential[0]:.6g}, p2={tangential[1]:.6g} has no counterpart"
        if not allow_lossy:
            raise LossyConversion(message + "; pass allow_lossy to drop it")
        log.warning("%s; dropped", message)
    return MeiIntrinsics(**params)
