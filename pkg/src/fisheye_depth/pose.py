"""Real-scale rigid transforms and trajectories.

Poses come from an external odometry source with metric translation; nothing
here estimates motion. Pose files hold one frame per line, either::

    frame_id r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz      (world-from-camera 3x4)
    frame_id tx ty tz qx qy qz qw                             (quaternion alternative)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidTransform, MissingFrame, PoseParseError

ORTHO_TOL = 1e-9


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``matrix`` in the Frobenius norm."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p -> R p + t`` with ``t`` in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidTransform(
                f"expected 3x3 rotation and 3-vector, got {rotation.shape} and {translation.shape}"
            )
        if not (np.isfinite(rotation).all() and np.isfinite(translation).all()):
            raise InvalidTransform("transform has non-finite entries")
        err = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if err > ORTHO_TOL or abs(np.linalg.det(rotation) - 1.0) > ORTHO_TOL:
            raise InvalidTransform(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation) -> "RigidTransform":
        return cls(np.eye(3), translation)

    @classmethod
    def from_matrix(cls, matrix, orthonormalize: bool = True) -> "RigidTransform":
        """Build from a 3x4 or 4x4 matrix, projecting the rotation onto SO(3)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        rotation = matrix[:3, :3]
        if orthonormalize:
            rotation = nearest_rotation(rotation)
        return cls(rotation, matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "RigidTransform":
        quat = np.asarray(quat_xyzw, dtype=np.float64)
        norm = np.linalg.norm(quat)
        if not norm > 0:
            raise InvalidTransform("zero quaternion")
        return cls(Rotation.from_quat(quat / norm).as_matrix(), translation)

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(..., 3)`` points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.apply(points)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a o b``: apply ``b`` first, then ``a``."""
    rotation = a.rotation @ b.rotation
    # keep long chains on SO(3); a no-op up to rounding for exact rotations
    rotation = nearest_rotation(rotation)
    return RigidTransform(rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


class Trajectory:
    """Ordered world-from-camera poses keyed by integer frame id."""

    def __init__(self, entries: Iterable[tuple[int, RigidTransform]]):
        self._ids: list[int] = []
        self._poses: dict[int, RigidTransform] = {}
        for frame_id, pose in entries:
            frame_id = int(frame_id)
            if self._ids and frame_id <= self._ids[-1]:
                raise PoseParseError(
                    f"frame ids must be strictly increasing ({frame_id} after {self._ids[-1]})"
                )
            self._ids.append(frame_id)
            self._poses[frame_id] = pose

    @property
    def frame_ids(self) -> list[int]:
        return list(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._poses

    def __iter__(self):
        return ((i, self._poses[i]) for i in self._ids)

    def __getitem__(self, frame_id: int) -> RigidTransform:
        try:
            return self._poses[frame_id]
        except KeyError:
            raise MissingFrame(f"frame {frame_id} not in trajectory") from None


def relative_pose(traj: Trajectory, t: int, t_prime: int) -> RigidTransform:
    """camera_{t'}-from-camera_t transform: ``inv(world_from_t') o world_from_t``."""
    return compose(inverse(traj[t_prime]), traj[t])


def parse_poses(text: str, source: str = "<poses>") -> Trajectory:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            frame_id = int(tokens[0])
            numbers = [float(tok) for tok in tokens[1:]]
        except ValueError:
            raise PoseParseError(f"{source}:{lineno}: malformed pose line {raw!r}") from None
        try:
            if len(numbers) == 12:
                pose = RigidTransform.from_matrix(np.reshape(numbers, (3, 4)))
            elif len(numbers) == 7:
                pose = RigidTransform.from_quaternion(numbers[:3], numbers[3:])
            else:
                raise PoseParseError(
                    f"{source}:{lineno}: expected 12 (3x4 matrix) or 7 (t + quaternion) "
                    f"values after the frame id, got {len(numbers)}"
                )
        except InvalidTransform as exc:
            raise PoseParseError(f"{source}:{lineno}: {exc}") from None
        entries.append((frame_id, pose))
    try:
        return Trajectory(entries)
    except PoseParseError as exc:
        raise PoseParseError(f"{source}: {exc}") from None


def read_poses(path: str | Path) -> Trajectory:
    path = Path(path)
    return parse_poses(path.read_text(), source=str(path))


def format_poses(traj: Trajectory) -> str:
    lines = []
    for frame_id, pose in traj:
        values = pose.as_matrix()[:3].ravel()
        lines.append(" ".join([str(frame_id)] + [repr(float(v)) for v in values]))
    return "\n".join(lines) + "\n"
