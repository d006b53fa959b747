from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from fisheye_depth.camera import MeiIntrinsics
from fisheye_depth.estimator import SourceView
from fisheye_depth.pose import RigidTransform, compose, inverse
from fisheye_depth.ray_cache import RayTable, build_ray_table
from fisheye_depth.synth import Frame, SceneSpec, demo_camera, demo_scene, render

BASELINE = 0.3


def pinhole(size: int = 500, gamma: float = 100.0, center: float = 250.0) -> MeiIntrinsics:
    """Camera reduced to a plain pinhole (no mirror, no distortion)."""
    return MeiIntrinsics(
        xi=0.0, k1=0.0, k2=0.0, gamma1=gamma, gamma2=gamma, u0=center, v0=center, width=size, height=size
    )


@dataclass(frozen=True, eq=False)
class RenderedRig:
    cam: MeiIntrinsics
    rays: RayTable
    scene: SceneSpec
    target: Frame
    sources: tuple[Frame, ...]
    source_poses: tuple[RigidTransform, ...]  # world-from-camera
    relative: tuple[RigidTransform, ...]  # source-from-target

    def views(self) -> list[SourceView]:
        return [SourceView(f.image, rel) for f, rel in zip(self.sources, self.relative)]


def render_rig(cam, rays, scene, baseline: float, offsets=(-1, 1)) -> RenderedRig:
    origin = RigidTransform.identity()
    target = render(scene, cam, origin, rays)
    poses = tuple(RigidTransform.from_translation([k * baseline, 0.0, 0.0]) for k in offsets)
    frames = tuple(render(scene, cam, p, rays) for p in poses)
    relative = tuple(compose(inverse(p), origin) for p in poses)
    return RenderedRig(cam, rays, scene, target, frames, poses, relative)


@pytest.fixture(scope="session")
def demo_cam() -> MeiIntrinsics:
    return demo_camera()


@pytest.fixture(scope="session")
def demo_rays(demo_cam) -> RayTable:
    return build_ray_table(demo_cam)


@pytest.fixture(scope="session")
def scene() -> SceneSpec:
    return demo_scene()


@pytest.fixture(scope="session")
def rig(demo_cam, demo_rays, scene) -> RenderedRig:
    """Target at the origin with sources 0.3 m to either side."""
    return render_rig(demo_cam, demo_rays, scene, BASELINE)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run, one line per criterion."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
