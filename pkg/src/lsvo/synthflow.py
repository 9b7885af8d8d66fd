"""Synthetic dense flow from known ego-motion and depth (instantaneous motion field).

For a centred pixel (x, y), focal f, depth Z, translation t and small
rotation w the field is

    u = (-f tx + x tz) / Z + (x y / f) wx - (f + x^2 / f) wy + y wz
    v = (-f ty + y tz) / Z + (f + y^2 / f) wx - (x y / f) wy - x wz

i.e. linear in the motion and, for the translational part, in 1 / Z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flowio import PairRecord, SequenceManifest, write_flo, write_manifest

SMALL_ROTATION = 0.2  # rad
SMALL_TRANSLATION = 0.2  # |t| / min depth


@dataclass(frozen=True)
class Camera:
    focal: float = 300.0
    height: int = 94
    width: int = 300
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the image")

    def centred_grid(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.width, dtype=np.float64) - self.cx
        y = np.arange(self.height, dtype=np.float64) - self.cy
        return np.meshgrid(x, y)

    def scaled(self, factor: float) -> "Camera":
        h, w = max(1, round(self.height * factor)), max(1, round(self.width * factor))
        return Camera(self.focal * factor, h, w)


@dataclass(frozen=True)
class DepthModel:
    """``constant`` (params: depth), ``ramp`` (params: top, bottom; linear in the
    image row) or ``map`` (params: an (H, W) array)."""

    kind: str = "constant"
    params: tuple = (10.0,)
    depth_map: np.ndarray | None = field(default=None, compare=False)

    def render(self, camera: Camera) -> np.ndarray:
        if self.kind == "constant":
            Z = np.full((camera.height, camera.width), float(self.params[0]))
        elif self.kind == "ramp":
            top, bottom = (float(v) for v in self.params)
            rows = np.linspace(0.0, 1.0, camera.height)[:, None]
            Z = np.broadcast_to(top + (bottom - top) * rows, (camera.height, camera.width)).copy()
        elif self.kind == "map":
            Z = np.asarray(self.depth_map, dtype=np.float64)
            if Z.shape != (camera.height, camera.width):
                raise ValueError(f"depth map {Z.shape} does not match camera {camera.height}x{camera.width}")
        else:
            raise ValueError(f"unknown depth model {self.kind!r}")
        if not np.all(Z > 0):
            raise ValueError("depth must be positive everywhere")
        return Z


def motion_field(camera: Camera, depth: DepthModel | np.ndarray, y, check_regime: bool = False) -> np.ndarray:
    """Dense ``(H, W, 2)`` flow induced by motion ``y = (t, w)`` under the first-order model."""
    Z = depth.render(camera) if isinstance(depth, DepthModel) else np.asarray(depth, dtype=np.float64)
    if not np.all(Z > 0):
        raise ValueError("depth must be positive everywhere")
    y = np.asarray(y, dtype=np.float64)
    tx, ty, tz, wx, wy, wz = y
    if check_regime:
        if np.linalg.norm(y[3:]) >= SMALL_ROTATION or np.linalg.norm(y[:3]) / Z.min() >= SMALL_TRANSLATION:
            raise ValueError(f"motion {y} leaves the small-motion regime for min depth {Z.min():.2f} m")
    f = camera.focal
    x, yy = camera.centred_grid()
    inv = 1.0 / Z
    u = (-f * tx + x * tz) * inv + (x * yy / f) * wx - (f + x * x / f) * wy + yy * wz
    v = (-f * ty + yy * tz) * inv + (f + yy * yy / f) * wx - (x * yy / f) * wy - x * wz
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class MotionSpec:
    """Driving-like motion sampler; ``scale`` multiplies every component (d1/d2/d3 dynamics)."""

    forward: tuple[float, float] = (0.3, 1.0)  # tz range, m/frame
    lateral_std: float = 0.02  # tx, ty std, m/frame
    yaw: tuple[float, float] = (-0.03, 0.03)  # ry range, rad/frame
    tilt_std: float = 0.003  # rx, rz std, rad/frame
    scale: float = 1.0

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        tz = rng.uniform(*self.forward)
        tx, ty = rng.normal(0.0, self.lateral_std, 2)
        ry = rng.uniform(*self.yaw)
        rx, rz = rng.normal(0.0, self.tilt_std, 2)
        return self.scale * np.array([tx, ty, tz, rx, ry, rz])


def sample_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_samples(n: int, spec: MotionSpec, depth: DepthModel, camera: Camera, seed: int,
                     noise: float = 0.0, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """In-memory ``(flows (n, H, W, 2), labels (n, 6))``; sample ``i`` uses stream ``(seed, offset + i)``."""
    Z = depth.render(camera)
    flows = np.empty((n, camera.height, camera.width, 2))
    labels = np.empty((n, 6))
    for i in range(n):
        rng = sample_stream(seed, offset + i)
        y = spec.sample(rng)
        flow = motion_field(camera, Z, y)
        if noise > 0:
            flow = flow + rng.normal(0.0, noise, flow.shape)
        flows[i], labels[i] = flow, y
    return flows, labels


def generate_dataset(n: int, spec: MotionSpec, depth: DepthModel, camera: Camera, seed: int, out_dir,
                     noise: float = 0.0, name: str = "synth") -> SequenceManifest:
    """Write ``n`` flow files plus ``<name>.txt`` manifest under ``out_dir``."""
    out = Path(out_dir)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    flows, labels = generate_samples(n, spec, depth, camera, seed, noise)
    man = SequenceManifest(name, subsample=1, frame_rate=10.0)
    for i in range(n):
        rel = f"flow/{name}_{i:06d}.flo"
        write_flo(flows[i], out / rel)
        man.records.append(PairRecord(rel, labels[i], i, i + 1))
    write_manifest(man, out / f"{name}.txt")
    return man
