"""Dense-flow files, KITTI pose files, resizing, encoding, blur and sequence manifests."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import from_se3, orthonormalize, pose_defect, relative_pose

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
KITTI_SIZE = (376, 1241)
NETWORK_SIZE = (94, 300)


class FlowFormatError(ValueError):
    pass


class PoseFormatError(ValueError):
    pass


# ------------------------------------------------------------------ .flo files
def write_flo(field: np.ndarray, path) -> None:
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[2] != 2 or min(field.shape[:2]) < 1:
        raise FlowFormatError(f"flow field must be (H, W, 2), got {field.shape}")
    h, w = field.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(field, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a Middlebury ``.flo`` file into an ``(H, W, 2)`` float64 array."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: header truncated at byte {len(data)} (need 12)")
    magic, w, h = struct.unpack_from("<fii", data, 0)
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r} at byte 0 (expected {FLO_MAGIC})")
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {w}x{h} at byte 4")
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FlowFormatError(f"{path}: payload truncated at byte {len(data)} (need {need})")
    flow = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12)
    return flow.astype(np.float64).reshape(h, w, 2)


# -------------------------------------------------------------- KITTI poses
def parse_poses(path, tol: float = 1e-6) -> list[np.ndarray]:
    """Parse a KITTI pose file (12 numbers per line: top 3x4 of each pose).

    Rotations off SO(3) by less than ``tol`` are re-orthonormalised; worse
    ones are rejected with their line number.
    """
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 12:
                raise PoseFormatError(f"{path}:{lineno}: expected 12 values, found {len(parts)}")
            try:
                vals = np.array([float(p) for p in parts])
            except ValueError as exc:
                raise PoseFormatError(f"{path}:{lineno}: {exc}") from exc
            T = np.eye(4)
            T[:3, :] = vals.reshape(3, 4)
            if not np.all(np.isfinite(T)):
                raise PoseFormatError(f"{path}:{lineno}: non-finite value")
            d = pose_defect(T)
            if d > tol:
                raise PoseFormatError(f"{path}:{lineno}: rotation not orthonormal (defect {d:.2e} > {tol:.0e})")
            poses.append(orthonormalize(T) if d > 0 else T)
    return poses


def format_pose(T: np.ndarray) -> str:
    return " ".join(f"{v:.12g}" for v in np.asarray(T)[:3, :].reshape(-1))


def write_poses(poses: Sequence[np.ndarray], path) -> None:
    with open(path, "w") as f:
        for T in poses:
            f.write(format_pose(T) + "\n")


# ------------------------------------------------------------------ resizing
def _bilinear_axis(n_old: int, n_new: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-centre alignment; edges clamp
    src = (np.arange(n_new) + 0.5) * (n_old / n_new) - 0.5
    src = np.clip(src, 0.0, n_old - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_old - 1)
    return i0, i1, src - i0


def resize_flow(field: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resample a flow field and rescale its vectors to the new pixel grid."""
    field = np.asarray(field, dtype=np.float64)
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    h, w = field.shape[:2]
    if (h, w) == (height, width):
        return field.copy()
    r0, r1, fr = _bilinear_axis(h, height)
    c0, c1, fc = _bilinear_axis(w, width)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = field[r0][:, c0] * (1 - fc) + field[r0][:, c1] * fc
    bot = field[r1][:, c0] * (1 - fc) + field[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    out[..., 0] *= width / w
    out[..., 1] *= height / h
    return out


# ------------------------------------------------------------------ encoding
@dataclass(frozen=True)
class FlowEncoding:
    """Affine map of signed flow (pixels) onto [0, 1]: ``(u + F) / 2F`` clamped."""

    bound: float = 64.0

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError("saturation bound must be positive")


def encode_flow(field: np.ndarray, enc: FlowEncoding = FlowEncoding()) -> np.ndarray:
    return np.clip((np.asarray(field, dtype=np.float64) + enc.bound) / (2.0 * enc.bound), 0.0, 1.0)


def decode_flow(encoded: np.ndarray, enc: FlowEncoding = FlowEncoding()) -> np.ndarray:
    return np.asarray(encoded, dtype=np.float64) * (2.0 * enc.bound) - enc.bound


def saturation_fraction(field: np.ndarray, enc: FlowEncoding = FlowEncoding()) -> float:
    """Fraction of pixels with at least one component clipped by the encoding."""
    field = np.asarray(field)
    if field.size == 0:
        return 0.0
    clipped = np.any(np.abs(field) > enc.bound, axis=-1)
    return float(clipped.mean())


# ---------------------------------------------------------------------- blur
def gaussian_kernel(radius: int) -> np.ndarray:
    """Normalised 1-D Gaussian with half-width ``radius`` and sigma ``radius / 2``."""
    if radius <= 0:
        raise ValueError("blur radius must be > 0")
    sigma = radius / 2.0
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(frames: np.ndarray, radius: int, channels_last: bool = False, is_flow: bool = False) -> np.ndarray:
    """Separable Gaussian blur over the spatial axes of ``(..., H, W)`` frames
    (``(..., H, W, C)`` with ``channels_last``), reflecting at the borders.

    Blur belongs on source images, before flow is computed.  Blurring a flow
    field directly is accepted as a fallback and warns.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if is_flow:
        warnings.warn("blurring flow channels directly; blur the source images when available", stacklevel=2)
        channels_last = True
    k = gaussian_kernel(radius)
    out = frames
    for ax in ((-3, -2) if channels_last else (-2, -1)):
        out = correlate1d(out, k, axis=ax % frames.ndim, mode="reflect")
    return out


# ----------------------------------------------------------------- manifests
@dataclass
class PairRecord:
    flow_path: str
    label: np.ndarray  # (6,) motion vector
    first: int | None = None
    second: int | None = None


@dataclass
class SequenceManifest:
    sequence: str
    subsample: int = 1
    frame_rate: float = 10.0
    records: list[PairRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records]).reshape(-1, 6)

    @property
    def paths(self) -> list[str]:
        return [r.flow_path for r in self.records]


def default_flow_name(i: int, j: int) -> str:
    return f"{i:06d}_{j:06d}.flo"


def make_subsampled_manifest(
    frames: Sequence,
    poses: Sequence[np.ndarray],
    s: int,
    sequence: str = "seq",
    frame_rate: float = 10.0,
    flow_name: Callable[[int, int], str] = default_flow_name,
) -> SequenceManifest:
    """Pair frame ``i`` with frame ``i + s`` and label it with their relative motion."""
    if s < 1:
        raise ValueError(f"sub-sample factor must be >= 1, got {s}")
    if len(frames) != len(poses):
        raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    if s >= len(frames):
        raise ValueError(f"sub-sample factor {s} leaves no pairs in {len(frames)} frames")
    man = SequenceManifest(sequence, s, frame_rate)
    for i in range(len(frames) - s):
        label = from_se3(relative_pose(poses[i], poses[i + s]))
        man.records.append(PairRecord(flow_name(i, i + s), label, i, i + s))
    return man


def write_manifest(man: SequenceManifest, path) -> None:
    with open(path, "w") as f:
        f.write(f"# sequence={man.sequence} subsample={man.subsample} frame_rate={man.frame_rate:g}\n")
        for r in man.records:
            f.write(r.flow_path + " " + " ".join(f"{v:.17g}" for v in r.label) + "\n")


def read_manifest(path) -> SequenceManifest:
    man = SequenceManifest(Path(path).stem)
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "sequence":
                        man.sequence = val
                    elif key == "subsample":
                        man.subsample = int(val)
                    elif key == "frame_rate":
                        man.frame_rate = float(val)
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected path + 6 numbers, found {len(parts)} fields")
            try:
                label = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            man.records.append(PairRecord(parts[0], label))
    return man


def load_flows(man: SequenceManifest, root=None, size: tuple[int, int] | None = None,
               enc: FlowEncoding | None = FlowEncoding()) -> np.ndarray:
    """Read, optionally resize and encode every flow of a manifest into ``(N, H, W, 2)``."""
    base = Path(root) if root is not None else Path(".")
    out = []
    saturated = 0.0
    for r in man.records:
        p = Path(r.flow_path)
        f = read_flo(p if p.is_absolute() else base / p)
        if size is not None and f.shape[:2] != tuple(size):
            f = resize_flow(f, *size)
        if enc is not None:
            saturated += saturation_fraction(f, enc)
            f = encode_flow(f, enc)
        out.append(f)
    if out and enc is not None:
        log.info("%s: %.3f%% of pixels saturated at F=%g", man.sequence, 100 * saturated / len(out), enc.bound)
    if not out:
        return np.zeros((0, *(size or (0, 0)), 2))
    return np.stack(out)


# ------------------------------------------------------------------- config
def read_config(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    cfg: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise ValueError(f"{path}:{lineno}: expected key=value")
            cfg[key.strip()] = val.strip()
    return cfg


def write_config(cfg: dict, path) -> None:
    with open(path, "w") as f:
        for k in sorted(cfg):
            f.write(f"{k}={cfg[k]}\n")


__all__ = [
    "read_flo", "write_flo", "parse_poses", "write_poses", "resize_flow", "FlowEncoding", "encode_flow",
    "decode_flow", "saturation_fraction", "gaussian_kernel", "gaussian_blur", "make_subsampled_manifest",
    "SequenceManifest", "PairRecord", "write_manifest", "read_manifest", "load_flows", "read_config",
    "write_config", "FlowFormatError", "PoseFormatError",
]
