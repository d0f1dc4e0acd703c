"""Scene model: Gaussian attribute arrays, cameras, covariance, disk formats."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import sh

SCENE_MAGIC = b"G3DS"
SCENE_VERSION = 1


class AttributeClass(Enum):
    """The six independently quantized attribute classes."""

    MEANS = "means"
    SCALES = "scales"
    QUATS = "quats"
    OPACITIES = "opacities"
    SH_DC = "sh_dc"
    SH_AC = "sh_ac"

    def width(self, sh_degree: int) -> int:
        """Scalars per Gaussian contributed by this class."""
        if self is AttributeClass.MEANS or self is AttributeClass.SCALES:
            return 3
        if self is AttributeClass.QUATS:
            return 4
        if self is AttributeClass.OPACITIES:
            return 1
        if self is AttributeClass.SH_DC:
            return 3
        return 3 * ((sh_degree + 1) ** 2 - 1)


ATTRIBUTE_ORDER = (
    AttributeClass.MEANS,
    AttributeClass.SCALES,
    AttributeClass.QUATS,
    AttributeClass.OPACITIES,
    AttributeClass.SH_DC,
    AttributeClass.SH_AC,
)


def row_width(sh_degree: int) -> int:
    """Scalars per Gaussian: 3+3+4+1+3(degree+1)^2."""
    return 11 + 3 * (sh_degree + 1) ** 2


class SceneFormatError(ValueError):
    """Raised on malformed scene/camera/image files."""


@dataclass
class GaussianScene:
    """Columnar Gaussian-splat scene.

    Attribute conventions: ``log_scales`` store log axis lengths,
    ``quats`` are stored unnormalized in (w, x, y, z) order,
    ``opacity_logits`` are pre-sigmoid, ``sh_coeffs`` are band-major
    with shape (n, (degree+1)^2, 3).
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int
    alive: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n = self.means.shape[0]
        if self.alive is None:
            self.alive = np.ones(n, dtype=bool)
        self.validate()

    def validate(self):
        n = self.n_total
        b = sh.n_coeffs(self.sh_degree)
        checks = [
            (self.means, (n, 3)),
            (self.log_scales, (n, 3)),
            (self.quats, (n, 4)),
            (self.opacity_logits, (n,)),
            (self.sh_coeffs, (n, b, 3)),
            (self.alive, (n,)),
        ]
        for arr, shape in checks:
            if arr.shape != shape:
                raise SceneFormatError(
                    f"attribute shape {arr.shape} != expected {shape}"
                )
        if not 0 <= self.sh_degree <= sh.MAX_DEGREE:
            raise SceneFormatError(f"sh_degree {self.sh_degree} out of range")

    @property
    def n_total(self) -> int:
        return self.means.shape[0]

    @property
    def n_alive(self) -> int:
        return int(np.count_nonzero(self.alive))

    @property
    def d_per_gaussian(self) -> int:
        return row_width(self.sh_degree)

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            means=self.means.copy(),
            log_scales=self.log_scales.copy(),
            quats=self.quats.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            sh_degree=self.sh_degree,
            alive=self.alive.copy(),
        )

    def get_block(self, cls: AttributeClass) -> np.ndarray:
        """Flat (n, width) view-or-copy of one attribute class."""
        n = self.n_total
        if cls is AttributeClass.MEANS:
            return self.means
        if cls is AttributeClass.SCALES:
            return self.log_scales
        if cls is AttributeClass.QUATS:
            return self.quats
        if cls is AttributeClass.OPACITIES:
            return self.opacity_logits.reshape(n, 1)
        if cls is AttributeClass.SH_DC:
            return self.sh_coeffs[:, 0, :]
        return self.sh_coeffs[:, 1:, :].reshape(n, cls.width(self.sh_degree))

    def set_block(self, cls: AttributeClass, values: np.ndarray):
        n = self.n_total
        if cls is AttributeClass.MEANS:
            self.means[...] = values
        elif cls is AttributeClass.SCALES:
            self.log_scales[...] = values
        elif cls is AttributeClass.QUATS:
            self.quats[...] = values
        elif cls is AttributeClass.OPACITIES:
            self.opacity_logits[...] = values.reshape(n)
        elif cls is AttributeClass.SH_DC:
            self.sh_coeffs[:, 0, :] = values
        else:
            self.sh_coeffs[:, 1:, :] = values.reshape(
                n, sh.n_coeffs(self.sh_degree) - 1, 3
            )


def quat_to_rotmat(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices from unnormalized (w,x,y,z) quaternions.

    Zero-norm quaternions are rejected.
    """
    quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    norms = np.linalg.norm(quats, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm quaternion")
    w, x, y, z = (quats / norms[..., None]).T
    rot = np.empty(quats.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[..., 0, 1] = 2.0 * (x * y - w * z)
    rot[..., 0, 2] = 2.0 * (x * z + w * y)
    rot[..., 1, 0] = 2.0 * (x * y + w * z)
    rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[..., 1, 2] = 2.0 * (y * z - w * x)
    rot[..., 2, 0] = 2.0 * (x * z - w * y)
    rot[..., 2, 1] = 2.0 * (y * z + w * x)
    rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def covariance(log_scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """World-space covariance R diag(exp(s))^2 R^T per Gaussian."""
    rot = quat_to_rotmat(quats)
    scales = np.exp(np.atleast_2d(np.asarray(log_scales, dtype=np.float64)))
    m = rot * scales[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def compact(scene: GaussianScene) -> GaussianScene:
    """Drop dead rows; a no-op (fresh copy) when everything is alive."""
    keep = scene.alive
    return GaussianScene(
        means=scene.means[keep].copy(),
        log_scales=scene.log_scales[keep].copy(),
        quats=scene.quats[keep].copy(),
        opacity_logits=scene.opacity_logits[keep].copy(),
        sh_coeffs=scene.sh_coeffs[keep].copy(),
        sh_degree=scene.sh_degree,
        alive=np.ones(int(np.count_nonzero(keep)), dtype=bool),
    )


@dataclass
class Camera:
    """Pinhole camera; ``rot`` is the world-to-camera rotation, x_cam = R x + t.

    Camera axes: z forward, x right, y down; pixel (row i, col j) samples at
    (j + 0.5, i + 0.5).
    """

    rot: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        err = np.abs(self.rot @ self.rot.T - np.eye(3)).max()
        if err > 1e-9:
            raise SceneFormatError(f"camera rotation not orthonormal (err {err:.3g})")
        if self.width < 8 or self.height < 8:
            raise SceneFormatError("camera resolution below 8x8")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rot.T @ self.t


def look_at_camera(
    eye, target, width: int, height: int, focal: float | None = None,
    up=(0.0, 0.0, 1.0),
) -> Camera:
    """Camera at ``eye`` looking toward ``target`` with z-up world frame."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    if focal is None:
        focal = 1.1 * width
    return Camera(
        rot=rot,
        t=-rot @ eye,
        fx=float(focal),
        fy=float(focal),
        cx=width / 2.0,
        cy=height / 2.0,
        width=int(width),
        height=int(height),
    )


# ---------------------------------------------------------------------------
# Disk formats


def save_scene(path, scene: GaussianScene):
    """Write the binary scene format.

    Layout (little-endian): magic 'G3DS', u32 version, u32 n, u8 degree,
    then the five f64 row-major blocks (means, log scales, quats, opacity
    logits, SH coefficients), then the alive mask packed 8 flags per byte
    (LSB first) padded to a whole byte.
    """
    n = scene.n_total
    parts = [
        SCENE_MAGIC,
        struct.pack("<II", SCENE_VERSION, n),
        struct.pack("<B", scene.sh_degree),
        np.ascontiguousarray(scene.means, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.log_scales, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.quats, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.opacity_logits, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.sh_coeffs, dtype="<f8").tobytes(),
        np.packbits(scene.alive.astype(np.uint8), bitorder="little").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_scene(path) -> GaussianScene:
    raw = Path(path).read_bytes()
    if raw[:4] != SCENE_MAGIC:
        raise SceneFormatError("bad scene magic")
    if len(raw) < 13:
        raise SceneFormatError("truncated scene header")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != SCENE_VERSION:
        raise SceneFormatError(f"unsupported scene version {version}")
    degree = raw[12]
    if degree > sh.MAX_DEGREE:
        raise SceneFormatError(f"sh_degree {degree} out of range")
    b = sh.n_coeffs(degree)
    counts = [n * 3, n * 3, n * 4, n, n * b * 3]
    need = 13 + 8 * sum(counts) + (n + 7) // 8
    if len(raw) != need:
        raise SceneFormatError(
            f"scene payload length {len(raw)} != expected {need}"
        )
    off = 13
    blocks = []
    for count in counts:
        blocks.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off))
        off += 8 * count
    mask_bytes = np.frombuffer(raw, dtype=np.uint8, offset=off)
    alive = np.unpackbits(mask_bytes, bitorder="little")[:n].astype(bool)
    return GaussianScene(
        means=blocks[0].reshape(n, 3).copy(),
        log_scales=blocks[1].reshape(n, 3).copy(),
        quats=blocks[2].reshape(n, 4).copy(),
        opacity_logits=blocks[3].copy(),
        sh_coeffs=blocks[4].reshape(n, b, 3).copy(),
        sh_degree=int(degree),
        alive=alive,
    )


def save_cameras(path, cameras: list[Camera]):
    """Write cameras as a JSON array of dicts with row-major R."""
    entries = []
    for cam in cameras:
        entries.append(
            {
                "R": [float(v) for v in cam.rot.reshape(9)],
                "t": [float(v) for v in cam.t],
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "width": cam.width,
                "height": cam.height,
            }
        )
    Path(path).write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")


def load_cameras(path) -> list[Camera]:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"bad camera JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise SceneFormatError("camera JSON must be an array")
    cameras = []
    for e in entries:
        try:
            cameras.append(
                Camera(
                    rot=np.array(e["R"], dtype=np.float64).reshape(3, 3),
                    t=np.array(e["t"], dtype=np.float64),
                    fx=float(e["fx"]),
                    fy=float(e["fy"]),
                    cx=float(e["cx"]),
                    cy=float(e["cy"]),
                    width=int(e["width"]),
                    height=int(e["height"]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise SceneFormatError(f"camera entry missing field: {exc}") from exc
    return cameras
