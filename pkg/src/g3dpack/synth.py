"""Deterministic synthetic fixtures: scene layouts, ring cameras, GT images."""

from __future__ import annotations

import numpy as np

from . import sh
from .render import render_views
from .scene import Camera, GaussianScene, look_at_camera

LAYOUTS = ("grid", "random-blob", "occlusion-pair")

# Occlusion pair: both splats share the exact same center, so the depth sort
# ties on every camera and breaks by index; index 0 (front) blends first at
# every pixel of every view, and index 1 (rear) is composited strictly behind
# it everywhere.  The front is a broad veil whose auxiliary parameters sit at
# exact zeros of the parameter space (unit scale, identity quaternion, zero
# opacity logit), so its parameter-magnitude score comes from color alone.
# The rear is almost fully transparent but carries enormous stale color
# parameters, the classic ghost: blended contribution near zero, yet
# gradient-times-parameter products that dwarf its real influence.  Its
# footprint matches the front (whole image) so that its scale and shape
# gradients stay negligible and the logit carries the gradient mass.
FRONT_LOGIT = 0.0
FRONT_SIGMA = 1.0
FRONT_COLOR = (0.004, 0.0035, 0.003)
REAR_LOGIT = -17.9
REAR_SIGMA = 3.0
REAR_DC_COEFF = 1000.0
REAR_AC_MAGNITUDE = 20.0


def ring_cameras(
    n_cameras: int = 8,
    width: int = 64,
    height: int = 64,
    radius: float = 2.2,
    elevation: float = 0.25,
) -> list[Camera]:
    """Cameras on a ring around the origin with a gentle elevation wobble."""
    cams = []
    for k in range(n_cameras):
        theta = 2.0 * np.pi * k / n_cameras
        eye = np.array(
            [
                radius * np.cos(theta),
                radius * np.sin(theta),
                elevation * np.sin(3.0 * theta),
            ]
        )
        cams.append(look_at_camera(eye, (0.0, 0.0, 0.0), width, height))
    return cams


def _random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    quats = rng.normal(0.0, 0.25, (n, 4))
    quats[:, 0] += 1.0  # keep well away from the zero quaternion
    return quats


def _base_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(0.15, 0.85, (n, 3)) / sh.C0


def _grid_layout(rng, n, degree):
    side = int(np.ceil(n ** (1.0 / 3.0)))
    axis = np.linspace(-0.55, 0.55, side) if side > 1 else np.array([0.0])
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    means = pts.reshape(-1, 3)[:n].copy()
    b = sh.n_coeffs(degree)
    coeffs = np.zeros((n, b, 3))
    coeffs[:, 0, :] = _base_colors(rng, n)
    if b > 1:
        coeffs[:, 1:, :] = rng.normal(0.0, 0.04, (n, b - 1, 3))
    return GaussianScene(
        means=means,
        log_scales=np.log(rng.uniform(0.05, 0.1, (n, 3))),
        quats=_random_quats(rng, n),
        opacity_logits=rng.uniform(1.0, 3.0, n),
        sh_coeffs=coeffs,
        sh_degree=degree,
    )


def _blob_layout(rng, n, degree):
    raw = rng.normal(size=(n, 3))
    radii = 0.6 * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
    means = raw / np.linalg.norm(raw, axis=1, keepdims=True) * radii[:, None]
    b = sh.n_coeffs(degree)
    coeffs = np.zeros((n, b, 3))
    coeffs[:, 0, :] = _base_colors(rng, n)
    if b > 1:
        coeffs[:, 1:, :] = rng.normal(0.0, 0.12, (n, b - 1, 3))
    return GaussianScene(
        means=means,
        log_scales=np.log(rng.uniform(0.04, 0.13, (n, 3))),
        quats=_random_quats(rng, n),
        opacity_logits=rng.uniform(0.5, 3.5, n),
        sh_coeffs=coeffs,
        sh_degree=degree,
    )


def _occlusion_pair_layout(rng, n, degree):
    if n < 2:
        raise ValueError("occlusion-pair layout needs at least 2 Gaussians")
    b = sh.n_coeffs(degree)
    means = np.zeros((n, 3))
    log_scales = np.zeros((n, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    logits = np.zeros(n)
    coeffs = np.zeros((n, b, 3))

    # front occluder and the hidden splat share the exact same center
    log_scales[0] = np.log(FRONT_SIGMA)
    logits[0] = FRONT_LOGIT
    coeffs[0, 0, :] = np.array(FRONT_COLOR) / sh.C0

    log_scales[1] = np.log(REAR_SIGMA)
    logits[1] = REAR_LOGIT
    coeffs[1, 0, :] = REAR_DC_COEFF * np.array([1.0, 0.9, 1.1])
    if b > 1:
        signs = rng.choice([-1.0, 1.0], (b - 1, 3))
        coeffs[1, 1:, :] = signs * rng.uniform(
            0.5 * REAR_AC_MAGNITUDE, REAR_AC_MAGNITUDE, (b - 1, 3)
        )

    extras = n - 2
    if extras:
        theta = rng.uniform(0.0, 2.0 * np.pi, extras)
        rad = rng.uniform(0.1, 0.5, extras)
        zsign = np.where(np.arange(extras) % 2 == 0, 1.0, -1.0)
        means[2:, 0] = rad * np.cos(theta)
        means[2:, 1] = rad * np.sin(theta)
        means[2:, 2] = zsign * rng.uniform(0.4, 0.7, extras)
        log_scales[2:] = np.log(rng.uniform(0.02, 0.05, (extras, 3)))
        quats[2:] = _random_quats(rng, extras)
        logits[2:] = rng.uniform(1.0, 3.0, extras)
        coeffs[2:, 0, :] = _base_colors(rng, extras)
        if b > 1:
            coeffs[2:, 1:, :] = rng.normal(0.0, 0.03, (extras, b - 1, 3))

    return GaussianScene(
        means=means,
        log_scales=log_scales,
        quats=quats,
        opacity_logits=logits,
        sh_coeffs=coeffs,
        sh_degree=degree,
    )


def synthesize_scene(
    seed: int,
    n_gaussians: int,
    layout: str,
    n_cameras: int = 8,
    resolution: int = 64,
    sh_degree: int = 3,
):
    """Build a scene, its ring cameras, and full-precision GT renders.

    Same seed gives bitwise-identical results. Layouts: grid (regular
    lattice), random-blob (view-dependent ball of splats), occlusion-pair
    (one splat fully hidden behind another from every camera).
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    if n_cameras < 8:
        raise ValueError("ring needs at least 8 cameras")
    rng = np.random.default_rng(seed)
    if layout == "grid":
        scene = _grid_layout(rng, n_gaussians, sh_degree)
    elif layout == "random-blob":
        scene = _blob_layout(rng, n_gaussians, sh_degree)
    else:
        scene = _occlusion_pair_layout(rng, n_gaussians, sh_degree)
    cameras = ring_cameras(n_cameras, resolution, resolution)
    images = [out.image for out in render_views(scene, cameras)]
    return scene, cameras, images
