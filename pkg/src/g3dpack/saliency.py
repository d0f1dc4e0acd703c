"""Render-aware importance scores for pruning: blended transmittance mass,
screen-space residual gradient, pixel coverage, and their convex fusion.
The parameter-magnitude Taylor score is kept as an ablation baseline.

Both gradient scores contract the same L1 residual Jacobian, so their
disagreement on occluded splats isolates the scoring rule rather than the
loss term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import sample_view_indices
from .render import (
    COVERAGE_EPS,
    LossConfig,
    RenderOutput,
    backward,
    render_views,
)
from .scene import Camera, GaussianScene

DEFAULT_WEIGHTS = (0.5, 0.3, 0.2)
DEFAULT_COVERAGE_EPS = COVERAGE_EPS
RECOMPUTE_PERIOD = 500


@dataclass
class SaliencyVector:
    """Raw components plus their fused score for every scene row."""

    s_trans: np.ndarray
    s_grad: np.ndarray
    s_cov: np.ndarray
    s_fused: np.ndarray
    weights: tuple
    k_views: int
    view_indices: np.ndarray


def saliency_trans(render_outputs: list[RenderOutput]) -> np.ndarray:
    """Mean over views of each splat's pixel-summed blend weight T*alpha."""
    if not render_outputs:
        raise ValueError("need at least one render output")
    acc = np.zeros_like(render_outputs[0].per_gaussian_transmittance)
    for out in render_outputs:
        acc += out.per_gaussian_transmittance
    return acc / len(render_outputs)


def saliency_cov(
    render_outputs: list[RenderOutput], epsilon: float = DEFAULT_COVERAGE_EPS
) -> np.ndarray:
    """Mean over views of the count of pixels where a splat's alpha clears
    epsilon.  Counts are taken during rendering, so only the renderer's own
    threshold is available here."""
    if not render_outputs:
        raise ValueError("need at least one render output")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if epsilon != COVERAGE_EPS:
        raise ValueError(
            f"coverage counts are rendered at epsilon={COVERAGE_EPS}; "
            "re-render to use a different threshold"
        )
    acc = np.zeros(len(render_outputs[0].per_gaussian_pixel_count))
    for out in render_outputs:
        acc += out.per_gaussian_pixel_count
    return acc / len(render_outputs)


def coverage_proxy(scene: GaussianScene, camera: Camera) -> np.ndarray:
    """Cheap stand-in for coverage: squared screen-space radius from the
    projected covariance's larger eigenvalue.  Zero for culled splats."""
    from .render import _project_arrays

    st = _project_arrays(scene, camera, 0)
    out = np.zeros(scene.n_total)
    cov = st["cov2d"]
    if len(st["index"]):
        tr = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
        eig = tr + np.sqrt(np.maximum(tr * tr - det, 0.0))
        out[st["index"]] = eig
    return out


def _row_sums(grads) -> np.ndarray:
    return (
        grads.means.sum(axis=1)
        + grads.log_scales.sum(axis=1)
        + grads.quats.sum(axis=1)
        + grads.opacity_logits
        + grads.sh_coeffs.sum(axis=(1, 2))
    )


def saliency_grad(
    scene: GaussianScene,
    cameras_subset: list[Camera],
    targets: list[np.ndarray],
) -> np.ndarray:
    """Magnitude of the summed loss-residual sensitivity per splat.

    One L1-only backward pass per view; the signed per-row scalars are
    accumulated across views before taking the absolute value.
    """
    if len(cameras_subset) != len(targets):
        raise ValueError("one target per camera is required")
    if not cameras_subset:
        raise ValueError("need at least one view")
    cfg = LossConfig(l1_only=True)
    acc = np.zeros(scene.n_total)
    for cam, target in zip(cameras_subset, targets):
        _, grads = backward(scene, cam, target, loss_cfg=cfg)
        acc += _row_sums(grads)
    return np.abs(acc)


def taylor_saliency(
    scene: GaussianScene,
    cameras_subset: list[Camera],
    targets: list[np.ndarray],
    forward_scene: GaussianScene | None = None,
) -> np.ndarray:
    """Parameter-magnitude first-order score |sum(grad * theta)| per splat.

    Gradients come from the same L1 backward as saliency_grad (optionally on
    a fake-quantized forward scene); theta is always the raw parameter row,
    since that is what pruning would delete.
    """
    if len(cameras_subset) != len(targets):
        raise ValueError("one target per camera is required")
    if not cameras_subset:
        raise ValueError("need at least one view")
    src = scene if forward_scene is None else forward_scene
    cfg = LossConfig(l1_only=True)
    acc = np.zeros(scene.n_total)
    for cam, target in zip(cameras_subset, targets):
        _, grads = backward(src, cam, target, loss_cfg=cfg)
        acc += (
            (grads.means * scene.means).sum(axis=1)
            + (grads.log_scales * scene.log_scales).sum(axis=1)
            + (grads.quats * scene.quats).sum(axis=1)
            + grads.opacity_logits * scene.opacity_logits
            + (grads.sh_coeffs * scene.sh_coeffs).sum(axis=(1, 2))
        )
    return np.abs(acc)


def fuse(
    s_trans: np.ndarray,
    s_grad: np.ndarray,
    s_cov: np.ndarray,
    weights: tuple = DEFAULT_WEIGHTS,
    alive: np.ndarray | None = None,
    k_views: int = 0,
    view_indices: np.ndarray | None = None,
) -> SaliencyVector:
    """Max-normalize each component over the alive set and blend convexly.

    A component whose alive maximum is zero contributes nothing.  Dead rows
    fuse to exactly zero.
    """
    weights = tuple(float(w) for w in weights)
    if len(weights) != 3:
        raise ValueError("three weights required")
    if any(w < 0.0 for w in weights):
        raise ValueError("weights must be non-negative")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ValueError("weights must sum to 1")
    comps = [np.asarray(c, float) for c in (s_trans, s_grad, s_cov)]
    n = comps[0].shape[0]
    if any(c.shape != (n,) for c in comps):
        raise ValueError("component length mismatch")
    if alive is None:
        alive = np.ones(n, dtype=bool)
    fused = np.zeros(n)
    for w, comp in zip(weights, comps):
        peak = float(comp[alive].max()) if alive.any() else 0.0
        if peak > 0.0:
            fused += w * (comp / peak)
    fused[~alive] = 0.0
    return SaliencyVector(
        s_trans=comps[0],
        s_grad=comps[1],
        s_cov=comps[2],
        s_fused=fused,
        weights=weights,
        k_views=int(k_views),
        view_indices=(
            np.zeros(0, dtype=np.int64) if view_indices is None else view_indices
        ),
    )


def compute_saliency(
    scene: GaussianScene,
    cameras: list[Camera],
    targets: list[np.ndarray],
    k_views: int = 8,
    seed: int = 0,
    weights: tuple = DEFAULT_WEIGHTS,
    quantizer_bank: dict | None = None,
) -> SaliencyVector:
    """Sample k_views views, render, and fuse all three components.

    When a quantizer bank is given, both the forward pass and the gradient
    passes run on the fake-quantized scene (the deployable forward), so the
    scores reflect what compression will actually keep.
    """
    if len(cameras) != len(targets):
        raise ValueError("one target per camera is required")
    view_idx = sample_view_indices(len(cameras), k_views, seed)
    cams = [cameras[i] for i in view_idx]
    tgts = [targets[i] for i in view_idx]
    eval_scene = scene
    if quantizer_bank is not None:
        from .quant import quantize_scene

        eval_scene = quantize_scene(scene, quantizer_bank)
    outputs = render_views(eval_scene, cams)
    s_trans = saliency_trans(outputs)
    s_cov = saliency_cov(outputs)
    s_grad = saliency_grad(eval_scene, cams, tgts)
    return fuse(
        s_trans,
        s_grad,
        s_cov,
        weights=weights,
        alive=scene.alive,
        k_views=k_views,
        view_indices=view_idx,
    )


def write_saliency_csv(path, vector: SaliencyVector, comments: tuple = ()):
    """Debug snapshot: one row per Gaussian with all four scores."""
    from .util import write_csv

    rows = [
        [i, vector.s_trans[i], vector.s_grad[i], vector.s_cov[i], vector.s_fused[i]]
        for i in range(vector.s_fused.shape[0])
    ]
    write_csv(path, ("index", "s_trans", "s_grad", "s_cov", "s_fused"), rows, comments)
