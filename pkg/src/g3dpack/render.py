"""Differentiable CPU renderer: EWA splat projection, front-to-back blending,
analytic backward for every attribute block, and the photometric metrics."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sh
from .scene import Camera, GaussianScene, SceneFormatError, quat_to_rotmat

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
ALPHA_MAX = 0.99
T_STOP = 1e-4
COVERAGE_EPS = 1e-3
PSNR_CAP = 99.0

IMAGE_MAGIC = b"G3DI"


class RenderError(RuntimeError):
    """Raised on degenerate projection state (non-finite or non-PSD)."""


@dataclass
class LossConfig:
    """Photometric loss: (1-w)*L1 + w*(1-SSIM)/2."""

    lambda_ssim: float = 0.2
    l1_only: bool = False


@dataclass
class RenderOutput:
    image: np.ndarray
    per_gaussian_transmittance: np.ndarray
    per_gaussian_pixel_count: np.ndarray
    blend_order: np.ndarray


@dataclass
class SceneGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "SceneGradients":
        return cls(
            means=np.zeros_like(scene.means),
            log_scales=np.zeros_like(scene.log_scales),
            quats=np.zeros_like(scene.quats),
            opacity_logits=np.zeros_like(scene.opacity_logits),
            sh_coeffs=np.zeros_like(scene.sh_coeffs),
        )


def thread_count() -> int:
    """Worker cap from G3D_THREADS; results never depend on it."""
    raw = os.environ.get("G3D_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"G3D_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


# ---------------------------------------------------------------------------
# Projection


def _project_arrays(scene: GaussianScene, camera: Camera, degree: int):
    """Per-Gaussian projection state for the depth-sorted visible set.

    Returns a dict of arrays indexed by blend order; entry 'index' maps back
    into scene rows.
    """
    xcam_all = scene.means @ camera.rot.T + camera.t
    visible = scene.alive & (xcam_all[:, 2] > NEAR_PLANE)
    idx = np.nonzero(visible)[0]
    depth = xcam_all[idx, 2]
    order = np.lexsort((idx, depth))
    idx = idx[order]

    xcam = xcam_all[idx]
    x, y, z = xcam[:, 0], xcam[:, 1], xcam[:, 2]
    fx, fy = camera.fx, camera.fy
    mean2d = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1)

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    amat = jac @ camera.rot

    rot = quat_to_rotmat(scene.quats[idx]) if len(idx) else np.zeros((0, 3, 3))
    escales = np.exp(scene.log_scales[idx])
    mmat = rot * escales[:, None, :]
    cov3d = mmat @ np.swapaxes(mmat, 1, 2)
    cov2d = amat @ cov3d @ np.swapaxes(amat, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    if len(idx) and (not np.all(np.isfinite(det)) or np.any(det <= 0.0)):
        raise RenderError("degenerate 2D covariance")
    lam = np.empty_like(cov2d)
    lam[:, 0, 0] = cov2d[:, 1, 1] / det
    lam[:, 1, 1] = cov2d[:, 0, 0] / det
    lam[:, 0, 1] = -cov2d[:, 0, 1] / det
    lam[:, 1, 0] = lam[:, 0, 1]

    view = scene.means[idx] - camera.center
    vlen = np.linalg.norm(view, axis=1)
    dirs = view / vlen[:, None]
    basis = sh.eval_basis(dirs, degree)
    colors = np.einsum(
        "nk,nkc->nc", basis, scene.sh_coeffs[idx, : basis.shape[1], :]
    )
    sigma = 1.0 / (1.0 + np.exp(-scene.opacity_logits[idx]))

    return {
        "index": idx,
        "xcam": xcam,
        "mean2d": mean2d,
        "jac": jac,
        "amat": amat,
        "rot": rot,
        "escales": escales,
        "mmat": mmat,
        "cov3d": cov3d,
        "cov2d": cov2d,
        "lam": lam,
        "view": view,
        "vlen": vlen,
        "dirs": dirs,
        "basis": basis,
        "colors": colors,
        "sigma": sigma,
    }


def project(scene: GaussianScene, camera: Camera, index: int):
    """2D mean, 2D covariance, and depth of one Gaussian; None when culled."""
    xcam = camera.rot @ scene.means[index] + camera.t
    if xcam[2] <= NEAR_PLANE or not scene.alive[index]:
        return None
    single = GaussianScene(
        means=scene.means[index : index + 1].copy(),
        log_scales=scene.log_scales[index : index + 1].copy(),
        quats=scene.quats[index : index + 1].copy(),
        opacity_logits=scene.opacity_logits[index : index + 1].copy(),
        sh_coeffs=scene.sh_coeffs[index : index + 1].copy(),
        sh_degree=scene.sh_degree,
    )
    st = _project_arrays(single, camera, 0)
    return st["mean2d"][0], st["cov2d"][0], float(st["xcam"][0, 2])


def _pixel_grid(camera: Camera):
    px = np.arange(camera.width, dtype=np.float64) + 0.5
    py = np.arange(camera.height, dtype=np.float64) + 0.5
    return np.meshgrid(px, py)


def _alpha_maps(st, camera: Camera):
    """Gaussian falloff g and clamped alpha per visible splat, (m, H, W)."""
    gx, gy = _pixel_grid(camera)
    dx = gx[None] - st["mean2d"][:, 0, None, None]
    dy = gy[None] - st["mean2d"][:, 1, None, None]
    lam = st["lam"]
    quad = (
        lam[:, 0, 0, None, None] * dx * dx
        + 2.0 * lam[:, 0, 1, None, None] * dx * dy
        + lam[:, 1, 1, None, None] * dy * dy
    )
    gmap = np.exp(-0.5 * quad)
    alpha = np.minimum(st["sigma"][:, None, None] * gmap, ALPHA_MAX)
    return gmap, alpha, dx, dy


def _composite(alpha):
    """Front-to-back blend weights. Returns (weights, pre-blend T maps)."""
    m, h, w = alpha.shape
    tvis = np.empty_like(alpha)
    trans = np.ones((h, w))
    for i in range(m):
        active = trans >= T_STOP
        tvis[i] = np.where(active, trans, 0.0)
        trans = np.where(active, trans * (1.0 - alpha[i]), trans)
    return tvis * alpha, tvis


def render(
    scene: GaussianScene,
    camera: Camera,
    quantizer_bank=None,
    sh_degree: int | None = None,
) -> RenderOutput:
    """Forward render over a black background.

    SH is evaluated once per splat along the camera-center-to-mean direction.
    When a quantizer bank is given, every attribute is passed through its
    fake-quantizer first (the deployable forward).
    """
    if quantizer_bank is not None:
        from .quant import quantize_scene

        scene = quantize_scene(scene, quantizer_bank)
    degree = scene.sh_degree if sh_degree is None else min(sh_degree, scene.sh_degree)
    st = _project_arrays(scene, camera, degree)
    h, w = camera.height, camera.width
    raw = np.zeros((h, w, 3))
    accum = np.zeros(scene.n_total)
    counts = np.zeros(scene.n_total, dtype=np.int64)
    if len(st["index"]):
        _, alpha, _, _ = _alpha_maps(st, camera)
        weights, _ = _composite(alpha)
        raw = np.einsum("mhw,mc->hwc", weights, st["colors"])
        accum[st["index"]] = weights.sum(axis=(1, 2))
        counts[st["index"]] = (alpha > COVERAGE_EPS).sum(axis=(1, 2))
    if not np.all(np.isfinite(raw)):
        raise RenderError("non-finite pixel values")
    return RenderOutput(
        image=np.clip(raw, 0.0, 1.0),
        per_gaussian_transmittance=accum,
        per_gaussian_pixel_count=counts,
        blend_order=st["index"],
    )


def render_views(scene, cameras, quantizer_bank=None, sh_degree=None):
    """Render several cameras, fanned over G3D_THREADS workers.

    Outputs are merged in camera order, so results are identical for any
    worker count.
    """
    workers = min(thread_count(), max(1, len(cameras)))
    if workers == 1:
        return [render(scene, cam, quantizer_bank, sh_degree) for cam in cameras]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [
            pool.submit(render, scene, cam, quantizer_bank, sh_degree)
            for cam in cameras
        ]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# Backward


def _drot_dquat(quats_unit: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion), shape (n, 3, 3, 4)."""
    w, x, y, z = quats_unit.T
    n = len(w)
    d = np.zeros((n, 3, 3, 4))
    # dR/dw
    d[:, 0, 1, 0] = -2 * z
    d[:, 0, 2, 0] = 2 * y
    d[:, 1, 0, 0] = 2 * z
    d[:, 1, 2, 0] = -2 * x
    d[:, 2, 0, 0] = -2 * y
    d[:, 2, 1, 0] = 2 * x
    # dR/dx
    d[:, 0, 1, 1] = 2 * y
    d[:, 0, 2, 1] = 2 * z
    d[:, 1, 0, 1] = 2 * y
    d[:, 1, 1, 1] = -4 * x
    d[:, 1, 2, 1] = -2 * w
    d[:, 2, 0, 1] = 2 * z
    d[:, 2, 1, 1] = 2 * w
    d[:, 2, 2, 1] = -4 * x
    # dR/dy
    d[:, 0, 0, 2] = -4 * y
    d[:, 0, 1, 2] = 2 * x
    d[:, 0, 2, 2] = 2 * w
    d[:, 1, 0, 2] = 2 * x
    d[:, 1, 2, 2] = 2 * z
    d[:, 2, 0, 2] = -2 * w
    d[:, 2, 1, 2] = 2 * z
    d[:, 2, 2, 2] = -4 * y
    # dR/dz
    d[:, 0, 0, 3] = -4 * z
    d[:, 0, 1, 3] = -2 * w
    d[:, 0, 2, 3] = 2 * x
    d[:, 1, 0, 3] = 2 * w
    d[:, 1, 1, 3] = -4 * z
    d[:, 1, 2, 3] = 2 * y
    d[:, 2, 0, 3] = 2 * x
    d[:, 2, 1, 3] = 2 * y
    return d


def backward(
    scene: GaussianScene,
    camera: Camera,
    target: np.ndarray,
    loss_cfg: LossConfig | None = None,
    sh_degree: int | None = None,
    want_image: bool = False,
):
    """Loss and its analytic gradient for every attribute block.

    The forward pass is recomputed here; nothing is shared with render().
    Returns (loss, SceneGradients), plus the rendered image when
    want_image is set.
    """
    cfg = loss_cfg or LossConfig()
    degree = scene.sh_degree if sh_degree is None else min(sh_degree, scene.sh_degree)
    st = _project_arrays(scene, camera, degree)
    h, w = camera.height, camera.width
    grads = SceneGradients.zeros_like(scene)
    m = len(st["index"])
    if m == 0:
        image = np.zeros((h, w, 3))
        loss, _ = loss_and_image_grad(image, target, cfg)
        if want_image:
            return loss, grads, image
        return loss, grads

    gmap, alpha, dxm, dym = _alpha_maps(st, camera)
    weights, tvis = _composite(alpha)
    raw = np.einsum("mhw,mc->hwc", weights, st["colors"])
    image = np.clip(raw, 0.0, 1.0)
    loss, gimg = loss_and_image_grad(image, target, cfg)
    gimg = gimg * ((raw > 0.0) & (raw < 1.0))

    colors = st["colors"]
    sigma = st["sigma"]
    lam = st["lam"]

    dcolor = np.einsum("mhw,hwc->mc", weights, gimg)
    dsigma = np.empty(m)
    dmean2d = np.empty((m, 2))
    dlam = np.zeros((m, 2, 2))

    suffix = np.zeros((h, w, 3))
    for i in range(m - 1, -1, -1):
        a = alpha[i]
        dalpha = tvis[i] * (gimg @ colors[i]) - np.einsum(
            "hwc,hwc->hw", gimg, suffix
        ) / (1.0 - a)
        u = np.where(sigma[i] * gmap[i] < ALPHA_MAX, dalpha, 0.0)
        dsigma[i] = np.sum(u * gmap[i])
        e = u * sigma[i] * gmap[i]  # upstream for the exponent argument
        ldx = lam[i, 0, 0] * dxm[i] + lam[i, 0, 1] * dym[i]
        ldy = lam[i, 0, 1] * dxm[i] + lam[i, 1, 1] * dym[i]
        dmean2d[i, 0] = np.sum(e * ldx)
        dmean2d[i, 1] = np.sum(e * ldy)
        dlam[i, 0, 0] = -0.5 * np.sum(e * dxm[i] * dxm[i])
        dlam[i, 0, 1] = -np.sum(e * dxm[i] * dym[i])  # both off-diagonals
        dlam[i, 1, 1] = -0.5 * np.sum(e * dym[i] * dym[i])
        suffix += weights[i][..., None] * colors[i]
    dlam[:, 0, 1] *= 0.5
    dlam[:, 1, 0] = dlam[:, 0, 1]

    # inverse: dL/dcov2d = -lam @ dlam @ lam
    dcov2d = -np.einsum("mab,mbc,mcd->mad", lam, dlam, lam)

    # cov2d = A cov3d A^T + floor
    amat = st["amat"]
    cov3d = st["cov3d"]
    dcov3d = np.einsum("mba,mbc,mcd->mad", amat, dcov2d, amat)
    damat = 2.0 * np.einsum("mab,mbc,mcd->mad", dcov2d, amat, cov3d)

    # A = J R ; J depends on camera-space position
    djac = damat @ camera.rot.T
    x, y, z = st["xcam"].T
    fx, fy = camera.fx, camera.fy
    dxcam = np.zeros((m, 3))
    dxcam[:, 0] = djac[:, 0, 2] * (-fx / (z * z))
    dxcam[:, 1] = djac[:, 1, 2] * (-fy / (z * z))
    dxcam[:, 2] = (
        djac[:, 0, 0] * (-fx / (z * z))
        + djac[:, 0, 2] * (2.0 * fx * x / z**3)
        + djac[:, 1, 1] * (-fy / (z * z))
        + djac[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    # pinhole mean path reuses J as its exact Jacobian
    dxcam += np.einsum("mij,mi->mj", st["jac"], dmean2d)
    dmeans = dxcam @ camera.rot

    # cov3d = M M^T with M = R diag(exp(s))
    dmmat = 2.0 * np.einsum("mab,mbc->mac", dcov3d, st["mmat"])
    rot = st["rot"]
    descales = np.einsum("mrj,mrj->mj", dmmat, rot)
    dlogsc = descales * st["escales"]
    drotm = dmmat * st["escales"][:, None, :]

    quats = scene.quats[st["index"]]
    qnorm = np.linalg.norm(quats, axis=1)
    qunit = quats / qnorm[:, None]
    dquat_unit = np.einsum("mrj,mrjc->mc", drotm, _drot_dquat(qunit))
    dquats = (
        dquat_unit - qunit * np.einsum("mc,mc->m", qunit, dquat_unit)[:, None]
    ) / qnorm[:, None]

    # SH: coefficients and the view-direction path back to the mean
    basis = st["basis"]
    dsh = np.einsum("mk,mc->mkc", basis, dcolor)
    gb = sh.eval_basis_grad(st["dirs"], degree)
    coeffs = scene.sh_coeffs[st["index"], : basis.shape[1], :]
    ddir = np.einsum("mkd,mkc,mc->md", gb, coeffs, dcolor)
    dirs = st["dirs"]
    dview = (
        ddir - dirs * np.einsum("md,md->m", dirs, ddir)[:, None]
    ) / st["vlen"][:, None]
    dmeans = dmeans + dview

    dlogit = dsigma * sigma * (1.0 - sigma)

    idx = st["index"]
    grads.means[idx] = dmeans
    grads.log_scales[idx] = dlogsc
    grads.quats[idx] = dquats
    grads.opacity_logits[idx] = dlogit
    grads.sh_coeffs[idx, : basis.shape[1], :] = dsh
    if want_image:
        return loss, grads, image
    return loss, grads


# ---------------------------------------------------------------------------
# Metrics

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filter_axis(img: np.ndarray, axis: int) -> np.ndarray:
    """Zero-padded same-size correlation with the window along one axis."""
    k = _KERNEL
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad)
    out = np.zeros_like(img)
    sl = [slice(None)] * img.ndim
    for tap in range(len(k)):
        sl[axis] = slice(tap, tap + img.shape[axis])
        out += k[tap] * padded[tuple(sl)]
    return out


def _filter2d(img: np.ndarray) -> np.ndarray:
    return _filter_axis(_filter_axis(img, 0), 1)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over pixels and channels; 11x11 Gaussian window, sigma 1.5."""
    val, _ = _ssim_and_grad(np.asarray(a, float), np.asarray(b, float), want_grad=False)
    return val


def _ssim_and_grad(x: np.ndarray, y: np.ndarray, want_grad: bool = True):
    mu_x = _filter2d(x)
    mu_y = _filter2d(y)
    sxx = _filter2d(x * x) - mu_x * mu_x
    syy = _filter2d(y * y) - mu_y * mu_y
    sxy = _filter2d(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + _SSIM_C1
    a2 = 2.0 * sxy + _SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + _SSIM_C1
    b2 = sxx + syy + _SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    # gradient of mean(smap) w.r.t. x; the window operator is self-adjoint
    u = 1.0 / smap.size
    t1 = u * a2 / (b1 * b2)
    t2 = u * a1 / (b1 * b2)
    t3 = -u * smap / b1
    t4 = -u * smap / b2
    g_mu = 2.0 * mu_y * t1 + 2.0 * mu_x * t3
    g_sxx = t4
    g_sxy = 2.0 * t2
    g_mu_field = g_mu - 2.0 * mu_x * g_sxx - mu_y * g_sxy
    grad = _filter2d(g_mu_field) + 2.0 * x * _filter2d(g_sxx) + y * _filter2d(g_sxy)
    return value, grad


def loss_and_image_grad(image: np.ndarray, target: np.ndarray, cfg: LossConfig | None = None):
    """Photometric loss and its per-pixel gradient w.r.t. the image."""
    if cfg is None:
        cfg = LossConfig()
    image = np.asarray(image, float)
    target = np.asarray(target, float)
    if image.shape != target.shape:
        raise ValueError(f"image shape {image.shape} != target {target.shape}")
    diff = image - target
    n = diff.size
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / n
    if cfg.l1_only:
        return l1, g_l1
    lam = cfg.lambda_ssim
    sval, sgrad = _ssim_and_grad(image, target)
    loss = (1.0 - lam) * l1 + lam * (1.0 - sval) / 2.0
    grad = (1.0 - lam) * g_l1 - (lam / 2.0) * sgrad
    return loss, grad


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped at 99 dB."""
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def mean_psnr(scene, cameras, targets, quantizer_bank=None) -> float:
    """Mean per-view PSNR of the scene against target images."""
    outs = render_views(scene, cameras, quantizer_bank)
    return float(
        np.mean([psnr(o.image, tgt) for o, tgt in zip(outs, targets)])
    )


# ---------------------------------------------------------------------------
# Image files


def save_ppm(path, image: np.ndarray):
    """8-bit binary PPM (P6)."""
    img = np.asarray(image, float)
    h, w, _ = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise SceneFormatError("not a P6 PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise SceneFormatError("only 8-bit PPM supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def save_img(path, image: np.ndarray):
    """Raw float64 image dump: magic, u32 height, u32 width, h*w*3 doubles."""
    img = np.ascontiguousarray(image, dtype="<f8")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(img.tobytes())


def load_img(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise SceneFormatError("bad image magic")
    h, w = struct.unpack_from("<II", raw, 4)
    need = 12 + h * w * 3 * 8
    if len(raw) != need:
        raise SceneFormatError("truncated image payload")
    return np.frombuffer(raw, dtype="<f8", offset=12).reshape(h, w, 3).copy()
