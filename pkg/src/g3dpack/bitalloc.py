"""Bit-width allocation across attribute classes under a shared budget.

The distortion model is high-rate uniform-quantization error: each scalar
of attribute class a contributes sigma_a^2 2^(-2 b_a) / 12, weighted by
the squared rendering sensitivity lambda_a and the class width d_a.  The
closed form splits the average width by log sensitivity around the
unweighted class mean; a dynamic-programming oracle over a discrete bit
grid validates it independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import render, svgplot, util
from .scene import ATTRIBUTE_ORDER, AttributeClass, GaussianScene

PROBES_PER_BLOCK = 8
PROBE_STEP = 1e-5
GRID_STEPS = (1.0, 0.5, 0.25)
MAX_CLASSES = 8


class AllocationError(ValueError):
    """Raised on degenerate stats or infeasible budgets."""


@dataclass(frozen=True)
class AttributeStats:
    """Per-class scalar counts, spreads, and rendering sensitivities."""

    classes: tuple[AttributeClass, ...]
    d: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        n = len(self.classes)
        for name in ("d", "sigma", "lam"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise AllocationError(f"{name} must have shape ({n},)")
        if np.any(self.d < 1):
            raise AllocationError("every class needs d >= 1 scalars")
        flat = [c.value for c, s in zip(self.classes, self.sigma) if s <= 0.0]
        if flat:
            raise AllocationError(
                f"constant attribute blocks (sigma=0): {', '.join(flat)}"
            )
        if np.any(self.lam < 0.0):
            raise AllocationError("sensitivities must be nonnegative")

    @property
    def total_dim(self) -> int:
        return int(self.d.sum())

    def as_dict(self) -> dict:
        return {
            c.value: {
                "d": int(dv),
                "sigma": float(sv),
                "lambda": float(lv),
            }
            for c, dv, sv, lv in zip(self.classes, self.d, self.sigma, self.lam)
        }

    @staticmethod
    def from_dict(data: dict) -> "AttributeStats":
        classes = tuple(AttributeClass(name) for name in data)
        return AttributeStats(
            classes=classes,
            d=np.array([data[c.value]["d"] for c in classes], dtype=np.int64),
            sigma=np.array([data[c.value]["sigma"] for c in classes]),
            lam=np.array([data[c.value]["lambda"] for c in classes]),
        )


@dataclass(frozen=True)
class Allocation:
    """Per-class bit-widths for a budget of B total weighted bits."""

    classes: tuple[AttributeClass, ...]
    bits: np.ndarray
    b_bar: float
    budget: float
    distortion: float

    def as_dict(self) -> dict:
        return {
            "bits": {c.value: float(b) for c, b in zip(self.classes, self.bits)},
            "b_bar": self.b_bar,
            "budget": self.budget,
            "distortion": self.distortion,
        }


def predicted_distortion(stats: AttributeStats, bits: np.ndarray) -> float:
    """Model MSE: sum_a d_a lambda_a^2 sigma_a^2 2^(-2 b_a) / 12."""
    bits = np.asarray(bits, dtype=np.float64)
    terms = stats.d * (stats.lam * stats.sigma) ** 2 / 12.0 * 2.0 ** (-2.0 * bits)
    return float(terms.sum())


def _probe_directions(
    rng: np.random.Generator, shape: tuple[int, ...], k: int
) -> np.ndarray:
    vecs = rng.normal(0.0, 1.0, (k,) + shape)
    flat = vecs.reshape(k, -1)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    return vecs


def estimate_stats(
    scene: GaussianScene,
    cameras,
    k_probes: int = PROBES_PER_BLOCK,
    step: float = PROBE_STEP,
    seed: int = 0,
    sh_degree: int | None = None,
) -> AttributeStats:
    """Empirical spreads and probe-estimated render sensitivities.

    lambda_a is the mean over cameras of a Frobenius-norm estimate of the
    render Jacobian restricted to block a: for unit directions v,
    E[|J v|^2] = |J|_F^2 / dim, so |J|_F ~= sqrt(dim * mean |J v|^2).
    J v is a central finite difference of the full rendered image.  This
    is an estimator with k-probe sampling error, not an exact norm.
    """
    if not cameras:
        raise AllocationError("estimate_stats needs at least one camera")
    rng = np.random.default_rng(seed)
    d = np.array([c.width(scene.sh_degree) for c in ATTRIBUTE_ORDER], dtype=np.int64)
    sigma = np.empty(len(ATTRIBUTE_ORDER))
    lam = np.empty(len(ATTRIBUTE_ORDER))
    for a, cls in enumerate(ATTRIBUTE_ORDER):
        block = scene.get_block(cls)
        sigma[a] = float(np.std(block))
        dirs = _probe_directions(rng, block.shape, k_probes)
        sq_per_cam = np.zeros(len(cameras))
        for v in dirs:
            plus, minus = scene.copy(), scene.copy()
            plus.set_block(cls, block + step * v)
            minus.set_block(cls, block - step * v)
            for ci, cam in enumerate(cameras):
                hi = render.render(plus, cam, sh_degree=sh_degree).image
                lo = render.render(minus, cam, sh_degree=sh_degree).image
                jv = (hi - lo) / (2.0 * step)
                sq_per_cam[ci] += float((jv * jv).sum())
        dim = block.size
        lam[a] = float(np.mean(np.sqrt(dim * sq_per_cam / k_probes)))
    if np.any(sigma <= 0.0):
        flat = [c.value for c, s in zip(ATTRIBUTE_ORDER, sigma) if s <= 0.0]
        raise AllocationError(
            f"constant attribute blocks (sigma=0): {', '.join(flat)}"
        )
    return AttributeStats(classes=ATTRIBUTE_ORDER, d=d, sigma=sigma, lam=lam)


def exhaustive_jacobian_norm(
    scene: GaussianScene,
    cameras,
    cls: AttributeClass,
    step: float = PROBE_STEP,
    sh_degree: int | None = None,
) -> float:
    """Per-scalar central-difference Frobenius norm, averaged over cameras.

    Exact up to FD truncation; O(block size) renders, so tiny scenes only.
    It is the validation oracle for estimate_stats' probe estimator.
    """
    block = scene.get_block(cls)
    sq_per_cam = np.zeros(len(cameras))
    flat_index = list(np.ndindex(block.shape))
    for idx in flat_index:
        basis = np.zeros_like(block)
        basis[idx] = 1.0
        plus, minus = scene.copy(), scene.copy()
        plus.set_block(cls, block + step * basis)
        minus.set_block(cls, block - step * basis)
        for ci, cam in enumerate(cameras):
            hi = render.render(plus, cam, sh_degree=sh_degree).image
            lo = render.render(minus, cam, sh_degree=sh_degree).image
            col = (hi - lo) / (2.0 * step)
            sq_per_cam[ci] += float((col * col).sum())
    return float(np.mean(np.sqrt(sq_per_cam)))


def closed_form_allocation(stats: AttributeStats, budget: float) -> Allocation:
    """Reverse water-filling split of the average width.

    b_a = b_bar + log2(lambda_a^2 sigma_a^2)/2 - mean_a' log2(...)/2 with
    b_bar = B / sum_a d_a.  The mean is unweighted over classes even
    though the budget is d_a-weighted, so for unequal d the weighted
    budget identity holds only approximately; the grid oracle is the
    arbiter on equal-d instances.
    """
    if np.any(stats.lam == 0.0):
        dead = [c.value for c, l in zip(stats.classes, stats.lam) if l == 0.0]
        raise AllocationError(
            f"zero sensitivity (log divergence) for: {', '.join(dead)}"
        )
    b_bar = budget / stats.total_dim
    log_terms = np.log2((stats.lam * stats.sigma) ** 2)
    bits = b_bar + 0.5 * log_terms - 0.5 * float(log_terms.mean())
    return Allocation(
        classes=stats.classes,
        bits=bits,
        b_bar=b_bar,
        budget=float(budget),
        distortion=predicted_distortion(stats, bits),
    )


def oracle_allocation(
    stats: AttributeStats, budget: float, grid_step: float
) -> Allocation:
    """Exact minimizer of the model distortion on a discrete bit grid.

    Dynamic program over classes with the d_a-weighted budget
    sum_a d_a b_a <= B, each b_a a positive multiple of grid_step.  Ties
    resolve to the lexicographically smallest bit vector in class order.
    """
    if grid_step not in GRID_STEPS:
        raise AllocationError(f"grid_step must be one of {GRID_STEPS}")
    n_classes = len(stats.classes)
    if n_classes > MAX_CLASSES:
        raise AllocationError(f"oracle supports at most {MAX_CLASSES} classes")
    d = stats.d.astype(np.int64)
    units = int(np.floor(budget / grid_step + 1e-9))
    if units < int(d.sum()):
        raise AllocationError(
            f"budget {budget} infeasible: needs at least {grid_step * d.sum()}"
        )
    coeff = stats.d * (stats.lam * stats.sigma) ** 2 / 12.0

    # suffix[i][u]: best distortion for classes i.. with u grid units left
    inf = np.inf
    suffix = [np.full(units + 1, inf) for _ in range(n_classes + 1)]
    suffix[n_classes][:] = 0.0
    for i in range(n_classes - 1, -1, -1):
        di = int(d[i])
        best = suffix[i]
        nxt = suffix[i + 1]
        for m in range(1, units // di + 1):
            cost = coeff[i] * 2.0 ** (-2.0 * grid_step * m)
            span = units + 1 - di * m
            cand = cost + nxt[:span]
            np.minimum(best[di * m :], cand, out=best[di * m :])

    total = suffix[0][units]
    if not np.isfinite(total):
        raise AllocationError(f"budget {budget} infeasible on grid {grid_step}")

    # walk forward choosing the smallest m whose value equals the DP min;
    # values compared are the exact floats the min was taken over
    steps = np.empty(n_classes, dtype=np.int64)
    u = units
    for i in range(n_classes):
        di = int(d[i])
        target = suffix[i][u]
        for m in range(1, u // di + 1):
            cost = coeff[i] * 2.0 ** (-2.0 * grid_step * m)
            if cost + suffix[i + 1][u - di * m] == target:
                steps[i] = m
                u -= di * m
                break
        else:
            raise AssertionError("DP reconstruction failed")
    bits = grid_step * steps.astype(np.float64)
    return Allocation(
        classes=stats.classes,
        bits=bits,
        b_bar=budget / stats.total_dim,
        budget=float(budget),
        distortion=predicted_distortion(stats, bits),
    )


def uniform_gap(stats: AttributeStats, budget: float) -> float:
    """Distortion excess of the uniform split over the closed form."""
    alloc = closed_form_allocation(stats, budget)
    uniform = np.full(len(stats.classes), alloc.b_bar)
    return predicted_distortion(stats, uniform) - alloc.distortion


@dataclass(frozen=True)
class FitReport:
    """Empirical converged bits against the theoretical allocation."""

    classes: tuple[AttributeClass, ...]
    empirical: np.ndarray
    theoretical: np.ndarray
    mae: float
    ordering_match: bool

    def rows(self) -> list[tuple]:
        return [
            (c.value, float(e), float(t), float(abs(e - t)))
            for c, e, t in zip(self.classes, self.empirical, self.theoretical)
        ]


ORDERING_TIE = 0.5


def empirical_fit_report(
    converged_bits: dict[AttributeClass, float] | np.ndarray,
    stats: AttributeStats,
    budget: float,
) -> FitReport:
    """Compare a finished run's bit-widths with the closed form.

    ordering_match requires sign agreement on every class pair whose
    empirical widths differ by more than ORDERING_TIE bits; closer pairs
    count as unordered (bound-pinned classes tie at the preset limits).
    """
    if isinstance(converged_bits, dict):
        emp = np.array([float(converged_bits[c]) for c in stats.classes])
    else:
        emp = np.asarray(converged_bits, dtype=np.float64)
        if emp.shape != (len(stats.classes),):
            raise AllocationError("converged_bits length mismatch")
    theo = closed_form_allocation(stats, budget).bits
    match = True
    for i in range(len(emp)):
        for j in range(i + 1, len(emp)):
            if abs(emp[i] - emp[j]) > ORDERING_TIE:
                if np.sign(emp[i] - emp[j]) != np.sign(theo[i] - theo[j]):
                    match = False
    return FitReport(
        classes=stats.classes,
        empirical=emp,
        theoretical=theo,
        mae=float(np.abs(emp - theo).mean()),
        ordering_match=match,
    )


def write_fit_report(
    report: FitReport, csv_path, svg_path=None, comments: tuple[str, ...] = ()
) -> None:
    rows = [r + () for r in report.rows()]
    rows.append(("mae", report.mae, "", ""))
    rows.append(("ordering_match", report.ordering_match, "", ""))
    util.write_csv(
        csv_path,
        ("attribute", "empirical_bits", "theoretical_bits", "abs_delta"),
        rows,
        comments,
    )
    if svg_path is not None:
        lo = float(min(report.empirical.min(), report.theoretical.min())) - 0.5
        hi = float(max(report.empirical.max(), report.theoretical.max())) + 0.5
        series = [
            svgplot.Series("identity", (lo, hi), (lo, hi), kind="line"),
            svgplot.Series(
                "attributes",
                tuple(float(v) for v in report.theoretical),
                tuple(float(v) for v in report.empirical),
                kind="points",
            ),
        ]
        svgplot.write_svg(
            svg_path,
            svgplot.svg_chart(
                series,
                title="Converged vs allocated bit-widths",
                xlabel="theoretical bits",
                ylabel="empirical bits",
            ),
        )
