"""Four-stage compression training driver.

Stages: warm-up W (plain training, quantizer off), projection P (bit
upper bounds contract linearly while the quantizer trains), joint J
(saliency-masked pruning events interleaved with quantized training,
each event gated by a PSNR floor), cool-down C (structure and widths
frozen, attributes polish under the fixed quantizer).  The floor has
priority over the count target, which has priority over the bit-widths:
an event that would break the floor relaxes its count target, and after
a bounded number of retries pruning aborts rather than degrade quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, graph as graphmod, optim, quant, render, saliency, synth, util
from .scene import (
    ATTRIBUTE_ORDER,
    AttributeClass,
    GaussianScene,
    compact,
    save_scene as scenemod_save,
)

DEFAULT_BOUNDS = (500, 900, 1400, 1600)
DEFAULT_RHO = {
    "means": 1.0,
    "scales": 0.9,
    "quats": 0.9,
    "sh_dc": 0.9,
    "opacities": 0.7,
    "sh_ac": 0.6,
}
RELAX_FACTOR = 1.25
RETRY_BUDGET = 3
ABLATIONS = (
    "taylor-saliency",
    "shared-bits",
    "no-cooldown",
    "no-projection",
    "uniform6",
)
OPACITY_PRUNE_THRESHOLD = 0.05
PTQ_BITS = 8
GUARD_BITS = (2.0, 16.0)

METRIC_FIELDS = (
    "iter",
    "stage",
    "loss",
    "psnr_train",
    "alive_count",
    "b_means",
    "b_scales",
    "b_quats",
    "b_opacities",
    "b_sh_dc",
    "b_sh_ac",
)


class ScheduleError(ValueError):
    """Raised on invalid configs, fixture mismatches, or non-finite loss."""


@dataclass
class RunConfig:
    """Everything a run needs; hashable to a 12-hex config id."""

    t1: int = DEFAULT_BOUNDS[0]
    t2: int = DEFAULT_BOUNDS[1]
    t3: int = DEFAULT_BOUNDS[2]
    t4: int = DEFAULT_BOUNDS[3]
    preset: str = "compressive"
    layout: str = "random-blob"
    n_gaussians: int = 64
    n_cameras: int = 8
    resolution: int = 64
    sh_degree: int = 3
    k_target: int | None = None
    budget_bytes: float | None = None
    tau_db: float | None = None
    tau_vanilla_offset: float | None = None
    saliency_period: int = saliency.RECOMPUTE_PERIOD
    k_views: int = 8
    n_prune_events: int = optim.DEFAULT_PRUNE_EVENTS
    relax_factor: float = RELAX_FACTOR
    retry_budget: int = RETRY_BUDGET
    rho: dict = field(default_factory=lambda: dict(DEFAULT_RHO))
    seed: int = 0
    ablation: str | None = None
    scene_lr: float = optim.SCENE_LR
    quant_lr: float = optim.QUANT_LR
    metrics_period: int = 25

    def __post_init__(self):
        if not self.t1 < self.t2 < self.t3 < self.t4:
            raise ScheduleError(
                f"stage boundaries must increase: {(self.t1, self.t2, self.t3, self.t4)}"
            )
        if not 1.0 < self.relax_factor <= 2.0:
            raise ScheduleError("relax factor must lie in (1, 2]")
        if self.saliency_period <= 0 or self.metrics_period <= 0:
            raise ScheduleError("periods must be positive")
        if self.n_prune_events < 1:
            raise ScheduleError("need at least one prune event")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ScheduleError(
                f"unknown ablation {self.ablation!r}; valid: {', '.join(ABLATIONS)}"
            )
        if self.preset not in quant.PRESETS:
            raise ScheduleError(f"unknown preset {self.preset!r}")
        if self.tau_db is not None and self.tau_vanilla_offset is not None:
            raise ScheduleError("set tau_db or tau_vanilla_offset, not both")
        missing = [c.value for c in ATTRIBUTE_ORDER if c.value not in self.rho]
        if missing:
            raise ScheduleError(f"rho missing attributes: {', '.join(missing)}")

    def as_dict(self) -> dict:
        return {
            "t1": self.t1,
            "t2": self.t2,
            "t3": self.t3,
            "t4": self.t4,
            "preset": self.preset,
            "layout": self.layout,
            "n_gaussians": self.n_gaussians,
            "n_cameras": self.n_cameras,
            "resolution": self.resolution,
            "sh_degree": self.sh_degree,
            "k_target": self.k_target,
            "budget_bytes": self.budget_bytes,
            "tau_db": self.tau_db,
            "tau_vanilla_offset": self.tau_vanilla_offset,
            "saliency_period": self.saliency_period,
            "k_views": self.k_views,
            "n_prune_events": self.n_prune_events,
            "relax_factor": self.relax_factor,
            "retry_budget": self.retry_budget,
            "rho": dict(sorted(self.rho.items())),
            "seed": self.seed,
            "ablation": self.ablation,
            "scene_lr": self.scene_lr,
            "quant_lr": self.quant_lr,
            "metrics_period": self.metrics_period,
        }

    def config_hash(self) -> str:
        return util.config_hash(self.as_dict())

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f for f in RunConfig.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ScheduleError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return RunConfig(**data)

    def effective_bounds(self) -> dict[AttributeClass, tuple[float, float]]:
        """(b_lo, initial b_hi) per class after ablation substitution."""
        preset = quant.PRESETS[self.preset]
        if self.ablation == "uniform6":
            return {cls: (6.0, 6.0) for cls in ATTRIBUTE_ORDER}
        if self.ablation == "no-projection":
            return {cls: GUARD_BITS for cls in ATTRIBUTE_ORDER}
        if self.ablation == "shared-bits":
            lo = min(b[0] for b in preset.bounds.values())
            hi = max(b[1] for b in preset.bounds.values())
            return {cls: (lo, hi) for cls in ATTRIBUTE_ORDER}
        return {cls: preset.bounds[cls] for cls in ATTRIBUTE_ORDER}

    def effective_rho(self) -> dict[AttributeClass, float]:
        """Contraction aggressiveness; one width means one d-weighted rho."""
        rho = {cls: float(self.rho[cls.value]) for cls in ATTRIBUTE_ORDER}
        if self.ablation == "shared-bits":
            d = np.array([c.width(self.sh_degree) for c in ATTRIBUTE_ORDER])
            r = np.array([rho[c] for c in ATTRIBUTE_ORDER])
            shared = float((d * r).sum() / d.sum())
            return {cls: shared for cls in ATTRIBUTE_ORDER}
        return rho


@dataclass
class ScheduleState:
    """Run trajectory: stage, counts, floor decisions, converged widths."""

    stage: str = "W"
    iteration: int = 0
    tau: float = -math.inf
    vanilla_psnr: float | None = None
    k_history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    floor_log: list = field(default_factory=list)
    pruning_aborted: bool = False
    final_bits: dict = field(default_factory=dict)
    final_psnr: float | None = None


def stage_of(config: RunConfig, t: int) -> str:
    if t < config.t1:
        return "W"
    if t < config.t2:
        return "P"
    if t < config.t3:
        return "J"
    return "C"


def contract_bit_bounds(config: RunConfig, t: int) -> dict[AttributeClass, float]:
    """Eq.-style linear contraction of the per-class upper bounds.

    Defined on T1 <= t <= T2; the right endpoint gives the fully
    contracted bounds that stages J and C keep.
    """
    if not config.t1 <= t <= config.t2:
        raise ScheduleError(f"t={t} outside projection stage [{config.t1}, {config.t2}]")
    frac = (t - config.t1) / (config.t2 - config.t1)
    bounds = config.effective_bounds()
    rho = config.effective_rho()
    out = {}
    for cls in ATTRIBUTE_ORDER:
        lo, hi_init = bounds[cls]
        out[cls] = hi_init - rho[cls] * frac * (hi_init - lo)
    return out


def prune_event_iterations(config: RunConfig) -> list[int]:
    """Evenly spaced event iterations over stage J, last at T3-1."""
    span = config.t3 - config.t2
    return [
        config.t2 - 1 + int(round(span * (j + 1) / config.n_prune_events))
        for j in range(config.n_prune_events)
    ]


def resolve_k_target(config: RunConfig, n_total: int) -> int:
    """Count target from K, from the byte budget, or keep-everything.

    A byte budget maps through the preset's lower-bound widths (the
    tightest the file can pack); an explicit K wins over the budget.
    """
    if config.k_target is not None:
        k = int(config.k_target)
    elif config.budget_bytes is not None:
        bounds = config.effective_bounds()
        bits_per_g = sum(
            cls.width(config.sh_degree) * bounds[cls][0] for cls in ATTRIBUTE_ORDER
        )
        bytes_per_g = math.ceil(bits_per_g / 8.0)
        k = int((config.budget_bytes - codec.HEADER_BYTES) // bytes_per_g)
        if k < 1:
            raise ScheduleError(
                f"byte budget {config.budget_bytes} cannot hold one Gaussian"
            )
        k = min(k, n_total)
    else:
        return n_total
    if not 1 <= k <= n_total:
        raise ScheduleError(f"count target {k} outside [1, {n_total}]")
    return k


@dataclass
class EventOutcome:
    """One prune event's feasibility record."""

    requested: int
    achieved: int | None
    attempts: list
    aborted: bool
    mask: np.ndarray | None


def feasibility_check(
    scene: GaussianScene,
    bank: dict[AttributeClass, quant.QuantizerState],
    cameras,
    targets,
    tau: float,
    k_t: int,
    fused_saliency: np.ndarray,
    relax_factor: float = RELAX_FACTOR,
    retry_budget: int = RETRY_BUDGET,
) -> EventOutcome:
    """Tentatively prune to k_t; relax the count until the floor holds.

    Each attempt renders the quantized survivor scene over all training
    views.  On failure the target is multiplied by relax_factor (capped
    at the alive count); after retry_budget retries the event aborts and
    the scene keeps its current count.
    """
    n_alive = scene.n_total
    attempts = []
    k = min(int(k_t), n_alive)
    for _ in range(retry_budget + 1):
        mask = optim.schedule_prune_mask(fused_saliency, k)
        tentative = scene.copy()
        tentative.alive[mask] = False
        tentative = compact(tentative)
        psnr = render.mean_psnr(tentative, cameras, targets, bank)
        attempts.append({"k": k, "psnr": psnr})
        if psnr >= tau:
            return EventOutcome(
                requested=int(k_t), achieved=k, attempts=attempts,
                aborted=False, mask=mask,
            )
        relaxed = min(int(math.ceil(relax_factor * k)), n_alive)
        if relaxed == k:
            break
        k = relaxed
    return EventOutcome(
        requested=int(k_t), achieved=None, attempts=attempts, aborted=True, mask=None
    )


def _resolve_fixture(config, scene_or_seed, cameras, targets):
    if isinstance(scene_or_seed, GaussianScene):
        if cameras is None or targets is None:
            raise ScheduleError("explicit scene needs cameras and targets")
        scene = scene_or_seed.copy()
    else:
        seed = config.seed if scene_or_seed is None else int(scene_or_seed)
        scene, cameras, targets = synth.synthesize_scene(
            seed,
            config.n_gaussians,
            config.layout,
            n_cameras=config.n_cameras,
            resolution=config.resolution,
            sh_degree=config.sh_degree,
        )
    if len(cameras) != len(targets) or not cameras:
        raise ScheduleError("camera and target view counts differ or are empty")
    for cam, tgt in zip(cameras, targets):
        if tgt.shape != (cam.height, cam.width, 3):
            raise ScheduleError(
                f"target shape {tgt.shape} does not match camera "
                f"{(cam.height, cam.width, 3)}"
            )
    return scene, list(cameras), list(targets)


def _apply_bounds(bank, bounds_now: dict[AttributeClass, float]):
    """Round the contracted bound onto each state and re-project."""
    for cls in ATTRIBUTE_ORDER:
        state = bank[cls]
        b_hi = float(round(bounds_now[cls]))
        state.b_hi = max(b_hi, state.b_lo)
    for state in {id(s): s for s in bank.values()}.values():
        quant.project_bits(state)


def _bits_row(bank) -> list[int]:
    if bank is None:
        return [0] * len(ATTRIBUTE_ORDER)
    return [quant.bits_int(bank[cls]) for cls in ATTRIBUTE_ORDER]


def _compute_saliency(config, scene, cameras, targets, bank, seed):
    if config.ablation == "taylor-saliency":
        views = saliency.sample_view_indices(len(cameras), config.k_views, seed)
        cams = [cameras[i] for i in views]
        tgts = [targets[i] for i in views]
        fwd = quant.quantize_scene(scene, bank) if bank is not None else None
        return saliency.taylor_saliency(scene, cams, tgts, forward_scene=fwd)
    vec = saliency.compute_saliency(
        scene,
        cameras,
        targets,
        k_views=config.k_views,
        seed=seed,
        quantizer_bank=bank,
    )
    return vec.s_fused


def run(
    config: RunConfig,
    scene_or_seed=None,
    cameras=None,
    targets=None,
    out_dir=None,
):
    """Execute the four-stage schedule; returns (scene, bank, state, metrics).

    metrics is one row per iteration under METRIC_FIELDS.  psnr_train is
    the mean over all training views with the quantizer active (the
    deployable model); computing it costs a full multi-view render, so it
    is refreshed every metrics_period iterations, at stage boundaries,
    and at prune events, and the latest value is carried between
    refreshes.  When out_dir is given, metrics.csv and summary.json are
    written there.
    """
    scene, cameras, targets = _resolve_fixture(config, scene_or_seed, cameras, targets)
    n_views = len(cameras)
    state = ScheduleState()
    bank = quant.make_bank(
        config.preset,
        shared=config.ablation == "shared-bits",
        uniform_bits=6 if config.ablation == "uniform6" else None,
    )
    if config.ablation == "no-projection":
        for qs in {id(s): s for s in bank.values()}.values():
            qs.b_lo, qs.b_hi = GUARD_BITS
            qs.t = quant.t_for_bits(qs, GUARD_BITS[1])
    opt = optim.init_optim_state(scene, bank, config.scene_lr, config.quant_lr)
    dep_graph = None
    metrics: list[list] = []
    fused = None
    event_iters = prune_event_iterations(config)
    k_final = resolve_k_target(config, scene.n_total)
    targets_ladder: list[int] = []
    next_event = 0
    active = None
    psnr_train = None
    end_iter = config.t3 if config.ablation == "no-cooldown" else config.t4

    def full_psnr():
        return render.mean_psnr(scene, cameras, targets, active)

    for t in range(end_iter):
        stage = stage_of(config, t)
        state.stage, state.iteration = stage, t

        if t == config.t1:
            # end of warm-up: graph + quantizer come online, floor resolves
            state.vanilla_psnr = render.mean_psnr(scene, cameras, targets)
            if config.tau_db is not None:
                state.tau = config.tau_db
            elif config.tau_vanilla_offset is not None:
                state.tau = state.vanilla_psnr - config.tau_vanilla_offset
            dep_graph = graphmod.build_qadg(
                scene, cameras, k_views=config.k_views, seed=config.seed,
                bank=bank, preset=config.preset,
            )
            quant.observe_scene(bank, scene)
            active = bank
            ladder = optim.linear_prune_targets(
                scene.n_total, k_final, config.n_prune_events
            )
            targets_ladder = list(ladder)

        if config.ablation != "no-projection" and (
            stage == "P" or t == config.t2
        ):
            # t == T2 pins the fully contracted endpoint (frac = 1)
            _apply_bounds(bank, contract_bit_bounds(config, t))

        if stage in ("P", "J"):
            quant.observe_scene(bank, scene)

        if stage == "J" and (t - config.t2) % config.saliency_period == 0:
            fused = _compute_saliency(
                config, scene, cameras, targets, bank, config.seed + t
            )
            if next_event < len(targets_ladder) and not state.pruning_aborted:
                opt.prune_mask = optim.schedule_prune_mask(
                    fused, min(targets_ladder[next_event], scene.n_total)
                )

        view = t % n_views
        step_scene = (
            quant.quantize_scene(scene, bank) if active is not None else scene
        )
        loss, grads = render.backward(step_scene, cameras[view], targets[view])
        if not math.isfinite(loss):
            raise ScheduleError(f"non-finite loss at iteration {t}")
        optim.masked_step(
            opt, scene, grads, active if stage in ("P", "J") else None
        )

        if stage == "J" and next_event < len(event_iters) and t == event_iters[next_event]:
            if not state.pruning_aborted:
                outcome = feasibility_check(
                    scene, bank, cameras, targets, state.tau,
                    min(targets_ladder[next_event], scene.n_total), fused,
                    config.relax_factor, config.retry_budget,
                )
                state.events.append(
                    {
                        "iter": t,
                        "requested": outcome.requested,
                        "achieved": outcome.achieved,
                        "attempts": outcome.attempts,
                        "aborted": outcome.aborted,
                    }
                )
                state.floor_log.extend(
                    {"iter": t, **a, "tau": state.tau} for a in outcome.attempts
                )
                if outcome.aborted:
                    state.pruning_aborted = True
                else:
                    keep = ~outcome.mask
                    scene, dep_graph = optim.prune_event(
                        scene, dep_graph, outcome.mask, opt
                    )
                    fused = fused[keep]
                    state.k_history.append(scene.n_total)
                    if next_event + 1 < len(targets_ladder):
                        nxt = min(targets_ladder[next_event + 1], scene.n_total)
                        opt.prune_mask = optim.schedule_prune_mask(fused, nxt)
            next_event += 1
            psnr_train = full_psnr()

        if t % config.metrics_period == 0 or t in (
            config.t1 - 1, config.t2 - 1, config.t3 - 1, end_iter - 1,
        ):
            psnr_train = full_psnr()
        metrics.append(
            [t, stage, loss, psnr_train, scene.n_total] + _bits_row(active)
        )

    state.stage = "done"
    state.iteration = end_iter
    state.final_bits = {
        cls.value: quant.bits_int(bank[cls]) for cls in ATTRIBUTE_ORDER
    }
    state.final_psnr = full_psnr()
    if out_dir is not None:
        write_run_outputs(config, state, scene, bank, metrics, out_dir)
    return scene, bank, state, metrics


def storage_report(scene: GaussianScene, bank) -> dict:
    bits = {cls: quant.bits_int(bank[cls]) for cls in ATTRIBUTE_ORDER}
    total = codec.storage_bytes(scene.n_total, scene.sh_degree, bits)
    raw = codec.vanilla_bytes(scene.n_total, scene.sh_degree)
    return {
        "bytes": total,
        "vanilla_bytes": raw,
        "compression_ratio": raw / total if total else 0.0,
        "bits": {cls.value: bits[cls] for cls in ATTRIBUTE_ORDER},
    }


def write_run_outputs(config, state, scene, bank, metrics, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    comments = (util.provenance_comment(chash, config.seed),)
    util.write_csv(out / "metrics.csv", METRIC_FIELDS, metrics, comments)
    scenemod_save(out / "scene_final.g3d", scene)
    summary = {
        "config": config.as_dict(),
        "config_hash": chash,
        "tau": None if state.tau == -math.inf else state.tau,
        "vanilla_psnr": state.vanilla_psnr,
        "final_psnr": state.final_psnr,
        "alive_count": scene.n_total,
        "k_history": state.k_history,
        "events": state.events,
        "pruning_aborted": state.pruning_aborted,
        "final_bits": state.final_bits,
        "final_ranges": {cls.value: bank[cls].r for cls in ATTRIBUTE_ORDER},
        "storage": storage_report(scene, bank),
    }
    util.write_json(out / "summary.json", summary)
    return summary


def sequential_baseline(config: RunConfig, scene: GaussianScene, cameras, targets):
    """Opacity-threshold pruning then one-shot 8-bit min/max quantization.

    The reference point the joint pipeline is measured against: no
    fine-tuning, no learned widths, ranges from a single abs-max pass.
    """
    pruned = scene.copy()
    keep = 1.0 / (1.0 + np.exp(-pruned.opacity_logits)) >= OPACITY_PRUNE_THRESHOLD
    pruned.alive[:] = keep
    pruned = compact(pruned)
    bank = quant.make_bank(config.preset, uniform_bits=PTQ_BITS)
    for cls in ATTRIBUTE_ORDER:
        block = pruned.get_block(cls)
        peak = float(np.max(np.abs(block))) if block.size else quant.RANGE_FLOOR
        st = bank[cls]
        st.r = max(peak, quant.RANGE_FLOOR)
        st.initialized = True
    quantized = quant.quantize_scene(pruned, bank)
    psnr = render.mean_psnr(quantized, cameras, targets)
    report = {
        "alive_count": pruned.n_total,
        "pruned_away": scene.n_total - pruned.n_total,
        "psnr": psnr,
        "threshold": OPACITY_PRUNE_THRESHOLD,
        "storage": storage_report(pruned, bank),
    }
    return pruned, bank, report
