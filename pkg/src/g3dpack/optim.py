"""Adaptive-moment training with saliency-masked gradients.

The step applies Adam-style updates to scene attributes, with gradient
rows scheduled for pruning zeroed so their parameters stay bitwise
unchanged until the prune event deletes them.  Quantizer scalars (q_m, t,
d) get their own Adam state and are projected back to the feasible bit
interval after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as graphmod
from . import quant, scene as scenemod
from .scene import ATTRIBUTE_ORDER, AttributeClass, GaussianScene

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
SCENE_LR = 1.6e-2
MEANS_LR_SCALE = 0.1
QUANT_LR = 1e-3
DEFAULT_PRUNE_EVENTS = 5
Q_M_FLOOR = 1.0 + 1e-6
D_FLOOR = 1e-9

_SCENE_ARRAYS = ("means", "log_scales", "quats", "opacity_logits", "sh_coeffs")


class OptimizerError(ValueError):
    """Raised on non-finite gradients or invalid prune targets."""


def _distinct_states(bank: dict[AttributeClass, quant.QuantizerState]):
    """Bank states deduplicated by identity, in attribute order."""
    seen: dict[int, quant.QuantizerState] = {}
    for cls in ATTRIBUTE_ORDER:
        state = bank.get(cls)
        if state is not None and id(state) not in seen:
            seen[id(state)] = state
    return list(seen.values())


@dataclass
class OptimState:
    """Moments for scene arrays and quantizer scalars, plus the prune mask."""

    scene_lr: float = SCENE_LR
    quant_lr: float = QUANT_LR
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    qm: list[np.ndarray] = field(default_factory=list)
    qv: list[np.ndarray] = field(default_factory=list)
    prune_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    pending_target: int | None = None


def init_optim_state(
    scene: GaussianScene,
    bank: dict[AttributeClass, quant.QuantizerState] | None = None,
    scene_lr: float = SCENE_LR,
    quant_lr: float = QUANT_LR,
) -> OptimState:
    state = OptimState(scene_lr=scene_lr, quant_lr=quant_lr)
    for name in _SCENE_ARRAYS:
        arr = getattr(scene, name)
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    if bank is not None:
        for _ in _distinct_states(bank):
            state.qm.append(np.zeros(3))
            state.qv.append(np.zeros(3))
    state.prune_mask = np.zeros(scene.n_total, dtype=bool)
    return state


def _grad_block(gradients, cls: AttributeClass) -> np.ndarray:
    """Flat (n, width) gradient block matching scene.get_block's layout."""
    n = gradients.means.shape[0]
    if cls is AttributeClass.MEANS:
        return gradients.means
    if cls is AttributeClass.SCALES:
        return gradients.log_scales
    if cls is AttributeClass.QUATS:
        return gradients.quats
    if cls is AttributeClass.OPACITIES:
        return gradients.opacity_logits.reshape(n, 1)
    if cls is AttributeClass.SH_DC:
        return gradients.sh_coeffs[:, 0, :]
    width = 3 * (gradients.sh_coeffs.shape[1] - 1)
    return gradients.sh_coeffs[:, 1:, :].reshape(n, width)


def _adam_delta(m: np.ndarray, v: np.ndarray, lr: float, t: int):
    m_hat = m / (1.0 - BETA1**t)
    v_hat = v / (1.0 - BETA2**t)
    return lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def masked_step(
    state: OptimState,
    scene: GaussianScene,
    gradients,
    quantizer_bank: dict[AttributeClass, quant.QuantizerState] | None = None,
) -> None:
    """One training step; mutates scene, state, and bank in place.

    Gradient rows under state.prune_mask are zeroed before the moment
    update and their parameter rows are never touched, so masked rows are
    bitwise identical before and after.  Quantizer scalars see the same
    masked gradient (doomed rows contribute nothing to the shared
    quantizers) and are projected to their bit interval afterwards.
    """
    for name in _SCENE_ARRAYS:
        g = getattr(gradients, name)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in block {name}")

    mask = state.prune_mask
    if mask.shape != (scene.n_total,):
        raise OptimizerError("prune mask length does not match scene")
    state.step_count += 1
    t = state.step_count
    keep = ~mask

    for name in _SCENE_ARRAYS:
        g = getattr(gradients, name)
        if mask.any():
            g = g.copy()
            g[mask] = 0.0
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        lr = state.scene_lr * (MEANS_LR_SCALE if name == "means" else 1.0)
        delta = _adam_delta(m, v, lr, t)
        param = getattr(scene, name)
        param[keep] -= delta[keep]

    if quantizer_bank is None or state.quant_lr == 0.0:
        return
    states = _distinct_states(quantizer_bank)
    grads = {id(s): np.zeros(3) for s in states}
    for cls in ATTRIBUTE_ORDER:
        qstate = quantizer_bank.get(cls)
        if qstate is None:
            continue
        upstream = _grad_block(gradients, cls)
        if mask.any():
            upstream = upstream.copy()
            upstream[mask] = 0.0
        g_qm, g_t, g_d = quant.quantizer_grads(
            scene.get_block(cls), upstream, qstate
        )
        grads[id(qstate)] += (g_qm, g_t, g_d)
    for k, qstate in enumerate(states):
        g = grads[id(qstate)]
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient in quantizer scalars")
        m, v = state.qm[k], state.qv[k]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        delta = _adam_delta(m, v, state.quant_lr, t)
        qstate.q_m = max(qstate.q_m - float(delta[0]), Q_M_FLOOR)
        qstate.t = qstate.t - float(delta[1])
        qstate.d = max(qstate.d - float(delta[2]), D_FLOOR)
        quant.project_bits(qstate)


def schedule_prune_mask(
    saliency: np.ndarray, k_target: int, alive: np.ndarray | None = None
) -> np.ndarray:
    """Mark the alive Gaussians with the lowest fused scores for removal.

    Exactly (alive - k_target) rows are marked; score ties resolve to the
    lower index.  Dead rows are never marked.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    n = saliency.shape[0]
    if alive is None:
        alive = np.ones(n, dtype=bool)
    n_alive = int(np.count_nonzero(alive))
    if k_target <= 0:
        raise OptimizerError(f"prune target {k_target} must be positive")
    if k_target > n_alive:
        raise OptimizerError(f"prune target {k_target} exceeds alive count {n_alive}")
    mask = np.zeros(n, dtype=bool)
    n_remove = n_alive - k_target
    if n_remove == 0:
        return mask
    alive_idx = np.flatnonzero(alive)
    order = np.lexsort((alive_idx, saliency[alive_idx]))
    mask[alive_idx[order[:n_remove]]] = True
    return mask


def prune_event(
    scene: GaussianScene,
    graph: graphmod.DependencyGraph,
    prune_mask: np.ndarray,
    state: OptimState | None = None,
) -> tuple[GaussianScene, graphmod.DependencyGraph]:
    """Delete masked rows from scene, graph, and optimizer moments.

    Survivor attributes and moments are untouched (index remap only).
    Returns the compacted scene and graph; the optimizer state, when
    given, is remapped in place and its prune mask cleared.
    """
    prune_mask = np.asarray(prune_mask, dtype=bool)
    if prune_mask.shape != (scene.n_total,):
        raise OptimizerError("prune mask length does not match scene")
    doomed = np.flatnonzero(prune_mask)
    if doomed.size == 0:
        if state is not None:
            state.pending_target = None
        return scene, graph
    working = graphmod.DependencyGraph(
        sh_degree=graph.sh_degree,
        alive=graph.alive.copy(),
        order_edges=dict(graph.order_edges),
        bindings=graph.bindings,
        k_views=graph.k_views,
        seed=graph.seed,
    )
    graphmod.propagate_prune(working, doomed)
    keep = working.alive.copy()
    graph2 = graphmod.compact_graph(working, keep)

    scene2 = scene.copy()
    scene2.alive[doomed] = False
    scene2 = scenemod.compact(scene2)

    if state is not None:
        for name in _SCENE_ARRAYS:
            state.m[name] = state.m[name][keep].copy()
            state.v[name] = state.v[name][keep].copy()
        state.prune_mask = np.zeros(scene2.n_total, dtype=bool)
        state.pending_target = None
    return scene2, graph2


def linear_prune_targets(n_total: int, k_final: int, n_events: int = DEFAULT_PRUNE_EVENTS) -> list[int]:
    """Event targets K_t = N - floor(t/n_events * (N - K)), ending at K."""
    if k_final > n_total:
        raise OptimizerError(f"final count {k_final} exceeds total {n_total}")
    if n_events < 1:
        raise OptimizerError("need at least one prune event")
    targets = []
    for t in range(1, n_events + 1):
        rho = t / n_events
        targets.append(n_total - int(np.floor(rho * (n_total - k_final))))
    return targets
