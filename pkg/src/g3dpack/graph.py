"""Dependency graph over scene structure: per-Gaussian nodes, their attribute
and SH-band children, shared quantizer bindings, and soft occlusion-order
edges measured from rendered views."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quant import PRESETS, QuantizerState, bits_int, make_bank
from .render import _alpha_maps, _composite, _project_arrays
from .scene import ATTRIBUTE_ORDER, Camera, GaussianScene

PIXEL_LIST_CAP = 32
EDGE_DROP = 1e-6
FOOTPRINT_RADIUS = 3.0
_GMAP_FLOOR = float(np.exp(-0.5 * FOOTPRINT_RADIUS**2))

ATTR_CHILDREN = ("means", "scales", "quats", "opacities", "sh")


class GraphError(RuntimeError):
    """Raised on invalid graph mutations (e.g. pruning a dead Gaussian)."""


@dataclass
class DependencyGraph:
    """Three-level structure graph for a splat scene.

    Level 1 holds one node per Gaussian, level 2 its five attribute groups,
    level 3 one node per SH band.  Attribute groups bind to the quantizer
    state shared across the scene, so pruning never orphans a quantizer.
    Order edges (i, j) record how much of i's blended contribution sits
    behind j, averaged over the sampled views.
    """

    sh_degree: int
    alive: np.ndarray
    order_edges: dict = field(default_factory=dict)
    bindings: dict = field(default_factory=dict)
    k_views: int = 0
    seed: int = 0

    # -- node bookkeeping ---------------------------------------------------

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def level_counts(self) -> tuple[int, int, int]:
        n = self.n_alive
        return n, 5 * n, (self.sh_degree + 1) * n

    def containment_edge_count(self) -> int:
        return (5 + self.sh_degree + 1) * self.n_alive

    def order_edge_count(self) -> int:
        return len(self.order_edges)

    def node_ids(self, gaussian: int) -> list[tuple]:
        """All node ids owned by one Gaussian: itself, its five attribute
        groups, and one node per SH band."""
        ids: list[tuple] = [("g", gaussian)]
        ids += [("attr", gaussian, name) for name in ATTR_CHILDREN]
        ids += [("band", gaussian, k) for k in range(self.sh_degree + 1)]
        return ids


def sample_view_indices(n_cameras: int, k_views: int, seed: int) -> np.ndarray:
    """Deterministic view subset; sampling with replacement only when the
    request exceeds the camera count."""
    if n_cameras < 1:
        raise ValueError("need at least one camera")
    if k_views < 1:
        raise ValueError("k_views must be positive")
    rng = np.random.default_rng(seed)
    replace = k_views > n_cameras
    return np.sort(rng.choice(n_cameras, size=k_views, replace=replace))


def _accumulate_view(acc: np.ndarray, scene: GaussianScene, camera: Camera) -> None:
    """Add one view's occlusion mass into acc[i, j] (i occluded by j).

    A splat joins a pixel's composited list when the pixel falls inside its
    FOOTPRINT_RADIUS-sigma projected ellipse while blending is still active
    there; membership is geometric, not opacity-weighted, so transparent
    splats still register where they are composited.  Lists keep the
    PIXEL_LIST_CAP front-most members.  Each joining splat i adds its blend
    weight T*alpha at that pixel against every j already listed.
    """
    st = _project_arrays(scene, camera, scene.sh_degree)
    m = len(st["index"])
    if m == 0:
        return
    gmap, alpha, _, _ = _alpha_maps(st, camera)
    _, tvis = _composite(alpha)
    h, w = camera.height, camera.width
    slots = np.full((h, w, PIXEL_LIST_CAP), -1, dtype=np.int64)
    counts = np.zeros((h, w), dtype=np.int64)
    for pos in range(m):
        gi = int(st["index"][pos])
        member = (gmap[pos] >= _GMAP_FLOOR) & (tvis[pos] > 0.0)
        rows, cols = np.nonzero(member)
        if rows.size == 0:
            continue
        c = counts[rows, cols]
        room = c < PIXEL_LIST_CAP
        rows, cols, c = rows[room], cols[room], c[room]
        if rows.size == 0:
            continue
        weight = (tvis[pos] * alpha[pos])[rows, cols]
        occluders = slots[rows, cols]
        filled = occluders >= 0
        if filled.any():
            np.add.at(
                acc[gi],
                occluders[filled],
                np.broadcast_to(weight[:, None], occluders.shape)[filled],
            )
        slots[rows, cols, c] = gi
        counts[rows, cols] = c + 1


def build_qadg(
    scene: GaussianScene,
    cameras: list[Camera],
    k_views: int = 8,
    seed: int = 0,
    bank: dict | None = None,
    preset: str = "compressive",
) -> DependencyGraph:
    """Build the dependency graph from the scene plus k_views sampled renders.

    Order-edge weights are means over the sampled views; edges below
    EDGE_DROP are dropped.  The same seed always yields the same graph.
    """
    if bank is None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        bank = make_bank(preset)
    view_idx = sample_view_indices(len(cameras), k_views, seed)
    n = scene.n_total
    acc = np.zeros((n, n))
    for vi in view_idx:
        _accumulate_view(acc, scene, cameras[vi])
    acc /= float(k_views)
    edges = {}
    rows, cols = np.nonzero(acc > EDGE_DROP)
    for i, j in sorted(zip(rows.tolist(), cols.tolist())):
        edges[(i, j)] = float(acc[i, j])
    return DependencyGraph(
        sh_degree=scene.sh_degree,
        alive=scene.alive.copy(),
        order_edges=edges,
        bindings=dict(bank),
        k_views=int(k_views),
        seed=int(seed),
    )


def propagate_prune(graph: DependencyGraph, gaussian_ids) -> list[tuple]:
    """Remove whole Gaussians: each id drops its level-1 node, all five
    attribute children, every SH band node, and any incident order edge.
    Quantizer bindings are shared and stay untouched.  Returns the removed
    node ids."""
    removed: list[tuple] = []
    doomed = set()
    for gid in gaussian_ids:
        gid = int(gid)
        if gid < 0 or gid >= len(graph.alive):
            raise GraphError(f"gaussian id {gid} out of range")
        if not graph.alive[gid]:
            raise GraphError(f"gaussian {gid} is already pruned")
        if gid in doomed:
            raise GraphError(f"gaussian {gid} listed twice")
        doomed.add(gid)
        removed.extend(graph.node_ids(gid))
    for gid in doomed:
        graph.alive[gid] = False
    graph.order_edges = {
        (i, j): w
        for (i, j), w in graph.order_edges.items()
        if i not in doomed and j not in doomed
    }
    return removed


def compact_graph(graph: DependencyGraph, keep: np.ndarray) -> DependencyGraph:
    """Reindex to the kept rows (order preserved), mirroring scene compaction.

    Every kept row must be alive; dead rows must not be kept."""
    keep = np.asarray(keep, bool)
    if keep.shape != graph.alive.shape:
        raise GraphError("keep mask shape mismatch")
    if np.any(keep & ~graph.alive):
        raise GraphError("keep mask selects pruned Gaussians")
    new_index = np.cumsum(keep) - 1
    edges = {}
    for (i, j), w in graph.order_edges.items():
        if keep[i] and keep[j]:
            edges[(int(new_index[i]), int(new_index[j]))] = w
    return DependencyGraph(
        sh_degree=graph.sh_degree,
        alive=np.ones(int(keep.sum()), dtype=bool),
        order_edges=edges,
        bindings=graph.bindings,
        k_views=graph.k_views,
        seed=graph.seed,
    )


def graph_summary(graph: DependencyGraph, top_k: int = 16) -> dict:
    """JSON-ready digest: level counts, binding widths, strongest edges."""
    l1, l2, l3 = graph.level_counts()
    ranked = sorted(
        graph.order_edges.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1])
    )
    edges = [
        {"occluded": i, "occluder": j, "weight": w}
        for (i, j), w in ranked[:top_k]
    ]
    bindings = {}
    for cls in ATTRIBUTE_ORDER:
        state = graph.bindings.get(cls)
        if isinstance(state, QuantizerState):
            bindings[cls.value] = {
                "bits": bits_int(state),
                "range": state.r,
                "bounds": [state.b_lo, state.b_hi],
            }
    return {
        "levels": {"gaussians": l1, "attributes": l2, "sh_bands": l3},
        "containment_edges": graph.containment_edge_count(),
        "order_edges": graph.order_edge_count(),
        "top_edges": edges,
        "bindings": bindings,
    }


def save_graph_summary(graph: DependencyGraph, path, top_k: int = 16) -> None:
    Path(path).write_text(
        json.dumps(graph_summary(graph, top_k), indent=1, sort_keys=True) + "\n"
    )
