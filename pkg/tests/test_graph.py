"""Dependency graph: closed-form node counts, a per-pixel recount oracle for
order edges, pruning semantics, and determinism."""

import numpy as np
import pytest

from g3dpack import graph as graphmod
from g3dpack.graph import (
    ATTR_CHILDREN,
    EDGE_DROP,
    PIXEL_LIST_CAP,
    _GMAP_FLOOR,
    DependencyGraph,
    GraphError,
    build_qadg,
    compact_graph,
    graph_summary,
    propagate_prune,
    sample_view_indices,
    save_graph_summary,
)
from g3dpack.render import _alpha_maps, _composite, _project_arrays
from g3dpack.scene import GaussianScene, look_at_camera
from g3dpack.synth import synthesize_scene


def recount_order_edges(scene, cameras, view_idx):
    """Independent per-pixel recount of occlusion mass.

    Walks every pixel's blend list in Python: a splat joins the list while
    its falloff exceeds the footprint floor and blending is active, the list
    keeps the PIXEL_LIST_CAP front-most members, and each joiner charges its
    blend weight against everyone already listed."""
    n = scene.n_total
    acc = np.zeros((n, n))
    for vi in view_idx:
        cam = cameras[vi]
        st = _project_arrays(scene, cam, scene.sh_degree)
        if len(st["index"]) == 0:
            continue
        gmap, alpha, _, _ = _alpha_maps(st, cam)
        _, tvis = _composite(alpha)
        for r in range(cam.height):
            for c in range(cam.width):
                listed = []
                for pos in range(len(st["index"])):
                    gi = int(st["index"][pos])
                    if gmap[pos, r, c] < _GMAP_FLOOR or tvis[pos, r, c] <= 0.0:
                        continue
                    if len(listed) >= PIXEL_LIST_CAP:
                        continue
                    w = tvis[pos, r, c] * alpha[pos, r, c]
                    for gj in listed:
                        acc[gi, gj] += w
                    listed.append(gi)
    acc /= float(len(view_idx))
    return {
        (i, j): acc[i, j]
        for i, j in zip(*np.nonzero(acc > EDGE_DROP))
    }


def stacked_scene(n=36):
    """Splats piled along one ray so a single pixel overflows its list."""
    means = np.zeros((n, 3))
    means[:, 1] = np.linspace(-0.5, 0.5, n)
    scene = GaussianScene(
        means=means,
        log_scales=np.full((n, 3), -2.5),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, -3.0),
        sh_coeffs=np.zeros((n, 16, 3)),
        sh_degree=3,
    )
    scene.sh_coeffs[:, 0] = 0.4
    cam = look_at_camera((0.0, -2.0, 0.0), (0, 0, 0), 16, 16)
    return scene, [cam]


@pytest.mark.parametrize("seed", range(5))
def test_level_and_containment_closed_forms(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 129))
    degree = int(rng.integers(0, 4))
    g = DependencyGraph(sh_degree=degree, alive=np.ones(n, dtype=bool))
    assert g.level_counts() == (n, 5 * n, (degree + 1) * n)
    assert g.containment_edge_count() == (6 + degree) * n
    ids = g.node_ids(0)
    assert len(ids) == 1 + 5 + (degree + 1)
    assert ids[0] == ("g", 0)
    assert [i for i in ids if i[0] == "attr"] == [
        ("attr", 0, name) for name in ATTR_CHILDREN
    ]


def test_counts_track_alive_mask():
    g = DependencyGraph(sh_degree=2, alive=np.ones(10, dtype=bool))
    g.alive[::2] = False
    assert g.level_counts() == (5, 25, 15)
    assert g.containment_edge_count() == 40


def test_sample_view_indices_deterministic_and_sorted():
    a = sample_view_indices(12, 8, seed=5)
    b = sample_view_indices(12, 8, seed=5)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a) >= 0)
    assert len(np.unique(a)) == 8
    over = sample_view_indices(4, 9, seed=5)
    assert len(over) == 9 and over.max() < 4
    with pytest.raises(ValueError):
        sample_view_indices(0, 4, seed=1)
    with pytest.raises(ValueError):
        sample_view_indices(4, 0, seed=1)


def test_order_edges_match_recount_oracle(small_blob):
    scene, cameras, _ = small_blob
    g = build_qadg(scene, cameras, k_views=3, seed=11)
    want = recount_order_edges(scene, cameras, sample_view_indices(len(cameras), 3, 11))
    assert set(g.order_edges) == set(want)
    for key, w in want.items():
        assert g.order_edges[key] == pytest.approx(w, rel=1e-12, abs=1e-15)


def test_pixel_list_cap_limits_edges():
    scene, cameras = stacked_scene(36)
    g = build_qadg(scene, cameras, k_views=1, seed=0)
    want = recount_order_edges(scene, cameras, [0])
    assert set(g.order_edges) == set(want)
    for key, w in want.items():
        assert g.order_edges[key] == pytest.approx(w, rel=1e-12, abs=1e-15)
    out_degree = {}
    for i, _ in g.order_edges:
        out_degree[i] = out_degree.get(i, 0) + 1
    assert max(out_degree.values()) <= PIXEL_LIST_CAP - 1
    # the rear-most splats never fit a full pixel list, so they charge nothing
    assert max(out_degree) < scene.n_total - 1


def test_occlusion_pair_edge_is_one_directional(occlusion_fixture):
    scene, cameras, _ = occlusion_fixture
    g = build_qadg(scene, cameras, k_views=8, seed=0)
    assert (1, 0) in g.order_edges
    assert (0, 1) not in g.order_edges
    assert 1e-6 < g.order_edges[(1, 0)] < 1e-3


def test_build_is_deterministic(small_blob):
    scene, cameras, _ = small_blob
    a = build_qadg(scene, cameras, k_views=4, seed=3)
    b = build_qadg(scene, cameras, k_views=4, seed=3)
    assert a.order_edges == b.order_edges
    np.testing.assert_array_equal(a.alive, b.alive)


def test_unknown_preset_rejected(small_blob):
    scene, cameras, _ = small_blob
    with pytest.raises(ValueError):
        build_qadg(scene, cameras, preset="bespoke")


def test_propagate_prune_removes_exactly_requested(small_blob):
    scene, cameras, _ = small_blob
    g = build_qadg(scene, cameras, k_views=2, seed=1)
    before = dict(g.order_edges)
    removed = propagate_prune(g, [2, 5])
    assert len(removed) == 2 * (1 + 5 + 4)
    assert ("g", 2) in removed and ("band", 5, 3) in removed
    assert not g.alive[2] and not g.alive[5]
    assert g.n_alive == scene.n_total - 2
    for (i, j), w in before.items():
        if i in (2, 5) or j in (2, 5):
            assert (i, j) not in g.order_edges
        else:
            assert g.order_edges[(i, j)] == w


def test_propagate_prune_rejects_bad_ids(small_blob):
    scene, cameras, _ = small_blob
    g = build_qadg(scene, cameras, k_views=2, seed=1)
    with pytest.raises(GraphError):
        propagate_prune(g, [scene.n_total])
    with pytest.raises(GraphError):
        propagate_prune(g, [1, 1])
    propagate_prune(g, [4])
    with pytest.raises(GraphError):
        propagate_prune(g, [4])


def test_compact_graph_reindexes_edges(small_blob):
    scene, cameras, _ = small_blob
    g = build_qadg(scene, cameras, k_views=2, seed=1)
    propagate_prune(g, [0, 3])
    keep = g.alive.copy()
    out = compact_graph(g, keep)
    assert out.n_alive == scene.n_total - 2
    new_index = np.cumsum(keep) - 1
    want = {
        (int(new_index[i]), int(new_index[j])): w
        for (i, j), w in g.order_edges.items()
    }
    assert out.order_edges == want
    assert out.bindings is g.bindings


def test_compact_graph_rejects_dead_keep(small_blob):
    scene, cameras, _ = small_blob
    g = build_qadg(scene, cameras, k_views=2, seed=1)
    propagate_prune(g, [1])
    bad = np.ones(scene.n_total, dtype=bool)
    with pytest.raises(GraphError):
        compact_graph(g, bad)
    with pytest.raises(GraphError):
        compact_graph(g, np.ones(3, dtype=bool))


def test_graph_summary_and_save(small_blob, tmp_path):
    import json

    scene, cameras, _ = small_blob
    g = build_qadg(scene, cameras, k_views=2, seed=1)
    digest = graph_summary(g, top_k=4)
    assert digest["levels"] == {
        "gaussians": scene.n_total,
        "attributes": 5 * scene.n_total,
        "sh_bands": 4 * scene.n_total,
    }
    assert digest["containment_edges"] == 9 * scene.n_total
    assert digest["order_edges"] == len(g.order_edges)
    assert len(digest["bindings"]) == 6
    weights = [e["weight"] for e in digest["top_edges"]]
    assert weights == sorted(weights, reverse=True)
    assert len(weights) <= 4
    path = tmp_path / "graph.json"
    save_graph_summary(g, path, top_k=4)
    assert json.loads(path.read_text()) == digest
