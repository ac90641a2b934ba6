"""Spatial relation rules: IoU, cascade order, sectors, variants, serialization."""

import math

import numpy as np
import pytest

from relground import scene_graph as sg


def box(x, y, w=0.1, h=0.1):
    return sg.Proposal(x, y, w, h)


# ---------------------------------------------------------------------------
# iou / spatial_feature
# ---------------------------------------------------------------------------

def test_iou_identical_boxes():
    a = box(0.5, 0.5, 0.4, 0.4)
    assert sg.iou(a, a) == 1.0


def test_iou_disjoint_boxes():
    assert sg.iou(box(0.25, 0.5, 0.4, 0.4), box(0.75, 0.5, 0.4, 0.4)) == 0.0


def test_iou_shifted_unit_squares():
    a = sg.Proposal(0.5, 0.5, 1.0, 1.0)
    b = sg.Proposal(0.6, 0.5, 1.0, 1.0)
    assert abs(sg.iou(a, b) - 0.9 / 1.1) < 1e-12


def test_iou_symmetric_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.5, 2))
        b = box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.5, 2))
        assert sg.iou(a, b) == pytest.approx(sg.iou(b, a), abs=1e-15)
        assert 0.0 <= sg.iou(a, b) <= 1.0


def test_spatial_feature_values():
    np.testing.assert_allclose(
        sg.spatial_feature(box(0.5, 0.5, 0.2, 0.4)), [0.5, 0.5, 0.2, 0.4, 0.08])
    np.testing.assert_allclose(
        sg.spatial_feature(sg.Proposal(0.0, 0.0, 1.0, 1.0)), [0, 0, 1, 1, 1])
    np.testing.assert_allclose(
        sg.spatial_feature(box(0.1, 0.9, 0.5, 0.5)), [0.1, 0.9, 0.5, 0.5, 0.25])


def test_degenerate_box_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        sg.Proposal(0.5, 0.5, 0.0, 0.1)


# ---------------------------------------------------------------------------
# classify_spatial_relation
# ---------------------------------------------------------------------------

def test_containment_gives_inside_and_cover():
    outer = sg.Proposal(0.5, 0.5, 1.0, 1.0)
    inner = sg.Proposal(0.5, 0.5, 0.5, 0.5)
    assert sg.classify_spatial_relation(outer, inner) == sg.INSIDE
    assert sg.classify_spatial_relation(inner, outer) == sg.COVER


def test_far_pair_has_no_relationship():
    a = box(0.1, 0.1, 0.05, 0.05)
    b = box(0.9, 0.9, 0.05, 0.05)
    # d = 0.8*sqrt(2), ratio to the diagonal = 0.8 > 0.5
    assert sg.classify_spatial_relation(a, b) == sg.NO_RELATION


def test_horizontal_pair_is_right():
    a = box(0.8, 0.5)
    b = box(0.2, 0.5)
    assert sg.classify_spatial_relation(a, b) == sg.RIGHT
    assert sg.classify_spatial_relation(b, a) == sg.LEFT


def test_vertical_pair_is_top():
    # smaller image y = higher in the image
    a = box(0.5, 0.2)
    b = box(0.5, 0.6)
    assert sg.classify_spatial_relation(a, b) == sg.TOP
    assert sg.classify_spatial_relation(b, a) == sg.BOTTOM


def test_overlap_precedes_direction():
    # IoU > 0.5 and no containment: label must be overlap whatever the angle
    a = sg.Proposal(0.50, 0.5, 0.4, 0.4)
    b = sg.Proposal(0.52, 0.5, 0.4, 0.4)
    assert sg.iou(a, b) > 0.5
    assert sg.classify_spatial_relation(a, b) == sg.OVERLAP
    assert sg.classify_spatial_relation(b, a) == sg.OVERLAP


def test_identical_boxes_classify_as_overlap():
    a = box(0.4, 0.4, 0.2, 0.2)
    b = box(0.4, 0.4, 0.2, 0.2)
    assert sg.classify_spatial_relation(a, b) == sg.OVERLAP


def test_sector_boundary_goes_counter_clockwise():
    # exactly 45/2 degrees: boundary between right and top-right
    r = 0.2
    dx = r * math.cos(math.radians(22.5))
    dy = r * math.sin(math.radians(22.5))
    a = box(0.5 + dx, 0.5 - dy)  # image y decreases upward
    b = box(0.5, 0.5)
    assert sg.classify_spatial_relation(a, b) == sg.TOP_RIGHT


def test_eight_sector_centers():
    expected = [sg.RIGHT, sg.TOP_RIGHT, sg.TOP, sg.TOP_LEFT,
                sg.LEFT, sg.BOTTOM_LEFT, sg.BOTTOM, sg.BOTTOM_RIGHT]
    b = box(0.5, 0.5)
    for k, want in enumerate(expected):
        ang = math.radians(45.0 * k)
        a = box(0.5 + 0.2 * math.cos(ang), 0.5 - 0.2 * math.sin(ang))
        assert sg.classify_spatial_relation(a, b) == want, f"sector {k}"


def test_axis_dis_connectivity_cut():
    cfg = sg.GraphVariantConfig(connectivity="axis-dis", param=0.15)
    a, b = box(0.3, 0.5), box(0.5, 0.5)  # dx = 0.2 >= 0.15
    assert sg.classify_spatial_relation(a, b, cfg) == sg.NO_RELATION
    near = box(0.4, 0.5)  # dx = 0.1 < 0.15
    assert sg.classify_spatial_relation(near, b, cfg) == sg.LEFT


def test_soft_design_has_no_pairwise_labels():
    cfg = sg.GraphVariantConfig(edge_design="soft")
    with pytest.raises(ValueError, match="soft"):
        sg.classify_spatial_relation(box(0.2, 0.2), box(0.6, 0.6), cfg)


# ---------------------------------------------------------------------------
# antisymmetry / cascade properties on random pairs (full 10k sweep lives in
# the acceptance suite; this is the fast regression version)
# ---------------------------------------------------------------------------

PAIRED = {sg.RIGHT: sg.LEFT, sg.TOP_RIGHT: sg.BOTTOM_LEFT, sg.TOP: sg.BOTTOM,
          sg.TOP_LEFT: sg.BOTTOM_RIGHT, sg.INSIDE: sg.COVER}
PAIRED.update({v: k for k, v in PAIRED.items()})
PAIRED[sg.OVERLAP] = sg.OVERLAP
PAIRED[sg.NO_RELATION] = sg.NO_RELATION


def random_pair(rng):
    a = box(*rng.uniform(0.0, 1.0, 2), *rng.uniform(0.02, 0.6, 2))
    b = box(*rng.uniform(0.0, 1.0, 2), *rng.uniform(0.02, 0.6, 2))
    return a, b


def test_antisymmetry_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(2000):
        a, b = random_pair(rng)
        assert sg.classify_spatial_relation(b, a) == PAIRED[sg.classify_spatial_relation(a, b)]


def test_type7_is_coarsening_of_type11():
    rng = np.random.default_rng(12)
    cfg7 = sg.GraphVariantConfig(edge_design="type7")
    for _ in range(2000):
        a, b = random_pair(rng)
        lab11 = sg.classify_spatial_relation(a, b)
        assert sg.classify_spatial_relation(a, b, cfg7) == sg.TYPE7_FROM_TYPE11[lab11]


def test_cascade_precedence_on_random_pairs():
    rng = np.random.default_rng(13)
    seen_overlap = 0
    for _ in range(2000):
        a, b = random_pair(rng)
        lab = sg.classify_spatial_relation(a, b)
        if sg._includes(a, b):
            assert lab == sg.INSIDE
        elif sg._includes(b, a):
            assert lab == sg.COVER
        elif sg.iou(a, b) > 0.5:
            assert lab == sg.OVERLAP
            seen_overlap += 1
        else:
            assert lab in (sg.NO_RELATION, *range(1, 9))
    assert seen_overlap > 0  # the sweep actually exercised the overlap stage


# ---------------------------------------------------------------------------
# build_spatial_graph
# ---------------------------------------------------------------------------

def test_single_proposal_graph_has_no_edges():
    g = sg.build_spatial_graph([box(0.5, 0.5)])
    assert g.edge_labels.shape == (1, 1)
    assert g.edge_labels[0, 0] == 0


def test_far_pair_graph_all_zero():
    g = sg.build_spatial_graph([box(0.05, 0.05, 0.04, 0.04), box(0.95, 0.95, 0.04, 0.04)])
    assert (g.edge_labels == 0).all()


def test_empty_proposal_list_rejected():
    with pytest.raises(ValueError, match="zero proposals"):
        sg.build_spatial_graph([])


def test_edge_num_keeps_nearest_neighbor_only():
    cfg = sg.GraphVariantConfig(connectivity="edge-num", param=1)
    props = [box(0.1, 0.5), box(0.3, 0.5), box(0.9, 0.5)]
    g = sg.build_spatial_graph(props, cfg)
    # brute-force nearest neighbor by center distance
    centers = np.array([[p.center_x, p.center_y] for p in props])
    for i in range(3):
        d = np.hypot(*(centers - centers[i]).T)
        d[i] = np.inf
        nearest = int(np.argmin(d))
        for j in range(3):
            if j == i:
                continue
            if j == nearest:
                assert g.edge_labels[i, j] != 0
            else:
                assert g.edge_labels[i, j] == 0


def test_graph_diagonal_always_zero():
    rng = np.random.default_rng(5)
    props = [box(*rng.uniform(0.2, 0.8, 2)) for _ in range(6)]
    g = sg.build_spatial_graph(props)
    assert (np.diag(g.edge_labels) == 0).all()


def test_soft_graph_carries_edge_vectors():
    cfg = sg.GraphVariantConfig(edge_design="soft")
    a, b = box(0.4, 0.5, 0.2, 0.1), box(0.6, 0.5, 0.1, 0.3)
    g = sg.build_spatial_graph([a, b], cfg)
    assert g.edge_mask[0, 1] and g.edge_mask[1, 0]
    np.testing.assert_allclose(g.edge_features[0, 1], sg.soft_edge_vector(a, b))
    assert (g.edge_labels == 0).all()


def test_soft_edge_vector_values():
    a = sg.Proposal(0.5, 0.5, 0.2, 0.2)   # corners (0.4, 0.4)-(0.6, 0.6)
    b = sg.Proposal(0.7, 0.5, 0.1, 0.4)   # corners (0.65, 0.3)-(0.75, 0.7)
    v = sg.soft_edge_vector(a, b)
    np.testing.assert_allclose(v, [0.25 / 0.2, -0.1 / 0.2, 0.15 / 0.2, 0.1 / 0.2, 0.04 / 0.04])


# ---------------------------------------------------------------------------
# variant config validation
# ---------------------------------------------------------------------------

def test_variant_config_validation():
    with pytest.raises(ValueError):
        sg.GraphVariantConfig(connectivity="center-dis", param=2.0)
    with pytest.raises(ValueError):
        sg.GraphVariantConfig(connectivity="axis-dis", param=0.0)
    with pytest.raises(ValueError):
        sg.GraphVariantConfig(connectivity="edge-num", param=0)
    with pytest.raises(ValueError):
        sg.GraphVariantConfig(edge_design="type9")


def test_variant_tag_round_trip():
    for tag in ("type11+center-dis=0.5", "type7+axis-dis=0.15", "soft+edge-num=5"):
        cfg = sg.GraphVariantConfig.from_tag(tag)
        assert cfg.tag() == tag


# ---------------------------------------------------------------------------
# semantic edges
# ---------------------------------------------------------------------------

def test_semantic_one_hot_selects_embedding_row():
    emb = np.arange(12.0).reshape(3, 4)
    out = sg.ingest_semantic_edges([(0, 1, [0, 1, 0])], emb, 2)
    np.testing.assert_allclose(out[0, 1], emb[1])
    np.testing.assert_allclose(out[1, 0], np.zeros(4))


def test_semantic_uniform_probs_average_rows():
    emb = np.arange(8.0).reshape(2, 4)
    out = sg.ingest_semantic_edges([(1, 0, [0.5, 0.5])], emb, 2)
    np.testing.assert_allclose(out[1, 0], emb.mean(axis=0))


def test_semantic_no_detections_all_zero():
    out = sg.ingest_semantic_edges([], np.ones((2, 3)), 4)
    assert out.shape == (4, 4, 3)
    assert (out == 0).all()


def test_semantic_bad_index_rejected():
    emb = np.ones((2, 3))
    with pytest.raises(ValueError, match="out of range"):
        sg.ingest_semantic_edges([(0, 5, [1, 0])], emb, 3)
    with pytest.raises(ValueError, match="self-loop"):
        sg.ingest_semantic_edges([(1, 1, [1, 0])], emb, 3)
    with pytest.raises(ValueError, match="probability"):
        sg.ingest_semantic_edges([(0, 1, [0.9, 0.9])], emb, 3)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def test_scene_graph_json_round_trip():
    rng = np.random.default_rng(6)
    props = [sg.Proposal(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.2, 2),
                         rng.normal(size=4)) for _ in range(4)]
    g = sg.build_spatial_graph(props)
    doc = sg.scene_graph_to_json(g)
    back = sg.scene_graph_from_json(doc)
    np.testing.assert_array_equal(back.edge_labels, g.edge_labels)
    np.testing.assert_allclose(back.spatial_features, g.spatial_features)
    np.testing.assert_allclose(back.proposals[2].visual_feature, props[2].visual_feature)
    assert back.edge_design == g.edge_design
