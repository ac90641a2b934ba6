"""End-to-end acceptance suite.

Each test pins one externally promised behavior of the package:
gradient integrity, attention-mass bookkeeping, propagation semantics,
box-pair geometry rules, phrase filtering, learnability of generated
scenes, the depth and loss ablation directions, and byte-level
reproducibility of training runs.  The training-based tests share one
generated dataset and several full training runs through session
fixtures, so this module is the slow part of the suite (minutes, not
seconds) and runs everything on a single core.
"""

import json
import math
import time

import numpy as np
import pytest

import relground.autodiff as ad
import relground.language as lg
import relground.scene_graph as sg
from relground.cli import main as cli_main, run_gradcheck
from relground.datagen import GeneratorConfig, generate_dataset, resolve_sample
from relground.language import build_vocabulary
from relground.model import HyperConfig, Model, ggcn_layer_typed
from relground.training import TrainConfig, evaluate, train

# ---------------------------------------------------------------------------
# shared training material: one generated corpus, one vocabulary, one set of
# prepared samples, and the reference training run reused across tests
# ---------------------------------------------------------------------------

RECIPE = dict(epochs=30, batch_size=16, lr_drop_epoch=26, seed=0)


@pytest.fixture(scope="session")
def corpus():
    """The default generated dataset, pre-verified by the symbolic resolver.

    Every sample must be solvable by rule-based resolution before any
    learning claim is made about it: the referent the expression picks
    out logically has to be the stored one.
    """
    cfg = GeneratorConfig()
    splits = generate_dataset(cfg)
    assert len(splits["train"]) == 2000
    assert len(splits["test"]) == 500
    for record in splits["train"] + splits["test"]:
        assert resolve_sample(record.tokens, record.proposals, cfg) == [record.gt_index]
    return {"cfg": cfg, "train": splits["train"], "test": splits["test"]}


@pytest.fixture(scope="session")
def ground_parts(corpus):
    """(vocab, prepared train, prepared test) shared by every training run.

    Preparation only depends on the graph variant, branch set, and
    vocabulary — all identical across the runs below — so the per-sample
    graphs and constants are built once.
    """
    vocab = build_vocabulary([s.tokens for s in corpus["train"]])
    probe = Model(HyperConfig(d_x=corpus["cfg"].d_x, n_layers=2, branch="spatial"), vocab)
    prep_train = [probe.prepare(s) for s in corpus["train"]]
    prep_test = [probe.prepare(s) for s in corpus["test"]]
    return vocab, prep_train, prep_test


def fit_and_score(corpus, ground_parts, n_layers=2, **tcfg_overrides):
    """Train one model from scratch and evaluate it on the held-out split."""
    vocab, prep_train, prep_test = ground_parts
    model = Model(HyperConfig(d_x=corpus["cfg"].d_x, n_layers=n_layers,
                              branch="spatial", seed=0), vocab)
    tcfg = TrainConfig(**{**RECIPE, **tcfg_overrides})
    start = time.monotonic()
    result = train(model, prep_train, [], tcfg)
    elapsed = time.monotonic() - start
    model.params = result.best_params
    report = evaluate(model, prep_test)
    report["elapsed"] = elapsed
    return report


@pytest.fixture(scope="session")
def reference_run(corpus, ground_parts):
    """2-layer spatial model, triplet loss, margin 0.1, one random-hard negative."""
    return fit_and_score(corpus, ground_parts)


@pytest.fixture(scope="session")
def depth_runs(corpus, ground_parts):
    """The same recipe with the propagation stack removed or halved."""
    return {n: fit_and_score(corpus, ground_parts, n_layers=n) for n in (0, 1)}


@pytest.fixture(scope="session")
def softmax_run(corpus, ground_parts):
    return fit_and_score(corpus, ground_parts, loss="softmax")


@pytest.fixture(scope="session")
def mining_runs(corpus, ground_parts, reference_run):
    """P@1 per negative-sampling scheme; the reference run covers random-hard x1."""
    reports = {
        ("random-hard", 1): reference_run,
        ("random-hard", 2): fit_and_score(corpus, ground_parts, negatives=2),
        ("hardest", 1): fit_and_score(corpus, ground_parts, mining="hardest"),
        ("random-semi-hard", 1): fit_and_score(corpus, ground_parts,
                                               mining="random-semi-hard"),
    }
    return {key: rep["overall"] for key, rep in reports.items()}


# ---------------------------------------------------------------------------
# 1. gradient integrity
# ---------------------------------------------------------------------------

def test_every_op_and_parameter_group_matches_finite_differences():
    start = time.monotonic()
    report = run_gradcheck()
    elapsed = time.monotonic() - start
    assert report["passed"]
    assert all(op["max_rel_error"] < 1e-4 for op in report["ops"])
    groups = report["parameter_groups"]
    assert groups, "model exposes no parameter groups"
    bad = [g["name"] for g in groups if not g["max_rel_error"] < 1e-4]
    assert bad == []
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. attention and gate mass bookkeeping
# ---------------------------------------------------------------------------

def test_attention_and_gate_mass_is_conserved():
    """Word rows carry exactly their entity mass, phrase rows exactly one,
    vertex gates exactly the total attention mass, edge gates exactly the
    total relation mass - across >= 1000 (model, scene) forward passes."""
    cfg = GeneratorConfig(num_scenes=250, split=(1.0, 0.0, 0.0), seed=11)
    samples = generate_dataset(cfg)["train"]
    assert len(samples) == 250
    vocab = build_vocabulary([s.tokens for s in samples])
    instances = 0
    edge_checks = {"spatial": 0, "semantic": 0}
    for model_seed in (1, 2, 3, 4):
        hyper = HyperConfig(d_x=cfg.d_x, n_layers=1, branch="both",
                            n_rel_categories=4, seed=model_seed)
        model = Model(hyper, vocab)
        for sample in samples:
            res = model.forward_prepared(model.prepare(sample))
            weights = res.encoded.type_weights.data
            entity_mass = weights[:, lg.ENTITY]
            relation_mass = weights[:, lg.RELATION].sum()
            n_phrases = res.encoded.num_phrases
            for branch, guided in res.guided.items():
                word_rows = guided.word_attention.data.sum(axis=1)
                assert np.abs(word_rows - entity_mass).max() < 1e-9
                expected_gate_mass = entity_mass.sum()
                if guided.phrase_attention is not None:
                    phrase_rows = guided.phrase_attention.data.sum(axis=1)
                    assert np.abs(phrase_rows - 1.0).max() < 1e-9
                    expected_gate_mass += n_phrases
                assert abs(guided.vertex_gates.data.sum() - expected_gate_mass) < 1e-9
                if guided.edge_gates is not None:
                    assert abs(guided.edge_gates.data.sum() - relation_mass) < 1e-9
                    edge_checks[branch] += 1
            instances += 1
    assert instances >= 1000
    assert edge_checks["spatial"] == instances      # typed gates always exist
    assert edge_checks["semantic"] >= instances // 2  # featured gates need edges


# ---------------------------------------------------------------------------
# 3. gated propagation reduces to a plain directed graph convolution
# ---------------------------------------------------------------------------

def test_unit_gates_reduce_propagation_to_plain_graph_convolution():
    """With all gates at one, a single edge type, and zero edge bias, one
    propagation step must equal an independently written directed GCN."""
    rng = np.random.default_rng(3)
    for trial in range(100):
        k = int(rng.integers(2, 11))
        d = int(rng.integers(2, 9))
        adj = (rng.random((k, k)) < 0.3).astype(np.float64)
        np.fill_diagonal(adj, 0.0)
        if trial == 0:
            adj[:] = 0.0  # edgeless graph must reduce to the self loop alone
        x = rng.normal(size=(k, d))
        w_out = rng.normal(size=(d, d))
        w_in = rng.normal(size=(d, d))
        w_self = rng.normal(size=(d, d))
        b_self = rng.normal(size=(1, d))

        got = ggcn_layer_typed(
            ad.constant(x),
            ad.constant(np.ones((k, 1))),            # unit vertex gates
            ad.constant(np.ones((1, 1))),            # unit gate for the one type
            ad.constant(adj.reshape(k * k, 1)),      # per-pair one-hot, one column
            ad.constant(adj.sum(axis=1, keepdims=True)),
            ad.constant(adj.sum(axis=0).reshape(k, 1)),
            ad.constant(w_out), ad.constant(w_in),
            ad.constant(w_self), ad.constant(b_self),
            ad.constant(np.zeros((1, d))),           # zero per-type bias
        ).data

        plain = np.maximum(adj @ x @ w_out + adj.T @ x @ w_in
                           + x @ w_self + b_self, 0.0)
        assert np.abs(got - plain).max() < 1e-12, f"trial {trial}"


# ---------------------------------------------------------------------------
# 4. box-pair geometry rules
# ---------------------------------------------------------------------------

OPPOSITE = {
    sg.RIGHT: sg.LEFT, sg.TOP_RIGHT: sg.BOTTOM_LEFT, sg.TOP: sg.BOTTOM,
    sg.TOP_LEFT: sg.BOTTOM_RIGHT, sg.LEFT: sg.RIGHT,
    sg.BOTTOM_LEFT: sg.TOP_RIGHT, sg.BOTTOM: sg.TOP,
    sg.BOTTOM_RIGHT: sg.TOP_LEFT, sg.INSIDE: sg.COVER, sg.COVER: sg.INSIDE,
    sg.OVERLAP: sg.OVERLAP, sg.NO_RELATION: sg.NO_RELATION,
}

# independent re-statement of the seven-label coarsening: diagonals join the
# counter-clockwise cardinal, the non-directional labels renumber densely
COARSE = {sg.NO_RELATION: 0, sg.RIGHT: 1, sg.TOP_RIGHT: 2, sg.TOP: 2,
          sg.TOP_LEFT: 3, sg.LEFT: 3, sg.BOTTOM_LEFT: 4, sg.BOTTOM: 4,
          sg.BOTTOM_RIGHT: 1, sg.INSIDE: 5, sg.COVER: 6, sg.OVERLAP: 7}


def _corners(p):
    return (p.center_x - p.width / 2.0, p.center_y - p.height / 2.0,
            p.center_x + p.width / 2.0, p.center_y + p.height / 2.0)


def _contains(a, b, tol=1e-9):
    """b sits within a (touching allowed) and the boxes are not identical."""
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    inside = ax0 <= bx0 + tol and ay0 <= by0 + tol and bx1 <= ax1 + tol and by1 <= ay1 + tol
    identical = (abs(ax0 - bx0) <= tol and abs(ay0 - by0) <= tol
                 and abs(ax1 - bx1) <= tol and abs(ay1 - by1) <= tol)
    return inside and not identical


def _pair_iou(a, b):
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def _expected_label(a, b):
    """The rule cascade, restated from the documented geometry."""
    if _contains(a, b):
        return sg.INSIDE
    if _contains(b, a):
        return sg.COVER
    if _pair_iou(a, b) > 0.5:
        return sg.OVERLAP
    dist = math.hypot(a.center_x - b.center_x, a.center_y - b.center_y)
    if dist / math.sqrt(2.0) > 0.5:
        return sg.NO_RELATION
    theta = math.degrees(math.atan2(b.center_y - a.center_y, a.center_x - b.center_x))
    return 1 + int(((theta + 22.5) % 360.0) // 45.0)


def test_relation_labels_obey_geometry_on_ten_thousand_box_pairs():
    rng = np.random.default_rng(4)
    cfg7 = sg.GraphVariantConfig(edge_design="type7")

    def rand_box():
        return sg.Proposal(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)),
                           float(rng.uniform(0.02, 0.6)), float(rng.uniform(0.02, 0.6)))

    seen = set()
    for i in range(10_000):
        a = rand_box()
        mode = i % 5
        if mode == 1:      # strict nesting
            b = sg.Proposal(a.center_x, a.center_y, a.width * 0.5, a.height * 0.5)
        elif mode == 2:    # identical boxes: symmetric overlap, never containment
            b = sg.Proposal(a.center_x, a.center_y, a.width, a.height)
        elif mode == 3:    # heavy overlap without containment
            b = sg.Proposal(a.center_x + 0.02 * a.width, a.center_y, a.width, a.height)
        else:
            b = rand_box()

        label = sg.classify_spatial_relation(a, b)
        assert label == _expected_label(a, b), f"pair {i}"
        assert sg.classify_spatial_relation(b, a) == OPPOSITE[label], f"pair {i}"
        assert sg.classify_spatial_relation(a, b, cfg7) == COARSE[label], f"pair {i}"
        seen.add(label)

    assert seen == set(range(12))  # the sweep exercised every label at least once


# ---------------------------------------------------------------------------
# 5. phrase extraction on a nested possessive-style expression
# ---------------------------------------------------------------------------

def test_nested_noun_phrases_filter_to_one_attribute_phrase():
    tree = lg.parse_bracketed_tree(
        "(NP (NP (DT the) (NN umbrella)) (VP (VBN held) (PP (IN by)"
        " (NP (NP (DT a) (NN lady)) (VP (VBG wearing)"
        " (NP (DT a) (JJ green) (NN skirt)))))))")
    candidates = lg.extract_noun_phrases(tree)
    assert [" ".join(c.tokens) for c in candidates] == \
        ["the umbrella", "a lady", "a green skirt"]
    valid = lg.valid_phrases(candidates)
    assert valid == [[8, 9]]  # only "green skirt" keeps two content words


# ---------------------------------------------------------------------------
# 6. generated scenes are learnable to high precision
# ---------------------------------------------------------------------------

def test_two_layer_model_grounds_generated_scenes(reference_run):
    assert reference_run["count"] == 500
    assert reference_run["overall"] >= 0.90
    assert reference_run["elapsed"] < 15 * 60.0


# ---------------------------------------------------------------------------
# 7. deeper propagation resolves chained references better
# ---------------------------------------------------------------------------

def test_depth_ablation_is_monotone_on_chained_references(reference_run, depth_runs):
    chained = {n: depth_runs[n]["by_order"][2] for n in (0, 1)}
    chained[2] = reference_run["by_order"][2]
    assert chained[2] >= chained[0] + 0.10
    assert chained[0] <= chained[1] <= chained[2]


# ---------------------------------------------------------------------------
# 8. loss and mining robustness
# ---------------------------------------------------------------------------

def test_triplet_loss_at_least_matches_softmax(reference_run, softmax_run):
    assert reference_run["overall"] >= softmax_run["overall"]


def test_negative_mining_schemes_land_within_three_points(mining_runs):
    assert len(mining_runs) == 4
    spread = max(mining_runs.values()) - min(mining_runs.values())
    assert spread <= 0.03, f"P@1 spread {spread:.3f} across {mining_runs}"


# ---------------------------------------------------------------------------
# 9. training runs are byte-reproducible
# ---------------------------------------------------------------------------

def test_identical_training_runs_write_identical_artifacts(tmp_path):
    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps({"generator": {
        "grid": 4, "k_min": 4, "k_max": 5, "num_scenes": 24,
        "orders": [0, 1], "split": [0.75, 0.0, 0.25], "seed": 9}}))
    data = tmp_path / "dataset"
    assert cli_main(["gen-data", "--config", str(gen_cfg), "--out", str(data)]) == 0

    run_dirs = []
    for name in ("first", "second"):
        out = tmp_path / name
        code = cli_main(["train", "--data", str(data), "--out", str(out),
                         "--layers", "1", "--epochs", "2", "--batch-size", "8",
                         "--seed", "5"])
        assert code == 0
        run_dirs.append(next(iter(out.iterdir())))

    for fname in ("metrics.jsonl", "checkpoint.json", "config.json"):
        first = (run_dirs[0] / fname).read_bytes()
        second = (run_dirs[1] / fname).read_bytes()
        assert first == second, f"{fname} differs between identical runs"
