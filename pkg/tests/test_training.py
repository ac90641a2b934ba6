import json
from types import SimpleNamespace

import numpy as np
import pytest

from relground import autodiff as ad
from relground import model as md
from relground import training as tr
from relground.language import Vocabulary
from relground.scene_graph import Proposal

SCORES = [0.9, 0.85, 0.6, 0.95]  # referent at 0, margin 0.1


def test_hard_negative_set_example():
    assert tr.hard_negative_set(SCORES, 0, 0.1) == [1, 3]


def test_semi_hard_keeps_only_lower_scored_violators():
    assert tr.semi_hard_negative_set(SCORES, 0, 0.1) == [1]


def test_hard_set_empty_when_margin_satisfied():
    assert tr.hard_negative_set([0.9, 0.2, 0.1], 0, 0.1) == []
    with pytest.raises(IndexError):
        tr.hard_negative_set(SCORES, 7, 0.1)


def test_choose_negatives_strategies():
    rng = np.random.default_rng(0)
    assert tr.choose_negatives(SCORES, 0, 0.1, "hardest", 1, rng) == [3]
    assert tr.choose_negatives(SCORES, 0, 0.1, "hardest", 2, rng) == [1, 3]
    assert tr.choose_negatives(SCORES, 0, 0.1, "random-semi-hard", 1, rng) == [1]
    for _ in range(20):
        picked = tr.choose_negatives(SCORES, 0, 0.1, "random-hard", 1, rng)
        assert picked in ([1], [3])
    # no semi-hard negative -> falls back to the hard set
    scores = [0.5, 0.9, 0.1]
    assert tr.choose_negatives(scores, 0, 0.1, "random-semi-hard", 1, rng) == [1]
    assert tr.choose_negatives([0.9, 0.1], 0, 0.1, "random-hard", 1, rng) == []
    with pytest.raises(ValueError, match="strategy"):
        tr.choose_negatives(SCORES, 0, 0.1, "easiest", 1, rng)
    with pytest.raises(ValueError, match="count"):
        tr.choose_negatives(SCORES, 0, 0.1, "hardest", 0, rng)


def test_triplet_loss_examples():
    s = ad.constant(np.array(SCORES))
    assert float(tr.triplet_loss(s, 0, [1], 0.1).data) == pytest.approx(0.05)
    assert float(tr.triplet_loss(s, 0, [2], 0.1).data) == 0.0
    assert float(tr.triplet_loss(s, 0, [3], 0.1).data) == pytest.approx(0.15)
    assert float(tr.triplet_loss(s, 0, [1, 3], 0.1).data) == pytest.approx(0.20)
    assert float(tr.triplet_loss(s, 0, [], 0.1).data) == 0.0
    with pytest.raises(ValueError, match="margin"):
        tr.triplet_loss(s, 0, [1], 0.0)
    with pytest.raises(ValueError, match="referent"):
        tr.triplet_loss(s, 0, [0], 0.1)


def test_triplet_loss_on_all_zero_scores_equals_margin():
    # fresh zero-scoring model: every violated hinge contributes exactly the margin
    s = ad.constant(np.zeros(2))
    assert float(tr.triplet_loss(s, 0, [1], 0.25).data) == pytest.approx(0.25)


def test_triplet_loss_monotone_in_scores():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.uniform(-1, 1, size=5)
        base = float(tr.triplet_loss(ad.constant(s), 2, [0, 4], 0.2).data)
        up_gt = s.copy()
        up_gt[2] += 0.1
        assert float(tr.triplet_loss(ad.constant(up_gt), 2, [0, 4], 0.2).data) <= base + 1e-12
        up_neg = s.copy()
        up_neg[0] += 0.1
        assert float(tr.triplet_loss(ad.constant(up_neg), 2, [0, 4], 0.2).data) >= base - 1e-12


def test_softmax_loss_reference_values():
    two = ad.constant(np.array([1.0, 1.0]))
    assert float(tr.softmax_loss(two, 0).data) == pytest.approx(np.log(2.0))
    five = ad.constant(np.zeros(5))
    assert float(tr.softmax_loss(five, 3).data) == pytest.approx(np.log(5.0))
    sure = ad.constant(np.array([30.0, 0.0]))
    assert float(tr.softmax_loss(sure, 0).data) == pytest.approx(0.0, abs=1e-12)
    assert float(tr.softmax_loss(sure, 1).data) == pytest.approx(30.0, rel=1e-9)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    s0 = rng.uniform(-0.5, 0.5, size=4)

    def hinge(tape, leaves):
        return tr.triplet_loss(leaves[0], 1, [0, 3], 0.7)  # big margin keeps hinges active

    def xent(tape, leaves):
        return tr.softmax_loss(leaves[0], 2)

    assert ad.finite_difference_check(hinge, [s0]).passed
    assert ad.finite_difference_check(xent, [s0]).passed


# -- optimizer ----------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -0.25, 4.0])}
    tr.adam_step(params, grads, tr.AdamState(), lr=0.01)
    np.testing.assert_allclose(params["w"], [0.99, -1.99, 2.99], atol=1e-6)


def test_adam_zero_gradient_keeps_parameters():
    params = {"w": np.array([1.0, 2.0])}
    tr.adam_step(params, {"w": np.zeros(2)}, tr.AdamState(), lr=0.1)
    np.testing.assert_array_equal(params["w"], [1.0, 2.0])


def test_adam_is_deterministic():
    rng = np.random.default_rng(3)
    grads = [{"w": rng.normal(size=3)} for _ in range(5)]

    def run():
        p = {"w": np.array([0.3, -0.7, 0.1])}
        st = tr.AdamState()
        for g in grads:
            tr.adam_step(p, g, st, lr=0.05)
        return p["w"]

    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_non_finite_gradient():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    grads = {"a": np.zeros(2), "b": np.array([1.0, np.nan])}
    with pytest.raises(tr.TrainingDiverged, match="'b'"):
        tr.adam_step(params, grads, tr.AdamState(), lr=0.1)


def test_train_config_validation():
    with pytest.raises(ValueError, match="loss"):
        tr.TrainConfig(loss="ranking")
    with pytest.raises(ValueError, match="mining"):
        tr.TrainConfig(mining="none")
    with pytest.raises(ValueError, match="negatives"):
        tr.TrainConfig(negatives=3)
    cfg = tr.TrainConfig(lr=1e-3, lr_drop_epoch=3, lr_after_drop=1e-5)
    assert cfg.rate_for_epoch(2) == 1e-3
    assert cfg.rate_for_epoch(3) == 1e-5


# -- end-to-end on a single scene ----------------------------------------------

VOCAB = Vocabulary({"red": 1, "circle": 2, "square": 3, "blue": 4})


def one_scene_model():
    cfg = md.HyperConfig(d_x=4, d_f=4, d_h=4, d_n=4, d_l0=4, d_e0=4, d_e=6, d_p=3,
                         d_s=5, n_layers=1, branch="spatial", seed=2)
    m = md.Model(cfg, VOCAB)
    feat_red = np.array([1.0, 0.0, 0.2, 0.1])
    feat_blue = np.array([0.0, 1.0, 0.2, 0.1])
    sample = SimpleNamespace(
        proposals=[Proposal(0.3, 0.5, 0.2, 0.2, feat_red),
                   Proposal(0.7, 0.5, 0.2, 0.2, feat_blue)],
        tokens=["red", "circle"], tree="(NP (JJ red) (NN circle))",
        semantic_edges=[], gt_index=0, order=0, scene_id="s0")
    return m, m.prepare(sample)


@pytest.mark.parametrize("loss", ["triplet", "softmax"])
def test_overfit_single_sample(loss):
    m, prep = one_scene_model()
    tcfg = tr.TrainConfig(epochs=60, batch_size=1, lr=0.02, lr_drop_epoch=100,
                          loss=loss, margin=0.2, seed=0)
    result = tr.train(m, [prep], [prep], tcfg)
    assert result.best_val_p1 == 1.0
    final = result.history[-1]
    assert final["mean_loss"] < (1e-3 if loss == "triplet" else 0.4)
    m.params = result.best_params
    scores = m.score(prep)
    assert scores[0] > scores[1]


def test_train_writes_metrics_and_keeps_best(tmp_path):
    m, prep = one_scene_model()
    path = tmp_path / "metrics.jsonl"
    tcfg = tr.TrainConfig(epochs=4, batch_size=1, lr=0.02, lr_drop_epoch=3,
                          lr_after_drop=0.001, margin=0.2, seed=0)
    result = tr.train(m, [prep], [prep], tcfg, metrics_path=path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 4 == len(result.history)
    for epoch, rec in enumerate(lines, start=1):
        assert sorted(rec) == ["epoch", "lr", "mean_loss", "val_p_at_1"]
        assert rec["epoch"] == epoch
        assert rec["lr"] == (0.02 if epoch < 3 else 0.001)
    assert result.best_epoch >= 1
    assert set(result.best_params) == set(m.params)


def test_train_early_stop(tmp_path):
    m, prep = one_scene_model()
    tcfg = tr.TrainConfig(epochs=50, batch_size=1, lr=0.02, lr_drop_epoch=100,
                          margin=0.2, seed=0, early_stop_p1=1.0)
    result = tr.train(m, [prep], [prep], tcfg)
    assert result.best_val_p1 == 1.0
    assert len(result.history) < 50


def test_train_rejects_bad_inputs():
    m, prep = one_scene_model()
    with pytest.raises(ValueError, match="empty"):
        tr.train(m, [], [prep], tr.TrainConfig(epochs=1))
    bad = m.prepare(SimpleNamespace(
        proposals=[Proposal(0.3, 0.5, 0.2, 0.2, np.zeros(4))],
        tokens=["red", "circle"], tree="(NP (JJ red) (NN circle))",
        semantic_edges=[], gt_index=None, order=None, scene_id="x"))
    with pytest.raises(ValueError, match="referent"):
        tr.train(m, [bad], [], tr.TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="empty"):
        tr.evaluate(m, [])


def test_evaluate_reports_by_order():
    m, prep = one_scene_model()
    report = tr.evaluate(m, [prep])
    assert report["count"] == 1
    assert set(report["by_order"]) == {0}
    assert report["overall"] in (0.0, 1.0)
    assert report["by_order"][0] == report["overall"]
