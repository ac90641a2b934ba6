"""Losses, negative mining, Adam, and the training loop.

Training ranks the referred proposal above its competitors with a hinge
on score differences (or a softmax alternative).  Negatives come from
the sample itself: every other proposal whose score violates the margin
is "hard", and the mining strategy picks which of them enter the loss.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import forward
from .scene_graph import iou


class TrainingDiverged(RuntimeError):
    """Raised when a gradient stops being finite."""


# ---------------------------------------------------------------------------
# negative mining
# ---------------------------------------------------------------------------

def hard_negative_set(scores, gt_index, margin):
    """Indices j != gt with s_j + margin - s_gt > 0, ascending."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= gt_index < len(s):
        raise IndexError(f"gt_index {gt_index} out of range for {len(s)} proposals")
    out = [j for j in range(len(s)) if j != gt_index and s[j] + margin - s[gt_index] > 0.0]
    return out


def semi_hard_negative_set(scores, gt_index, margin):
    """Hard negatives that the model still ranks below the referent."""
    s = np.asarray(scores, dtype=np.float64)
    return [j for j in hard_negative_set(s, gt_index, margin) if s[j] < s[gt_index]]


MINING_STRATEGIES = ("random-hard", "hardest", "random-semi-hard")


def choose_negatives(scores, gt_index, margin, strategy, count, rng):
    """Pick up to ``count`` negatives according to the mining strategy.

    random-semi-hard falls back to the plain hard set when no semi-hard
    negative exists.  Returns an empty list when nothing violates the
    margin (the sample then contributes zero loss).
    """
    if strategy not in MINING_STRATEGIES:
        raise ValueError(f"unknown mining strategy {strategy!r}, "
                         f"expected one of {MINING_STRATEGIES}")
    if count < 1:
        raise ValueError(f"negative count must be >= 1, got {count}")
    hard = hard_negative_set(scores, gt_index, margin)
    if not hard:
        return []
    if strategy == "hardest":
        s = np.asarray(scores, dtype=np.float64)
        return sorted(sorted(hard, key=lambda j: (-s[j], j))[:count])
    pool = hard
    if strategy == "random-semi-hard":
        semi = semi_hard_negative_set(scores, gt_index, margin)
        if semi:
            pool = semi
    take = min(count, len(pool))
    picked = rng.choice(len(pool), size=take, replace=False)
    return sorted(pool[i] for i in picked)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def triplet_loss(scores, gt_index, negative_indices, margin):
    """Sum of hinges max(0, s_neg + margin - s_gt) over the chosen negatives."""
    if margin <= 0.0:
        raise ValueError(f"margin must be positive, got {margin}")
    gt = scores[gt_index:gt_index + 1]
    total = None
    for j in negative_indices:
        if j == gt_index:
            raise ValueError("negative index equals the referent index")
        gap = ad.add(ad.sub(scores[j:j + 1], gt), ad.constant(np.array([margin])))
        hinge = ad.relu(gap)
        total = hinge if total is None else ad.add(total, hinge)
    if total is None:
        total = ad.constant(np.array([0.0]))
    return ad.reshape(total, ())


def softmax_loss(scores, gt_index):
    """Cross entropy of softmax(scores) against the referent (temperature 1)."""
    k = scores.shape[0]
    probs = ad.softmax(ad.reshape(scores, (1, k)), axis=1)
    return ad.reshape(ad.smul(ad.log(probs[0:1, gt_index:gt_index + 1]), -1.0), ())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One in-place Adam update; iterates names in sorted order.

    Raises TrainingDiverged naming the first parameter whose gradient
    contains a non-finite value.
    """
    state.step += 1
    b1, b2, eps, t = state.beta1, state.beta2, state.epsilon, state.step
    for name in sorted(params):
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r} "
                                   f"at step {t}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            state.m[name] = m
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predicted_index(scores):
    return int(np.argmax(scores))


def is_hit(prep, scores, iou_threshold=0.5):
    """True when the top-scoring box overlaps the referent box with IoU above threshold."""
    pred = predicted_index(scores)
    return iou(prep.graph.proposals[pred], prep.graph.proposals[prep.gt_index]) > iou_threshold


def evaluate(model, prepared, iou_threshold=0.5):
    """P@1 overall and per expression order: {"overall", "count", "by_order"}."""
    if not prepared:
        raise ValueError("cannot evaluate an empty sample list")
    hits = 0
    order_hits = {}
    order_counts = {}
    for prep in prepared:
        ok = is_hit(prep, model.score(prep), iou_threshold)
        hits += ok
        if prep.order is not None:
            order_hits[prep.order] = order_hits.get(prep.order, 0) + ok
            order_counts[prep.order] = order_counts.get(prep.order, 0) + 1
    by_order = {o: order_hits[o] / order_counts[o] for o in sorted(order_counts)}
    return {"overall": hits / len(prepared), "count": len(prepared),
            "by_order": by_order}


def precision_at_1(model, prepared, iou_threshold=0.5):
    return evaluate(model, prepared, iou_threshold)["overall"]


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    lr_drop_epoch: int = 6       # epoch (1-based) at which the rate drops
    lr_after_drop: float = 1e-4
    loss: str = "triplet"        # triplet | softmax
    mining: str = "random-hard"
    negatives: int = 1
    margin: float = 0.1
    seed: int = 0
    early_stop_p1: float | None = None   # stop once val P@1 reaches this

    def __post_init__(self):
        if self.loss not in ("triplet", "softmax"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.mining not in MINING_STRATEGIES:
            raise ValueError(f"unknown mining strategy {self.mining!r}")
        if self.negatives not in (1, 2):
            raise ValueError(f"negatives must be 1 or 2, got {self.negatives}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def rate_for_epoch(self, epoch):
        return self.lr if epoch < self.lr_drop_epoch else self.lr_after_drop


@dataclass
class TrainResult:
    best_params: dict
    best_val_p1: float
    best_epoch: int
    history: list                # one metrics dict per epoch


def sample_loss(model_params_bound, prep, cfg, tcfg, rng):
    """Forward one sample on the bound tape and build its loss tensor."""
    res = forward(prep, model_params_bound, cfg)
    if tcfg.loss == "softmax":
        return softmax_loss(res.scores, prep.gt_index)
    negatives = choose_negatives(res.scores.data, prep.gt_index, tcfg.margin,
                                 tcfg.mining, tcfg.negatives, rng)
    return triplet_loss(res.scores, prep.gt_index, negatives, tcfg.margin)


def train(model, train_set, val_set, tcfg: TrainConfig, metrics_path=None):
    """Adam-train the model; returns the best-validation parameters.

    ``train_set``/``val_set`` are PreparedSample lists.  Per epoch the
    train set is reshuffled, losses are averaged within each batch, and
    one metrics line {epoch, mean_loss, val_p_at_1, lr} is appended to
    ``metrics_path`` (when given) and recorded in the result history.
    """
    if not train_set:
        raise ValueError("cannot train on an empty sample list")
    for prep in train_set:
        if prep.gt_index is None:
            raise ValueError("every training sample needs a referent index")
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    best = TrainResult(copy.deepcopy(model.params), -1.0, 0, [])
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, tcfg.epochs + 1):
            lr = tcfg.rate_for_epoch(epoch)
            order = rng.permutation(len(train_set))
            loss_total = 0.0
            for start in range(0, len(order), tcfg.batch_size):
                batch = [train_set[i] for i in order[start:start + tcfg.batch_size]]
                grad_sum = {name: np.zeros_like(arr) for name, arr in model.params.items()}
                for prep in batch:
                    tape = ad.Tape()
                    bound = model.bind(tape)
                    loss = sample_loss(bound, prep, model.cfg, tcfg, rng)
                    loss_total += float(loss.data)
                    if float(loss.data) == 0.0:
                        continue
                    grads = ad.backward(tape, loss)
                    for name, tensor in bound.items():
                        grad_sum[name] += grads[tensor.node_id]
                scale = 1.0 / len(batch)
                adam_step(model.params, {n: g * scale for n, g in grad_sum.items()},
                          state, lr)
            val_p1 = precision_at_1(model, val_set) if val_set else float("nan")
            record = {"epoch": epoch, "mean_loss": loss_total / len(train_set),
                      "val_p_at_1": val_p1, "lr": lr}
            best.history.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if val_set and val_p1 > best.best_val_p1:
                best.best_val_p1 = val_p1
                best.best_epoch = epoch
                best.best_params = copy.deepcopy(model.params)
            if (tcfg.early_stop_p1 is not None and val_set
                    and val_p1 >= tcfg.early_stop_p1):
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    if not val_set:
        best.best_params = copy.deepcopy(model.params)
        best.best_epoch = len(best.history)
    return best
