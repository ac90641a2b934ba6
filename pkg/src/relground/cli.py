"""Command-line entry point.

Subcommands: gen-data (synthesize a dataset), train (fit a model into a
timestamped run directory), eval (Precision@1 report), ground (score one
scene against one expression, with optional score-map raster), inspect
(dump attention/gate internals for a dataset sample), and gradcheck
(finite-difference audit of every backward rule and parameter group).

All commands read an optional JSON config file (sections "model",
"generator", "training") with command-line flags taking precedence; the
effective configuration is echoed into the run directory.  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .datagen import GeneratorConfig, generate_dataset, read_dataset, write_dataset
from .language import build_vocabulary
from .model import (HyperConfig, Model, init_parameters, load_checkpoint,
                    save_checkpoint)
from .scene_graph import GraphVariantConfig, Proposal
from .training import TrainConfig, predicted_index, evaluate, train

GRADCHECK_TOLERANCE = 1e-4

CONFIG_SECTIONS = ("model", "generator", "training")

MINING_FLAGS = {"random-hard": "random-hard", "hardest": "hardest",
                "semi-hard": "random-semi-hard"}


class CommandError(RuntimeError):
    """A runtime failure the user can act on (exit code 1)."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as err:
        raise CommandError(f"cannot read config file: {err}") from None
    except json.JSONDecodeError as err:
        raise CommandError(f"config file is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise CommandError("config file must hold a JSON object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise CommandError(f"unknown config sections {sorted(unknown)}; "
                           f"expected a subset of {list(CONFIG_SECTIONS)}")
    return doc


def _variant_flag(tag):
    try:
        return GraphVariantConfig.from_tag(tag)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def generator_config(args):
    doc = dict(load_config_file(args.config).get("generator", {}))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.num_scenes is not None:
        doc["num_scenes"] = args.num_scenes
    try:
        return GeneratorConfig.from_json(doc)
    except (TypeError, ValueError) as err:
        raise CommandError(f"invalid generator config: {err}") from None


def hyper_config(args, d_x, n_rel_categories):
    doc = dict(load_config_file(args.config).get("model", {}))
    doc["d_x"] = d_x
    doc["n_rel_categories"] = n_rel_categories
    doc.setdefault("variant", HyperConfig().to_json()["variant"])
    if args.layers is not None:
        doc["n_layers"] = args.layers
    if args.branch is not None:
        doc["branch"] = args.branch
    if args.graph_variant is not None:
        v = args.graph_variant
        doc["variant"] = {"edge_design": v.edge_design,
                          "connectivity": v.connectivity, "param": v.param}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        return HyperConfig.from_json(doc)
    except (TypeError, ValueError) as err:
        raise CommandError(f"invalid model config: {err}") from None


def training_config(args):
    doc = dict(load_config_file(args.config).get("training", {}))
    for flag, field in (("loss", "loss"), ("negatives", "negatives"),
                        ("margin", "margin"), ("epochs", "epochs"),
                        ("batch_size", "batch_size"), ("lr", "lr"),
                        ("lr_drop_epoch", "lr_drop_epoch"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            doc[field] = value
    if args.mining is not None:
        doc["mining"] = MINING_FLAGS[args.mining]
    try:
        return TrainConfig(**doc)
    except (TypeError, ValueError) as err:
        raise CommandError(f"invalid training config: {err}") from None


def make_run_dir(root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for n in range(1000):
        candidate = root / (f"run-{stamp}" if n == 0 else f"run-{stamp}-{n}")
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            continue
    raise CommandError(f"cannot create a fresh run directory under {root}")


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = generator_config(args)           # validates before anything is written
    parts = generate_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_dataset(parts[name], out / f"{name}.jsonl", cfg.d_x)
    manifest = {"generator": cfg.to_json(), "d_x": cfg.d_x,
                "files": {name: f"{name}.jsonl" for name in ("train", "val", "test")},
                "counts": {name: len(parts[name]) for name in ("train", "val", "test")}}
    write_json(out / "manifest.json", manifest)
    print(json.dumps({"out": str(out), "counts": manifest["counts"]}, sort_keys=True))
    return 0


def _load_split(path):
    if not Path(path).exists():
        raise CommandError(f"dataset file not found: {path}")
    try:
        return read_dataset(path)
    except ValueError as err:
        raise CommandError(f"{path}: {err}") from None


def _detect_rel_categories(samples):
    for s in samples:
        for _, _, probs in s.semantic_edges:
            return len(probs)
    return 0


def cmd_train(args):
    data_dir = Path(args.data)
    train_path = data_dir / "train.jsonl"
    if not train_path.exists():
        raise CommandError(f"missing dataset: {train_path} does not exist")
    dataset = _load_split(train_path)
    if not dataset.samples:
        raise CommandError(f"{train_path} holds no samples")
    monitor = []
    monitor_name = "none"
    for name in ("val", "test"):
        path = data_dir / f"{name}.jsonl"
        if path.exists():
            split = _load_split(path)
            if split.samples:
                if split.d_x != dataset.d_x:
                    raise CommandError(f"{path}: feature width {split.d_x} does not "
                                       f"match train split {dataset.d_x}")
                monitor, monitor_name = split.samples, name
                break

    tcfg = training_config(args)
    hcfg = hyper_config(args, dataset.d_x,
                        _detect_rel_categories(dataset.samples))
    vocab = build_vocabulary([s.tokens for s in dataset.samples])
    model = Model(hcfg, vocab, init_parameters(hcfg, vocab.size, seed=hcfg.seed))

    run_dir = make_run_dir(args.out)
    write_json(run_dir / "config.json", {
        "model": hcfg.to_json(), "training": asdict(tcfg),
        "data": str(data_dir), "monitor_split": monitor_name,
        "vocab_size": vocab.size})
    try:
        prep_train = [model.prepare(s) for s in dataset.samples]
        prep_monitor = [model.prepare(s) for s in monitor]
        result = train(model, prep_train, prep_monitor, tcfg,
                       metrics_path=run_dir / "metrics.jsonl")
    except (ValueError, RuntimeError) as err:
        raise CommandError(f"training failed: {err}") from None
    model.params = result.best_params
    save_checkpoint(model, run_dir / "checkpoint.json")
    write_json(run_dir / "manifest.json", {
        "checkpoint": "checkpoint.json", "metrics": "metrics.jsonl",
        "config": "config.json", "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_p_at_1": result.best_val_p1})
    print(json.dumps({"run_dir": str(run_dir), "best_epoch": result.best_epoch,
                      "best_val_p_at_1": result.best_val_p1}, sort_keys=True))
    return 0


def _load_model(path):
    if not Path(path).exists():
        raise CommandError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        raise CommandError(f"cannot load checkpoint {path}: {err}") from None


def cmd_eval(args):
    model = _load_model(args.checkpoint)
    dataset = _load_split(args.data)
    if dataset.d_x != model.cfg.d_x:
        raise CommandError(f"dimension mismatch: dataset features are {dataset.d_x}-"
                           f"dimensional but the checkpoint expects {model.cfg.d_x}")
    try:
        preps = [model.prepare(s) for s in dataset.samples]
        report = evaluate(model, preps)
    except ValueError as err:
        raise CommandError(str(err)) from None
    doc = {"overall": float(report["overall"]), "count": report["count"],
           "by_order": {str(k): float(v) for k, v in sorted(report["by_order"].items())}}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _scene_from_json(path, expression, tree):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as err:
        raise CommandError(f"cannot read scene file: {err}") from None
    except json.JSONDecodeError as err:
        raise CommandError(f"scene file is not valid JSON: {err}") from None
    try:
        proposals = [Proposal(*rec["box"], np.asarray(rec["feature"], dtype=np.float64))
                     for rec in doc["proposals"]]
        semantic = [(e["i"], e["j"], list(e["probs"]))
                    for e in doc.get("semantic_edges", [])]
    except (KeyError, TypeError, ValueError) as err:
        raise CommandError(f"malformed scene file: {err}") from None
    if not proposals:
        raise CommandError("scene holds no proposals")
    tokens = expression.split()
    if not tokens:
        raise CommandError("expression is empty")
    return SimpleNamespace(proposals=proposals, tokens=tokens, tree=tree,
                           semantic_edges=semantic)


def _tensor_list(t):
    return None if t is None else np.asarray(t.data, dtype=float).tolist()


def _attention_dump(result):
    """The gate/attention internals of one forward pass, as plain lists."""
    first = next(iter(result.guided.values()))
    doc = {
        "word_attention": _tensor_list(first.word_attention),
        "phrase_attention": _tensor_list(first.phrase_attention),
        "vertex_gates": np.asarray(first.vertex_gates.data).reshape(-1).tolist(),
        "edge_gates": {},
        "word_type_weights": _tensor_list(result.encoded.type_weights),
    }
    for branch, guided in result.guided.items():
        gates = guided.edge_gates
        doc["edge_gates"][branch] = (None if gates is None
                                     else np.asarray(gates.data).reshape(-1).tolist())
    return doc


def _score_raster(proposals, scores, width, height):
    """Per-pixel max over covering proposals, min-max normalized to [0, 1]."""
    raster = np.zeros((height, width))
    covered = np.zeros((height, width), dtype=bool)
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    for p, s in zip(proposals, scores):
        x0, y0, x1, y1 = p.corners()
        mask = np.outer((ys >= y0) & (ys <= y1), (xs >= x0) & (xs <= x1))
        raster[mask & ~covered] = s
        raster[mask & covered] = np.maximum(raster[mask & covered], s)
        covered |= mask
    if covered.any():
        lo, hi = raster[covered].min(), raster[covered].max()
        if hi - lo > 1e-12:
            raster[covered] = (raster[covered] - lo) / (hi - lo)
        else:
            raster[covered] = 1.0
    raster[~covered] = 0.0
    return raster


def write_ppm(path, raster):
    """Binary PPM (P6), grayscale levels from a [0, 1] array."""
    height, width = raster.shape
    levels = np.clip(np.round(raster * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.repeat(levels[..., None], 3, axis=-1).tobytes())


def cmd_ground(args):
    model = _load_model(args.checkpoint)
    sample = _scene_from_json(args.scene, args.expression, args.tree)
    try:
        prep = model.prepare(sample)
    except ValueError as err:
        raise CommandError(str(err)) from None
    result = model.forward_prepared(prep)
    scores = np.asarray(result.scores.data, dtype=float)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    doc = {"ranking": [{"proposal": i, "score": float(scores[i])} for i in order],
           **_attention_dump(result)}
    if args.ppm is not None:
        width, height = args.ppm_size
        if width < 1 or height < 1:
            raise CommandError(f"raster size must be positive, got {width}x{height}")
        write_ppm(args.ppm, _score_raster(sample.proposals, scores, width, height))
        doc["ppm"] = {"path": str(args.ppm), "width": width, "height": height}
    print(json.dumps(doc, indent=2))
    return 0


def cmd_inspect(args):
    model = _load_model(args.checkpoint)
    dataset = _load_split(args.data)
    if dataset.d_x != model.cfg.d_x:
        raise CommandError(f"dimension mismatch: dataset features are {dataset.d_x}-"
                           f"dimensional but the checkpoint expects {model.cfg.d_x}")
    if not 0 <= args.index < len(dataset.samples):
        raise CommandError(f"index {args.index} out of range "
                           f"(dataset holds {len(dataset.samples)} samples)")
    sample = dataset.samples[args.index]
    try:
        prep = model.prepare(sample)
    except ValueError as err:
        raise CommandError(str(err)) from None
    result = model.forward_prepared(prep)
    scores = np.asarray(result.scores.data, dtype=float)
    doc = {"scene_id": sample.scene_id, "tokens": sample.tokens,
           "gt_index": sample.gt_index,
           "predicted_index": int(predicted_index(scores)),
           "scores": scores.tolist(),
           **_attention_dump(result)}
    print(json.dumps(doc, indent=2))
    return 0


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _op_probes():
    """(op name, input arrays, scalar-builder) triples, one per backward rule.

    Every probe reduces through a random weighting so gradient
    misplacements (transposes, swapped concat segments, reshapes) change
    the loss and cannot hide inside a symmetric reduction.
    """
    rng = np.random.default_rng(20240901)

    def arr(*shape, low=-1.0, high=1.0):
        return rng.uniform(low, high, size=shape)

    def weighted(expr, w):
        return ad.reduce_sum(ad.mul(expr, ad.constant(w)))

    probes = []

    def add_probe(name, inputs, build):
        probes.append((name, inputs, build))

    w23 = arr(2, 3)
    w22 = arr(2, 2)
    w25 = arr(2, 5)
    add_probe("matmul", [arr(2, 4), arr(4, 3)],
              lambda t, l: weighted(ad.matmul(l[0], l[1]), w23))
    add_probe("add", [arr(2, 3), arr(2, 3)],
              lambda t, l: weighted(ad.add(l[0], l[1]), w23))
    add_probe("sub", [arr(2, 3), arr(2, 3)],
              lambda t, l: weighted(ad.sub(l[0], l[1]), w23))
    add_probe("mul", [arr(2, 3), arr(2, 3)],
              lambda t, l: ad.reduce_sum(ad.mul(l[0], l[1])))
    add_probe("div", [arr(2, 3), arr(2, 3, low=0.5, high=1.5)],
              lambda t, l: weighted(ad.div(l[0], l[1]), w23))
    add_probe("smul", [arr(2, 3)],
              lambda t, l: weighted(ad.smul(l[0], 1.7), w23))
    add_probe("concat", [arr(2, 2), arr(2, 3)],
              lambda t, l: weighted(ad.concat([l[0], l[1]], axis=1), w25))
    add_probe("slice", [arr(3, 4)],
              lambda t, l: weighted(ad.take_slice(l[0], (slice(0, 2), slice(1, 3))),
                                    w22))
    add_probe("sum", [arr(2, 3)],
              lambda t, l: ad.reduce_sum(l[0]))
    add_probe("mean", [arr(2, 3)],
              lambda t, l: ad.reduce_mean(l[0]))
    add_probe("max", [arr(2, 3)],
              lambda t, l: ad.reduce_max(l[0]))
    add_probe("tanh", [arr(2, 3)],
              lambda t, l: weighted(ad.tanh(l[0]), w23))
    relu_in = arr(2, 3, low=0.2, high=1.0) * rng.choice([-1.0, 1.0], size=(2, 3))
    add_probe("relu", [relu_in],          # inputs kept away from the kink at 0
              lambda t, l: weighted(ad.relu(l[0]), w23))
    add_probe("sigmoid", [arr(2, 3)],
              lambda t, l: weighted(ad.sigmoid(l[0]), w23))
    add_probe("softmax", [arr(2, 3)],
              lambda t, l: weighted(ad.softmax(l[0], axis=-1), w23))
    add_probe("l2norm", [arr(2, 3, low=0.5, high=1.5)],
              lambda t, l: weighted(ad.l2_normalize(l[0], axis=-1), w23))
    add_probe("exp", [arr(2, 3)],
              lambda t, l: weighted(ad.exp(l[0]), w23))
    add_probe("log", [arr(2, 3, low=0.5, high=1.5)],
              lambda t, l: weighted(ad.log(l[0]), w23))
    w32a, w32b = arr(3, 2), arr(3, 2)
    add_probe("reshape", [arr(2, 3)],
              lambda t, l: weighted(ad.reshape(l[0], (3, 2)), w32a))
    add_probe("transpose", [arr(2, 3)],
              lambda t, l: weighted(ad.transpose(l[0]), w32b))
    return probes


def _gradcheck_sample():
    """A fixed 2-proposal / 3-word sample exercising both branches."""
    proposals = [Proposal(0.3, 0.5, 0.2, 0.2, np.array([1.0, 0.1])),
                 Proposal(0.7, 0.5, 0.2, 0.2, np.array([0.1, 1.0]))]
    return SimpleNamespace(
        proposals=proposals,
        tokens=["the", "red", "circle"],
        tree="(NP (DT the) (JJ red) (NN circle))",
        semantic_edges=[(0, 1, [1.0, 0.0]), (1, 0, [0.0, 1.0])],
        gt_index=0,
    )


def _gradcheck_model():
    from .language import Vocabulary
    cfg = HyperConfig(d_x=2, d_f=2, d_h=2, d_n=2, d_l0=2, d_e0=2, d_e=2,
                      d_p=2, d_s=2, d_r=2, n_layers=2, branch="both",
                      n_rel_categories=2, seed=2)
    vocab = Vocabulary({"the": 1, "red": 2, "circle": 3})
    return Model(cfg, vocab, init_parameters(cfg, vocab.size, seed=2))


def run_gradcheck(tolerance=GRADCHECK_TOLERANCE):
    """Check every backward rule, then every model parameter group."""
    ops = []
    for name, inputs, build in sorted(_op_probes(), key=lambda p: p[0]):
        report = ad.finite_difference_check(build, inputs, tolerance=tolerance)
        ops.append({"op": name, "max_rel_error": report.max_rel_error,
                    "passed": report.passed})
    missing = sorted(set(ad.BACKWARD_RULES) - {o["op"] for o in ops})
    if missing:
        raise CommandError(f"ops without gradient probes: {missing}")

    model = _gradcheck_model()
    prep = model.prepare(_gradcheck_sample())
    names = sorted(model.params)

    def loss(tape, leaves):
        bound = dict(zip(names, leaves))
        scores = model.forward_prepared(prep, bound).scores
        return ad.reduce_sum(ad.mul(scores, scores))

    report = ad.finite_difference_check(loss, [model.params[n] for n in names],
                                        tolerance=tolerance)
    groups = [{"name": n, "max_rel_error": err, "passed": err < tolerance}
              for n, err in zip(names, report.per_param)]
    passed = all(o["passed"] for o in ops) and all(g["passed"] for g in groups)
    return {"tolerance": tolerance, "passed": passed, "ops": ops,
            "parameter_groups": groups}


def cmd_gradcheck(args):
    report = run_gradcheck()
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="relground",
        description="Relation-aware referring-expression grounding toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a scene/expression dataset")
    p.add_argument("--config", help="JSON config file (generator section)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override generator seed")
    p.add_argument("--num-scenes", type=int, dest="num_scenes",
                   help="override number of scenes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON config file (model/training sections)")
    p.add_argument("--data", required=True, help="dataset directory (gen-data output)")
    p.add_argument("--out", required=True, help="directory to hold run directories")
    p.add_argument("--layers", type=int, choices=(0, 1, 2, 3),
                   help="number of propagation layers")
    p.add_argument("--graph-variant", type=_variant_flag, dest="graph_variant",
                   metavar="DESIGN+CONNECTIVITY=PARAM",
                   help="edge design/connectivity, e.g. type11+center-dis=0.5")
    p.add_argument("--branch", choices=("spatial", "semantic", "both"))
    p.add_argument("--loss", choices=("triplet", "softmax"))
    p.add_argument("--mining", choices=tuple(MINING_FLAGS))
    p.add_argument("--negatives", type=int, choices=(1, 2))
    p.add_argument("--margin", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-drop-epoch", type=int, dest="lr_drop_epoch")
    p.add_argument("--seed", type=int, help="override model/training seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Precision@1 report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset split file (JSONL)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ground", help="score one scene against one expression")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--expression", required=True, help="whitespace-separated tokens")
    p.add_argument("--tree", required=True, help="bracketed constituency tree")
    p.add_argument("--ppm", help="write a score-map raster to this path")
    p.add_argument("--ppm-size", type=int, nargs=2, default=(64, 64),
                   dest="ppm_size", metavar=("WIDTH", "HEIGHT"))
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("inspect", help="dump attention/gates for a dataset sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset split file (JSONL)")
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
