"""``hetdiff`` command line: synth | metapath | train | eval | predict | gradcheck.

Every command writes its outputs plus a ``manifest.json`` under ``--out``.

Option precedence, highest first: explicit flag, ``HETDIFF_SEED`` (seed
only), ``--config`` JSON file (keys are the long flag names), built-in
default.

Exit codes: 0 success, 1 usage, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import difflib
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ContractError
from .checkpoint import load_checkpoint, save_checkpoint
from .data_io import (
    SyntheticSpec,
    compose_tripartite,
    generate_synthetic,
    graph_from_edge_list,
    parse_edge_file,
    read_labeled_pairs,
    write_edge_file,
    write_labeled_pairs,
)
from .errors import ConfigError, DataError, UndefinedMetricError
from .gradcheck import fixture_config, run_gradcheck
from .graph import GraphError
from .metapath import build_metapaths, write_relations
from .pipeline import RATE_KEYS, SPLIT_MODES, average_reports, evaluate_model, fit_split, make_splits
from .training import TrainConfig

log = logging.getLogger("hetdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
SEED_ENV = "HETDIFF_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Manifest and option resolution
# ---------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)  # path -> sha256
    artifacts: list = field(default_factory=list)  # paths relative to --out
    started: str = field(default_factory=_now)
    finished: str = ""
    version: str = __version__

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, out_dir: Path) -> None:
        self.finished = _now()
        self.artifacts = sorted(set(self.artifacts))
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _resolve(args, defaults: dict) -> dict:
    """Merge flag values over config-file values over ``defaults``."""
    from_file = _load_config_file(getattr(args, "config", None))
    unknown = set(from_file) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(from_file)
    env = os.environ.get(SEED_ENV)
    if "seed" in defaults and env not in (None, ""):
        try:
            out["seed"] = int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _weights(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(w) for w in text)
    try:
        ws = tuple(float(w) for w in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"weights must be comma-separated numbers, got {text!r}") from exc
    if len(ws) != 4:
        raise argparse.ArgumentTypeError("exactly four weights are required")
    return ws


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = dict(na=200, nb=100, blocks=4, pin=0.3, pout=0.01, seed=7)


def cmd_synth(args) -> int:
    opts = _resolve(args, SYNTH_DEFAULTS)
    spec = SyntheticSpec(opts["na"], opts["nb"], opts["blocks"], opts["pin"], opts["pout"], opts["seed"])
    try:
        spec.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    manifest = RunManifest("synth", asdict(spec), spec.seed)
    graph, la, lb = generate_synthetic(spec)
    write_edge_file(graph, out / "edges.tsv")
    with open(out / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# side\tid\tblock\n")
        for i, b in enumerate(la):
            fh.write(f"drug\t{graph.a_ids[i]}\t{int(b)}\n")
        for j, b in enumerate(lb):
            fh.write(f"gene\t{graph.b_ids[j]}\t{int(b)}\n")
    manifest.artifacts += ["edges.tsv", "labels.tsv"]
    manifest.write(out)
    print(f"wrote {graph.n_edges} edges ({graph.n_a} drugs, {graph.n_b} genes) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Data loading shared by metapath and train
# ---------------------------------------------------------------------------


def _load_dataset(args, manifest: RunManifest):
    """``(graph, bridges)``; bridges is ``None`` for a plain bipartite edge file."""
    if (args.drug_bridge is None) != (args.target_bridge is None):
        raise UsageError("--drug-bridge and --target-bridge must be given together")
    labels = parse_edge_file(args.edges)
    manifest.add_input(args.edges)
    if args.drug_bridge is None:
        return graph_from_edge_list(labels), None
    drug_bridge = parse_edge_file(args.drug_bridge)
    target_bridge = parse_edge_file(args.target_bridge)
    manifest.add_input(args.drug_bridge)
    manifest.add_input(args.target_bridge)
    data = compose_tripartite(drug_bridge, target_bridge, labels)
    return data.graph, (data.bridges_a, data.bridges_b)


def _add_dataset_flags(p) -> None:
    p.add_argument("--edges", required=True, help="drug-target edge TSV")
    p.add_argument("--drug-bridge", help="drug-bridge TSV (tripartite mode)")
    p.add_argument("--target-bridge", help="target-bridge TSV (tripartite mode)")


# ---------------------------------------------------------------------------
# metapath
# ---------------------------------------------------------------------------

METAPATH_DEFAULTS = dict(tau=30, seed=0, max_bridge_members=None)


def cmd_metapath(args) -> int:
    opts = _resolve(args, METAPATH_DEFAULTS)
    out = _out_dir(args)
    manifest = RunManifest("metapath", opts, opts["seed"])
    graph, bridges = _load_dataset(args, manifest)
    ba, bb = bridges if bridges is not None else (None, None)
    rel = build_metapaths(graph, opts["tau"], opts["seed"], ba, bb, opts["max_bridge_members"])
    write_relations(rel, graph, out / "drug_relations.tsv", out / "target_relations.tsv")
    manifest.artifacts += ["drug_relations.tsv", "target_relations.tsv"]
    manifest.write(out)
    print(f"wrote {rel.total_entries()} relation entries (tau={rel.tau}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "batch": "batch_size",
    "dim": "dim",
    "lr": "learning_rate",
    "tau": "tau",
    "steps": "T",
    "alpha_start": "alpha_start",
    "alpha_end": "alpha_end",
    "weights": "weights",
    "epochs": "epochs",
    "seed": "seed",
    "dropout": "dropout_rate",
    "neg_combine": "neg_combine",
    "normalize_weights": "normalize_weights",
    "margin_variant": "margin_variant",
    "margin": "margin",
    "reverse_mean": "reverse_mean",
    "negatives_per_drug": "negatives_per_drug",
    "max_bridge_members": "max_bridge_members",
    "no_diffusion": "use_diffusion",
    "no_homogeneous": "use_homogeneous",
    "no_heterogeneous": "use_heterogeneous",
}
_NEGATED = {"no_diffusion", "no_homogeneous", "no_heterogeneous"}
DIFFUSION_ONLY = ("neg_combine", "normalize_weights", "margin_variant", "margin", "reverse_mean", "weights", "steps", "alpha_start", "alpha_end")


def _train_defaults() -> dict:
    base = TrainConfig()
    out = {}
    for flag, name in TRAIN_FLAGS.items():
        val = getattr(base, name)
        out[flag] = (not val) if flag in _NEGATED else val
    out["split"] = "holdout8020"
    return out


def _train_config(args) -> tuple[TrainConfig, str]:
    opts = _resolve(args, _train_defaults())
    if opts["no_diffusion"]:
        clash = [f"--{k.replace('_', '-')}" for k in DIFFUSION_ONLY if getattr(args, k, None) not in (None, False)]
        if clash:
            raise UsageError(f"--no-diffusion conflicts with {', '.join(clash)}")
    kwargs = {}
    for flag, name in TRAIN_FLAGS.items():
        val = opts[flag]
        kwargs[name] = (not val) if flag in _NEGATED else val
    kwargs["weights"] = _weights(kwargs["weights"])
    try:
        config = TrainConfig(**kwargs).validate()
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    if opts["split"] not in SPLIT_MODES:
        raise UsageError(f"--split must be one of {SPLIT_MODES}")
    return config, opts["split"]


def write_loss_history(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "l_diffusion", "l_ce", "l_margin", "l_total"])
        for i, r in enumerate(history):
            w.writerow([i, repr(r.l_diffusion), repr(r.l_ce), repr(r.l_margin), repr(r.l_total)])


def _train_one(config, split, bridges, out: Path, graph) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result = fit_split(config, split, bridges)
    save_checkpoint(result.model, out / "checkpoint.bin")
    write_loss_history(result.history, out / "loss_history.csv")
    write_edge_file(split.train_graph, out / "train_edges.tsv")
    write_labeled_pairs(graph, split.test_pairs, split.test_labels, out / "test_pairs.tsv")
    last = result.history[-1]
    print(f"{out}: final epoch l_total={last.l_total:.6g} (diffusion {last.l_diffusion:.6g}, ce {last.l_ce:.6g}, margin {last.l_margin:.6g})")


def cmd_train(args) -> int:
    config, split_mode = _train_config(args)
    out = _out_dir(args)
    manifest = RunManifest("train", {**config.to_dict(), "split": split_mode}, config.seed)
    graph, bridges = _load_dataset(args, manifest)
    splits = make_splits(graph, split_mode, config.seed, config.negatives_per_drug)
    run_files = ("checkpoint.bin", "loss_history.csv", "train_edges.tsv", "test_pairs.tsv")
    if split_mode == "holdout8020":
        _train_one(config, splits[0], bridges, out, graph)
        manifest.artifacts += list(run_files)
    else:
        for k, split in enumerate(splits):
            _train_one(config, split, bridges, out / f"fold_{k}", graph)
            manifest.artifacts += [f"fold_{k}/{f}" for f in run_files]
    manifest.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _run_targets(args) -> list[tuple[Path, Path]]:
    if args.run is not None:
        if args.checkpoint is not None or args.test is not None:
            raise UsageError("--run cannot be combined with --checkpoint/--test")
        run = Path(args.run)
        folds = sorted(run.glob("fold_*"), key=lambda p: int(p.name.split("_")[1]))
        dirs = folds if folds else [run]
        return [(d / "checkpoint.bin", d / "test_pairs.tsv") for d in dirs]
    if args.checkpoint is None or args.test is None:
        raise UsageError("need --run DIR, or both --checkpoint and --test")
    return [(Path(args.checkpoint), Path(args.test))]


CSV_COLUMNS = ("scope", "index", *RATE_KEYS, "threshold", "n_pos", "n_neg")


def _csv_row(scope, index, rep) -> list:
    if rep is None:
        return [scope, index] + [""] * (len(CSV_COLUMNS) - 2)
    return [scope, index] + ["" if rep[k] is None else repr(rep[k]) if isinstance(rep[k], float) else rep[k] for k in CSV_COLUMNS[2:]]


def write_metrics(metrics: dict, out: Path) -> None:
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow(_csv_row("all", "", metrics))
        for row in metrics.get("per_bin", []):
            w.writerow(_csv_row("bin", row["bin"], row["report"]))
        for row in metrics.get("per_fold", []):
            w.writerow(_csv_row("fold", row["fold"], row))
            for b in row.get("per_bin", []):
                w.writerow(_csv_row(f"fold{row['fold']}_bin", b["bin"], b["report"]))


def cmd_eval(args) -> int:
    opts = _resolve(args, dict(threshold=0.5, seed=None, percentiles=None))
    if opts["percentiles"] is not None and opts["percentiles"] < 1:
        raise UsageError("--percentiles must be at least 1")
    if not 0.0 <= opts["threshold"] <= 1.0:
        raise UsageError("--threshold applies to sigmoid scores and must lie in [0, 1]")
    targets = _run_targets(args)
    if args.per_fold and len(targets) < 2:
        raise UsageError("--per-fold needs a cross-validation run directory")
    if len(targets) > 1 and opts["percentiles"] is not None and not args.per_fold:
        raise UsageError("--percentiles on a cross-validation run needs --per-fold")
    out = _out_dir(args)
    manifest = RunManifest("eval", opts, opts["seed"])
    reports = []
    for ckpt, test in targets:
        model, _ = load_checkpoint(ckpt)
        pairs, labels = read_labeled_pairs(test, model.a_ids, model.b_ids)
        manifest.add_input(ckpt)
        manifest.add_input(test)
        reports.append(evaluate_model(model, pairs, labels, opts["threshold"], opts["seed"], opts["percentiles"]))
    if len(reports) == 1:
        metrics = reports[0]
    else:
        metrics = average_reports(reports)
        if args.per_fold:
            metrics["per_fold"] = [{"fold": k, **r} for k, r in enumerate(reports)]
    write_metrics(metrics, out)
    manifest.artifacts += ["metrics.json", "metrics.csv"]
    manifest.write(out)
    print(" ".join(f"{k}={metrics[k]:.4f}" for k in RATE_KEYS))
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def rank_genes(scores: np.ndarray, gene_ids, k: int) -> list[tuple[str, float]]:
    """Top ``k`` genes by score, ties broken by gene id."""
    order = sorted(range(len(gene_ids)), key=lambda j: (-scores[j], gene_ids[j]))
    return [(gene_ids[j], float(scores[j])) for j in order[:k]]


def cmd_predict(args) -> int:
    opts = _resolve(args, dict(k=10, seed=None))
    if opts["k"] < 1:
        raise UsageError("--k must be positive")
    model, config = load_checkpoint(args.checkpoint)
    if args.drug not in model.a_ids:
        near = difflib.get_close_matches(args.drug, model.a_ids, n=5, cutoff=0.0)
        raise DataError(f"unknown drug id {args.drug!r}; nearest known ids: {', '.join(near)}")
    seed = config.seed if opts["seed"] is None else opts["seed"]
    out = _out_dir(args)
    manifest = RunManifest("predict", {**opts, "drug": args.drug}, seed)
    manifest.add_input(args.checkpoint)
    d = model.a_ids.index(args.drug)
    pairs = np.stack([np.full(len(model.b_ids), d), np.arange(len(model.b_ids))], axis=1)
    ranked = rank_genes(model.score_pairs(pairs, seed), model.b_ids, opts["k"])
    with open(out / "predictions.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for gene, score in ranked:
            fh.write(f"{gene}\t{score!r}\n")
    manifest.artifacts.append("predictions.tsv")
    manifest.write(out)
    for gene, score in ranked:
        print(f"{gene}\t{score:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

_GRADCHECK_MUTATION = None  # test hook: callable(group, grad) -> grad


def cmd_gradcheck(args) -> int:
    opts = _resolve(args, dict(seed=0))
    out = _out_dir(args)
    manifest = RunManifest("gradcheck", opts, opts["seed"])
    report = run_gradcheck(fixture_config(seed=opts["seed"]), mutate=_GRADCHECK_MUTATION)
    for line in report.lines():
        print(line)
    with open(out / "gradcheck.json", "w", encoding="utf-8") as fh:
        body = {"passed": report.passed, "tolerance": report.tolerance, "groups": [asdict(g) for g in report.groups]}
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.artifacts.append("gradcheck.json")
    manifest.write(out)
    return EXIT_OK if report.passed else EXIT_VERIFY


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hetdiff", description="Drug-gene link prediction with diffusion hard negatives.")
    p.add_argument("--version", action="version", version=f"hetdiff {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="JSON file of option defaults")
        if seed:
            sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="generate a planted-block bipartite graph")
    common(s)
    s.add_argument("--na", type=int)
    s.add_argument("--nb", type=int)
    s.add_argument("--blocks", type=int)
    s.add_argument("--pin", type=float)
    s.add_argument("--pout", type=float)
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("metapath", help="dump the homogeneous meta-path relations")
    common(m)
    _add_dataset_flags(m)
    m.add_argument("--tau", type=int)
    m.add_argument("--max-bridge-members", type=int)
    m.set_defaults(func=cmd_metapath)

    t = sub.add_parser("train", help="train a model and write its checkpoint")
    common(t)
    _add_dataset_flags(t)
    t.add_argument("--batch", type=int)
    t.add_argument("--dim", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--tau", type=int)
    t.add_argument("--steps", type=int, help="diffusion steps T")
    t.add_argument("--alpha-start", type=float)
    t.add_argument("--alpha-end", type=float)
    t.add_argument("--weights", type=_weights, help="four comma-separated step weights")
    t.add_argument("--epochs", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--neg-combine", choices=("weighted", "sum", "average"))
    t.add_argument("--normalize-weights", action="store_true", default=None)
    t.add_argument("--margin-variant", choices=("paper", "corrected"))
    t.add_argument("--margin", type=float)
    t.add_argument("--reverse-mean", choices=("paper", "ddpm"), help="noise coefficient of the reverse-step mean")
    t.add_argument("--negatives-per-drug", type=int)
    t.add_argument("--max-bridge-members", type=int)
    t.add_argument("--no-diffusion", action="store_true", default=None)
    t.add_argument("--no-homogeneous", action="store_true", default=None)
    t.add_argument("--no-heterogeneous", action="store_true", default=None)
    t.add_argument("--split", choices=SPLIT_MODES)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a held-out pair set")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--test", help="labelled pair TSV")
    e.add_argument("--run", help="train output directory (holdout or cv5)")
    e.add_argument("--per-fold", action="store_true")
    e.add_argument("--percentiles", type=int, help="number of drug-degree bins")
    e.add_argument("--threshold", type=float, help="cut-off on sigmoid scores")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="rank genes for one drug")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--drug", required=True)
    r.add_argument("--k", type=int)
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    common(g)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError, UndefinedMetricError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
