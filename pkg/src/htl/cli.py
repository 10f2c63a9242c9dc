"""Command-line entry point: ``htl generate|train|evaluate|tree|compare``.

Configuration files are flat JSON objects whose keys are the ``TrainConfig``
fields plus ``train_data``, ``eval_data`` and ``out_dir``. Command-line flags
override values from the file, which override the built-in defaults.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from htl.data import SyntheticSpec, generate_synthetic, load_dataset, stratified_split, write_dataset
from htl.evaluate import recall_at_k
from htl.hierarchy import format_tree
from htl.model import load_checkpoint
from htl.trainer import TrainConfig, embed_dataset, rebuild_hierarchy, train

RUN_KEYS = ("train_data", "eval_data", "out_dir")
MARGIN_STRATEGIES = ("constant", "dynamic", "flat")
SAMPLING_STRATEGIES = ("random", "hard", "semi-hard", "anchor-neighbor")


class CliError(Exception):
    pass


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_train_config_flags(parser):
    group = parser.add_argument_group("training configuration (overrides the config file)")
    for f in fields(TrainConfig):
        if f.name in ("hidden_dims", "ks"):
            kind = _int_list
        elif f.name in ("max_iterations", "patience"):
            kind = int
        else:
            default = f.default
            kind = type(default) if default is not None else str
        group.add_argument(_flag(f.name), dest=f.name, type=kind, default=None)
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--train-data", dest="train_data", help="training dataset file")
    parser.add_argument("--eval-data", dest="eval_data", help="held-out dataset (query = gallery)")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory")


def resolve_run_config(args):
    """Merge defaults, config file and flags into ``(TrainConfig, run_options)``."""
    values = {}
    if args.config is not None:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(values, dict):
            raise CliError("config file must hold a JSON object")
    known = {f.name for f in fields(TrainConfig)} | set(RUN_KEYS)
    unknown = set(values) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    run = {k: values.pop(k, None) for k in RUN_KEYS}
    try:
        config = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from None
    return config, run


def _write_sidecar(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(run, key):
    if not run.get(key):
        raise CliError(f"missing {key.replace('_', '-')} (flag or config key {key!r})")
    return run[key]


def cmd_generate(args):
    spec = SyntheticSpec(
        num_superclasses=args.num_superclasses,
        subclasses_per_super=args.subclasses_per_super,
        samples_per_class=args.samples_per_class,
        input_dim=args.input_dim,
        super_separation=args.super_separation,
        sub_separation=args.sub_separation,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    # generate fully before touching the filesystem so bad generator settings leave nothing behind
    dataset = generate_synthetic(spec)
    splits = stratified_split(dataset, args.holdout_per_class, seed=spec.seed) if args.holdout_per_class else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out)
    meta = {"generator": "synthetic-hierarchical", "spec": asdict(spec), "num_samples": len(dataset)}
    if splits is not None:
        train_path = out.with_suffix(".train.csv")
        test_path = out.with_suffix(".test.csv")
        write_dataset(splits[0], train_path)
        write_dataset(splits[1], test_path)
        meta["splits"] = {
            "holdout_per_class": args.holdout_per_class,
            "train": train_path.name,
            "test": test_path.name,
        }
    _write_sidecar(str(out) + ".meta.json", meta)
    print(f"wrote {len(dataset)} samples in {spec.num_classes} classes to {out}")


def cmd_train(args):
    config, run = resolve_run_config(args)
    train_set = load_dataset(_require(run, "train_data"))
    eval_set = load_dataset(run["eval_data"], split="test") if run["eval_data"] else None
    out_dir = Path(_require(run, "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_sidecar(out_dir / "config.resolved.json", {**config.to_dict(), **run})
    _, train_log = train(train_set, config, eval_dataset=eval_set, checkpoint_dir=out_dir / "checkpoints")
    train_log.write_csv(out_dir / "metrics.csv")
    last = train_log.rows[-1]
    summary = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items())
    print(f"final: {summary}")
    print(f"checkpoint: {out_dir / 'checkpoints' / 'final.ckpt'}")


def cmd_evaluate(args):
    model = load_checkpoint(args.checkpoint)
    query = load_dataset(args.query, split="query")
    same = args.gallery is None or Path(args.gallery).resolve() == Path(args.query).resolve()
    gallery = query if same else load_dataset(args.gallery, split="gallery")
    for name, ds in (("query", query), ("gallery", gallery)):
        if ds.dim != model.input_dim:
            raise CliError(f"{name} dimension {ds.dim} does not match checkpoint input {model.input_dim}")
    Eq = embed_dataset(model, query.features)
    Eg = Eq if same else embed_dataset(model, gallery.features)
    result = recall_at_k(Eq, query.labels, Eg, gallery.labels, args.ks, self_match_excluded=same)
    print(f"{'K':>6} {'recall':>8}")
    for k, r in zip(result.ks, result.recalls):
        print(f"{k:>6} {r:>8.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "recall"])
            for k, r in zip(result.ks, result.recalls):
                writer.writerow([k, repr(r)])
        _write_sidecar(str(args.out) + ".config.json", {
            "checkpoint": str(args.checkpoint), "query": str(args.query),
            "gallery": str(args.gallery or args.query), "ks": list(result.ks), "self_match_excluded": same,
        })
    return result


def cmd_tree(args):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    tree, stats = rebuild_hierarchy(model, dataset, args.depth)
    text = format_tree(tree)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    if args.stats_out:
        with open(args.stats_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "count", "intra"] + [f"d{q}" for q in range(stats.num_classes)])
            for c in range(stats.num_classes):
                writer.writerow(
                    [c, int(stats.class_counts[c]), repr(float(stats.intra[c]))]
                    + [repr(float(x)) for x in stats.interclass[c]]
                )
    return tree


def strategy_overrides(name, depth):
    """Map ``sampling+margin[+contrastive]`` to TrainConfig overrides."""
    parts = name.split("+")
    if len(parts) not in (2, 3) or parts[0] not in SAMPLING_STRATEGIES or parts[1] not in MARGIN_STRATEGIES:
        raise CliError(
            f"bad strategy {name!r}: expected <{'|'.join(SAMPLING_STRATEGIES)}>+<{'|'.join(MARGIN_STRATEGIES)}>"
            "[+contrastive]"
        )
    if len(parts) == 3 and parts[2] != "contrastive":
        raise CliError(f"bad strategy {name!r}: optional third part must be 'contrastive'")
    sampling, margin = parts[0], parts[1]
    out = {
        "sampler": "anchor-neighbor" if sampling == "anchor-neighbor" else "random",
        "mining": sampling if sampling in ("hard", "semi-hard") else "all",
        "margin": "constant" if margin == "constant" else "dynamic",
        "depth": 1 if margin == "flat" else depth,
    }
    if len(parts) == 3:
        if out["mining"] != "all":
            raise CliError(f"bad strategy {name!r}: mining does not apply to the contrastive loss")
        out["loss"] = "contrastive"
    return out


def cmd_compare(args):
    config, run = resolve_run_config(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise CliError("no strategies given")
    overrides = {s: strategy_overrides(s, config.depth) for s in strategies}
    train_set = load_dataset(_require(run, "train_data"))
    eval_set = load_dataset(_require(run, "eval_data"), split="test")
    out_dir = Path(_require(run, "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_sidecar(out_dir / "config.resolved.json", {**config.to_dict(), **run, "strategies": strategies})

    metric = f"recall@{config.ks[0]}"
    curves = []
    for i, name in enumerate(strategies):
        cfg = TrainConfig.from_dict({**config.to_dict(), **overrides[name]})
        _, train_log = train(train_set, cfg, eval_dataset=eval_set)
        train_log.write_csv(out_dir / f"metrics_{i:02d}_{name.replace('+', '_')}.csv")
        curves.append({r["iteration"]: r[metric] for r in train_log.rows})
        print(f"{name:<40} final {metric} = {train_log.rows[-1][metric]:.4f}")

    iterations = sorted(set().union(*(c.keys() for c in curves)))
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        # duplicated names get a positional suffix so every column is kept
        header = ["iteration"] + [f"{s}#{i}:{metric}" if strategies.count(s) > 1 else f"{s}:{metric}"
                                  for i, s in enumerate(strategies)]
        writer.writerow(header)
        for it in iterations:
            writer.writerow([it] + [repr(c.get(it, float("nan"))) for c in curves])
    return curves


def build_parser():
    parser = argparse.ArgumentParser(prog="htl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic hierarchical dataset")
    defaults = SyntheticSpec()
    g.add_argument("--out", required=True)
    g.add_argument("--num-superclasses", type=int, default=defaults.num_superclasses)
    g.add_argument("--subclasses-per-super", type=int, default=defaults.subclasses_per_super)
    g.add_argument("--samples-per-class", type=int, default=defaults.samples_per_class)
    g.add_argument("--input-dim", type=int, default=defaults.input_dim)
    g.add_argument("--super-separation", type=float, default=defaults.super_separation)
    g.add_argument("--sub-separation", type=float, default=defaults.sub_separation)
    g.add_argument("--noise-scale", type=float, default=defaults.noise_scale)
    g.add_argument("--seed", type=int, default=defaults.seed)
    g.add_argument("--holdout-per-class", type=int, default=0,
                   help="also write <out>.train.csv / <out>.test.csv with this many held-out samples per class")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an embedder")
    _add_train_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="Recall@K of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--query", required=True)
    e.add_argument("--gallery", help="omit (or repeat --query) for query = gallery with self-exclusion")
    e.add_argument("--ks", type=_int_list, default=[1, 2, 4, 8, 16, 32])
    e.add_argument("--out", help="write results as CSV")
    e.set_defaults(func=cmd_evaluate)

    h = sub.add_parser("tree", help="dump the class hierarchy of a dataset under a checkpoint")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--depth", type=int, default=16)
    h.add_argument("--out", help="also write the dump to this file")
    h.add_argument("--stats-out", help="write class counts, s_c and the interclass matrix as CSV")
    h.set_defaults(func=cmd_tree)

    c = sub.add_parser("compare", help="train several sampling/margin strategies on the same data")
    _add_train_config_flags(c)
    c.add_argument("--strategies", required=True,
                   help="comma list of sampling+margin, e.g. random+constant,anchor-neighbor+dynamic")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (CliError, OSError, ValueError, FloatingPointError) as exc:
        message = " ".join(str(exc).split())
        print(f"htl: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
