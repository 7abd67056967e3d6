"""Command-line entry points.

Subcommands: gen-synthetic, train-rsrl, evaluate, highlight. Every
command is reproducible: identical config and seed give byte-identical
outputs. Exit codes: 0 success, 1 usage/config error, 2 runtime/data
error.
"""

import argparse
import os
import sys
from dataclasses import replace

from . import dataset as ds
from . import engine, highlight, jsonio, net
from .errors import BadConfig, BadFraction, IoError, MissingFile, RsrlError

USAGE_ERRORS = (BadConfig, BadFraction)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"error: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="rsrl", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset as manifest + PGM files")
    gen.add_argument("--config", help="synthetic config JSON (defaults used when omitted)")
    gen.add_argument("--seed", type=int, help="override the config seed")
    gen.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train-rsrl", help="run the self-revised retraining loop")
    tr.add_argument("--config", required=True, help="run config JSON")
    tr.add_argument("--seed", type=int, help="override the training seed")
    tr.add_argument("--out", help="override the output directory")
    tr.add_argument(
        "--select-on-test",
        action="store_true",
        help="score rounds on the test split instead of a held-out validation split",
    )

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint against a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", default="eval.json", help="where to write the summary JSON")

    hi = sub.add_parser("highlight", help="feature-difference highlight map from two checkpoints")
    hi.add_argument("--image", required=True, help="input image (.pgm or .raw)")
    hi.add_argument("--out", required=True, help="output PGM path (JSON sidecar written next to it)")
    hi.add_argument("--checkpoints", nargs=2, metavar=("LATEST", "EARLIER"), help="two checkpoint paths")
    hi.add_argument("--run-dir", help="pick checkpoints from a train-rsrl output directory")
    hi.add_argument("--round", type=int, help="latest round to use with --run-dir (default: best round)")
    hi.add_argument("--lag", type=int, default=1, help="rounds between the two checkpoints with --run-dir")
    return parser


# ---------------------------------------------------------------------------
# Run configuration


def _load_json_config(path):
    if not os.path.exists(path):
        raise BadConfig(f"config file {path} not found")
    try:
        cfg = jsonio.read_json(path)
    except ValueError as exc:
        raise BadConfig(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise BadConfig(f"{path}: config must be a JSON object")
    return cfg


def _parse_schedule(raw):
    if raw is None:
        return engine.DEFAULT_THRESHOLD_SCHEDULE
    try:
        return tuple((int(step["from_round"]), tuple(step["thresholds"])) for step in raw)
    except (KeyError, TypeError) as exc:
        raise BadConfig(f"malformed threshold schedule: {exc}") from exc


def _parse_rsrl_config(raw) -> engine.RsrlConfig:
    raw = raw or {}
    train_cfg = net.TrainConfig(
        epochs=int(raw.get("epochs", 5)),
        batch_size=int(raw.get("batch_size", 32)),
        learning_rate=float(raw.get("learning_rate", 0.05)),
        seed=int(raw.get("seed", 0)),
    )
    return engine.RsrlConfig(
        max_rounds=int(raw.get("max_rounds", 30)),
        train=train_cfg,
        schedule=_parse_schedule(raw.get("threshold_schedule")),
        membership=str(raw.get("membership", "sigmoid")),
        seed=int(raw.get("seed", 0)),
    )


def _load_run_dataset(raw):
    source = raw.get("dataset")
    if not isinstance(source, dict):
        raise BadConfig("run config needs a 'dataset' object")
    has_manifest = "manifest" in source
    has_synth = "synthetic" in source
    if has_manifest == has_synth:
        raise BadConfig("dataset source must be exactly one of 'manifest' or 'synthetic'")
    if has_synth:
        cfg = ds.SynthConfig.from_json_dict(source["synthetic"])
        return ds.generate_synthetic(cfg), {"synthetic": cfg.to_json_dict()}
    if "classes" not in source:
        raise BadConfig("manifest dataset source needs a 'classes' field")
    manifest = os.path.abspath(source["manifest"])
    n_classes = int(source["classes"])
    return ds.load_manifest(manifest, n_classes), {"manifest": manifest, "classes": n_classes}


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_synthetic(args) -> int:
    raw = _load_json_config(args.config) if args.config else {}
    cfg = ds.SynthConfig.from_json_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    data = ds.generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    manifest = ds.save_dataset(data, args.out)
    stats = data.stats()
    majors = engine.select_majority_classes(stats)
    majority_share = sum(stats.counts[s - 1] for s in majors) / stats.total
    jsonio.write_canonical_json(
        {
            **stats.to_json_dict(),
            "majority_classes": list(majors),
            "majority_share": majority_share,
            "config": cfg.to_json_dict(),
        },
        os.path.join(args.out, "stats.json"),
    )
    print(f"wrote {len(data)} images and {manifest}")
    return 0


def _resolve_run_config(args):
    raw = _load_json_config(args.config)
    data, source_snapshot = _load_run_dataset(raw)

    split_raw = raw.get("split") or {}
    fraction = float(split_raw.get("fraction", 0.8))
    split_seed = int(split_raw.get("seed", 0))

    rsrl_cfg = _parse_rsrl_config(raw.get("rsrl"))
    if args.seed is not None:
        rsrl_cfg = replace(rsrl_cfg, seed=args.seed)

    selection = str(raw.get("selection", "validation"))
    if args.select_on_test:
        selection = "test"
    if selection not in ("validation", "test"):
        raise BadConfig("selection must be 'validation' or 'test'")
    validation_fraction = float(raw.get("validation_fraction", 0.2))

    out_dir = args.out or raw.get("out_dir")
    if not out_dir:
        raise BadConfig("output directory required (config 'out_dir' or --out)")

    snapshot = {
        "dataset": source_snapshot,
        "split": {"fraction": fraction, "seed": split_seed},
        "selection": selection,
        "validation_fraction": validation_fraction,
        "rsrl": rsrl_cfg.to_json_dict(),
    }
    return data, fraction, split_seed, selection, validation_fraction, rsrl_cfg, out_dir, snapshot


def cmd_train_rsrl(args) -> int:
    (
        data,
        fraction,
        split_seed,
        selection,
        validation_fraction,
        rsrl_cfg,
        out_dir,
        snapshot,
    ) = _resolve_run_config(args)

    train_set, test_set = ds.split(data, fraction, split_seed)
    if selection == "validation":
        if not 0.0 < validation_fraction < 1.0:
            raise BadFraction("validation fraction must lie in (0, 1)")
        train_set, eval_set = ds.split(train_set, 1.0 - validation_fraction, split_seed + 1)
    else:
        eval_set = test_set

    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    jsonio.write_canonical_json(snapshot, os.path.join(out_dir, "config.json"))

    history_path = os.path.join(out_dir, "history.jsonl")
    history_fh = open(history_path, "w", encoding="utf-8", newline="\n")

    def on_round(rec):
        ref = f"checkpoints/round_{rec.round_index:03d}.ckpt"
        net.save_checkpoint(rec.checkpoint, os.path.join(out_dir, ref))
        history_fh.write(jsonio.canonical_json(rec.to_json_dict(checkpoint_ref=ref)))
        history_fh.write("\n")
        history_fh.flush()

    try:
        result = engine.rsrl_run(train_set, eval_set, rsrl_cfg, on_round=on_round)
    finally:
        history_fh.close()

    best = result.history[result.best_round]
    jsonio.write_canonical_json(
        {
            "best_round": result.best_round,
            "total_f_measure": best.summary.total_f_measure,
            "checkpoint": f"checkpoints/round_{result.best_round:03d}.ckpt",
        },
        os.path.join(out_dir, "best.json"),
    )
    print(f"best round: {result.best_round}")
    print(jsonio.canonical_json(best.summary.to_json_dict()))
    return 0


def cmd_evaluate(args) -> int:
    ckpt = net.load_checkpoint(args.checkpoint)
    data = ds.load_manifest(args.manifest, ckpt.spec.n_classes)
    summary = engine.evaluate_checkpoint(ckpt, data)
    text = jsonio.canonical_json(summary.to_json_dict())
    print(text)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
        fh.write("\n")
    return 0


def _highlight_checkpoints(args):
    if bool(args.checkpoints) == bool(args.run_dir):
        raise BadConfig("pass either --checkpoints or --run-dir")
    if args.checkpoints:
        return args.checkpoints[0], args.checkpoints[1]
    if args.round is None:
        best_path = os.path.join(args.run_dir, "best.json")
        if not os.path.exists(best_path):
            raise MissingFile(f"{best_path} not found; pass --round explicitly")
        round_i = int(jsonio.read_json(best_path)["best_round"])
    else:
        round_i = args.round
    if args.lag < 1:
        raise BadConfig("--lag must be >= 1")
    round_prev = round_i - args.lag
    if round_prev < 0:
        raise BadConfig(f"round {round_i} with lag {args.lag} has no earlier checkpoint")
    return (
        os.path.join(args.run_dir, "checkpoints", f"round_{round_i:03d}.ckpt"),
        os.path.join(args.run_dir, "checkpoints", f"round_{round_prev:03d}.ckpt"),
    )


def cmd_highlight(args) -> int:
    path_i, path_prev = _highlight_checkpoints(args)
    net_i = net.load_checkpoint(path_i)
    net_prev = net.load_checkpoint(path_prev)
    if not os.path.exists(args.image):
        raise MissingFile(f"image {args.image} not found")
    pixels = ds.read_image(args.image)
    if net.params_equal(net_i.params, net_prev.params):
        print("warning: checkpoints are identical; difference map will be zero", file=sys.stderr)
    result = highlight.extract_highlight(net_i, net_prev, pixels)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    highlight.export_highlight(result, args.out)
    print(f"channel {result.channel} (lag {result.lag}) -> {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return 0 if exc.code in (0, None) else 1

    commands = {
        "gen-synthetic": cmd_gen_synthetic,
        "train-rsrl": cmd_train_rsrl,
        "evaluate": cmd_evaluate,
        "highlight": cmd_highlight,
    }
    try:
        return commands[args.command](args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RsrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
