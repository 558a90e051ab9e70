"""Command-line entry point (``torope``).

Exit codes: 0 success, 2 configuration error, 3 data/input error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .data import (
    SynthConfig,
    five_core_filter,
    ingest_ratings,
    reindex_items,
    synth_generate,
    write_canonical,
    write_id_map,
)
from .errors import ConfigError, TORoPEError
from .harness import (
    ANALYSIS_COLUMNS,
    ARMS,
    SPLIT_ARMS,
    Cell,
    ExperimentConfig,
    analyze_attention,
    export_results,
    load_config,
    model_config_from_payload,
    prepare_data,
    result_columns,
    run_cell,
    run_experiment,
    sweep_ratios,
    write_manifest,
)
from .metrics import ranking_report
from .model import evaluate_next, load_checkpoint, save_checkpoint

log = logging.getLogger("torope")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    model = cfg.model
    overrides = {
        "learning_rate": getattr(args, "lr", None),
        "dropout": getattr(args, "dropout", None),
        "max_seq_len": getattr(args, "max_len", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "dtype": getattr(args, "dtype", None),
    }
    model = replace(model, **{k: v for k, v in overrides.items() if v is not None})
    cfg = replace(cfg, model=model)
    if getattr(args, "out", None) and hasattr(args, "out_is_dir"):
        cfg = replace(cfg, output_dir=args.out)
    cfg.validate()
    return cfg


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config) if args.config else None
    params = dict(cfg.dataset.synthetic) if cfg else {}
    for key in ("n_users", "vocab_size", "n_item_classes", "horizon_days", "seed"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    data = synth_generate(SynthConfig(**params))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_canonical(data.sequences, out / "events.tsv")
    with open(out / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user\tposition\tclass\tsession\tgoverned\n")
        for s, cl, se, gv in zip(data.sequences, data.classes, data.sessions, data.governed):
            fh.writelines(
                f"{s.user}\t{i}\t{c}\t{x}\t{int(g)}\n" for i, (c, x, g) in enumerate(zip(cl.tolist(), se.tolist(), gv.tolist()))
            )
    (out / "synth_config.json").write_text(json.dumps(asdict(data.config), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(data.sequences)} users to {out}")
    return 0


def cmd_ingest(args) -> int:
    corpus = ingest_ratings(args.ratings)
    seqs, raw = corpus.sequences, corpus.item_raw_ids
    n_in = len(seqs)
    if not args.no_five_core:
        seqs = five_core_filter(seqs)
        seqs, used = reindex_items(seqs)
        raw = raw[used]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_canonical(seqs, out / "events.tsv")
    write_id_map(raw, out / "item_map.tsv")
    print(f"ingested {n_in} users; kept {len(seqs)} users and {len(raw)} items")
    return 0


def _cell_from_args(cfg, args) -> Cell:
    if args.arm not in ARMS:
        raise ConfigError(f"unknown arm {args.arm!r}; valid arms: {', '.join(ARMS)}")
    ratio = args.ratio
    if args.arm in SPLIT_ARMS and ratio is None:
        ratio = cfg.rope.split_ratio
    if args.arm not in SPLIT_ARMS and ratio is not None:
        raise ConfigError("--ratio only applies to split_dim and split_head")
    return Cell(args.arm, ratio, args.seed if args.seed is not None else cfg.seeds[0])


def _print_row(row, ks):
    metrics = ", ".join(f"{m}={row[m]:.4f}" for m in [f"hr@{k}" for k in ks] + [f"ndcg@{k}" for k in ks])
    print(f"{row['arm']} ratio={row['ratio']} seed={row['seed']}: val_loss={row['val_loss']:.4f} {metrics}")


def cmd_train(args) -> int:
    cfg = _config(args)
    data = prepare_data(cfg)
    cell = _cell_from_args(cfg, args)
    started = time.time()
    out = run_cell(cfg, data, cell, log=lambda m: log.info("epoch %d train_loss=%.4f val_loss=%s", m.epoch, m.train_loss, m.val_loss))
    path = Path(args.checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out.state, path, out.payload)
    _print_row(out.row, cfg.ks)
    if args.results:
        files = {Path(args.results).name: export_results([out.row], args.results, result_columns(cfg.ks))}
        write_manifest(Path(args.results).with_suffix(".manifest.json"), cfg, files, started)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    state, meta = load_checkpoint(args.checkpoint, model_config_from_payload)
    data = prepare_data(cfg)
    p = meta["config"]
    if p["vocab_size"] != data.vocab_size or p["u_ref"] != data.norm.u_ref:
        raise ConfigError("checkpoint was trained on a different dataset than the config describes")
    ctx, tgt = data.split.test_pairs()
    exclude = args.exclude_history or cfg.exclude_history
    loss, ranks = evaluate_next(state, ctx, tgt, max(cfg.ks), exclude_history=exclude)
    report = ranking_report(ranks, tgt, cfg.ks)
    row = {"arm": p["arm"], "ratio": p["ratio"], "seed": p["seed"], "test_loss": loss}
    row.update({f"hr@{k}": report.hr[k] for k in cfg.ks})
    row.update({f"ndcg@{k}": report.ndcg[k] for k in cfg.ks})
    if args.results:
        export_results([row], args.results, list(row))
    print(", ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg, log=log.info)
    for r in res.rows:
        _print_row(r, cfg.ks)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    res = sweep_ratios(cfg, log=log.info)
    for r in res.rows:
        _print_row(r, cfg.ks)
    for s in res.extra["sentinels"]:
        print(f"sentinel {s['arm']} ratio={s['ratio']} seed={s['seed']} vs {s['reference']}: "
              f"|dval|={s['abs_diff_val_loss']:.3e} match={s['match']}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    started = time.time()
    rows = analyze_attention(cfg, args.checkpoints)
    files = {Path(args.results).name: export_results(rows, args.results, ANALYSIS_COLUMNS)}
    write_manifest(Path(args.results).with_suffix(".manifest.json"), cfg, files, started,
                   extra={"checkpoints": [str(c) for c in args.checkpoints]})
    for r in rows:
        print(f"{r['arm']} ratio={r['ratio']} seed={r['seed']} layer={r['layer']}: "
              f"distance={r['distance']:.4f} entropy={r['entropy']:.4f}")
    return 0


def cmd_export(args) -> int:
    rows = json.loads(Path(args.cells).read_text(encoding="utf-8"))
    if not isinstance(rows, list):
        raise ConfigError(f"{args.cells} does not hold a list of rows")
    columns = args.columns.split(",") if args.columns else (list(rows[0]) if rows else [])
    if not columns:
        raise ConfigError("empty row set needs --columns")
    digest = export_results(rows, args.out, columns, sep="\t" if args.tsv else ",")
    print(f"wrote {len(rows)} rows to {args.out} (sha256 {digest})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="torope", description="Time-and-order rotary position embeddings for event sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def training_flags(sp):
        sp.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--lr", type=float, help="learning rate (config default 0.001)")
        sp.add_argument("--dropout", type=float, help="dropout rate (config default 0.2)")
        sp.add_argument("--max-len", type=int, help="maximum sequence length (config default 50)")
        sp.add_argument("--epochs", type=int, help="training epochs (config default 5)")
        sp.add_argument("--batch-size", type=int, help="mini-batch size (config default 128)")
        sp.add_argument("--dtype", choices=["float64", "float32"], help="floating-point precision")

    g = sub.add_parser("generate-data", help="write a synthetic dataset (events.tsv, labels.tsv)")
    g.add_argument("--config", help="take generator settings from this config's dataset.synthetic")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-users", dest="n_users", type=int)
    g.add_argument("--vocab-size", dest="vocab_size", type=int)
    g.add_argument("--n-item-classes", dest="n_item_classes", type=int)
    g.add_argument("--horizon-days", dest="horizon_days", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate_data)

    i = sub.add_parser("ingest", help="MovieLens ratings.csv to canonical events.tsv + item_map.tsv")
    i.add_argument("ratings", help="comma-separated file with header userId,movieId,rating,timestamp")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--no-five-core", action="store_true", help="skip 5-core filtering")
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", help="train one (arm, ratio, seed) cell and save a checkpoint")
    training_flags(t)
    t.add_argument("--arm", required=True, help=f"one of: {', '.join(ARMS)}")
    t.add_argument("--ratio", type=float, help="time share for split arms (config rope.split_ratio)")
    t.add_argument("--seed", type=int, help="replicate seed (first config seed)")
    t.add_argument("--checkpoint", required=True, help="output .npz path")
    t.add_argument("--results", help="also write the metrics row to this csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="HR/NDCG of a checkpoint on the config's test split")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--exclude-history", action="store_true", help="drop already-seen items from the ranking")
    e.add_argument("--results", help="write the metrics row to this csv")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("run", help="train and evaluate every (arm, seed) cell of the config")
    training_flags(r)
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.set_defaults(func=cmd_run, out_is_dir=True)

    s = sub.add_parser("sweep", help="split-ratio sweep with ratio 0/1 sentinels")
    training_flags(s)
    s.add_argument("--out", help="output directory (overrides output_dir)")
    s.set_defaults(func=cmd_sweep, out_is_dir=True)

    a = sub.add_parser("analyze-attention", help="per-layer attention distance and entropy of checkpoints")
    a.add_argument("--config")
    a.add_argument("checkpoints", nargs="+", help="checkpoint files")
    a.add_argument("--results", required=True, help="output csv")
    a.set_defaults(func=cmd_analyze)

    x = sub.add_parser("export", help="re-export cells.json rows as a fixed-format table")
    x.add_argument("cells", help="cells.json written by run or sweep")
    x.add_argument("--out", required=True)
    x.add_argument("--columns", help="comma-separated column order (default: keys of the first row)")
    x.add_argument("--tsv", action="store_true", help="tab-separated instead of comma-separated")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TORoPEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
