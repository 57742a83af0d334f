"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every artifact echoes the config that produced it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chem import load_corpus
from .config import apply_overrides, as_strings, read_kv_file
from .corpus import desk_corpus
from .downstream import (
    FinetuneConfig,
    FinetuneModel,
    encoders_from_pretrain,
    evaluate,
    finetune,
    model_from_finetune_checkpoint,
    prepare_finetune_items,
    read_labels,
    save_finetuned,
    scaffold_split,
    stratified_random_split,
    summarize_seeds,
    write_metrics,
    write_predictions,
)
from .errors import DataError, NumericError
from .fragmenter import (
    enumerate_backbones,
    format_stats_text,
    fragment_corpus,
    fragment_stats,
    fragmentation_record,
    read_backbone_table,
    write_backbone_table,
    write_fragmentation_dump,
    write_stats_csv,
)
from .gnn import load_checkpoint
from .pretrain import (
    PretrainConfig,
    embed_items,
    model_from_checkpoint,
    prepare_items,
    train_pretrain,
    write_pretrain_checkpoint,
)
from .vocab import complete_with_atoms, extract_vocabulary, read_vocabulary, write_vocabulary

log = logging.getLogger("fragpretrain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("FRAGPRETRAIN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FRAGPRETRAIN_THREADS must be an integer, got {env!r}")
    return 1


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _corpus(args):
    records, issues = load_corpus(_existing(args.corpus, "corpus"), skip_errors=not args.strict)
    if issues:
        log.warning("skipped %d malformed corpus lines", len(issues))
    if not records:
        raise DataError(f"{args.corpus}: no molecules")
    return records


def _echo(args, extra: dict | None = None) -> dict[str, str]:
    """Provenance: the command's arguments (minus logging noise) and any resolved config."""
    skip = {"func", "verbose", "threads", "config"}
    out = {"command": args.command, "version": __version__}
    out.update({k: str(v) for k, v in sorted(vars(args).items()) if k not in skip and v is not None})
    if extra:
        out.update({f"cfg.{k}": v for k, v in extra.items()})
    return out


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _resolve_config(default, args, fields):
    values = read_kv_file(_existing(args.config, "config")) if args.config else {}
    try:
        cfg = apply_overrides(default, values)
        flags = {f: getattr(args, f) for f in fields if getattr(args, f, None) is not None}
        return dataclasses.replace(cfg, **flags)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\""))


# -- commands ---------------------------------------------------------------------

def cmd_synth_corpus(args):
    smiles = desk_corpus(args.n, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"# synth-corpus n={args.n} seed={args.seed}\n")
        for i, s in enumerate(smiles):
            fh.write(f"{s}\tm{i}\n")
    print(f"wrote {len(smiles)} molecules to {args.out}")


def cmd_mine_vocab(args):
    records = _corpus(args)
    vocab = extract_vocabulary([r.mol for r in records], args.size)
    if args.complete:
        complete_with_atoms(vocab, args.complete.split(","))
    write_vocabulary(vocab, args.out, _echo(args))
    note = " (stopped early)" if vocab.stopped_early else ""
    print(f"wrote {len(vocab)} patterns to {args.out}{note}")


def cmd_fragment(args):
    records = _corpus(args)
    vocab = read_vocabulary(_existing(args.vocab, "vocab"))
    pairs = fragment_corpus([r.mol for r in records], vocab, workers=_threads(args))
    table = read_backbone_table(_existing(args.backbones, "backbones")) if args.backbones else None
    recs = []
    for r, (frag, fg) in zip(records, pairs):
        bb = table.classify(fg) if table else None
        recs.append(fragmentation_record(r.mol_id, frag, fg, bb))
    write_fragmentation_dump(recs, args.out, header=json.dumps(_echo(args), sort_keys=True))
    print(f"wrote {len(recs)} fragmentations to {args.out}")


def cmd_stats(args):
    records = _corpus(args)
    vocab = read_vocabulary(_existing(args.vocab, "vocab"))
    mols = [r.mol for r in records]
    report = fragment_stats(mols, vocab, fragment_corpus(mols, vocab, workers=_threads(args)))
    text = format_stats_text(report)
    print(text, end="")
    if args.out_dir:
        out = _outdir(args.out_dir)
        header = "".join(f"# {k}={v}\n" for k, v in _echo(args).items())
        (out / "stats.txt").write_text(header + text, encoding="utf-8")
        write_stats_csv(report, out)


def cmd_backbones(args):
    records = _corpus(args)
    vocab = read_vocabulary(_existing(args.vocab, "vocab"))
    pairs = fragment_corpus([r.mol for r in records], vocab, workers=_threads(args))
    table = enumerate_backbones((fg for _, fg in pairs), args.max_nodes)
    write_backbone_table(table, args.out, _echo(args))
    print(f"wrote {table.num_classes} backbone classes (incl. OTHER) to {args.out}")


PRETRAIN_FIELDS = [f.name for f in dataclasses.fields(PretrainConfig)]


def cmd_pretrain(args):
    cfg = _resolve_config(PretrainConfig(), args, PRETRAIN_FIELDS)
    records = _corpus(args)
    vocab = read_vocabulary(_existing(args.vocab, "vocab"))
    table = read_backbone_table(_existing(args.backbones, "backbones")) if args.backbones else None
    items, table = prepare_items([r.mol for r in records], vocab, table, cfg.backbone_max_nodes,
                                 workers=_threads(args))
    out = _outdir(args.out_dir)
    echo = _echo(args, as_strings(cfg))
    if not args.backbones:
        write_backbone_table(table, out / "backbones.tsv", echo)
    header = [f"{k}={v}" for k, v in echo.items()]
    result = train_pretrain(items, len(vocab), table, cfg, out / "loss_log.csv", header)
    write_pretrain_checkpoint(out / "checkpoint_final.json", result.model, echo)
    write_pretrain_checkpoint(out / "checkpoint_best.json", result.model, dict(echo, best_epoch=str(result.best_epoch)),
                              state=result.best_state)
    last = result.epoch_losses[-1]
    print(f"pretrained {cfg.epochs} epochs; final L_total {last['L_total']:.4f}; artifacts in {out}")


FINETUNE_FIELDS = [f.name for f in dataclasses.fields(FinetuneConfig)]


def _split(args, dataset):
    if args.split == "scaffold":
        return scaffold_split(dataset.mols, args.ratios)
    return stratified_random_split(dataset.targets, args.ratios, seed=args.split_seed)


def cmd_finetune(args):
    base = FinetuneConfig.long_range() if args.preset == "long-range" else FinetuneConfig()
    cfg = _resolve_config(base, args, FINETUNE_FIELDS)
    dataset = read_labels(_existing(args.labels, "labels"), args.task_type, skip_errors=not args.strict)
    vocab = read_vocabulary(_existing(args.vocab, "vocab")) if args.vocab else None
    items = prepare_finetune_items(dataset.mols, vocab, cfg.use_fragment_encoder, workers=_threads(args))
    split = _split(args, dataset)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out = _outdir(args.out_dir)
    runs = []
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed)
        echo = _echo(args, as_strings(run_cfg))
        if args.checkpoint:
            ck_cfg, arrays = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
            mol, frag = encoders_from_pretrain(ck_cfg, arrays, run_cfg.use_fragment_encoder)
            model = FinetuneModel(dataset.num_tasks, run_cfg, len(vocab) if vocab else None, mol, frag)
        else:
            model = FinetuneModel(dataset.num_tasks, run_cfg, len(vocab) if vocab else None)
        result = finetune(model, items, dataset, split, run_cfg, args.metric)
        test_idx = split.test or split.valid or split.train
        metrics = evaluate(result.model, items, dataset, test_idx, result.metric)
        metrics.update(seed=seed, best_epoch=result.best_epoch, config=echo, split=split.method)
        tag = f"seed{seed}"
        save_finetuned(out / f"model_{tag}.json", result.model, dataset, run_cfg, echo)
        write_metrics(out / f"metrics_{tag}.json", metrics)
        with open(out / f"history_{tag}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(result.history[0]))
            w.writeheader()
            w.writerows(result.history)
        preds = result.model.predict([items[i] for i in test_idx], dataset.task_type)
        write_predictions(out / f"predictions_{tag}.csv", [dataset.ids[i] for i in test_idx],
                          dataset.task_names, preds, [f"{k}={v}" for k, v in echo.items()])
        runs.append(metrics["mean"])
        print(f"seed {seed}: test {result.metric} {metrics['mean']:.4f} (best epoch {result.best_epoch})")
    summary = summarize_seeds(runs)
    summary.update(metric=result.metric, seeds=seeds, config=_echo(args, as_strings(cfg)))
    write_metrics(out / "metrics.json", summary)
    print(f"test {result.metric} {summary['mean']:.4f} ± {summary['std']:.4f} over {len(seeds)} seed(s)")


def cmd_evaluate(args):
    ck_cfg, arrays = load_checkpoint(_existing(args.model, "model"))
    if "task_names" not in ck_cfg:
        raise DataError(f"{args.model} is not a finetuned model checkpoint")
    model = model_from_finetune_checkpoint(ck_cfg, arrays)
    dataset = read_labels(_existing(args.labels, "labels"), ck_cfg["task_type"], skip_errors=not args.strict)
    if dataset.task_names != ck_cfg["task_names"]:
        raise DataError(f"label columns {dataset.task_names} differ from the model's {ck_cfg['task_names']}")
    vocab = read_vocabulary(_existing(args.vocab, "vocab")) if args.vocab else None
    items = prepare_finetune_items(dataset.mols, vocab, model.frag_encoder is not None, workers=_threads(args))
    if args.split == "none":
        idx = list(range(len(dataset)))
    else:
        split = _split(args, dataset)
        idx = getattr(split, args.subset)
    metrics = evaluate(model, items, dataset, idx, args.metric)
    metrics["config"] = _echo(args)
    write_metrics(args.out, metrics)
    if args.predictions:
        preds = model.predict([items[i] for i in idx], dataset.task_type)
        write_predictions(args.predictions, [dataset.ids[i] for i in idx], dataset.task_names, preds)
    print(f"{metrics['metric']} {metrics['mean']:.4f} on {len(idx)} molecules")


def cmd_export_embeddings(args):
    ck_cfg, arrays = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if "vocab_size" not in ck_cfg:
        raise DataError(f"{args.checkpoint} is not a pretraining checkpoint")
    model = model_from_checkpoint(ck_cfg, arrays)
    records = _corpus(args)
    vocab = read_vocabulary(_existing(args.vocab, "vocab"))
    if len(vocab) != ck_cfg["vocab_size"]:
        raise DataError(f"vocabulary has {len(vocab)} patterns, checkpoint expects {ck_cfg['vocab_size']}")
    items, _ = prepare_items([r.mol for r in records], vocab, workers=_threads(args))
    out = _outdir(args.out_dir)
    header = "".join(f"# {k}={v}\n" for k, v in _echo(args).items())
    with open(out / "atom_embeddings.csv", "w", encoding="utf-8") as fa, \
            open(out / "fragment_embeddings.csv", "w", encoding="utf-8") as ff:
        fa.write(header)
        ff.write(header)
        d = ck_cfg["mol_encoder"]["hidden_dim"]
        fa.write(",".join(["molecule_id", "atom", "fragment"] + [f"h{i}" for i in range(d)]) + "\n")
        ff.write(",".join(["molecule_id", "fragment", "rank"] + [f"h{i}" for i in range(ck_cfg["frag_encoder"]["hidden_dim"])]) + "\n")
        for start in range(0, len(items), args.batch_size):
            chunk = items[start:start + args.batch_size]
            recs = records[start:start + args.batch_size]
            h_atoms, mb, h_frags, fb = embed_items(model, chunk)
            atom_local = np.concatenate([np.arange(it.mol.num_atoms) for it in chunk])
            frag_local = np.concatenate([np.arange(len(it.frag)) for it in chunk])
            frag_base = np.cumsum([0] + [len(it.frag) for it in chunk])
            for row, g in enumerate(mb.graph_ids):
                vals = ",".join(f"{v:.6g}" for v in h_atoms[row])
                fa.write(f"{recs[g].mol_id},{atom_local[row]},{mb.frag_ids[row] - frag_base[g]},{vals}\n")
            for row, g in enumerate(fb.graph_ids):
                vals = ",".join(f"{v:.6g}" for v in h_frags[row])
                rank = chunk[g].frag.pieces[frag_local[row]][0]
                ff.write(f"{recs[g].mol_id},{frag_local[row]},{rank},{vals}\n")
    print(f"wrote embeddings for {len(items)} molecules to {out}")


# -- parser -----------------------------------------------------------------------

def _add_common(p, corpus=True):
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes for fragmentation (env FRAGPRETRAIN_THREADS)")
    p.add_argument("--strict", action="store_true", help="abort on the first malformed input line instead of skipping it")
    if corpus:
        p.add_argument("--corpus", required=True, help="SMILES file, one 'SMILES<TAB>id' per line")


def _ratios(text: str):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios need three comma-separated values")
    return parts


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _tasks(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.replace(",", " ").split() if t.strip())


def _negatives(text: str):
    return None if text.lower() == "all" else int(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fragpretrain", description="Fragment-level pretraining of molecular graph encoders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-corpus", help="write the deterministic desk corpus")
    p.add_argument("--n", type=int, default=1000, help="number of molecules")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("mine-vocab", help="mine a fragment vocabulary")
    _add_common(p)
    p.add_argument("--size", type=int, required=True, help="target vocabulary size")
    p.add_argument("--complete", default=None,
                   help="comma-separated elements to append as zero-count single-atom patterns")
    p.add_argument("--out", required=True, help="vocabulary TSV")
    p.set_defaults(func=cmd_mine_vocab)

    p = sub.add_parser("fragment", help="fragment a corpus against a vocabulary")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--backbones", default=None, help="backbone table used to annotate class ids")
    p.add_argument("--out", required=True, help="JSON-lines fragmentation dump")
    p.set_defaults(func=cmd_fragment)

    p = sub.add_parser("stats", help="fragmentation statistics (text and CSV)")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", default=None, help="directory for stats.txt and CSV tables")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("backbones", help="enumerate backbone classes of a corpus")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--max-nodes", type=int, default=12, help="larger fragment graphs fall into OTHER")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backbones)

    p = sub.add_parser("pretrain", help="pretrain the molecule and fragment encoders")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--backbones", default=None, help="backbone table (enumerated from the corpus if omitted)")
    p.add_argument("--config", default=None, help="key=value file; flags override it")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=None, help="weight of the predictive losses (default 0.3)")
    p.add_argument("--epochs", type=int, default=None, help="default 100")
    p.add_argument("--batch-size", type=int, default=None, help="default 256")
    p.add_argument("--learning-rate", type=float, default=None, help="default 1e-3")
    p.add_argument("--weight-decay", type=float, default=None, help="AdamW decay, default 0.01")
    p.add_argument("--lr-decay-factor", type=float, default=None, help="default 0.1")
    p.add_argument("--lr-decay-patience", type=int, default=None, help="epochs, default 5")
    p.add_argument("--negatives-per-anchor", type=_negatives, default=None, help="integer or 'all' (default)")
    p.add_argument("--tasks", type=_tasks, default=None, help="subset of C,P1,P2 (default all)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None, help="default 64")
    p.add_argument("--mol-layers", type=int, default=None, help="default 5")
    p.add_argument("--frag-layers", type=int, default=None, help="default 2")
    p.add_argument("--backbone-max-nodes", type=int, default=None, help="default 12")
    p.add_argument("--infonce-log", type=_bool, default=None,
                   help="false drops the log from the contrastive loss (default true)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune on a labeled dataset")
    _add_common(p, corpus=False)
    p.add_argument("--labels", required=True, help="CSV with a smiles column and one column per task")
    p.add_argument("--task-type", choices=["binary", "multilabel", "regression"], default=None)
    p.add_argument("--vocab", default=None, help="required when the fragment encoder is used")
    p.add_argument("--checkpoint", default=None, help="pretraining checkpoint (random init if omitted)")
    p.add_argument("--config", default=None, help="key=value file; flags override it")
    p.add_argument("--preset", choices=["chemical", "long-range"], default="chemical")
    p.add_argument("--split", choices=["scaffold", "stratified"], default="scaffold")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))
    p.add_argument("--metric", choices=["roc_auc", "ap", "mae"], default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seeds; reports mean and std")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None, help="0.0 or 0.5")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--lr-schedule", choices=["step", "plateau"], default=None)
    p.add_argument("--lr-step-size", type=int, default=None)
    p.add_argument("--lr-step-gamma", type=float, default=None)
    p.add_argument("--lr-decay-factor", type=float, default=None)
    p.add_argument("--lr-decay-patience", type=int, default=None)
    p.add_argument("--use-fragment-encoder", type=_bool, default=None, help="default true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None, help="only without --checkpoint")
    p.add_argument("--mol-layers", type=int, default=None, help="only without --checkpoint")
    p.add_argument("--frag-layers", type=int, default=None, help="only without --checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a finetuned model")
    _add_common(p, corpus=False)
    p.add_argument("--model", required=True, help="model checkpoint written by finetune")
    p.add_argument("--labels", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--metric", choices=["roc_auc", "ap", "mae"], default=None)
    p.add_argument("--split", choices=["none", "scaffold", "stratified"], default="none")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))
    p.add_argument("--subset", choices=["train", "valid", "test"], default="test")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--predictions", default=None, help="optional predictions CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="per-atom and per-fragment embeddings as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"fragpretrain: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"fragpretrain: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, OSError) as exc:
        print(f"fragpretrain: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
