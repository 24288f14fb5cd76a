"""Operator surface: train, parse, generate, surprisal, eval-f1, gradcheck,
bench.

Every run writes a self-contained directory (config snapshot, checkpoints,
logs, outputs) so results are reproducible from the directory alone.  Exit
codes: 0 success, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import tape as T
from .composition import (CompositionConfig, build_inside, build_merge_schedule,
                          build_outside, full_merge_schedule, induce_tree)
from .corpus import Vocab, build_vocab, read_bracketed_trees, tokenize
from .decoding import generate, parse, surprisal
from .evaluation import F1Config, corpus_f1
from .generator import GeneratorConfig
from .model import Model, ModelConfig
from .optim import ParamStore
from .tape import Tensor
from .training import TrainConfig, train_loop
from .trees import to_sexpr, tree_spans

__all__ = ["main"]


DEFAULTS = {
    "model": {
        "composition": dataclasses.asdict(CompositionConfig()),
        "generator": dataclasses.asdict(GeneratorConfig()),
    },
    "training": dataclasses.asdict(TrainConfig()),
    "decoding": {"beam": 20, "top_m": 50, "topk_sample": 2, "max_words": 32,
                 "sync": True, "surprisal_beam": 300},
    "data": {"tokenizer": "whitespace", "vocab_size": 30522, "min_freq": 1,
             "context_limit": 512},
}


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path: str | None, sets: list[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        with open(path, encoding="utf-8") as fh:
            _deep_update(cfg, json.load(fh))
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = json.loads(val) if _is_json(val) else val
    return cfg


def _is_json(val: str) -> bool:
    try:
        json.loads(val)
        return True
    except json.JSONDecodeError:
        return False


class UsageError(ValueError):
    pass


def _atomic_write(path: Path, lines) -> None:
    """Write-all-or-nothing: partial outputs never survive a failure."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_model(cfg: dict, vocab: Vocab, seed: int) -> Model:
    mc = ModelConfig(vocab_size=vocab.size,
                     composition=CompositionConfig(**cfg["model"]["composition"]),
                     generator=GeneratorConfig(**cfg["model"]["generator"]))
    return Model(mc, seed=seed)


def load_run(run_dir: str, checkpoint: str | None = None):
    """Rebuild (model, vocab, cfg) from a run directory."""
    run = Path(run_dir)
    with open(run / "config.json", encoding="utf-8") as fh:
        cfg = json.load(fh)
    vocab = Vocab.load(run / "vocab.tsv")
    model = build_model(cfg, vocab, seed=cfg["training"].get("seed", 0))
    ck = Path(checkpoint) if checkpoint else run / "checkpoints" / "latest.ckpt"
    scalars = model.load(ck)
    return model, vocab, cfg, scalars


def _tokenize_lines(lines, vocab, cfg):
    mode = cfg["data"]["tokenizer"]
    return [tokenize(line, vocab, mode=mode) for line in lines if line.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    run = Path(args.run_dir)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run / "logs").mkdir(exist_ok=True)
    (run / "outputs").mkdir(exist_ok=True)

    if not os.path.exists(args.corpus):
        raise UsageError(f"corpus not found: {args.corpus}")
    with open(args.corpus, encoding="utf-8") as fh:
        lines = [l.rstrip("\n") for l in fh if l.strip()]

    if args.vocab and os.path.exists(args.vocab):
        vocab = Vocab.load(args.vocab)
    else:
        mode = "wordpiece" if cfg["data"]["tokenizer"] == "wordpiece" else "whitespace"
        vocab = build_vocab(lines, cfg["data"]["vocab_size"],
                            cfg["data"]["min_freq"], mode=mode)
    vocab.save(run / "vocab.tsv")

    dataset = _tokenize_lines(lines, vocab, cfg)
    tc = TrainConfig(**cfg["training"])
    model = build_model(cfg, vocab, seed=tc.seed)

    start_step = 0
    resume = run / "checkpoints" / "latest.ckpt"
    if args.resume and resume.exists():
        scalars = model.load(resume)
        start_step = scalars.get("step", 0)
        print(f"resumed from step {start_step}", file=sys.stderr)

    with open(run / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2)

    log_path = run / "logs" / "train.jsonl"
    log_fh = open(log_path, "a", encoding="utf-8")
    held_out = dataset[: min(16, len(dataset))]

    def log_fn(rec):
        log_fh.write(json.dumps(rec) + "\n")
        log_fh.flush()
        print(json.dumps(rec), file=sys.stderr)

    def checkpoint_fn(step):
        path = run / "checkpoints" / f"step_{step:07d}.ckpt"
        model.save(path, {"step": step})
        model.save(run / "checkpoints" / "latest.ckpt", {"step": step})

    def eval_fn(step):
        lines_out = []
        with T.no_grad():
            for sent in held_out:
                sch, chart = _encode_sentence(model, sent)
                tree = induce_tree(chart, 0)
                toks = sent.words or [vocab.token(i) for i in sent.ids]
                lines_out.append(to_sexpr(tree, toks))
        _atomic_write(run / "outputs" / f"trees_step{step:07d}.txt", lines_out)

    try:
        train_loop(model, dataset, tc, log_fn=log_fn, checkpoint_fn=checkpoint_fn,
                   eval_fn=eval_fn, start_step=start_step)
    finally:
        log_fh.close()
    checkpoint_fn(tc.total_steps)
    print(str(run), file=sys.stdout)
    return 0


def _encode_sentence(model: Model, sent, pruned: bool = True):
    ids = np.asarray(sent.ids, dtype=np.intp)
    leaves = model.leaf_vectors(ids)
    if pruned and len(sent.ids) > 1:
        scores = model.fns.parser_scores(leaves, [len(sent.ids)])
        sch = build_merge_schedule(scores[0].data, sent.atomic_spans, len(sent.ids))
    else:
        sch = full_merge_schedule(len(sent.ids), sent.atomic_spans)
    chart = build_inside(model.fns, leaves, [len(sent.ids)], [sch])
    return sch, chart


def cmd_parse(args) -> int:
    model, vocab, cfg, _ = load_run(args.run_dir, args.checkpoint)
    with open(args.input, encoding="utf-8") as fh:
        lines = [l.rstrip("\n") for l in fh if l.strip()]
    sents = _tokenize_lines(lines, vocab, cfg)
    k = args.beam or cfg["decoding"]["beam"]
    out_trees, out_spans = [], []
    for sent in sents:
        if args.inside:
            _, chart = _encode_sentence(model, sent)
            tree = induce_tree(chart, 0)
            logp = None
        else:
            res = parse(model, sent.ids, k=k, sync=not args.no_sync)
            tree, logp = res.tree, res.logp
        toks = sent.words or [vocab.token(i) for i in sent.ids]
        out_trees.append(to_sexpr(tree, toks))
        out_spans.append(json.dumps({
            "tokens": toks, "spans": sorted(tree_spans(tree)),
            "logp": logp, "atomic_spans": sent.atomic_spans}))
    _atomic_write(Path(args.output), out_trees)
    _atomic_write(Path(args.output).with_suffix(".spans.jsonl"), out_spans)
    return 0


def cmd_generate(args) -> int:
    model, vocab, cfg, _ = load_run(args.run_dir, args.checkpoint)
    prompts = [""]
    if args.prompts:
        with open(args.prompts, encoding="utf-8") as fh:
            prompts = [l.rstrip("\n") for l in fh if l.strip()] or [""]
    dcfg = cfg["decoding"]
    out = []
    for i, line in enumerate(prompts):
        prompt_ids = tokenize(line, vocab).ids if line.strip() else []
        res = generate(model, prompt_ids, k=args.beam or dcfg["beam"],
                       mode=args.mode, max_words=args.max_words or dcfg["max_words"],
                       seed=args.seed + i, top_m=dcfg["top_m"],
                       topk_sample=dcfg["topk_sample"], sync=not args.no_sync)
        toks = [vocab.token(t) for t in res.tokens]
        tree_txt = to_sexpr(res.tree, toks) if res.tree is not None else ""
        out.append(json.dumps({"prompt": line, "text": " ".join(toks),
                               "tree": tree_txt, "logp": res.logp,
                               "truncated": res.truncated}))
    _atomic_write(Path(args.output), out)
    return 0


def cmd_surprisal(args) -> int:
    model, vocab, cfg, _ = load_run(args.run_dir, args.checkpoint)
    b = args.beam or cfg["decoding"]["surprisal_beam"]
    out = []
    with open(args.input, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            sent = tokenize(rec["sentence"], vocab, mode=cfg["data"]["tokenizer"])
            regions = [tuple(r) for r in rec["regions"]]
            rows = surprisal(model, sent.ids, regions, b=b)
            out.append(json.dumps({"sentence": rec["sentence"], "regions": rows}))
    _atomic_write(Path(args.output), out)
    return 0


def cmd_eval_f1(args) -> int:
    golds = read_bracketed_trees(args.gold)
    preds = read_bracketed_trees(args.pred)
    if len(golds) != len(preds):
        raise UsageError(f"pred has {len(preds)} trees, gold has {len(golds)}")
    pred_spans = [p.spans for p in preds]
    cfg = F1Config(exclude_trivial=not args.include_trivial)
    report = corpus_f1(pred_spans, golds, cfg)
    payload = json.dumps(report.as_dict(), indent=2)
    if args.output:
        _atomic_write(Path(args.output), [payload])
    print(payload)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import full_objective_gradcheck
    worst = full_objective_gradcheck(seed=args.seed, n_tokens=args.tokens,
                                     coords=args.coords)
    print(json.dumps({"max_rel_err": worst, "threshold": 1e-4}))
    return 0 if worst < 1e-4 else 1


def cmd_bench(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    T.set_default_dtype(np.float32)
    store = ParamStore(seed=0)
    fns_cfg = CompositionConfig(width=args.width, compose_layers=1, heads=2,
                                ffn_mult=2, score_dim=args.width // 2,
                                parser_layers=1, gen_width=args.width,
                                max_len=max(lengths) + 1)
    from .composition import CompositionModel
    fns = CompositionModel(store, fns_cfg)
    rng = np.random.default_rng(0)
    rows = []
    for n in lengths:
        leaves = Tensor(rng.normal(size=(n, args.width)).astype(np.float32))
        t_full = _time_inside(fns, leaves, n, full=True, repeats=args.repeats)
        t_pruned = _time_inside(fns, leaves, n, full=False, repeats=args.repeats)
        rows.append({"n": n, "full_sec": t_full, "pruned_sec": t_pruned,
                     "speedup": t_full / t_pruned})
        print(json.dumps(rows[-1]), file=sys.stderr)
    fit_full = _fit_exponent([r["n"] for r in rows], [r["full_sec"] for r in rows])
    fit_pruned = _fit_exponent([r["n"] for r in rows], [r["pruned_sec"] for r in rows])
    payload = {"rows": rows, "exponent_full": fit_full,
               "exponent_pruned": fit_pruned}
    print(json.dumps(payload, indent=2))
    if args.output:
        _atomic_write(Path(args.output), [json.dumps(payload, indent=2)])
    return 0


def _time_inside(fns, leaves, n, full: bool, repeats: int = 1) -> float:
    rng = np.random.default_rng(1)
    best = math.inf
    for _ in range(repeats):
        if full:
            sch = full_merge_schedule(n)
        else:
            sch = build_merge_schedule(rng.normal(size=n - 1))
        t0 = time.perf_counter()
        with T.no_grad():
            build_inside(fns, leaves, [n], [sch])
        best = min(best, time.perf_counter() - t0)
    return best


def _fit_exponent(ns, ts) -> float:
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(ts, dtype=np.float64))
    slope = np.polyfit(x, y, 1)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synlm",
                                description="Unsupervised syntactic language model")
    sub = p.add_subparsers(dest="cmd", required=True)

    tr = sub.add_parser("train", help="train on a one-sentence-per-line corpus")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--run-dir", required=True)
    tr.add_argument("--config", help="JSON config; defaults otherwise")
    tr.add_argument("--vocab", help="existing vocab.tsv to reuse")
    tr.add_argument("--resume", action="store_true")
    tr.add_argument("--set", action="append", default=[],
                    help="override config entries: section.key=value")
    tr.set_defaults(fn=cmd_train)

    pa = sub.add_parser("parse", help="parse sentences with the trained model")
    pa.add_argument("--run-dir", required=True)
    pa.add_argument("--checkpoint")
    pa.add_argument("--input", required=True)
    pa.add_argument("--output", required=True)
    pa.add_argument("--beam", type=int)
    pa.add_argument("--inside", action="store_true",
                    help="use the chart argmax instead of left-to-right search")
    pa.add_argument("--no-sync", action="store_true",
                    help="action-level beam instead of word-level sync")
    pa.set_defaults(fn=cmd_parse)

    ge = sub.add_parser("generate", help="sample or search for continuations")
    ge.add_argument("--run-dir", required=True)
    ge.add_argument("--checkpoint")
    ge.add_argument("--prompts")
    ge.add_argument("--output", required=True)
    ge.add_argument("--mode", choices=["beam", "topk_sample"], default="beam")
    ge.add_argument("--beam", type=int)
    ge.add_argument("--max-words", type=int)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--no-sync", action="store_true")
    ge.set_defaults(fn=cmd_generate)

    su = sub.add_parser("surprisal", help="per-region surprisal in bits")
    su.add_argument("--run-dir", required=True)
    su.add_argument("--checkpoint")
    su.add_argument("--input", required=True,
                    help="JSONL: {sentence, regions: [[s,e], ...]}")
    su.add_argument("--output", required=True)
    su.add_argument("--beam", type=int)
    su.set_defaults(fn=cmd_surprisal)

    ef = sub.add_parser("eval-f1", help="unlabeled bracketing F1")
    ef.add_argument("--pred", required=True)
    ef.add_argument("--gold", required=True)
    ef.add_argument("--output")
    ef.add_argument("--include-trivial", action="store_true")
    ef.set_defaults(fn=cmd_eval_f1)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tokens", type=int, default=4)
    gc.add_argument("--coords", type=int, default=250)
    gc.set_defaults(fn=cmd_gradcheck)

    be = sub.add_parser("bench", help="full vs pruned chart wall-time")
    be.add_argument("--lengths", default="128,256,512,1024")
    be.add_argument("--width", type=int, default=16)
    be.add_argument("--repeats", type=int, default=1)
    be.add_argument("--output")
    be.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0,) else 0
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
