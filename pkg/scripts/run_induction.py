#!/usr/bin/env python3
"""End-to-end grammar-induction experiment on the synthetic PCFG corpus.

Trains the toy model, then scores (a) chart-argmax trees and (b)
left-to-right constrained beam parses against the generating derivations,
alongside right- and left-branching baselines.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from synlm import tape as T
from synlm.composition import build_inside, build_merge_schedule, induce_tree
from synlm.corpus import build_vocab, tokenize
from synlm.decoding import parse
from synlm.evaluation import F1Config, corpus_f1
from synlm.model import Model, ModelConfig
from synlm.composition import CompositionConfig
from synlm.generator import GeneratorConfig
from synlm.pcfg import sample_corpus, write_corpus
from synlm.training import TrainConfig, train_loop
from synlm.trees import left_branching, right_branching, tree_spans
from synlm.corpus import read_bracketed_trees


def induced_spans(model, sents, use_beam: bool, k: int = 20):
    out = []
    with T.no_grad():
        for sent in sents:
            if use_beam:
                res = parse(model, sent.ids, k=k)
                out.append(tree_spans(res.tree))
            else:
                leaves = model.leaf_vectors(np.asarray(sent.ids, np.intp))
                scores = model.fns.parser_scores(leaves, [len(sent.ids)])
                sch = build_merge_schedule(scores[0].data, sent.atomic_spans,
                                           len(sent.ids))
                chart = build_inside(model.fns, leaves, [len(sent.ids)], [sch])
                out.append(tree_spans(induce_tree(chart, 0)))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--train-sentences", type=int, default=50000)
    ap.add_argument("--test-sentences", type=int, default=300)
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--batch-tokens", type=int, default=320)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--beam", type=int, default=20)
    ap.add_argument("--time-budget-min", type=float, default=115.0)
    ap.add_argument("--disable-grad-stop", action="store_true")
    ap.add_argument("--parser-noise", type=float, default=1.0)
    ap.add_argument("--eval-every", type=int, default=0,
                    help="inside-F1 on a dev slice every N steps")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = sample_corpus(args.train_sentences, seed=args.seed, max_len=20)
    test = sample_corpus(args.test_sentences, seed=args.seed + 1, max_len=20)
    write_corpus(train, out / "train.txt", out / "train.trees")
    write_corpus(test, out / "test.txt", out / "test.trees")

    lines = [" ".join(d.tokens) for d in train]
    vocab = build_vocab(lines, 2000)
    dataset = [tokenize(l, vocab) for l in lines]
    test_sents = [tokenize(" ".join(d.tokens), vocab) for d in test]
    golds = read_bracketed_trees(out / "test.trees")

    cfg = ModelConfig(
        vocab_size=vocab.size,
        composition=CompositionConfig(width=args.width, compose_layers=1,
                                      decompose_layers=1, heads=4, ffn_mult=2,
                                      score_dim=32, parser_layers=2,
                                      gen_width=args.width, max_len=64),
        generator=GeneratorConfig(width=args.width, type_layers=2,
                                  token_layers=4, heads=4, ffn_mult=4,
                                  max_words=32))
    model = Model(cfg, seed=args.seed)
    tc = TrainConfig(lr=args.lr, batch_tokens=args.batch_tokens,
                     total_steps=args.steps, seed=args.seed,
                     disable_grad_stop=args.disable_grad_stop,
                     parser_noise=args.parser_noise,
                     log_every=100, checkpoint_every=0,
                     eval_every=args.eval_every)

    t0 = time.time()
    logs = []
    f1cfg_dev = F1Config()
    dev_sents = test_sents[:60]
    dev_golds = golds[:60]

    def log_fn(rec):
        logs.append(rec)
        print(json.dumps(rec), flush=True)

    def eval_fn(step):
        spans = induced_spans(model, dev_sents, use_beam=False)
        rep = corpus_f1(spans, dev_golds, f1cfg_dev)
        print(json.dumps({"dev_step": step, "inside_f1": rep.mean_f1}), flush=True)

    train_loop(model, dataset, tc, log_fn=log_fn,
               eval_fn=eval_fn if args.eval_every else None,
               deadline=t0 + args.time_budget_min * 60)
    train_min = (time.time() - t0) / 60

    f1cfg = F1Config()
    inside = corpus_f1(induced_spans(model, test_sents, use_beam=False), golds, f1cfg)
    beam = corpus_f1(induced_spans(model, test_sents, use_beam=True, k=args.beam),
                     golds, f1cfg)
    rb = corpus_f1([tree_spans(right_branching(len(s.ids))) for s in test_sents],
                   golds, f1cfg)
    lb = corpus_f1([tree_spans(left_branching(len(s.ids))) for s in test_sents],
                   golds, f1cfg)
    result = {"train_minutes": train_min,
              "inside_f1": inside.mean_f1, "beam_f1": beam.mean_f1,
              "right_branching_f1": rb.mean_f1, "left_branching_f1": lb.mean_f1,
              "steps": tc.total_steps, "seed": args.seed,
              "disable_grad_stop": args.disable_grad_stop}
    (out / "result.json").write_text(json.dumps(result, indent=2))
    model.save(out / "model.ckpt", {"step": tc.total_steps})
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
