#!/usr/bin/env python3
"""Gradient-stop ablation: seed-paired toy trainings with and without the
selective barrier, comparing induced-tree F1."""

import argparse
import json
from pathlib import Path

from synlm.composition import CompositionConfig
from synlm.corpus import build_vocab, read_bracketed_trees, tokenize
from synlm.evaluation import F1Config, corpus_f1
from synlm.generator import GeneratorConfig
from synlm.model import Model, ModelConfig
from synlm.pcfg import sample_corpus, write_corpus
from synlm.training import TrainConfig, train_loop

import sys
sys.path.insert(0, str(Path(__file__).parent))
from run_induction import induced_spans  # noqa: E402


def train_one(seed: int, disable_grad_stop: bool, args, data, vocab,
              test_sents, golds) -> float:
    cfg = ModelConfig(
        vocab_size=vocab.size,
        composition=CompositionConfig(width=args.width, compose_layers=1,
                                      decompose_layers=1, heads=4, ffn_mult=2,
                                      score_dim=16, parser_layers=1,
                                      gen_width=args.width, max_len=32),
        generator=GeneratorConfig(width=args.width, type_layers=1,
                                  token_layers=2, heads=4, ffn_mult=2,
                                  max_words=24))
    model = Model(cfg, seed=seed)
    tc = TrainConfig(lr=args.lr, batch_tokens=args.batch_tokens,
                     total_steps=args.steps, seed=seed,
                     disable_grad_stop=disable_grad_stop,
                     log_every=10 ** 9, checkpoint_every=0)
    train_loop(model, data, tc)
    rep = corpus_f1(induced_spans(model, test_sents, use_beam=False), golds,
                    F1Config())
    return rep.mean_f1


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=900)
    ap.add_argument("--train-sentences", type=int, default=6000)
    ap.add_argument("--test-sentences", type=int, default=80)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-tokens", type=int, default=256)
    ap.add_argument("--max-len", type=int, default=12)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = sample_corpus(args.train_sentences, seed=100, max_len=args.max_len)
    test = sample_corpus(args.test_sentences, seed=101, max_len=args.max_len)
    write_corpus(test, out / "test.txt", out / "test.trees")
    lines = [" ".join(d.tokens) for d in train]
    vocab = build_vocab(lines, 2000)
    data = [tokenize(l, vocab) for l in lines]
    test_sents = [tokenize(" ".join(d.tokens), vocab) for d in test]
    golds = read_bracketed_trees(out / "test.trees")

    rows = []
    for seed in range(args.seeds):
        with_stop = train_one(seed, False, args, data, vocab, test_sents, golds)
        without = train_one(seed, True, args, data, vocab, test_sents, golds)
        rows.append({"seed": seed, "with_grad_stop": with_stop,
                     "without_grad_stop": without,
                     "drop": with_stop - without})
        print(json.dumps(rows[-1]), flush=True)
    wins = sum(1 for r in rows if r["drop"] > 0)
    summary = {"rows": rows, "wins": wins, "seeds": args.seeds}
    (out / "ablation.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
