"""Convert a trained model and train it back to its original loss.

1. Pretrain a small pure-attention model on a character stream of solved
   HashHop instances.
2. Record its attention, rank heads by how often they are recency-aware, and
   replace half of them with Mamba blocks (weights of the kept parts are
   copied; the Mamba blocks start fresh).
3. Continue training every parameter of the hybrid on the same stream, next to
   the frozen base, and watch the gap close.

    python demos/continual_training.py --pretrain-steps 600 --steps 600
"""

import argparse
import random

import torch

from recurformer.attention import AttentionConfig
from recurformer.model import ModelConfig, RecurFormer, convert_model
from recurformer.recency import RRConfig, build_report
from recurformer.ssm import MambaConfig
from recurformer.training import CharCorpus, TrainConfig, continual_train, lm_loss, pretrain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pretrain-steps", type=int, default=600)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--beta", type=float, default=0.5)
    ap.add_argument("--seq-len", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    corpus = CharCorpus(args.seed, n_docs=400)
    cfg = ModelConfig(2, AttentionConfig(64, 4, 2), corpus.vocab_size, MambaConfig(1, d_state=8))
    base = RecurFormer(cfg, seed=args.seed)
    tcfg = TrainConfig(learning_rate=2e-3, steps=args.pretrain_steps, warmup_steps=50, batch_size=16, seed=args.seed)
    trace = pretrain(base, corpus, tcfg, args.seq_len)
    print(f"base: loss {trace.losses[0]:.3f} -> {trace.tail_mean(50):.3f}")

    rng = random.Random(args.seed)
    with torch.no_grad():
        records = []
        for _ in range(8):
            x, _ = corpus.batch(rng, 1, args.seq_len)
            _, recs = base(x, record=True)
            records.append([layer[0] for layer in recs])
    report = build_report(records, RRConfig.for_length(args.seq_len))
    print("mean RR per head:\n", report.rr_values.mean(-1).round(3))
    print("RA-I per head:\n", report.ra_index)
    if not report.ra_index.any():
        print("no head passes the threshold; ties fall back to layer and head order")

    hybrid = convert_model(base, report.ra_index, args.beta, seed=args.seed)
    print("replaced heads per layer:", hybrid.assignment.heads_m)
    x, y = corpus.batch(rng, 16, args.seq_len)
    with torch.no_grad():
        print(f"right after conversion: hybrid {float(lm_loss(hybrid, x, y)):.3f} vs base {float(lm_loss(base, x, y)):.3f}")

    ccfg = TrainConfig(learning_rate=2e-3, steps=args.steps, warmup_steps=50, batch_size=16, seed=args.seed + 1)
    ct = continual_train(hybrid, base, corpus, ccfg, args.seq_len)
    for s in range(0, args.steps, max(1, args.steps // 6)):
        print(f"  step {s:>5}  hybrid {ct.losses[s]:.3f}  base {ct.base_losses[s]:.3f}")
    final, ref = ct.tail_mean(50), ct.tail_mean(50, base=True)
    print(f"final: hybrid {final:.3f} vs base {ref:.3f} ({100 * (final / ref - 1):+.1f}%)")


if __name__ == "__main__":
    main()
