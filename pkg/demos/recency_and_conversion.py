"""From attention records to a hybrid model.

1. Recency ratio on a hand-written 4x4 attention matrix with band k = 1.
2. Record every head of a small model on a few sequences, tally how often each
   head is recency-aware (RR above a threshold), and rank the heads.
3. Convert the model at several beta: the top-ranked heads lose their query and
   key projections and hand their value slice to a Mamba block instead.

    python demos/recency_and_conversion.py --length 64
"""

import argparse
import math

import numpy as np
import torch

from recurformer.attention import AttentionConfig
from recurformer.model import ModelConfig, RecurFormer, convert_model
from recurformer.recency import RRConfig, build_report, contribution_stats, recency_ratio
from recurformer.ssm import MambaConfig


@torch.no_grad()
def plant_local_heads(model: RecurFormer, heads, seed: int, scale: float = 6.0) -> None:
    """Make some layer-0 heads attend by position only.

    Every embedding gets a shared direction c. The chosen heads project c onto
    the same constant query and key, so their score is a sum of cosines of the
    RoPE angles, which peaks at distance 0 and falls off.
    """
    g = torch.Generator().manual_seed(seed + 1)
    d = model.cfg.d_model
    dh = model.cfg.attention.d_head
    c = torch.randn(d, generator=g, dtype=model.dtype)
    c /= c.norm()
    model.embed.weight.add_(math.sqrt(d) * c)  # as long as a typical embedding row
    blk = model.layers[0].block
    read = scale * c.repeat(dh, 1)
    for h in heads:
        blk.wq.weight[h * dh : (h + 1) * dh] = read
        kv = model.cfg.attention.kv_head_of(h)
        blk.wk.weight[kv * dh : (kv + 1) * dh] = read


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=64)
    ap.add_argument("--samples", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    A = np.array([[1.0, 0, 0, 0], [0.6, 0.4, 0, 0], [0.1, 0.2, 0.7, 0], [0.05, 0.05, 0.2, 0.7]])
    print(f"RR of the 4x4 example, k=1, token 0 excluded: {recency_ratio(A, RRConfig(1)):.4f}")

    cfg = ModelConfig(2, AttentionConfig(64, 8, 4), 100, MambaConfig(1, d_state=8))
    base = RecurFormer(cfg, seed=args.seed).double().eval()
    plant_local_heads(base, heads=(0, 1, 2, 3), seed=args.seed)
    g = torch.Generator().manual_seed(args.seed)
    records = []
    with torch.no_grad():
        for _ in range(args.samples):
            ids = torch.randint(0, cfg.vocab_size, (1, args.length), generator=g)
            _, recs = base(ids, record=True)
            records.append([layer[0] for layer in recs])
    rr_cfg = RRConfig.for_length(args.length)
    report = build_report(records, rr_cfg)
    print(f"\nband k = {rr_cfg.band_k}, threshold {rr_cfg.rr_threshold}")
    print("mean RR per head:\n", np.round(report.rr_values.mean(-1), 3))
    print("RA-I per head:\n", report.ra_index)
    print("top of the ranking (layer, head, RA-I):", report.ranking()[:4])
    stats = contribution_stats(records)
    print("first-token vs other mean L2 contribution, layer 0:",
          np.round(stats.first_l2[0], 4), np.round(stats.other_l2[0], 4))

    probe = torch.randint(0, cfg.vocab_size, (args.length,), generator=g)
    with torch.no_grad():
        ref = base(probe)
        for beta in (0.0, 0.25, 0.5, 1.0):
            hybrid = convert_model(base, report.ra_index, beta, seed=args.seed).double().eval()
            gap = (hybrid(probe) - ref).abs().max().item()
            print(f"beta {beta:<5} replaced {hybrid.assignment.n_replaced:>2} heads, "
                  f"q/k elements {hybrid.qk_element_count():>5}, max logit change {gap:.2e}")


if __name__ == "__main__":
    main()
