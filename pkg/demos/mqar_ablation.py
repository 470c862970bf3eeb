"""Train one small model per beta on MQAR and compare recall.

Heads are replaced in index order in every layer (beta = 0.5 replaces heads
0..3 of 8). A pure-Mamba model (beta = 1) has a fixed-size state and cannot
store many pairs, so its accuracy drops as the number of pairs grows; any
retained attention head can look the key up directly.

The defaults are a quick, small run (a few minutes). The first half of the
steps is a curriculum of short 2-4 pair sequences; without it the recall
circuit forms much later. The full ablation is ``recurformer train-mqar``.

    python demos/mqar_ablation.py --steps 800
"""

import argparse

from recurformer.attention import AttentionConfig
from recurformer.model import ModelConfig
from recurformer.ssm import MambaConfig
from recurformer.tasks import MQARVocab
from recurformer.training import MQARTask, TrainConfig, train_mqar_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=800)
    ap.add_argument("--betas", default="0,0.5,1")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    task = MQARTask(
        vocab=MQARVocab(16, 16),
        train_pairs=(2, 8),
        train_lengths=(32, 48),
        test_pairs=(4, 8, 16),
        test_lengths=(64, 128),
        eval_samples=64,
        curriculum_pairs=(2, 4),
        curriculum_lengths=(16, 24),
        curriculum_steps=args.steps // 2,
    )
    cfg = ModelConfig(2, AttentionConfig(64, 4, 2), task.vocab.size, MambaConfig(1, k_epd=1, d_state=4))
    train = TrainConfig(learning_rate=1e-3, steps=args.steps, warmup_steps=min(50, args.steps), batch_size=32,
                        seed=args.seed)
    betas = [float(b) for b in args.betas.split(",")]

    def progress(beta, step, loss):
        if (step + 1) % 100 == 0:
            print(f"  beta {beta:.2f} step {step + 1} loss {loss:.3f}")

    results = train_mqar_ablation(betas, cfg, task, train, progress=progress)
    cells = sorted(next(iter(results.values())).grid)
    print("\nbeta   train-dist  " + "  ".join(f"{p}p/{l}" for p, l in cells))
    for beta, r in results.items():
        print(f"{beta:<5}  {r.in_distribution:10.3f}  " + "  ".join(f"{r.grid[c]:6.3f}" for c in cells))


if __name__ == "__main__":
    main()
