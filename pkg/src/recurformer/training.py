"""Losses, optimizer setup and the two experiment loops (MQAR ablation, continual training)."""

from __future__ import annotations

import csv
import logging
import math
import random
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .model import ModelConfig, RecurFormer, per_layer_assignment
from .tasks import CharTokenizer, MQARBatch, MQARVocab, generate_mqar, hashhop_corpus, mqar_batch
from .tensor import ContractError, check_seed

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_steps: int = 100
    eval_every: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0 or self.batch_size <= 0 or self.steps <= 0:
            raise ContractError("learning_rate, batch_size and steps must be positive")
        if self.weight_decay < 0 or not self.grad_clip > 0:
            raise ContractError("weight_decay must be >= 0 and grad_clip > 0")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ContractError("warmup_steps must lie in [0, steps]")
        check_seed(self.seed)


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    base_losses: list[float] = field(default_factory=list)
    metrics: dict[int, float] = field(default_factory=dict)

    def log(self, step: int, loss: float, base_loss: float | None = None) -> None:
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
        self.steps.append(step)
        self.losses.append(loss)
        if base_loss is not None:
            self.base_losses.append(base_loss)

    def tail_mean(self, n: int, base: bool = False) -> float:
        xs = (self.base_losses if base else self.losses)[-n:]
        return sum(xs) / len(xs)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["step", "loss", "metric"] + (["base_loss"] if self.base_losses else [])
            w.writerow(cols)
            for i, step in enumerate(self.steps):
                metric = self.metrics.get(step)
                row = [step, repr(self.losses[i]), "" if metric is None else repr(metric)]
                if self.base_losses:
                    row.append(repr(self.base_losses[i]))
                w.writerow(row)


def cross_entropy_next_token(
    logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over the positions selected by ``mask``."""
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {tuple(logits.shape)} do not align with targets {tuple(targets.shape)}")
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    if mask.shape != targets.shape:
        raise ContractError("mask must match targets")
    if not bool(mask.any()):
        raise ContractError("mask selects no positions")
    logp = F.log_softmax(logits[mask], dim=-1)
    return -logp.gather(-1, targets[mask].unsqueeze(-1)).mean()


def perplexity(loss: float) -> float:
    return math.exp(loss)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LambdaLR]:
    """AdamW (decoupled decay on matrices only) with linear warmup and cosine decay to 10%."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.dim() >= 2 and "A_log" not in name else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    opt = torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=(0.9, 0.95))

    def factor(step: int) -> float:
        if step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        span = max(1, cfg.steps - cfg.warmup_steps)
        progress = min(1.0, (step - cfg.warmup_steps) / span)
        return 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * progress))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def train_step(model, opt, sched, loss: torch.Tensor, cfg: TrainConfig) -> float:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    sched.step()
    return float(loss.detach())


# ---------------------------------------------------------------- MQAR


@dataclass(frozen=True)
class MQARTask:
    vocab: MQARVocab = MQARVocab(64, 64)
    train_pairs: tuple[int, int] = (2, 64)
    train_lengths: tuple[int, int] = (16, 256)
    test_pairs: tuple[int, ...] = (4, 16, 64)
    test_lengths: tuple[int, ...] = (128, 256, 512, 1024)
    eval_samples: int = 64
    eval_batch: int = 16
    # short, few-pair sequences first: the recall circuit forms there and
    # then transfers, whereas on the full mix its gradient is drowned out
    curriculum_pairs: tuple[int, int] = (2, 8)
    curriculum_lengths: tuple[int, int] = (16, 32)
    curriculum_steps: int = 0


def _instance(rng: random.Random, task: MQARTask, n_pairs: int, length: int):
    # querying a random subset denies the "last unqueried key" shortcut
    n_queries = rng.randint(1, n_pairs)
    return generate_mqar(rng.getrandbits(63), n_pairs, length, task.vocab.keys, task.vocab.values, n_queries)


def sample_mqar_batch(rng: random.Random, task: MQARTask, batch_size: int, curriculum: bool = False) -> MQARBatch:
    """One training batch: shared length, per-sample pair count and query subset."""
    pairs, lengths = (task.curriculum_pairs, task.curriculum_lengths) if curriculum else (task.train_pairs, task.train_lengths)
    length = rng.randint(*lengths)
    max_pairs = min(pairs[1], length // 4)
    return mqar_batch([_instance(rng, task, rng.randint(pairs[0], max_pairs), length) for _ in range(batch_size)])


@torch.no_grad()
def mqar_accuracy(model: RecurFormer, batches: Sequence[MQARBatch]) -> float:
    correct = total = 0
    for b in batches:
        pred = model(b.tokens).argmax(-1)
        correct += int((pred[b.mask] == b.targets[b.mask]).sum())
        total += int(b.mask.sum())
    return correct / total


def mqar_eval_batches(
    task: MQARTask, seed: int, n_pairs: int | None = None, length: int | None = None
) -> list[MQARBatch]:
    """Fixed evaluation set: a grid cell, or the training distribution when both are None."""
    rng = random.Random(seed)
    out = []
    remaining = task.eval_samples
    while remaining > 0:
        n = min(task.eval_batch, remaining)
        if n_pairs is None:
            out.append(sample_mqar_batch(rng, task, n))
        else:
            out.append(mqar_batch([_instance(rng, task, n_pairs, length) for _ in range(n)]))
        remaining -= n
    return out


def mqar_grid(task: MQARTask) -> list[tuple[int, int]]:
    return [(p, l) for l in task.test_lengths for p in task.test_pairs if 4 * p <= l]


@dataclass
class AblationResult:
    beta: float
    trace: TrainTrace
    in_distribution: float
    grid: dict[tuple[int, int], float]
    model: RecurFormer


def train_mqar(
    model: RecurFormer, task: MQARTask, cfg: TrainConfig, progress: Callable[[int, float], None] | None = None
) -> TrainTrace:
    rng = random.Random(cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    trace = TrainTrace()
    model.train()
    in_dist = mqar_eval_batches(task, cfg.seed + 1) if cfg.eval_every else []
    for step in range(cfg.steps):
        b = sample_mqar_batch(rng, task, cfg.batch_size, step < task.curriculum_steps)
        loss = cross_entropy_next_token(model(b.tokens), b.targets, b.mask)
        trace.log(step, train_step(model, opt, sched, loss, cfg))
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            trace.metrics[step] = mqar_accuracy(model, in_dist)
        if progress is not None:
            progress(step, trace.losses[-1])
    model.eval()
    return trace


def train_mqar_ablation(
    betas: Sequence[float],
    model_cfg: ModelConfig,
    task: MQARTask,
    cfg: TrainConfig,
    eval_grid: bool = True,
    progress: Callable[[float, int, float], None] | None = None,
) -> dict[float, AblationResult]:
    """Train one randomly initialised model per beta (heads replaced per layer, index order)."""
    if model_cfg.vocab_size < task.vocab.size:
        raise ContractError("model vocabulary smaller than the MQAR vocabulary")
    results = {}
    for beta in betas:
        assignment = per_layer_assignment(model_cfg.n_layers, model_cfg.attention.n_heads, beta)
        model = RecurFormer(model_cfg, assignment, seed=cfg.seed)
        cb = (lambda s, l, _b=beta: progress(_b, s, l)) if progress else None
        trace = train_mqar(model, task, cfg, cb)
        acc = mqar_accuracy(model, mqar_eval_batches(task, cfg.seed + 1))
        grid = {}
        if eval_grid:
            for p, l in mqar_grid(task):
                grid[(p, l)] = mqar_accuracy(model, mqar_eval_batches(task, cfg.seed + 2 + p * 7919 + l, p, l))
        log.info("beta=%.2f in-distribution accuracy %.4f", beta, acc)
        results[beta] = AblationResult(beta, trace, acc, grid, model)
    return results


def write_ablation_csv(results: dict[float, AblationResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta", "n_pairs", "length", "accuracy"])
        for beta, r in results.items():
            w.writerow([f"{beta:.2f}", "train", "train", f"{r.in_distribution:.6f}"])
            for (p, l), acc in sorted(r.grid.items(), key=lambda kv: (kv[0][1], kv[0][0])):
                w.writerow([f"{beta:.2f}", p, l, f"{acc:.6f}"])


# ---------------------------------------------------------------- language-model corpus


class CharCorpus:
    """Solved HashHop instances as one character stream; batches are random windows."""

    def __init__(self, seed: int, n_docs: int = 2000, h_e: int = 4, h_p: int = 8, h_l: int = 256) -> None:
        self.tokenizer = CharTokenizer()
        self.data = torch.tensor(self.tokenizer.encode(hashhop_corpus(seed, n_docs, h_e, h_p, h_l)), dtype=torch.long)

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    def batch(self, rng: random.Random, batch_size: int, seq_len: int) -> tuple[torch.Tensor, torch.Tensor]:
        starts = [rng.randrange(len(self.data) - seq_len - 1) for _ in range(batch_size)]
        x = torch.stack([self.data[s : s + seq_len] for s in starts])
        y = torch.stack([self.data[s + 1 : s + seq_len + 1] for s in starts])
        return x, y


def lm_loss(model: RecurFormer, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return cross_entropy_next_token(model(x), y)


def pretrain(model: RecurFormer, corpus: CharCorpus, cfg: TrainConfig, seq_len: int = 128) -> TrainTrace:
    rng = random.Random(cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    trace = TrainTrace()
    model.train()
    for step in range(cfg.steps):
        x, y = corpus.batch(rng, cfg.batch_size, seq_len)
        trace.log(step, train_step(model, opt, sched, lm_loss(model, x, y), cfg))
    model.eval()
    return trace


def continual_train(
    hybrid: RecurFormer, base: RecurFormer, corpus: CharCorpus, cfg: TrainConfig, seq_len: int = 128
) -> TrainTrace:
    """Train every hybrid parameter; log the frozen base model's loss on the same batches."""
    rng = random.Random(cfg.seed)
    opt, sched = make_optimizer(hybrid, cfg)
    trace = TrainTrace()
    base.eval()
    hybrid.train()
    for step in range(cfg.steps):
        x, y = corpus.batch(rng, cfg.batch_size, seq_len)
        with torch.no_grad():
            base_loss = float(lm_loss(base, x, y))
        trace.log(step, train_step(hybrid, opt, sched, lm_loss(hybrid, x, y), cfg), base_loss)
    hybrid.eval()
    return trace
