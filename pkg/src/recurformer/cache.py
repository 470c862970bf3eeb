"""Cache ledgers: closed-form element counts and counts read from live sessions.

Units are stored scalars. The baseline for a normalized fraction is the same
shape with no replaced heads at the same length.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionConfig
from .model import HeadAssignment, ModelConfig, RecurFormer, retained_kv_heads, select_heads
from .ssm import MambaConfig, mamba_state_element_count
from .tensor import ContractError, ScratchMeter

PREFILL = "prefill"
GENERATION = "generation"


class LedgerMismatchError(AssertionError):
    """Measured counts disagree with the closed form."""


@dataclass(frozen=True)
class CacheStats:
    step: int
    phase: str
    length: int
    attention_elements: int
    mamba_elements: int
    peak_transient_elements: int

    @property
    def total(self) -> int:
        return self.attention_elements + self.mamba_elements


def attention_cache_elements(cfg: ModelConfig, assignment: HeadAssignment, length: int) -> int:
    dh = cfg.attention.d_head
    return sum(
        2 * length * dh * len(retained_kv_heads(cfg.attention, assignment.heads_att(i))) for i in range(cfg.n_layers)
    )


def mamba_cache_elements(cfg: ModelConfig, assignment: HeadAssignment) -> int:
    return sum(mamba_state_element_count(cfg.mamba_for(len(hm))) for hm in assignment.heads_m if hm)


def baseline_elements(cfg: ModelConfig, length: int) -> int:
    return cfg.n_layers * 2 * length * cfg.attention.d_head * cfg.attention.n_kv_heads


def closed_form_fraction(cfg: ModelConfig, assignment: HeadAssignment, length: int) -> float:
    """Hybrid cache elements over the all-attention cache at ``length`` tokens."""
    if length < 1:
        raise ContractError("length must be at least 1")
    hybrid = attention_cache_elements(cfg, assignment, length) + mamba_cache_elements(cfg, assignment)
    return hybrid / baseline_elements(cfg, length)


def generation_increment(cfg: ModelConfig, assignment: HeadAssignment) -> int:
    """Attention elements added per generated token."""
    return attention_cache_elements(cfg, assignment, 1)


def llama2_7b_shape() -> ModelConfig:
    """32 layers x 32 MHA heads of width 128, Mamba blocks with d_conv 4, d_state 16, dt_rank 256, expand 2."""
    return ModelConfig(
        n_layers=32,
        attention=AttentionConfig(d_model=4096, n_heads=32, n_kv_heads=32),
        vocab_size=32000,
        mamba=MambaConfig(d_model_in=1, k_epd=2, d_conv=4, d_state=16, dt_rank=256),
        ffn_hidden=11008,
    )


def fraction_table(
    cfg: ModelConfig,
    betas: Sequence[float],
    lengths: Sequence[int],
    ra_index: np.ndarray | None = None,
) -> list[tuple[float, list[float]]]:
    """Rows of ``(beta, [fraction at each length])`` with heads picked by RA-I."""
    ra = np.zeros((cfg.n_layers, cfg.attention.n_heads), dtype=np.int64) if ra_index is None else ra_index
    rows = []
    for beta in betas:
        a = select_heads(ra, beta)
        rows.append((beta, [closed_form_fraction(cfg, a, l) for l in lengths]))
    return rows


@torch.no_grad()
def measured_stats(
    model: RecurFormer,
    prompt: Sequence[int] | torch.Tensor,
    n_generate: int,
    query_chunk: int | None = None,
) -> list[CacheStats]:
    """Prefill ``prompt`` then decode greedily, reading live cache sizes after every step."""
    prompt = torch.as_tensor(prompt, dtype=torch.long)
    session = model.new_session()
    meter = ScratchMeter()
    logits = model(prompt, session, query_chunk=query_chunk, meter=meter)
    stats = [
        CacheStats(0, PREFILL, session.position, session.attention_elements(), session.mamba_elements(), meter.peak)
    ]
    for g in range(1, n_generate + 1):
        meter.reset()
        nxt = logits[-1].argmax().reshape(1)
        logits = model(nxt, session, meter=meter)
        stats.append(
            CacheStats(
                g, GENERATION, session.position, session.attention_elements(), session.mamba_elements(), meter.peak
            )
        )
    return stats


def check_ledger(stats: Iterable[CacheStats], cfg: ModelConfig, assignment: HeadAssignment) -> None:
    """Raise :class:`LedgerMismatchError` unless every step matches the closed form exactly."""
    mamba = mamba_cache_elements(cfg, assignment)
    for s in stats:
        att = attention_cache_elements(cfg, assignment, s.length)
        if s.attention_elements != att or s.mamba_elements != mamba:
            raise LedgerMismatchError(
                f"step {s.step}: measured ({s.attention_elements}, {s.mamba_elements}) != closed form ({att}, {mamba})"
            )


def write_stats_csv(stats: Iterable[CacheStats], cfg: ModelConfig, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "phase", "attention_elements", "mamba_elements", "fraction"])
        for s in stats:
            w.writerow([s.step, s.phase, s.attention_elements, s.mamba_elements, f"{s.total / baseline_elements(cfg, s.length):.6f}"])


def write_fraction_csv(rows: Sequence[tuple[float, list[float]]], lengths: Sequence[int], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta", *(f"cs_{l}" for l in lengths)])
        for beta, fr in rows:
            w.writerow([f"{beta:.2f}", *(f"{f:.4f}" for f in fr)])
