"""Causal multi-head attention with RoPE, grouped-query heads and a KV-cache."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensor import ContractError, DimensionError, ScratchMeter, softmax_rows


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    n_kv_heads: int
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_heads, self.n_kv_heads) <= 0:
            raise ContractError("attention extents must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ContractError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if not self.rope_theta > 0:
            raise ContractError("rope_theta must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def kv_head_of(self, head: int) -> int:
        return head // self.group_size


def rope_apply(x: torch.Tensor, positions: Sequence[int] | torch.Tensor, theta: float = 10000.0) -> torch.Tensor:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` by ``pos * theta**(-2i/d)``.

    ``x`` has shape ``(..., T, d)``; ``positions`` has length ``T``.
    """
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f"rope needs an even last extent, got {d}")
    pos = torch.as_tensor(positions, dtype=torch.float64)
    if pos.shape != (x.shape[-2],):
        raise DimensionError(f"{pos.numel()} positions for {x.shape[-2]} rows")
    inv_freq = theta ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
    ang = pos[:, None] * inv_freq[None, :]
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    return torch.stack((xe * cos - xo * sin, xe * sin + xo * cos), dim=-1).flatten(-2)


class KVCache:
    """Keys and values of the cached kv-heads of one layer, shape ``(B, H_kv, T, d_head)``.

    ``kv_heads`` lists which of the layer's kv-heads are stored (all of them
    for plain attention, the retained ones for a hybrid layer).
    """

    def __init__(self, kv_heads: Sequence[int], d_head: int) -> None:
        self.kv_heads = tuple(int(h) for h in kv_heads)
        self.d_head = int(d_head)
        self.keys: torch.Tensor | None = None
        self.values: torch.Tensor | None = None

    @property
    def length(self) -> int:
        return 0 if self.keys is None else self.keys.shape[-2]

    def append(self, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Extend by the new positions and return the full ``(keys, values)``."""
        expect = (len(self.kv_heads), self.d_head)
        if k.shape != v.shape or (k.shape[1], k.shape[3]) != expect:
            raise ContractError(f"cache holds {expect} kv-heads x d_head, got k{tuple(k.shape)} v{tuple(v.shape)}")
        if self.keys is None:
            self.keys, self.values = k, v
        else:
            if self.keys.shape[0] != k.shape[0]:
                raise ContractError("batch size changed mid-sequence")
            self.keys = torch.cat((self.keys, k), dim=-2)
            self.values = torch.cat((self.values, v), dim=-2)
        return self.keys, self.values

    def element_count(self) -> int:
        if self.keys is None:
            return 0
        return self.keys.numel() + self.values.numel()


def cache_element_count(cache: KVCache | Sequence[KVCache] | None) -> int:
    """Stored scalars: sum over kv-heads of ``2 * length * d_head`` (times batch)."""
    if cache is None:
        return 0
    if isinstance(cache, KVCache):
        return cache.element_count()
    return sum(c.element_count() for c in cache)


@dataclass
class AttentionRecord:
    """Causal attention weights and value norms of one layer for one sample.

    ``weights[h]`` is the ``L x L`` matrix of head ``heads[h]``;
    ``head_value_l1/l2[h]`` are the per-token norms of the value vector that
    head reads; ``value_l1/l2`` are norms of the layer's full value projection.
    """

    heads: tuple[int, ...]
    weights: np.ndarray
    head_value_l1: np.ndarray
    head_value_l2: np.ndarray
    value_l1: np.ndarray
    value_l2: np.ndarray

    @property
    def length(self) -> int:
        return self.weights.shape[-1]


def causal_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    kv_index: Sequence[int],
    *,
    record: bool = False,
    query_chunk: int | None = None,
    meter: ScratchMeter | None = None,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Softmax attention of queries over keys with a causal mask.

    ``q``: ``(B, Hq, Tq, d)``, already rotated; ``k``/``v``: ``(B, Hkv, Tk, d)``
    covering positions ``0..Tk-1``. The queries sit at positions
    ``Tk-Tq..Tk-1``. ``kv_index[h]`` selects the kv slot of query head ``h``.
    With ``query_chunk`` set, scores are built one chunk of query rows at a
    time so the transient is ``Hq * chunk * Tk`` rather than ``Hq * Tq * Tk``.
    """
    B, Hq, Tq, d = q.shape
    Tk = k.shape[-2]
    if Hq == 0:
        return q.new_zeros(B, 0, Tq, d), (q.new_zeros(B, 0, Tq, Tk) if record else None)
    idx = torch.as_tensor(list(kv_index), dtype=torch.long)
    kk = k.index_select(1, idx)
    vv = v.index_select(1, idx)
    offset = Tk - Tq
    if not record and query_chunk is None and meter is None:
        # fused kernel; same math, no L x L scratch kept around
        if Tq == 1:
            return F.scaled_dot_product_attention(q, kk, vv), None
        if Tq == Tk:
            return F.scaled_dot_product_attention(q, kk, vv, is_causal=True), None
        allowed = torch.arange(Tk)[None, :] <= (torch.arange(Tq) + offset)[:, None]
        return F.scaled_dot_product_attention(q, kk, vv, attn_mask=allowed), None
    step = Tq if query_chunk is None else max(1, int(query_chunk))
    outs, weights = [], []
    key_pos = torch.arange(Tk)
    for start in range(0, Tq, step):
        qc = q[:, :, start : start + step]
        q_pos = torch.arange(start, start + qc.shape[2]) + offset
        scores = qc @ kk.transpose(-1, -2)
        if meter is not None:
            meter.note(scores.numel())
        scores = scores.masked_fill(key_pos[None, :] > q_pos[:, None], float("-inf"))
        w = softmax_rows(scores, math.sqrt(d))
        outs.append(w @ vv)
        if record:
            weights.append(w)
    out = torch.cat(outs, dim=2) if len(outs) > 1 else outs[0]
    return out, (torch.cat(weights, dim=2) if record else None)


def make_records(
    weights: torch.Tensor, heads: Sequence[int], head_values: torch.Tensor, full_values: torch.Tensor
) -> list[AttentionRecord]:
    """Split batched weights ``(B, H, L, L)`` and values into per-sample records."""
    out = []
    w = weights.detach().double().cpu().numpy()
    hv = head_values.detach().double().cpu()
    fv = full_values.detach().double().cpu()
    for b in range(w.shape[0]):
        out.append(
            AttentionRecord(
                heads=tuple(heads),
                weights=w[b],
                head_value_l1=hv[b].abs().sum(-1).numpy(),
                head_value_l2=hv[b].pow(2).sum(-1).sqrt().numpy(),
                value_l1=fv[b].abs().sum(-1).numpy(),
                value_l2=fv[b].pow(2).sum(-1).sqrt().numpy(),
            )
        )
    return out


class CausalSelfAttention(nn.Module):
    """Plain multi-head / grouped-query attention without biases."""

    def __init__(self, cfg: AttentionConfig) -> None:
        super().__init__()
        self.cfg = cfg
        dh = cfg.d_head
        self.wq = nn.Linear(cfg.d_model, cfg.n_heads * dh, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.n_kv_heads * dh, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.n_kv_heads * dh, bias=False)
        self.wo = nn.Linear(cfg.n_heads * dh, cfg.d_model, bias=False)

    def new_cache(self) -> KVCache:
        return KVCache(range(self.cfg.n_kv_heads), self.cfg.d_head)

    def forward(
        self,
        x: torch.Tensor,
        cache: KVCache | None = None,
        record: bool = False,
        query_chunk: int | None = None,
        meter: ScratchMeter | None = None,
    ) -> tuple[torch.Tensor, list[AttentionRecord] | None]:
        cfg = self.cfg
        if x.dim() == 2:
            y, rec = self.forward(x[None], cache, record, query_chunk, meter)
            return y[0], rec
        B, L, _ = x.shape
        if L == 0:
            raise ContractError("attention over an empty input")
        if cache is not None and (cache.kv_heads != tuple(range(cfg.n_kv_heads)) or cache.d_head != cfg.d_head):
            raise ContractError("KV-cache does not match the attention config")
        start = 0 if cache is None else cache.length
        if record and start:
            raise ContractError("attention can only be recorded on a prefill")
        pos = range(start, start + L)
        dh = cfg.d_head
        q = self.wq(x).view(B, L, cfg.n_heads, dh).transpose(1, 2)
        k = self.wk(x).view(B, L, cfg.n_kv_heads, dh).transpose(1, 2)
        v = self.wv(x).view(B, L, cfg.n_kv_heads, dh).transpose(1, 2)
        q = rope_apply(q, pos, cfg.rope_theta)
        k = rope_apply(k, pos, cfg.rope_theta)
        if cache is not None:
            k, v = cache.append(k, v)
        kv_index = [cfg.kv_head_of(h) for h in range(cfg.n_heads)]
        out, w = causal_attention(q, k, v, kv_index, record=record, query_chunk=query_chunk, meter=meter)
        y = self.wo(out.transpose(1, 2).reshape(B, L, cfg.n_heads * dh))
        records = None
        if record:
            head_v = v.index_select(1, torch.as_tensor(kv_index))
            full_v = v.transpose(1, 2).reshape(B, L, -1)
            records = make_records(w, range(cfg.n_heads), head_v, full_v)
        return y, records


def attention_forward(
    x: torch.Tensor, module: CausalSelfAttention, cache: KVCache | None = None, record: bool = False
) -> tuple[torch.Tensor, list[AttentionRecord] | None]:
    return module(x, cache=cache, record=record)
