"""RecurFormer language model: attention heads and Mamba-replaced heads side by side.

Each layer projects values for every kv-head, queries/keys only for the heads
that keep attention, runs attention over those heads and one Mamba block over
the concatenated values of the replaced heads, then writes every head's output
back into its canonical slot before the shared output projection. A model
whose assignment replaces nothing is an ordinary pre-norm transformer, which
is what :func:`convert_model` starts from.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionConfig, AttentionRecord, KVCache, causal_attention, make_records, rope_apply
from .ssm import MambaBlock, MambaConfig, MambaState, mamba_state_element_count
from .tensor import CheckpointError, ContractError, ScratchMeter, check_seed, load_tensors, save_tensors


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    attention: AttentionConfig
    vocab_size: int
    mamba: MambaConfig = field(default_factory=lambda: MambaConfig(d_model_in=1))
    norm_eps: float = 1e-5
    ffn_hidden: int | None = None

    def __post_init__(self) -> None:
        if self.n_layers <= 0 or self.vocab_size <= 0:
            raise ContractError("n_layers and vocab_size must be positive")
        if not self.norm_eps > 0:
            raise ContractError("norm_eps must be positive")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def hidden(self) -> int:
        if self.ffn_hidden is not None:
            return self.ffn_hidden
        return max(8, 8 * round(self.d_model * 8 / 3 / 8))

    def mamba_for(self, n_replaced: int) -> MambaConfig:
        return self.mamba.with_width(n_replaced * self.attention.d_head)


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class HeadAssignment:
    """Per-layer split of head indices into replaced (``heads_m``) and retained."""

    n_heads: int
    heads_m: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        for i, hs in enumerate(self.heads_m):
            if list(hs) != sorted(set(hs)):
                raise ContractError(f"layer {i}: replaced heads must be sorted and distinct, got {hs}")
            if hs and not (0 <= hs[0] and hs[-1] < self.n_heads):
                raise ContractError(f"layer {i}: head index out of range in {hs}")

    @classmethod
    def none(cls, n_layers: int, n_heads: int) -> HeadAssignment:
        return cls(n_heads, tuple(() for _ in range(n_layers)))

    @classmethod
    def every(cls, n_layers: int, n_heads: int) -> HeadAssignment:
        return cls(n_heads, tuple(tuple(range(n_heads)) for _ in range(n_layers)))

    @property
    def n_layers(self) -> int:
        return len(self.heads_m)

    def heads_att(self, layer: int) -> tuple[int, ...]:
        m = set(self.heads_m[layer])
        return tuple(h for h in range(self.n_heads) if h not in m)

    @property
    def n_replaced(self) -> int:
        return sum(len(h) for h in self.heads_m)

    def to_text(self) -> str:
        return ";".join(f"{i}:" + ",".join(map(str, hs)) for i, hs in enumerate(self.heads_m))

    @classmethod
    def from_text(cls, text: str, n_heads: int) -> HeadAssignment:
        layers = []
        for i, part in enumerate(text.split(";")):
            idx, _, heads = part.partition(":")
            if int(idx) != i:
                raise ContractError(f"head assignment layers out of order at {part!r}")
            layers.append(tuple(int(h) for h in heads.split(",") if h))
        return cls(n_heads, tuple(layers))


def retained_kv_heads(cfg: AttentionConfig, heads_att: Sequence[int]) -> tuple[int, ...]:
    """A kv-head is kept iff at least one query head of its group keeps attention."""
    return tuple(sorted({cfg.kv_head_of(h) for h in heads_att}))


def select_heads(ra_index: np.ndarray, beta: float) -> HeadAssignment:
    """Replace the ``round(beta * H_total)`` heads with the highest RA-I.

    Ties go to the lower layer, then the lower head index.
    """
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    ra = np.asarray(ra_index)
    n_layers, n_heads = ra.shape
    count = round_half_up(beta * n_layers * n_heads)
    order = sorted(((-int(ra[l, h]), l, h) for l in range(n_layers) for h in range(n_heads)))
    chosen: list[list[int]] = [[] for _ in range(n_layers)]
    for _, l, h in order[:count]:
        chosen[l].append(h)
    return HeadAssignment(n_heads, tuple(tuple(sorted(c)) for c in chosen))


def per_layer_assignment(n_layers: int, n_heads: int, beta: float) -> HeadAssignment:
    """Replace the first ``round(beta * n_heads)`` heads of every layer (index order)."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    k = round_half_up(beta * n_heads)
    return HeadAssignment(n_heads, tuple(tuple(range(k)) for _ in range(n_layers)))


@dataclass
class LayerCache:
    kv: KVCache | None
    mamba: MambaState | None


@dataclass
class InferenceSession:
    """Caches owned by one decoding stream."""

    layers: list[LayerCache]
    position: int = 0

    def attention_elements(self) -> int:
        return sum(c.kv.element_count() for c in self.layers if c.kv is not None)

    def mamba_elements(self) -> int:
        return sum(c.mamba.element_count() for c in self.layers if c.mamba is not None)


class RecurFormerBlock(nn.Module):
    """Token mixer of one layer under a given head split."""

    def __init__(
        self,
        cfg: AttentionConfig,
        heads_m: Sequence[int],
        mamba_cfg: MambaConfig | None,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        dh = cfg.d_head
        self.heads_m = tuple(heads_m)
        m = set(self.heads_m)
        self.heads_att = tuple(h for h in range(cfg.n_heads) if h not in m)
        self.kv_att = retained_kv_heads(cfg, self.heads_att)
        self.wv = nn.Linear(cfg.d_model, cfg.n_kv_heads * dh, bias=False)
        self.wq = nn.Linear(cfg.d_model, len(self.heads_att) * dh, bias=False) if self.heads_att else None
        self.wk = nn.Linear(cfg.d_model, len(self.kv_att) * dh, bias=False) if self.heads_att else None
        self.wo = nn.Linear(cfg.n_heads * dh, cfg.d_model, bias=False)
        self.mamba = None
        if self.heads_m:
            if mamba_cfg is None or mamba_cfg.d_model_in != len(self.heads_m) * dh:
                raise ContractError("Mamba config width must equal the replaced-heads value width")
            self.mamba = MambaBlock(mamba_cfg, generator)
        # canonical slot h reads from position order[h] of cat(att heads, mamba heads)
        slots = list(self.heads_att) + list(self.heads_m)
        self.register_buffer("order", torch.tensor([slots.index(h) for h in range(cfg.n_heads)]), persistent=False)

    def new_cache(self, batch: int = 1) -> LayerCache:
        kv = KVCache(self.kv_att, self.cfg.d_head) if self.heads_att else None
        st = self.mamba.new_state(batch) if self.mamba is not None else None
        return LayerCache(kv, st)

    def forward(
        self,
        x: torch.Tensor,
        cache: LayerCache | None = None,
        record: bool = False,
        query_chunk: int | None = None,
        meter: ScratchMeter | None = None,
    ) -> tuple[torch.Tensor, list[AttentionRecord] | None]:
        cfg = self.cfg
        B, L, _ = x.shape
        if L == 0:
            raise ContractError("block over an empty input")
        dh = cfg.d_head
        start = 0
        if cache is not None:
            if (cache.kv is None) != (not self.heads_att) or (cache.mamba is None) != (self.mamba is None):
                raise ContractError("layer cache does not match the head assignment")
            if cache.kv is not None:
                if cache.kv.kv_heads != self.kv_att:
                    raise ContractError("KV-cache kv-heads do not match the retained heads")
                start = cache.kv.length
        if record and start:
            raise ContractError("attention can only be recorded on a prefill")
        v = self.wv(x).view(B, L, cfg.n_kv_heads, dh)
        parts = []
        records = None
        if self.heads_att:
            pos = range(start, start + L)
            q = rope_apply(self.wq(x).view(B, L, -1, dh).transpose(1, 2), pos, cfg.rope_theta)
            k = rope_apply(self.wk(x).view(B, L, -1, dh).transpose(1, 2), pos, cfg.rope_theta)
            va = v[:, :, list(self.kv_att)].transpose(1, 2)
            if cache is not None:
                k, va = cache.kv.append(k, va)
            kv_index = [self.kv_att.index(cfg.kv_head_of(h)) for h in self.heads_att]
            att, w = causal_attention(q, k, va, kv_index, record=record, query_chunk=query_chunk, meter=meter)
            parts.append(att.transpose(1, 2))
            if record:
                head_v = va.index_select(1, torch.as_tensor(kv_index))
                records = make_records(w, self.heads_att, head_v, v.reshape(B, L, -1))
        elif record:
            records = [
                AttentionRecord((), np.zeros((0, L, L)), np.zeros((0, L)), np.zeros((0, L)), *_norms(v[b]))
                for b in range(B)
            ]
        if self.mamba is not None:
            vm = v[:, :, [cfg.kv_head_of(h) for h in self.heads_m]].reshape(B, L, -1)
            state = cache.mamba if cache is not None else None
            ym, new_state = self.mamba(vm, state, meter=meter)
            if cache is not None:
                cache.mamba = new_state
            parts.append(ym.view(B, L, len(self.heads_m), dh))
        heads = torch.cat(parts, dim=2) if len(parts) > 1 else parts[0]
        if len(parts) > 1:
            heads = heads.index_select(2, self.order)
        return self.wo(heads.reshape(B, L, cfg.n_heads * dh)), records

    def qk_element_count(self) -> int:
        return sum(w.weight.numel() for w in (self.wq, self.wk) if w is not None)


def _norms(v: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    flat = v.detach().double().reshape(v.shape[0], -1)
    return flat.abs().sum(-1).numpy(), flat.pow(2).sum(-1).sqrt().numpy()


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int) -> None:
        super().__init__()
        self.w1 = nn.Linear(d_model, hidden, bias=False)
        self.w3 = nn.Linear(d_model, hidden, bias=False)
        self.w2 = nn.Linear(hidden, d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(F.silu(self.w1(x)) * self.w3(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, heads_m: Sequence[int], generator: torch.Generator | None) -> None:
        super().__init__()
        self.norm1 = nn.RMSNorm(cfg.d_model, eps=cfg.norm_eps)
        mcfg = cfg.mamba_for(len(heads_m)) if heads_m else None
        self.block = RecurFormerBlock(cfg.attention, heads_m, mcfg, generator)
        self.norm2 = nn.RMSNorm(cfg.d_model, eps=cfg.norm_eps)
        self.ffn = FeedForward(cfg.d_model, cfg.hidden)

    def forward(self, x, cache=None, record=False, query_chunk=None, meter=None):
        h, rec = self.block(self.norm1(x), cache, record, query_chunk, meter)
        x = x + h
        return x + self.ffn(self.norm2(x)), rec


class RecurFormer(nn.Module):
    def __init__(self, cfg: ModelConfig, assignment: HeadAssignment | None = None, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        self.assignment = assignment or HeadAssignment.none(cfg.n_layers, cfg.attention.n_heads)
        if self.assignment.n_layers != cfg.n_layers or self.assignment.n_heads != cfg.attention.n_heads:
            raise ContractError("head assignment does not match the model shape")
        self.seed = check_seed(seed)
        g = torch.Generator().manual_seed(self.seed)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.layers = nn.ModuleList(DecoderLayer(cfg, hm, g) for hm in self.assignment.heads_m)
        self.norm = nn.RMSNorm(cfg.d_model, eps=cfg.norm_eps)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self._init_dense(g)

    @torch.no_grad()
    def _init_dense(self, g: torch.Generator) -> None:
        # fan-in scaling; unit embeddings so token identity is not swamped by
        # the first residual updates under pre-norm
        depth = 1.0 / math.sqrt(2 * self.cfg.n_layers)

        def fan_in(lin: nn.Linear, scale: float = 1.0) -> None:
            lin.weight.normal_(0.0, scale / math.sqrt(lin.weight.shape[1]), generator=g)

        self.embed.weight.normal_(0.0, 1.0, generator=g)
        fan_in(self.lm_head)
        for layer in self.layers:
            blk = layer.block
            for lin in (blk.wq, blk.wk, blk.wv, layer.ffn.w1, layer.ffn.w3):
                if lin is not None:
                    fan_in(lin)
            fan_in(blk.wo, depth)
            fan_in(layer.ffn.w2, depth)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def new_session(self, batch: int = 1) -> InferenceSession:
        layers = []
        for layer in self.layers:
            c = layer.block.new_cache(batch)
            if c.mamba is not None:
                c.mamba = MambaState(c.mamba.conv_state.to(self.dtype), c.mamba.ssm_state.to(self.dtype))
            layers.append(c)
        return InferenceSession(layers)

    def forward(
        self,
        tokens: torch.Tensor,
        session: InferenceSession | None = None,
        record: bool = False,
        query_chunk: int | None = None,
        meter: ScratchMeter | None = None,
    ) -> torch.Tensor | tuple[torch.Tensor, list[list[AttentionRecord]]]:
        """Logits ``(B, T, vocab)``; with ``record`` also per-layer attention records."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.shape[1] == 0:
            raise ContractError("empty token sequence")
        if int(tokens.max()) >= self.cfg.vocab_size or int(tokens.min()) < 0:
            raise ContractError(f"token id outside [0, {self.cfg.vocab_size})")
        x = self.embed(tokens)
        records = []
        for i, layer in enumerate(self.layers):
            cache = session.layers[i] if session is not None else None
            x, rec = layer(x, cache, record, query_chunk, meter)
            records.append(rec)
        if session is not None:
            session.position += tokens.shape[1]
        logits = self.lm_head(self.norm(x))
        if squeeze:
            logits = logits[0]
        return (logits, records) if record else logits

    # ---- bookkeeping

    def qk_element_count(self) -> int:
        return sum(layer.block.qk_element_count() for layer in self.layers)

    def tensors(self) -> dict[str, torch.Tensor]:
        """Parameters under checkpoint names (``layer{i}.mamba.*`` for Mamba weights)."""
        out = {}
        for name, p in self.state_dict().items():
            if name.startswith("layers."):
                _, i, rest = name.split(".", 2)
                rest = rest.replace("block.mamba.", "mamba.").replace("block.", "attn.")
                name = f"layer{i}.{rest}"
            out[name] = p
        return out

    def load_tensors_(self, tensors: dict[str, torch.Tensor]) -> None:
        own = self.tensors()
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
        with torch.no_grad():
            for name, p in own.items():
                t = tensors[name]
                if t.shape != p.shape:
                    raise CheckpointError(f"tensor {name!r} has shape {tuple(t.shape)}, expected {tuple(p.shape)}")
                p.copy_(t)


def model_forward(
    model: RecurFormer, tokens: Sequence[int] | torch.Tensor, mode: str = "prefill", session: InferenceSession | None = None
) -> torch.Tensor:
    """Prefill a fresh (or given) session, or feed one token in generate mode."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if mode == "prefill":
        return model(tokens, session)
    if mode == "generate":
        if session is None or tokens.numel() != 1:
            raise ContractError("generate mode needs a session and exactly one token")
        return model(tokens.reshape(1), session)
    raise ContractError(f"unknown mode {mode!r}")


@torch.no_grad()
def convert_model(base: RecurFormer, report, beta: float, seed: int = 0) -> RecurFormer:
    """Build a hybrid from a pure-attention model, replacing the highest-RA-I heads.

    ``report`` is a :class:`~recurformer.recency.RecencyReport` or an
    ``(n_layers, n_heads)`` array of RA-I counts. All surviving weights are
    copied; Mamba blocks get fresh parameters drawn from ``seed``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    if base.assignment.n_replaced:
        raise ContractError("base model already has replaced heads")
    ra = np.asarray(getattr(report, "ra_index", report))
    cfg = base.cfg
    if ra.shape != (cfg.n_layers, cfg.attention.n_heads):
        raise ContractError(f"report covers {ra.shape}, model has {(cfg.n_layers, cfg.attention.n_heads)}")
    assignment = select_heads(ra, beta)
    hybrid = RecurFormer(cfg, assignment, seed).to(base.dtype)
    copy_weights(base, hybrid)
    return hybrid


@torch.no_grad()
def copy_weights(base: RecurFormer, hybrid: RecurFormer) -> None:
    """Copy every base weight the hybrid keeps, slicing W_Q/W_K to retained heads."""
    dh = base.cfg.attention.d_head
    hybrid.embed.weight.copy_(base.embed.weight)
    hybrid.norm.weight.copy_(base.norm.weight)
    hybrid.lm_head.weight.copy_(base.lm_head.weight)
    for lb, lh in zip(base.layers, hybrid.layers):
        for name in ("norm1", "norm2"):
            getattr(lh, name).weight.copy_(getattr(lb, name).weight)
        lh.ffn.load_state_dict(lb.ffn.state_dict())
        bb, hb = lb.block, lh.block
        hb.wv.weight.copy_(bb.wv.weight)
        hb.wo.weight.copy_(bb.wo.weight)
        if hb.heads_att:
            q_rows = torch.cat([torch.arange(h * dh, (h + 1) * dh) for h in hb.heads_att])
            k_rows = torch.cat([torch.arange(h * dh, (h + 1) * dh) for h in hb.kv_att])
            hb.wq.weight.copy_(bb.wq.weight[q_rows])
            hb.wk.weight.copy_(bb.wk.weight[k_rows])


# ---------------------------------------------------------------- checkpoints

WEIGHTS_FILE = "weights.rft"
MANIFEST_FILE = "manifest.txt"


def config_items(model: RecurFormer) -> dict[str, str]:
    cfg = model.cfg
    a, m = cfg.attention, cfg.mamba
    return {
        "n_layers": str(cfg.n_layers),
        "d_model": str(a.d_model),
        "n_heads": str(a.n_heads),
        "n_kv_heads": str(a.n_kv_heads),
        "rope_theta": repr(a.rope_theta),
        "vocab_size": str(cfg.vocab_size),
        "norm_eps": repr(cfg.norm_eps),
        "ffn_hidden": str(cfg.hidden),
        "mamba_k_epd": repr(m.k_epd),
        "mamba_d_conv": str(m.d_conv),
        "mamba_d_state": str(m.d_state),
        "mamba_dt_rank": "auto" if m.dt_rank is None else str(m.dt_rank),
        "heads_m": model.assignment.to_text(),
        "seed": str(model.seed),
        "dtype": str(model.dtype).removeprefix("torch."),
    }


def save_checkpoint(model: RecurFormer, directory: str | Path, extra: dict[str, str] | None = None) -> Path:
    """Write ``weights.rft`` and a ``key=value`` ``manifest.txt`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensors(d / WEIGHTS_FILE, model.tensors())
    items = config_items(model) | (extra or {})
    (d / MANIFEST_FILE).write_text("".join(f"{k}={v}\n" for k, v in items.items()))
    return d


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}")
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(directory: str | Path) -> RecurFormer:
    d = Path(directory)
    if not (d / MANIFEST_FILE).is_file():
        raise CheckpointError(f"{d}: no {MANIFEST_FILE}")
    man = read_manifest(d / MANIFEST_FILE)
    try:
        att = AttentionConfig(int(man["d_model"]), int(man["n_heads"]), int(man["n_kv_heads"]), float(man["rope_theta"]))
        rank = man["mamba_dt_rank"]
        mamba = MambaConfig(
            1,
            float(man["mamba_k_epd"]),
            int(man["mamba_d_conv"]),
            int(man["mamba_d_state"]),
            None if rank == "auto" else int(rank),
        )
        cfg = ModelConfig(
            int(man["n_layers"]), att, int(man["vocab_size"]), mamba, float(man["norm_eps"]), int(man["ffn_hidden"])
        )
        assignment = HeadAssignment.from_text(man["heads_m"], att.n_heads)
        seed = int(man["seed"])
        dtype = getattr(torch, man.get("dtype", "float32"))
    except (KeyError, ValueError, ContractError) as exc:
        raise CheckpointError(f"{d}: bad manifest ({exc})") from exc
    model = RecurFormer(cfg, assignment, seed).to(dtype)
    model.load_tensors_(load_tensors(d / WEIGHTS_FILE))
    return model
