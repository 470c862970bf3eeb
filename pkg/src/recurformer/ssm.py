"""Selective state-space (Mamba-style) block.

The recurrence ``h_t = Abar_t * h_{t-1} + Bbar_t * x_t`` is diagonal, so the
pairs ``(a, b)`` compose under the associative operator
``(a1, b1) . (a2, b2) = (a1 * a2, a2 * b1 + b2)`` and the whole sequence can be
evaluated with a prefix scan. :func:`associative_scan` uses the odd/even
(work-efficient) formulation: combine neighbouring pairs, scan the half-length
sequence recursively, then fill in the even positions. Depth is
``O(log L)``, total work ``O(L)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tensor import ContractError, DimensionError, ScratchMeter


@dataclass(frozen=True)
class MambaConfig:
    d_model_in: int
    k_epd: float = 2
    d_conv: int = 4
    d_state: int = 16
    dt_rank: int | None = None

    def __post_init__(self) -> None:
        if self.d_model_in <= 0 or self.d_conv <= 0 or self.d_state <= 0:
            raise ContractError("Mamba extents must be positive")
        inner = self.k_epd * self.d_model_in
        if inner <= 0 or abs(inner - round(inner)) > 1e-9:
            raise ContractError(f"k_epd * d_model_in = {inner} is not a positive integer")
        if self.dt_rank is not None and self.dt_rank <= 0:
            raise ContractError("dt_rank must be positive")

    @property
    def d_inner(self) -> int:
        return int(round(self.k_epd * self.d_model_in))

    @property
    def rank(self) -> int:
        """Resolved dt_rank: 256 at 7B-like widths, ``ceil(d_model_in / 16)`` below."""
        if self.dt_rank is not None:
            return self.dt_rank
        if self.d_model_in >= 16 * 256:
            return 256
        return max(1, math.ceil(self.d_model_in / 16))

    def with_width(self, d_model_in: int) -> MambaConfig:
        return MambaConfig(d_model_in, self.k_epd, self.d_conv, self.d_state, self.dt_rank)


def mamba_state_element_count(cfg: MambaConfig) -> int:
    """Conv window plus recurrent state: ``d_inner * d_conv + d_inner * d_state``."""
    return cfg.d_inner * cfg.d_conv + cfg.d_inner * cfg.d_state


@dataclass
class MambaState:
    conv_state: torch.Tensor  # (B, d_inner, d_conv): most recent inputs, oldest first
    ssm_state: torch.Tensor  # (B, d_inner, d_state)

    @classmethod
    def zeros(cls, cfg: MambaConfig, batch: int = 1, dtype: torch.dtype = torch.float32) -> MambaState:
        return cls(
            torch.zeros(batch, cfg.d_inner, cfg.d_conv, dtype=dtype),
            torch.zeros(batch, cfg.d_inner, cfg.d_state, dtype=dtype),
        )

    def element_count(self) -> int:
        return self.conv_state.numel() + self.ssm_state.numel()


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-order hold on ``A``, Euler on ``B``.

    ``delta``: ``(..., d_inner)``, ``A``: ``(d_inner, d_state)``, ``B``: ``(..., d_state)``.
    Returns ``exp(delta * A)`` and ``delta * B``, both ``(..., d_inner, d_state)``.
    """
    if not bool((delta > 0).all()):
        raise ContractError("discretize needs delta > 0 everywhere")
    dt = delta.unsqueeze(-1)
    return torch.exp(dt * A), dt * B.unsqueeze(-2)


def associative_scan(a: torch.Tensor, b: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Inclusive scan of ``h_t = a_t * h_{t-1} + b_t`` (``h_{-1} = 0``) along ``dim``."""
    if a.shape != b.shape:
        raise DimensionError(f"scan operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if dim != 1:
        return associative_scan(a.movedim(dim, 1), b.movedim(dim, 1)).movedim(1, dim)
    return _odd_even_scan(a, b)


def _odd_even_scan(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    L = a.shape[1]
    if L == 1:
        return b
    if L % 2:
        a = torch.cat((a, torch.ones_like(a[:, :1])), 1)
        b = torch.cat((b, torch.zeros_like(b[:, :1])), 1)
    a_even, a_odd = a[:, 0::2], a[:, 1::2]
    b_even, b_odd = b[:, 0::2], b[:, 1::2]
    h_odd = _odd_even_scan(a_odd * a_even, a_odd * b_even + b_odd)
    h_even = torch.cat((b_even[:, :1], a_even[:, 1:] * h_odd[:, :-1] + b_even[:, 1:]), 1)
    return torch.stack((h_even, h_odd), 2).flatten(1, 2)[:, :L]


def sequential_scan(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Reference loop over dim 1; same contract as :func:`associative_scan`."""
    h = torch.zeros_like(b[:, 0]) if h0 is None else h0
    out = []
    for t in range(a.shape[1]):
        h = a[:, t] * h + b[:, t]
        out.append(h)
    return torch.stack(out, 1)


def selective_scan(
    u: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: torch.Tensor,
    h0: torch.Tensor | None = None,
    meter: ScratchMeter | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Parallel S6 core. ``u, delta``: ``(B, L, d_inner)``; ``B, C``: ``(B, L, d_state)``.

    Returns ``y = C_t . h_t + D * u_t`` and the final state ``h_{L-1}``.
    """
    dA, dB = discretize(delta, A, B)
    drive = dB * u.unsqueeze(-1)
    if h0 is not None:
        drive = torch.cat((drive[:, :1] + dA[:, :1] * h0.unsqueeze(1), drive[:, 1:]), 1)
    if meter is not None:
        meter.note(drive.numel())
    h = associative_scan(dA, drive)
    y = (h @ C.unsqueeze(-1)).squeeze(-1) + D * u
    return y, h[:, -1]


class MambaBlock(nn.Module):
    """Gated Mamba block mapping ``(B, L, d_model_in)`` to the same width."""

    def __init__(self, cfg: MambaConfig, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        di, n, r = cfg.d_inner, cfg.d_state, cfg.rank
        self.in_proj = nn.Linear(cfg.d_model_in, 2 * di, bias=False)
        self.conv_weight = nn.Parameter(torch.empty(di, cfg.d_conv))
        self.conv_bias = nn.Parameter(torch.empty(di))
        self.x_proj = nn.Linear(di, r + 2 * n, bias=False)
        self.dt_proj = nn.Linear(r, di, bias=True)
        self.A_log = nn.Parameter(torch.empty(di, n))
        self.D = nn.Parameter(torch.empty(di))
        self.out_proj = nn.Linear(di, cfg.d_model_in, bias=False)
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        cfg = self.cfg
        g = generator

        def fan_in_uniform(w: torch.Tensor, fan_in: int) -> None:
            bound = 1.0 / math.sqrt(fan_in)
            w.uniform_(-bound, bound, generator=g)

        fan_in_uniform(self.in_proj.weight, cfg.d_model_in)
        fan_in_uniform(self.conv_weight, cfg.d_conv)
        fan_in_uniform(self.conv_bias, cfg.d_conv)
        fan_in_uniform(self.x_proj.weight, cfg.d_inner)
        fan_in_uniform(self.out_proj.weight, cfg.d_inner)
        fan_in_uniform(self.dt_proj.weight, cfg.rank)
        # softplus(bias) log-uniform in [1e-3, 1e-1]
        u = torch.rand(cfg.d_inner, generator=g, dtype=torch.float64)
        dt = torch.exp(u * (math.log(1e-1) - math.log(1e-3)) + math.log(1e-3))
        self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        self.A_log.copy_(torch.log(torch.arange(1, cfg.d_state + 1, dtype=torch.float64)).expand(cfg.d_inner, -1))
        self.D.fill_(1.0)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def new_state(self, batch: int = 1) -> MambaState:
        return MambaState.zeros(self.cfg, batch, self.in_proj.weight.dtype)

    def _project(self, xc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        r, n = self.cfg.rank, self.cfg.d_state
        dt_in, B, C = torch.split(self.x_proj(xc), [r, n, n], dim=-1)
        return F.softplus(self.dt_proj(dt_in)), B, C

    def forward(
        self, v: torch.Tensor, state: MambaState | None = None, meter: ScratchMeter | None = None
    ) -> tuple[torch.Tensor, MambaState]:
        """Parallel mode over ``v`` of shape ``(B, L, d_model_in)``, continuing from ``state``."""
        if v.dim() == 2:
            y, st = self.forward(v[None], state, meter)
            return y[0], st
        Bsz, L, width = v.shape
        if width != self.cfg.d_model_in:
            raise DimensionError(f"Mamba block expects width {self.cfg.d_model_in}, got {width}")
        if L == 0:
            raise ContractError("Mamba block over an empty input")
        if state is None:
            state = self.new_state(Bsz)
        x, z = self.in_proj(v).chunk(2, dim=-1)
        k = self.cfg.d_conv
        padded = torch.cat((state.conv_state[..., 1:], x.transpose(1, 2)), dim=-1)
        xc = F.conv1d(padded, self.conv_weight.unsqueeze(1), self.conv_bias, groups=self.cfg.d_inner)
        xc = F.silu(xc.transpose(1, 2))
        delta, B, C = self._project(xc)
        y, h_last = selective_scan(xc, delta, self.A, B, C, self.D, h0=state.ssm_state, meter=meter)
        out = self.out_proj(y * F.silu(z))
        window = torch.cat((state.conv_state, x.transpose(1, 2)), dim=-1)[..., -k:]
        return out, MambaState(window, h_last)

    def step(self, v_t: torch.Tensor, state: MambaState) -> tuple[torch.Tensor, MambaState]:
        """One token ``(B, d_model_in)`` in recurrent mode."""
        squeeze = v_t.dim() == 1
        if squeeze:
            v_t = v_t[None]
        x, z = self.in_proj(v_t).chunk(2, dim=-1)
        window = torch.cat((state.conv_state[..., 1:], x.unsqueeze(-1)), dim=-1)
        xc = F.silu((window * self.conv_weight).sum(-1) + self.conv_bias)
        delta, B, C = self._project(xc)
        dA, dB = discretize(delta, self.A, B)
        h = dA * state.ssm_state + dB * xc.unsqueeze(-1)
        y = (h @ C.unsqueeze(-1)).squeeze(-1) + self.D * xc
        out = self.out_proj(y * F.silu(z))
        return (out[0] if squeeze else out), MambaState(window, h)

    def forward_recurrent(self, v: torch.Tensor, state: MambaState | None = None) -> tuple[torch.Tensor, MambaState]:
        """Token-by-token evaluation of ``(B, L, d_model_in)``; the reference for :meth:`forward`."""
        squeeze = v.dim() == 2
        if squeeze:
            v = v[None]
        state = self.new_state(v.shape[0]) if state is None else state
        outs = []
        for t in range(v.shape[1]):
            y, state = self.step(v[:, t], state)
            outs.append(y)
        out = torch.stack(outs, 1)
        return (out[0] if squeeze else out), state


def mamba_forward_parallel(v: torch.Tensor, params: MambaBlock) -> torch.Tensor:
    return params(v)[0]


def mamba_step(v_t: torch.Tensor, params: MambaBlock, state: MambaState) -> tuple[torch.Tensor, MambaState]:
    return params.step(v_t, state)
