"""Recency ratio, recency-aware index (RA-I) and token-contribution statistics.

Sums use :func:`math.fsum`, so every ratio is the correctly rounded quotient of
correctly rounded sums: results do not depend on summation order and compare
exactly against any exact recomputation.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionRecord
from .tensor import ContractError, load_tensors, save_tensors


class ConfigError(ContractError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class RRConfig:
    band_k: int
    rr_threshold: float = 0.8
    exclude_first_token: bool = True

    def __post_init__(self) -> None:
        if int(self.band_k) != self.band_k or self.band_k <= 0:
            raise ConfigError(f"band_k must be a positive integer, got {self.band_k}")
        if not 0.0 <= self.rr_threshold <= 1.0:
            raise ConfigError(f"rr_threshold must lie in [0, 1], got {self.rr_threshold}")

    @classmethod
    def for_length(cls, length: int, **kw) -> RRConfig:
        """Default band of ``ceil(L / 10)``."""
        return cls(band_k=max(1, math.ceil(length / 10)), **kw)


def recency_ratio(A: np.ndarray, cfg: RRConfig) -> float:
    """Share of attention mass within ``|i - j| <= k`` of the diagonal.

    With ``exclude_first_token`` column 0 is dropped from both sums, which also
    removes row 0 (its only causal entry). A zero denominator gives 0.
    """
    if cfg.band_k <= 0:
        raise ConfigError("band_k must be positive")
    A = np.asarray(A, dtype=np.float64)
    L = A.shape[-1]
    if A.shape != (L, L):
        raise InputError(f"attention matrix must be square, got {A.shape}")
    i, j = np.indices((L, L))
    keep = j > 0 if cfg.exclude_first_token else np.ones((L, L), dtype=bool)
    den = math.fsum(A[keep].tolist())
    if den == 0.0:
        return 0.0
    num = math.fsum(A[keep & (np.abs(i - j) <= cfg.band_k)].tolist())
    return num / den


@dataclass
class RecencyReport:
    cfg: RRConfig
    rr_values: np.ndarray  # (n_layers, n_heads, n_samples)
    ra_index: np.ndarray  # (n_layers, n_heads) int

    @property
    def n_samples(self) -> int:
        return self.rr_values.shape[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ra_index.shape

    def ranking(self) -> list[tuple[int, int, int]]:
        """(layer, head, ra_index) in replacement priority order."""
        n_layers, n_heads = self.shape
        cells = [(int(self.ra_index[l, h]), l, h) for l in range(n_layers) for h in range(n_heads)]
        cells.sort(key=lambda c: (-c[0], c[1], c[2]))
        return [(l, h, r) for r, l, h in cells]


SampleRecords = Sequence[AttentionRecord]


def _weights_per_sample(records: Sequence[SampleRecords]) -> list[np.ndarray]:
    """Stack each sample's layers into ``(n_layers, n_heads, L, L)`` after checking layout."""
    if not records:
        raise InputError("no samples")
    out = []
    layout = None
    for s, sample in enumerate(records):
        for l, rec in enumerate(sample):
            if rec.heads != tuple(range(len(rec.heads))):
                raise InputError(f"sample {s} layer {l}: record does not cover heads 0..H-1")
        w = np.stack([np.asarray(rec.weights, dtype=np.float64) for rec in sample])
        if layout is None:
            layout = w.shape
        elif w.shape != layout:
            raise InputError(f"sample {s} has layout {w.shape}, expected {layout}")
        out.append(w)
    return out


def build_report(records: Sequence[SampleRecords], cfg: RRConfig) -> RecencyReport:
    """RR per (layer, head, sample) and the count of samples with RR above threshold."""
    ws = _weights_per_sample(records)
    n_layers, n_heads = ws[0].shape[:2]
    rr = np.empty((n_layers, n_heads, len(ws)))
    for s, w in enumerate(ws):
        for l in range(n_layers):
            for h in range(n_heads):
                rr[l, h, s] = recency_ratio(w[l, h], cfg)
    ra = (rr > cfg.rr_threshold).sum(axis=-1).astype(np.int64)
    return RecencyReport(cfg, rr, ra)


@dataclass
class ContributionStats:
    """Mean contribution of token 0 vs later tokens, with 95% half-widths, per (layer, head)."""

    n_samples: int
    first_l1: np.ndarray
    first_l1_ci: np.ndarray
    first_l2: np.ndarray
    first_l2_ci: np.ndarray
    other_l1: np.ndarray
    other_l1_ci: np.ndarray
    other_l2: np.ndarray
    other_l2_ci: np.ndarray


def _sample_contributions(A: np.ndarray, norms: np.ndarray) -> tuple[float, float]:
    """Mean of ``A[t, 0] * n[0]`` over rows, and of ``A[t, i] * n[i]`` over ``1 <= i <= t``."""
    L = A.shape[-1]
    c = A * norms[None, :]
    first = float(np.mean(c[:, 0]))
    i, j = np.tril_indices(L, k=-1)
    mask = j >= 1
    later = c[i[mask], j[mask]]
    diag = np.diagonal(c)[1:]
    other = float(np.mean(np.concatenate((later, diag)))) if L > 1 else float("nan")
    return first, other


def _mean_ci(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=-1)
    n = x.shape[-1]
    if n < 2:
        return mean, np.full(mean.shape, np.nan)
    return mean, 1.96 * x.std(axis=-1, ddof=1) / math.sqrt(n)


def contribution_stats(records: Sequence[SampleRecords]) -> ContributionStats:
    """Attention weight times per-head value norm, aggregated across samples."""
    ws = _weights_per_sample(records)
    n_layers, n_heads = ws[0].shape[:2]
    S = len(ws)
    vals = {key: np.empty((n_layers, n_heads, S)) for key in ("f1", "f2", "o1", "o2")}
    for s, sample in enumerate(records):
        for l, rec in enumerate(sample):
            for h in range(n_heads):
                A = ws[s][l, h]
                for norm, tag in ((rec.head_value_l1[h], "1"), (rec.head_value_l2[h], "2")):
                    f, o = _sample_contributions(A, np.asarray(norm, dtype=np.float64))
                    vals["f" + tag][l, h, s] = f
                    vals["o" + tag][l, h, s] = o
    f1, f1c = _mean_ci(vals["f1"])
    f2, f2c = _mean_ci(vals["f2"])
    o1, o1c = _mean_ci(vals["o1"])
    o2, o2c = _mean_ci(vals["o2"])
    return ContributionStats(S, f1, f1c, f2, f2c, o1, o1c, o2, o2c)


# ---------------------------------------------------------------- file formats


def save_records(path: str | Path, sample: SampleRecords) -> None:
    """One sample's records as a tensor container (``layer{i}.head{h}.attn`` etc.)."""
    tensors = {}
    for i, rec in enumerate(sample):
        for slot, h in enumerate(rec.heads):
            tensors[f"layer{i}.head{h}.attn"] = np.asarray(rec.weights[slot], dtype=np.float64)
            tensors[f"layer{i}.head{h}.value_l1"] = np.asarray(rec.head_value_l1[slot], dtype=np.float64)
            tensors[f"layer{i}.head{h}.value_l2"] = np.asarray(rec.head_value_l2[slot], dtype=np.float64)
        tensors[f"layer{i}.value_l1"] = np.asarray(rec.value_l1, dtype=np.float64)
        tensors[f"layer{i}.value_l2"] = np.asarray(rec.value_l2, dtype=np.float64)
    save_tensors(path, tensors)


def load_records(path: str | Path) -> list[AttentionRecord]:
    t = {k: v.numpy() for k, v in load_tensors(path).items()}
    out = []
    i = 0
    while f"layer{i}.value_l1" in t:
        heads = []
        h = 0
        while f"layer{i}.head{h}.attn" in t:
            heads.append(h)
            h += 1
        L = t[f"layer{i}.value_l1"].shape[0]

        def stack(suffix: str, shape: tuple[int, ...]) -> np.ndarray:
            if not heads:
                return np.zeros((0, *shape))
            return np.stack([t[f"layer{i}.head{h}.{suffix}"] for h in heads])

        out.append(
            AttentionRecord(
                tuple(heads),
                stack("attn", (L, L)),
                stack("value_l1", (L,)),
                stack("value_l2", (L,)),
                t[f"layer{i}.value_l1"],
                t[f"layer{i}.value_l2"],
            )
        )
        i += 1
    if not out:
        raise InputError(f"{path}: no attention records")
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def write_rr_csv(report: RecencyReport, path: str | Path) -> None:
    n_layers, n_heads = report.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "sample", "rr"])
        for l in range(n_layers):
            for h in range(n_heads):
                for s in range(report.n_samples):
                    w.writerow([l, h, s, _fmt(report.rr_values[l, h, s])])


def write_rai_csv(report: RecencyReport, path: str | Path) -> None:
    n_layers, n_heads = report.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "ra_index"])
        for l in range(n_layers):
            for h in range(n_heads):
                w.writerow([l, h, int(report.ra_index[l, h])])


def write_ranking_csv(report: RecencyReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "layer", "head", "ra_index"])
        for rank, (l, h, r) in enumerate(report.ranking()):
            w.writerow([rank, l, h, r])


def read_rai_csv(path: str | Path) -> np.ndarray:
    """RA-I table back into an ``(n_layers, n_heads)`` array."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["layer"]), int(row["head"]), int(row["ra_index"])))
    if not rows:
        raise InputError(f"{path}: empty RA-I table")
    n_layers = max(r[0] for r in rows) + 1
    n_heads = max(r[1] for r in rows) + 1
    ra = np.full((n_layers, n_heads), -1, dtype=np.int64)
    for l, h, r in rows:
        ra[l, h] = r
    if (ra < 0).any():
        raise InputError(f"{path}: RA-I table does not cover every (layer, head)")
    return ra


def write_contribution_csv(stats: ContributionStats, path: str | Path) -> None:
    cols = ["first_l1", "first_l1_ci", "other_l1", "other_l1_ci", "first_l2", "first_l2_ci", "other_l2", "other_l2_ci"]
    n_layers, n_heads = stats.first_l1.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "n_samples", *cols])
        for l in range(n_layers):
            for h in range(n_heads):
                w.writerow([l, h, stats.n_samples, *(_fmt(getattr(stats, c)[l, h]) for c in cols)])


def write_rr_config(cfg: RRConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
