import pytest
import torch

from recurformer.attention import AttentionConfig
from recurformer.cache import (
    GENERATION,
    PREFILL,
    LedgerMismatchError,
    CacheStats,
    attention_cache_elements,
    check_ledger,
    closed_form_fraction,
    fraction_table,
    generation_increment,
    llama2_7b_shape,
    mamba_cache_elements,
    measured_stats,
    write_stats_csv,
)
from recurformer.model import HeadAssignment, ModelConfig, RecurFormer, per_layer_assignment, select_heads
from recurformer.ssm import MambaConfig, mamba_state_element_count

import numpy as np

BETAS = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)
CS_60K = (1.0000, 0.7500, 0.5000, 0.2500, 0.1000, 0.0010)


def toy(n_kv=4):
    return ModelConfig(2, AttentionConfig(32, 8, n_kv), 40, MambaConfig(1, d_state=4))


def test_beta_zero_fraction_is_exactly_one():
    cfg = llama2_7b_shape()
    assert closed_form_fraction(cfg, HeadAssignment.none(32, 32), 10240) == 1.0


def test_llama_shape_table():
    cfg = llama2_7b_shape()
    rows = fraction_table(cfg, BETAS, (10240, 61440))
    for (beta, (cs10, cs60)), want in zip(rows, CS_60K):
        assert abs(cs60 - want) <= 0.005, beta
        assert abs(cs10 - want) <= 0.01, beta


def test_beta_point_nine_keeps_102_heads():
    cfg = llama2_7b_shape()
    a = select_heads(np.zeros((32, 32)), 0.9)
    assert 32 * 32 - a.n_replaced == 102
    # replaced heads fill whole layers first: 28 full layers + 26 heads of layer 28
    assert [len(h) for h in a.heads_m[27:30]] == [32, 26, 0]
    retained = 102 * 2 * 61440 * 128
    mamba = 28 * mamba_state_element_count(MambaConfig(32 * 128, 2, 4, 16, 256))
    mamba += mamba_state_element_count(MambaConfig(26 * 128, 2, 4, 16, 256))
    assert closed_form_fraction(cfg, a, 61440) == (retained + mamba) / (32 * 32 * 2 * 61440 * 128)


def test_fraction_non_increasing_in_length():
    cfg = llama2_7b_shape()
    a = select_heads(np.zeros((32, 32)), 0.5)
    vals = [closed_form_fraction(cfg, a, l) for l in (1, 10, 100, 1000, 10240, 61440, 10**6)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


def test_gqa_fraction_is_step_shaped():
    cfg = ModelConfig(1, AttentionConfig(64, 8, 2), 10, MambaConfig(1, d_state=2))
    att = [attention_cache_elements(cfg, HeadAssignment(8, (tuple(range(k)),)), 10) for k in range(9)]
    # kv-head 0 serves heads 0..3; it is dropped only once all four are replaced
    assert att[:4] == [att[0]] * 4 and att[4] == att[0] // 2 and att[8] == 0


def test_ledger_toy_half_replaced():
    cfg = toy()
    a = per_layer_assignment(2, 8, 0.5)
    m = RecurFormer(cfg, a, seed=0).double()
    stats = measured_stats(m, torch.arange(64) % 40, 64)
    assert len(stats) == 65 and stats[0].phase == PREFILL and stats[-1].phase == GENERATION
    check_ledger(stats, cfg, a)
    inc = generation_increment(cfg, a)
    for s0, s1 in zip(stats, stats[1:]):
        assert s1.attention_elements - s0.attention_elements == inc
        assert s1.mamba_elements == s0.mamba_elements == mamba_cache_elements(cfg, a)


def test_all_replaced_has_no_attention_cache():
    cfg = toy()
    a = HeadAssignment.every(2, 8)
    m = RecurFormer(cfg, a, seed=1)
    stats = measured_stats(m, [1, 2, 3], 1000)
    assert all(s.attention_elements == 0 for s in stats)
    assert len({s.mamba_elements for s in stats}) == 1
    check_ledger(stats, cfg, a)


def test_no_replacement_has_no_mamba_state():
    cfg = toy()
    a = HeadAssignment.none(2, 8)
    stats = measured_stats(RecurFormer(cfg, a, seed=2), [5, 6], 10)
    assert all(s.mamba_elements == 0 for s in stats)
    assert stats[1].attention_elements - stats[0].attention_elements == 2 * 2 * 4 * 4


def test_ledger_mismatch_raises():
    cfg = toy()
    a = per_layer_assignment(2, 8, 0.5)
    bogus = [CacheStats(0, PREFILL, 3, 1, 0, 0)]
    with pytest.raises(LedgerMismatchError):
        check_ledger(bogus, cfg, a)


def test_prefill_scratch_quadratic_vs_streaming_linear():
    cfg = toy()
    a = per_layer_assignment(2, 8, 0.5)
    m = RecurFormer(cfg, a, seed=3)
    peaks = {}
    for lp in (32, 64):
        for chunk in (None, 1):
            peaks[lp, chunk] = measured_stats(m, torch.arange(lp) % 40, 0, query_chunk=chunk)[0].peak_transient_elements
    # materialized scores: 4 retained heads x lp x lp
    assert peaks[32, None] == 4 * 32 * 32
    assert peaks[64, None] == 4 * peaks[32, None]
    # streaming: attention row 4 x lp, below the Mamba scan scratch which is linear in lp
    assert peaks[64, 1] == 2 * peaks[32, 1]


def test_stats_csv(tmp_path):
    cfg = toy()
    a = per_layer_assignment(2, 8, 0.5)
    stats = measured_stats(RecurFormer(cfg, a, seed=4), [1, 2, 3, 4], 2)
    write_stats_csv(stats, cfg, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "step,phase,attention_elements,mamba_elements,fraction"
    assert lines[1].startswith("0,prefill,") and len(lines) == 4
