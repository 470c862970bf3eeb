import math
import random

import mpmath
import pytest
import torch

from recurformer.ssm import (
    MambaBlock,
    MambaConfig,
    MambaState,
    associative_scan,
    discretize,
    mamba_forward_parallel,
    mamba_state_element_count,
    mamba_step,
    sequential_scan,
)
from recurformer.tensor import ContractError, seeded_generator

from oracles import central_difference, probe_gradient, rel_err


def block(d_in=4, d_state=4, d_conv=3, k_epd=2, seed=0, dt_rank=None):
    cfg = MambaConfig(d_in, k_epd=k_epd, d_conv=d_conv, d_state=d_state, dt_rank=dt_rank)
    b = MambaBlock(cfg, seeded_generator(seed)).double()
    with torch.no_grad():
        b.conv_bias.normal_(0, 0.5, generator=seeded_generator(seed + 1))
    return b


def test_config_inner_width_must_be_integral():
    assert MambaConfig(4, k_epd=1.5).d_inner == 6
    with pytest.raises(ContractError):
        MambaConfig(3, k_epd=0.5)
    assert MambaConfig(4096).rank == 256
    assert MambaConfig(128).rank == 8


def test_state_counts():
    assert mamba_state_element_count(MambaConfig(128, 2, 4, 16)) == 5120
    assert mamba_state_element_count(MambaConfig(1, 1, 1, 1)) == 2
    assert MambaState.zeros(MambaConfig(128)).element_count() == 5120


def test_discretize_examples():
    A = torch.tensor([[-1.0]], dtype=torch.float64)
    dA, dB = discretize(torch.tensor([math.log(2)], dtype=torch.float64), A, torch.tensor([3.0], dtype=torch.float64))
    assert abs(dA.item() - 0.5) <= 1e-15
    assert abs(dB.item() - 3 * math.log(2)) <= 1e-15
    tiny, _ = discretize(torch.tensor([1e-300], dtype=torch.float64), A, torch.tensor([1.0], dtype=torch.float64))
    assert tiny.item() == 1.0


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(ContractError):
        discretize(torch.tensor([0.1, 0.0]), -torch.ones(2, 3), torch.ones(3))


def test_discretize_matches_high_precision():
    mpmath.mp.dps = 40
    g = seeded_generator(12)
    delta = torch.rand(5, generator=g, dtype=torch.float64) * 2 + 1e-3
    A = -torch.rand(5, 3, generator=g, dtype=torch.float64) * 10
    B = torch.randn(3, generator=g, dtype=torch.float64)
    dA, dB = discretize(delta, A, B)
    for i in range(5):
        for n in range(3):
            want_a = mpmath.exp(mpmath.mpf(delta[i].item()) * mpmath.mpf(A[i, n].item()))
            want_b = mpmath.mpf(delta[i].item()) * mpmath.mpf(B[n].item())
            assert abs(dA[i, n].item() - float(want_a)) <= 1e-12 * abs(float(want_a))
            assert abs(dB[i, n].item() - float(want_b)) <= 1e-12 * abs(float(want_b))


@pytest.mark.parametrize("L", [1, 2, 3, 7, 16, 33])
def test_associative_scan_matches_loop(L):
    g = seeded_generator(L)
    a = torch.rand(2, L, 3, generator=g, dtype=torch.float64)
    b = torch.randn(2, L, 3, generator=g, dtype=torch.float64)
    assert (associative_scan(a, b) - sequential_scan(a, b)).abs().max() <= 1e-12


def test_single_token_modes_identical():
    b = block()
    v = torch.randn(1, 4, dtype=torch.float64)
    with torch.no_grad():
        par, _ = b(v)
        rec, _ = b.forward_recurrent(v)
    assert torch.allclose(par, rec, rtol=0, atol=1e-15)


def test_parallel_matches_recurrent_seed7():
    b = block(d_in=8, d_state=8, seed=7)
    v = torch.randn(64, 8, generator=seeded_generator(7), dtype=torch.float64)
    with torch.no_grad():
        assert rel_err(mamba_forward_parallel(v, b), b.forward_recurrent(v)[0]) <= 1e-5


def test_step_matches_parallel_rows():
    b = block(d_in=6, seed=3)
    v = torch.randn(32, 6, generator=seeded_generator(3), dtype=torch.float64)
    state = b.new_state()
    rows = []
    with torch.no_grad():
        par = mamba_forward_parallel(v, b)
        for t in range(32):
            y, state = mamba_step(v[t], b, state)
            rows.append(y[0] if y.dim() == 2 else y)
    assert rel_err(torch.stack(rows), par) <= 1e-5


def test_chunked_parallel_continues_state():
    b = block(seed=4)
    v = torch.randn(2, 20, 4, generator=seeded_generator(4), dtype=torch.float64)
    with torch.no_grad():
        full, st_full = b(v)
        a, st = b(v[:, :7])
        c, st = b(v[:, 7:], st)
    assert (torch.cat((a, c), 1) - full).abs().max() <= 1e-12
    assert (st.ssm_state - st_full.ssm_state).abs().max() <= 1e-12
    assert torch.equal(st.conv_state, st_full.conv_state)


def test_full_decay_limit_has_no_carried_state():
    b = block(seed=5)
    with torch.no_grad():
        b.dt_proj.bias.fill_(50.0)
        b.A_log.fill_(5.0)
        v = torch.randn(6, 4, generator=seeded_generator(5), dtype=torch.float64)
        par, _ = b(v)
        rec, _ = b.forward_recurrent(v)
        assert rel_err(par, rec) <= 1e-9
        # no carried ssm state; the conv window still looks back
        x, z = b.in_proj(v[None]).chunk(2, -1)
        padded = torch.nn.functional.pad(x.transpose(1, 2), (b.cfg.d_conv - 1, 0))
        xc = torch.nn.functional.silu(
            torch.nn.functional.conv1d(padded, b.conv_weight.unsqueeze(1), b.conv_bias, groups=b.cfg.d_inner)
        ).transpose(1, 2)
        delta, B, C = b._project(xc)
        _, dB = discretize(delta, b.A, B)
        y = ((dB * xc.unsqueeze(-1)) @ C.unsqueeze(-1)).squeeze(-1) + b.D * xc
        want = b.out_proj(y * torch.nn.functional.silu(z))[0]
    assert rel_err(par, want) <= 1e-9


def test_zero_input_gives_zero_output():
    b = block()
    with torch.no_grad():
        b.conv_bias.zero_()
        y, _ = mamba_step(torch.zeros(4, dtype=torch.float64), b, b.new_state())
    assert torch.equal(y, torch.zeros_like(y))


def test_state_size_constant_and_bounded_over_long_rollout():
    b = block(d_in=2, d_state=4, seed=8)
    state = b.new_state()
    n0 = state.element_count()
    inputs = torch.rand(10_000, 2, generator=seeded_generator(8), dtype=torch.float64) * 2 - 1
    a_sup = drive_sup = h_sup = 0.0
    with torch.no_grad():
        for t in range(10_000):
            x, _ = b.in_proj(inputs[t][None]).chunk(2, -1)
            window = torch.cat((state.conv_state[..., 1:], x.unsqueeze(-1)), -1)
            xc = torch.nn.functional.silu((window * b.conv_weight).sum(-1) + b.conv_bias)
            delta, B, _ = b._project(xc)
            dA, dB = discretize(delta, b.A, B)
            a_sup = max(a_sup, float(dA.max()))
            drive_sup = max(drive_sup, float((dB * xc.unsqueeze(-1)).abs().max()))
            _, state = mamba_step(inputs[t], b, state)
            assert state.element_count() == n0
            h_sup = max(h_sup, float(state.ssm_state.abs().max()))
    assert a_sup < 1.0
    assert h_sup <= drive_sup / (1.0 - a_sup)


def test_abar_strictly_inside_unit_interval():
    b = block(seed=9)
    v = torch.randn(1, 50, 4, generator=seeded_generator(9), dtype=torch.float64) * 3
    with torch.no_grad():
        x, _ = b.in_proj(v).chunk(2, -1)
        delta, B, _ = b._project(torch.nn.functional.silu(x))
        dA, _ = discretize(delta, b.A, B)
    assert bool(((dA > 0) & (dA < 1)).all())


def test_causality():
    b = block(seed=10)
    v = torch.randn(12, 4, generator=seeded_generator(10), dtype=torch.float64)
    with torch.no_grad():
        base = mamba_forward_parallel(v, b)
        for j in (0, 5, 11):
            w = v.clone()
            w[j] += 1.0
            out = mamba_forward_parallel(w, b)
            assert torch.equal(out[:j], base[:j])


def test_first_token_sensitivity_is_continuous_and_nonzero():
    b = block(seed=11)
    v = torch.randn(8, 4, generator=seeded_generator(11), dtype=torch.float64)
    direction = v[0] / v[0].norm()
    outs = []
    with torch.no_grad():
        for s in (0.0, 1e-6, 2e-6, 1.0):
            w = v.clone()
            w[0] = s * direction
            outs.append(mamba_forward_parallel(w, b)[-1])
    assert (outs[1] - outs[0]).abs().max() < 1e-4
    assert (outs[2] - outs[1]).abs().max() < 1e-4
    assert (outs[3] - outs[0]).abs().max() > 1e-8


def test_gradients_match_finite_differences_full():
    b = block(d_in=2, d_state=2, d_conv=2, seed=12)
    v = torch.randn(5, 2, generator=seeded_generator(12), dtype=torch.float64, requires_grad=True)
    w = torch.randn(5, 2, generator=seeded_generator(13), dtype=torch.float64)
    loss = lambda: (mamba_forward_parallel(v, b) * w).sum()
    params = [v] + list(b.parameters())
    grads = torch.autograd.grad(loss(), params)
    fd = central_difference(loss, params, eps=1e-6)
    for gr, f in zip(grads, fd):
        assert rel_err(gr, f) <= 1e-4


def test_gradient_probes():
    rng = random.Random(14)
    for trial in range(20):
        b = block(d_in=4, d_state=4, seed=100 + trial)
        v = torch.randn(9, 4, generator=seeded_generator(trial), dtype=torch.float64)
        w = torch.randn(9, 4, generator=seeded_generator(trial + 50), dtype=torch.float64)
        loss = lambda: (mamba_forward_parallel(v, b) * w).sum()
        params = list(b.parameters())
        p = params[rng.randrange(len(params))]
        d = torch.randn(p.shape, generator=seeded_generator(trial + 99), dtype=torch.float64)
        (g,) = torch.autograd.grad(loss(), [p])
        fd = probe_gradient(loss, p, d, eps=1e-6)
        assert abs(float((g * d).sum()) - fd) <= 1e-4 * max(abs(fd), 1e-8)
