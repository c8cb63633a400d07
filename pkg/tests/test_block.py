import numpy as np
import pytest

from matmamba import autograd as ag
from matmamba.autograd import Tensor
from matmamba.block import (
    BlockConfig, block_forward, block_param_count, block_step, init_block, init_step_state, materialize_block,
    resolve_slice, sliced_weights,
)
from matmamba.errors import InvalidGranularityError

import reference as ref

BIG = BlockConfig(d_model=1024, expand=2, d_head=64, d_state=128)


def small_block(d_model=64, d_head=16, d_state=8, seed=0, jitter=0.05):
    cfg = BlockConfig(d_model=d_model, d_head=d_head, d_state=d_state)
    rng = np.random.default_rng(seed)
    params = init_block(cfg, rng)
    for _, t in params.named():
        t.data += (rng.standard_normal(t.shape) * jitter).astype(np.float32)
    return cfg, params


def u_input(b=2, l=8, d=64, seed=1):
    return Tensor(np.random.default_rng(seed).standard_normal((b, l, d)).astype(np.float32))


def ref_arrays(params):
    return {k: v.data.astype(np.float64) for k, v in params.named()}


# ------------------------------------------------------------------- slicing

@pytest.mark.parametrize("m,d_i,h_i", [(512, 1024, 16), (1024, 2048, 32), (768, 1536, 24)])
def test_resolve_slice(m, d_i, h_i):
    assert resolve_slice(BIG, m) == (m, d_i, h_i)


@pytest.mark.parametrize("m", [100, 0, -64, 1056])
def test_resolve_slice_errors(m):
    with pytest.raises(InvalidGranularityError):
        resolve_slice(BIG, m)


def test_slices_are_prefix_views_into_universal_buffers():
    cfg, params = small_block()
    small, large = sliced_weights(params, cfg, 16), sliced_weights(params, cfg, 32)
    for name in small:
        full = getattr(params, name if not name.startswith("conv_bias") else "conv_bias").data
        s, l_ = small[name].data, large[name].data
        assert np.shares_memory(s, full) and np.shares_memory(l_, full)
        # same start address and the small slice is the leading block of the larger one
        assert s.__array_interface__["data"][0] == l_.__array_interface__["data"][0]
        np.testing.assert_array_equal(s, l_[tuple(slice(0, k) for k in s.shape)])


# ------------------------------------------------------------------- forward

def test_full_width_matches_float64_reference():
    cfg, params = small_block()
    u = u_input()
    out = block_forward(params, cfg, u, chunk=4).data
    expect = ref.block(ref_arrays(params), u.data.astype(np.float64), 64, 2, 16, 8)
    assert np.max(np.abs(out - expect)) <= 1e-5


@pytest.mark.parametrize("m", [8, 24, 32, 48])
def test_sliced_matches_float64_reference(m):
    cfg, params = small_block()
    u = u_input()
    out = block_forward(params, cfg, u, m, chunk=4).data
    expect = ref.block(ref_arrays(params), u.data.astype(np.float64), m, 2, 16, 8)
    assert np.max(np.abs(out - expect)) <= 1e-5


def test_full_width_is_plain_block_bit_exact():
    cfg, params = small_block()
    plain, plain_cfg = materialize_block(params, cfg, cfg.d_model)
    u = u_input()
    assert block_forward(params, cfg, u).data.tobytes() == block_forward(plain, plain_cfg, u).data.tobytes()


@pytest.mark.parametrize("m", [8, 32, 64])
def test_zero_input_zero_output(m):
    cfg, params = small_block()
    params.conv_bias.data[:] = 0
    out = block_forward(params, cfg, Tensor(np.zeros((1, 5, 64))), m)
    assert np.all(out.data == 0)


def test_sliced_equals_materialized_standalone():
    cfg, params = small_block(d_model=64, d_head=16)
    sub, sub_cfg = materialize_block(params, cfg, 32)
    u = u_input(l=8)
    a = block_forward(params, cfg, u, 32).data
    b = block_forward(sub, sub_cfg, u).data
    assert np.max(np.abs(a - b)) <= 1e-6


def test_invalid_granularity_in_forward():
    cfg, params = small_block()
    with pytest.raises(InvalidGranularityError):
        block_forward(params, cfg, u_input(), 12)


def test_gradients_outside_slice_are_exactly_zero():
    cfg, params = small_block()
    m = 16
    _, d_i, h_i = resolve_slice(cfg, m)
    ag.sum_(block_forward(params, cfg, u_input(), m)).backward()
    for name in ("W_z", "W_x", "W_conv_x", "inner_norm_w"):
        g = getattr(params, name).grad
        assert np.all(g[d_i:] == 0) and np.any(g[:d_i] != 0), name
    for name in ("W_dt", "dt_bias", "A_log", "D"):
        g = getattr(params, name).grad
        assert np.all(g[h_i:] == 0) and np.any(g[:h_i] != 0), name
    assert np.all(params.W_out.grad[:, d_i:] == 0)
    cb = params.conv_bias.grad
    assert np.all(cb[d_i:cfg.inner] == 0) and np.any(cb[cfg.inner:] != 0)


@pytest.mark.parametrize("m", [16, 64])
def test_step_rollout_matches_forward(m):
    cfg, params = small_block()
    u = u_input(l=11)
    full = block_forward(params, cfg, u, m).data
    state = init_step_state(cfg, m, 2)
    steps = np.stack([block_step(params, cfg, state, u.data[:, t], m) for t in range(11)], axis=1)
    assert np.max(np.abs(steps - full)) <= 1e-4


def test_forward_state_continues_with_steps():
    cfg, params = small_block()
    u = u_input(l=12)
    full = block_forward(params, cfg, u, 32).data
    _, state = block_forward(params, cfg, Tensor(u.data[:, :7]), 32, return_state=True)
    rest = np.stack([block_step(params, cfg, state, u.data[:, t], 32) for t in range(7, 12)], axis=1)
    assert np.max(np.abs(rest - full[:, 7:])) <= 1e-4


# ---------------------------------------------------------------- accounting

def test_weights_only_counts():
    assert block_param_count(BIG, 1024, "weights-only") == 6_594_880
    assert block_param_count(BIG, 512, "weights-only") == 3_428_640
    assert 0.519 <= 3_428_640 / 6_594_880 < 0.520


def test_full_count_decomposition():
    # weights-only plus the W_conv_BC kernel taps (2*128*3 extra) and
    # pre_norm (1024), inner_norm (2048), conv_bias (2048 + 256), dt_bias (32)
    assert block_param_count(BIG, 1024, "full") == 6_594_880 + 768 + 1024 + 2048 + 2304 + 32


def test_full_count_equals_stored_elements():
    cfg, params = small_block()
    assert block_param_count(cfg, None, "full") == sum(t.size for _, t in params.named())
    sub, sub_cfg = materialize_block(params, cfg, 24)
    assert block_param_count(cfg, 24, "full") == sum(t.size for _, t in sub.named())


def test_counts_strictly_increase_with_m():
    ms = [m for m in range(32, 1025, 32)]
    for mode in ("weights-only", "full"):
        counts = [block_param_count(BIG, m, mode) for m in ms]
        assert all(a < b for a, b in zip(counts, counts[1:]))


def test_count_invalid():
    with pytest.raises(InvalidGranularityError):
        block_param_count(BIG, 100)
    with pytest.raises(ValueError):
        block_param_count(BIG, 512, "bogus")
