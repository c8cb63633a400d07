"""The MatMamba block: a Mamba2 mixer whose inner width can be prefix-sliced.

For a Matryoshka dimension ``m`` the block uses ``d_i = expand * m`` inner
channels and ``h_i = d_i / d_head`` heads. Every dimension-dependent weight is
read through a prefix view of the universal buffer, so a forward at ``m`` only
ever touches (and sends gradient to) the leading ``d_i`` rows/columns and the
leading ``h_i`` heads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterator, NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, Tensor
from .errors import DimensionError, InvalidGranularityError
from .ssd import D_CONV, SsmInputs, StepState, causal_conv1d, conv_step, ssm_chunked, ssm_step

RMS_EPS = 1e-5


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    expand: int = 2
    d_head: int = 64
    d_state: int = 128
    d_conv: int = D_CONV
    d_inner: int | None = None  # set only for standalone (extracted) blocks

    def __post_init__(self):
        if self.d_conv != D_CONV:
            raise DimensionError(f"only kernel size {D_CONV} is supported")
        if self.inner % self.d_head:
            raise InvalidGranularityError(
                f"d_inner={self.inner} is not a multiple of d_head={self.d_head}")

    @property
    def inner(self) -> int:
        return self.expand * self.d_model if self.d_inner is None else self.d_inner

    @property
    def n_heads(self) -> int:
        return self.inner // self.d_head

    @property
    def max_m(self) -> int:
        return self.inner // self.expand


class SliceDims(NamedTuple):
    m: int
    d_inner: int
    n_heads: int


def resolve_slice(cfg: BlockConfig, m: int) -> SliceDims:
    if not 0 < m <= cfg.max_m:
        raise InvalidGranularityError(f"m={m} outside (0, {cfg.max_m}]")
    d_i = cfg.expand * m
    if d_i % cfg.d_head:
        raise InvalidGranularityError(
            f"m={m}: expand*m={d_i} is not a multiple of d_head={cfg.d_head}")
    return SliceDims(m, d_i, d_i // cfg.d_head)


@dataclass
class BlockParams:
    W_z: Tensor  # [d_inner, d_model]
    W_x: Tensor  # [d_inner, d_model]
    W_B: Tensor  # [d_state, d_model]
    W_C: Tensor  # [d_state, d_model]
    W_dt: Tensor  # [n_heads, d_model]
    dt_bias: Tensor  # [n_heads]
    A_log: Tensor  # [n_heads]
    D: Tensor  # [n_heads]
    W_conv_x: Tensor  # [d_inner, 4]
    W_conv_BC: Tensor  # [2 * d_state, 4]
    conv_bias: Tensor  # [d_inner + 2 * d_state]
    inner_norm_w: Tensor  # [d_inner]
    pre_norm_w: Tensor  # [d_model]
    W_out: Tensor  # [d_model, d_inner]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    @classmethod
    def param_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def block_shapes(cfg: BlockConfig) -> dict[str, tuple[int, ...]]:
    d, di, n, h, k = cfg.d_model, cfg.inner, cfg.d_state, cfg.n_heads, cfg.d_conv
    return {
        "W_z": (di, d), "W_x": (di, d), "W_B": (n, d), "W_C": (n, d), "W_dt": (h, d),
        "dt_bias": (h,), "A_log": (h,), "D": (h,),
        "W_conv_x": (di, k), "W_conv_BC": (2 * n, k), "conv_bias": (di + 2 * n,),
        "inner_norm_w": (di,), "pre_norm_w": (d,), "W_out": (d, di),
    }


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples cut at ``bound`` standard deviations, rescaled so the result has std ``std``."""
    pdf = math.exp(-0.5 * bound * bound) / math.sqrt(2 * math.pi)
    mass = math.erf(bound / math.sqrt(2))
    sigma = std / math.sqrt(1.0 - 2.0 * bound * pdf / mass)
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > bound * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > bound * sigma
    return out.astype(DTYPE)


def init_block(cfg: BlockConfig, rng: np.random.Generator) -> BlockParams:
    shapes = block_shapes(cfg)
    h = cfg.n_heads
    # softplus(dt_bias) lands log-uniformly in [1e-3, 1e-1]
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=h))
    dt_bias = dt + np.log(-np.expm1(-dt))
    conv_bound = 1.0 / np.sqrt(cfg.d_conv)
    values = {
        "W_z": trunc_normal(rng, shapes["W_z"]),
        "W_x": trunc_normal(rng, shapes["W_x"]),
        "W_B": trunc_normal(rng, shapes["W_B"]),
        "W_C": trunc_normal(rng, shapes["W_C"]),
        "W_dt": trunc_normal(rng, shapes["W_dt"]),
        "dt_bias": dt_bias,
        "A_log": np.log(rng.uniform(1.0, 16.0, size=h)),
        "D": np.ones(h),
        "W_conv_x": rng.uniform(-conv_bound, conv_bound, size=shapes["W_conv_x"]),
        "W_conv_BC": rng.uniform(-conv_bound, conv_bound, size=shapes["W_conv_BC"]),
        "conv_bias": np.zeros(shapes["conv_bias"]),
        "inner_norm_w": np.ones(shapes["inner_norm_w"]),
        "pre_norm_w": np.ones(shapes["pre_norm_w"]),
        "W_out": trunc_normal(rng, shapes["W_out"]),
    }
    return BlockParams(**{k: ag.parameter(v) for k, v in values.items()})


def block_from_arrays(cfg: BlockConfig, arrays: dict[str, np.ndarray]) -> BlockParams:
    shapes = block_shapes(cfg)
    missing = set(shapes) - set(arrays)
    if missing:
        raise DimensionError(f"missing block tensors: {sorted(missing)}")
    for k, shape in shapes.items():
        if tuple(arrays[k].shape) != shape:
            raise DimensionError(f"{k} has shape {tuple(arrays[k].shape)}, expected {shape}")
    return BlockParams(**{k: ag.parameter(arrays[k]) for k in shapes})


# ------------------------------------------------------------------ slicing

def _conv_bias_views(params: BlockParams, cfg: BlockConfig, d_i: int) -> tuple[Tensor, Tensor]:
    di, n = cfg.inner, cfg.d_state
    return ag.prefix_slice(params.conv_bias, 0, d_i), ag.slice_axis(params.conv_bias, 0, di, di + 2 * n)


def sliced_weights(params: BlockParams, cfg: BlockConfig, m: int) -> dict[str, Tensor]:
    """The views a forward at ``m`` reads; each one shares storage with ``params``."""
    _, d_i, h_i = resolve_slice(cfg, m)
    bias_x, bias_bc = _conv_bias_views(params, cfg, d_i)
    return {
        "W_z": ag.prefix_slice(params.W_z, 0, d_i),
        "W_x": ag.prefix_slice(params.W_x, 0, d_i),
        "W_B": params.W_B,
        "W_C": params.W_C,
        "W_dt": ag.prefix_slice(params.W_dt, 0, h_i),
        "dt_bias": ag.prefix_slice(params.dt_bias, 0, h_i),
        "A_log": ag.prefix_slice(params.A_log, 0, h_i),
        "D": ag.prefix_slice(params.D, 0, h_i),
        "W_conv_x": ag.prefix_slice(params.W_conv_x, 0, d_i),
        "W_conv_BC": params.W_conv_BC,
        "conv_bias_x": bias_x,
        "conv_bias_BC": bias_bc,
        "inner_norm_w": ag.prefix_slice(params.inner_norm_w, 0, d_i),
        "W_out": ag.prefix_slice(params.W_out, 1, d_i),
    }


def materialize_block(params: BlockParams, cfg: BlockConfig, m: int) -> tuple[BlockParams, BlockConfig]:
    """Copy the ``m``-slice into a standalone block whose full width is ``d_i``."""
    _, d_i, _ = resolve_slice(cfg, m)
    with ag.no_grad():
        w = sliced_weights(params, cfg, m)
        arrays = {k: v.data.copy() for k, v in w.items() if not k.startswith("conv_bias")}
        arrays["conv_bias"] = np.concatenate([w["conv_bias_x"].data, w["conv_bias_BC"].data])
        arrays["pre_norm_w"] = params.pre_norm_w.data.copy()
    sub_cfg = replace(cfg, d_inner=d_i)
    return block_from_arrays(sub_cfg, arrays), sub_cfg


# ------------------------------------------------------------------ forward

def _input_projection(w: dict[str, Tensor]) -> Tensor:
    # one fused projection, assembled from the sliced pieces
    return ag.concat([w["W_z"], w["W_x"], w["W_B"], w["W_C"], w["W_dt"]], axis=0)


def block_forward(params: BlockParams, cfg: BlockConfig, u: Tensor, m: int | None = None,
                  chunk: int = 16, return_state: bool = False):
    """Mixer output ``[b, l, d_model]`` at granularity ``m`` (default: full width)."""
    m = cfg.max_m if m is None else m
    _, d_i, h_i = resolve_slice(cfg, m)
    if u.ndim != 3 or u.shape[-1] != cfg.d_model:
        raise DimensionError(f"block input {u.shape} does not end in d_model={cfg.d_model}")
    b, l, _ = u.shape
    n, P = cfg.d_state, cfg.d_head
    w = sliced_weights(params, cfg, m)

    zxbcdt = ag.linear(u, _input_projection(w))
    z, xBC, dt = ag.split(zxbcdt, [d_i, d_i + 2 * n, h_i], axis=-1)
    conv_w = ag.concat([w["W_conv_x"], w["W_conv_BC"]], axis=0)
    conv_b = ag.concat([w["conv_bias_x"], w["conv_bias_BC"]], axis=0)
    xBC_act = ag.silu(causal_conv1d(xBC, conv_w, conv_b))
    x, B, C = ag.split(xBC_act, [d_i, n, n], axis=-1)

    inputs = SsmInputs(ag.reshape(x, (b, l, h_i, P)), dt, w["A_log"], B, C, w["D"], w["dt_bias"])
    scan = ssm_chunked(inputs, chunk, return_state=return_state)
    y = scan[0] if return_state else scan
    y = ag.reshape(y, (b, l, d_i))
    y = ag.rmsnorm(ag.mul(y, ag.silu(z)), w["inner_norm_w"], RMS_EPS)
    out = ag.linear(y, w["W_out"])
    if not return_state:
        return out
    tail = xBC.data[:, -(D_CONV - 1):, :].transpose(0, 2, 1)
    conv_state = np.zeros((b, d_i + 2 * n, D_CONV - 1), DTYPE)
    conv_state[:, :, D_CONV - 1 - tail.shape[2]:] = tail
    return out, StepState(scan[1], conv_state)


def init_step_state(cfg: BlockConfig, m: int, batch: int) -> StepState:
    _, d_i, h_i = resolve_slice(cfg, m)
    return StepState.zeros(batch, h_i, cfg.d_head, cfg.d_state, d_i + 2 * cfg.d_state)


def block_step(params: BlockParams, cfg: BlockConfig, state: StepState, u_t: np.ndarray,
               m: int | None = None) -> np.ndarray:
    """Single-position mixer output for ``u_t[b, d_model]``; ``state`` advances in place."""
    m = cfg.max_m if m is None else m
    _, d_i, h_i = resolve_slice(cfg, m)
    n, P = cfg.d_state, cfg.d_head
    with ag.no_grad():
        w = {k: v.data for k, v in sliced_weights(params, cfg, m).items()}
    w_in = np.concatenate([w["W_z"], w["W_x"], w["W_B"], w["W_C"], w["W_dt"]], axis=0)
    zxbcdt = u_t @ w_in.T
    z, xBC, dt = np.split(zxbcdt, [d_i, 2 * d_i + 2 * n], axis=-1)
    xBC = conv_step(state.conv_state, xBC,
                    np.concatenate([w["W_conv_x"], w["W_conv_BC"]]),
                    np.concatenate([w["conv_bias_x"], w["conv_bias_BC"]]))
    xBC = xBC * ag._sigmoid(xBC)
    x, B, C = np.split(xBC, [d_i, d_i + n], axis=-1)
    b = u_t.shape[0]
    y, _ = ssm_step(state, x.reshape(b, h_i, P), dt, B, C, w["A_log"], w["D"], w["dt_bias"])
    y = y.reshape(b, d_i) * (z * ag._sigmoid(z))
    y = y / np.sqrt(np.mean(y * y, axis=-1, keepdims=True) + np.float32(RMS_EPS)) * w["inner_norm_w"]
    return (y @ w["W_out"].T).astype(DTYPE, copy=False)


# --------------------------------------------------------------- accounting

def block_param_count(cfg: BlockConfig, m: int | None = None, mode: str = "full") -> int:
    """Learnable parameters of one block at granularity ``m``.

    ``weights-only`` tallies the ten weight tensors (W_z, W_x, W_B, W_C, W_dt,
    D, A, W_conv_x, W_conv_BC, W_out) with W_conv_BC counted per channel
    (2*d_state, kernel taps excluded). ``full`` counts every stored element of
    the sliced tensors, including W_conv_BC's kernel taps, the two norm
    weights, the conv bias and dt_bias.
    """
    m = cfg.max_m if m is None else m
    _, d_i, h_i = resolve_slice(cfg, m)
    d, n, k = cfg.d_model, cfg.d_state, cfg.d_conv
    projections = 2 * d_i * d + 2 * n * d + h_i * d + d * d_i
    if mode == "weights-only":
        return projections + 2 * h_i + d_i * k + 2 * n
    if mode == "full":
        weights = projections + 2 * h_i + d_i * k + 2 * n * k
        return weights + d + d_i + (d_i + 2 * n) + h_i
    raise ValueError(f"unknown count mode {mode!r}")
