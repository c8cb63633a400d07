"""Selective state space scan (Mamba2 SSD) and its causal depthwise convolution.

Recurrence per batch row and head, with state ``S`` of shape ``[p, n]``::

    dt  = softplus(dt_raw + dt_bias)
    S   = exp(dt * A) * S + dt * outer(x_t, B_t)      A = -exp(A_log) < 0
    y_t = S @ C_t + D * x_t

``ssm_sequential`` runs it literally and is the correctness reference.
``ssm_chunked`` evaluates the same map in blocks of ``chunk`` positions: a
masked quadratic form inside each block plus a decayed state carried between
blocks. It is built from differentiable primitives, so gradients come for free.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, Tensor
from .errors import DimensionError, NumericError

D_CONV = 4


@dataclass
class SsmInputs:
    x: Tensor  # [b, l, h, p]
    dt_raw: Tensor  # [b, l, h]
    A_log: Tensor  # [h]
    B: Tensor  # [b, l, n], shared by all heads
    C: Tensor  # [b, l, n]
    D: Tensor  # [h]
    dt_bias: Tensor  # [h]

    def check(self) -> tuple[int, int, int, int, int]:
        b, l, h, p = self.x.shape
        n = self.B.shape[-1]
        expected = {
            "dt_raw": (b, l, h), "A_log": (h,), "B": (b, l, n),
            "C": (b, l, n), "D": (h,), "dt_bias": (h,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        return b, l, h, p, n


@dataclass
class StepState:
    """Recurrent cache for token-by-token decoding of one block."""

    ssm_state: np.ndarray  # [b, h, p, n]
    conv_state: np.ndarray  # [b, channels, D_CONV - 1], oldest position first

    @classmethod
    def zeros(cls, batch: int, n_heads: int, head_dim: int, d_state: int, channels: int) -> "StepState":
        return cls(np.zeros((batch, n_heads, head_dim, d_state), DTYPE),
                   np.zeros((batch, channels, D_CONV - 1), DTYPE))


# ------------------------------------------------------------------ convolution

def causal_conv1d(seq: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution: ``y[t] = bias + sum_j w[:, j] * x[t - K + 1 + j]``."""
    b, l, c = seq.shape
    if weights.ndim != 2 or weights.shape[0] != c or bias.shape != (c,):
        raise DimensionError(f"conv weights {weights.shape} / bias {bias.shape} do not fit {c} channels")
    K = weights.shape[1]
    xpad = np.pad(seq.data, ((0, 0), (K - 1, 0), (0, 0)))
    w = weights.data
    out = np.broadcast_to(bias.data, (b, l, c)).copy()
    for j in range(K):
        out += xpad[:, j:j + l, :] * w[:, j]

    def backward(g):
        gx = gw = gb = None
        if seq.requires_grad:
            gpad = np.zeros_like(xpad)
            for j in range(K):
                gpad[:, j:j + l, :] += g * w[:, j]
            gx = gpad[:, K - 1:, :]
        if weights.requires_grad:
            gw = np.stack([np.einsum("blc,blc->c", g, xpad[:, j:j + l, :]) for j in range(K)], axis=1)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return ag._make(out, (seq, weights, bias), backward, "causal_conv1d")


def conv_step(conv_state: np.ndarray, x_t: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Advance the convolution by one position; ``conv_state`` is updated in place."""
    window = np.concatenate([conv_state, x_t[:, :, None]], axis=2)  # [b, c, K]
    y = bias + np.einsum("bck,ck->bc", window, weights)
    conv_state[...] = window[:, :, 1:]
    return y.astype(DTYPE, copy=False)


# ------------------------------------------------------------------------ scans

def _as_arrays(inputs: SsmInputs):
    return (inputs.x.data, inputs.dt_raw.data, inputs.A_log.data, inputs.B.data,
            inputs.C.data, inputs.D.data, inputs.dt_bias.data)


def ssm_sequential(inputs: SsmInputs, return_state: bool = False):
    """Reference recurrence, one timestep at a time (no autodiff)."""
    b, l, h, p, n = inputs.check()
    x, dt_raw, A_log, B, C, D, dt_bias = _as_arrays(inputs)
    A = -np.exp(A_log)
    dt = np.logaddexp(DTYPE(0), dt_raw + dt_bias)
    S = np.zeros((b, h, p, n), DTYPE)
    y = np.empty((b, l, h, p), DTYPE)
    for t in range(l):
        decay = np.exp(dt[:, t] * A)  # [b, h]
        S = decay[:, :, None, None] * S + (dt[:, t, :, None, None] * x[:, t, :, :, None]
                                           * B[:, t, None, None, :])
        y[:, t] = np.einsum("bhpn,bn->bhp", S, C[:, t]) + D[:, None] * x[:, t]
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite output from ssm_sequential")
    out = Tensor(y)
    return (out, S) if return_state else out


def _lower_mask(q: int, strict: bool = False) -> np.ndarray:
    return np.tril(np.ones((q, q), dtype=bool), k=-1 if strict else 0)


def ssm_chunked(inputs: SsmInputs, chunk: int = 16, return_state: bool = False):
    """Chunked SSD scan, differentiable; returns ``y[b, l, h, p]`` (and the final state)."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    b, l, h, p, n = inputs.check()
    q = chunk
    nc = -(-l // q)
    pad = nc * q - l

    A = ag.negate(ag.exp(inputs.A_log))  # [h]
    dt = ag.softplus(ag.add(inputs.dt_raw, inputs.dt_bias))  # [b, l, h]
    dA = ag.mul(dt, A)  # [b, l, h]
    xdt = ag.mul(inputs.x, ag.reshape(dt, (b, l, h, 1)))

    # zero-padded tail positions carry no input and no decay
    X = ag.reshape(ag.pad_end(xdt, 1, pad), (b, nc, q, h, p))
    Bc = ag.reshape(ag.pad_end(inputs.B, 1, pad), (b, nc, q, n))
    Cc = ag.reshape(ag.pad_end(inputs.C, 1, pad), (b, nc, q, n))
    dAc = ag.transpose(ag.reshape(ag.pad_end(dA, 1, pad), (b, nc, q, h)), (0, 3, 1, 2))  # [b,h,c,q]
    Acs = ag.cumsum(dAc, axis=-1)

    # within-chunk: decay from position s to position t (t >= s) is exp(Acs[t] - Acs[s])
    seg = ag.sub(ag.reshape(Acs, (b, h, nc, q, 1)), ag.reshape(Acs, (b, h, nc, 1, q)))
    Lmat = ag.exp(ag.where(_lower_mask(q), seg, -np.inf))
    CB = ag.einsum("bctn,bcsn->bcts", Cc, Bc)
    y_diag = ag.einsum("bcts,bhcts,bcshp->bcthp", CB, Lmat, X)

    # state accumulated inside each chunk, decayed to the chunk end
    last = ag.slice_axis(Acs, -1, q - 1, q)  # [b,h,c,1]
    decay_to_end = ag.exp(ag.sub(last, Acs))
    chunk_states = ag.einsum("bcsn,bhcs,bcshp->bchpn", Bc, decay_to_end, X)

    # carry states across chunks: entering chunk z sees chunk c < z decayed by
    # the totals of chunks c+1 .. z-1
    totals = ag.reshape(last, (b, h, nc))
    incl = ag.cumsum(totals, axis=-1)
    excl = ag.sub(incl, totals)
    gap = ag.sub(ag.reshape(excl, (b, h, nc, 1)), ag.reshape(incl, (b, h, 1, nc)))
    carry = ag.exp(ag.where(_lower_mask(nc, strict=True), gap, -np.inf))  # [b,h,z,c]
    entering = ag.einsum("bhzc,bchpn->bzhpn", carry, chunk_states)

    y_off = ag.einsum("bctn,bchpn,bhct->bcthp", Cc, entering, ag.exp(Acs))
    y = ag.reshape(ag.add(y_diag, y_off), (b, nc * q, h, p))
    if pad:
        y = ag.slice_axis(y, 1, 0, l)
    y = ag.add(y, ag.mul(inputs.x, ag.reshape(inputs.D, (h, 1))))
    if not np.all(np.isfinite(y.data)):
        raise NumericError("non-finite output from ssm_chunked")
    if not return_state:
        return y
    # final state = last entering state decayed through the last chunk + its own contribution
    tail = np.exp(totals.data[:, :, -1])[:, :, None, None]
    final = tail * entering.data[:, -1] + chunk_states.data[:, -1]
    return y, final.astype(DTYPE, copy=False)


def ssm_step(state: StepState, x_t: np.ndarray, dt_t: np.ndarray, B_t: np.ndarray, C_t: np.ndarray,
             A_log: np.ndarray, D: np.ndarray, dt_bias: np.ndarray) -> tuple[np.ndarray, StepState]:
    """One recurrence step. ``x_t[b,h,p]``, raw ``dt_t[b,h]``, ``B_t``/``C_t[b,n]``.

    ``state.ssm_state`` is updated in place and the same object is returned.
    """
    S = state.ssm_state
    if S.shape[:3] != x_t.shape or S.shape[3] != B_t.shape[-1] or dt_t.shape != S.shape[:2]:
        raise DimensionError(f"step inputs {x_t.shape}/{dt_t.shape}/{B_t.shape} do not fit state {S.shape}")
    A = -np.exp(A_log)
    dt = np.logaddexp(DTYPE(0), dt_t + dt_bias)
    decay = np.exp(dt * A)
    S *= decay[:, :, None, None]
    S += dt[:, :, None, None] * x_t[:, :, :, None] * B_t[:, None, None, :]
    y = np.einsum("bhpn,bn->bhp", S, C_t) + D[:, None] * x_t
    return y.astype(DTYPE, copy=False), state
