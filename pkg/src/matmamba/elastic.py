"""Per-layer width choices: validation, sampling, extraction, decoding, sweeps and 1-NN retrieval."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DTYPE
from .block import materialize_block, resolve_slice
from .errors import InvalidGranularityError, MatMambaError, StateError
from .models import (
    GranularityConfig, ModelConfig, ModelParams, lm_forward, lm_step, model_param_count, resolve_gc,
    vision_forward,
)


class Violation(NamedTuple):
    layer: int | None  # None when the list itself has the wrong length
    message: str


def validate_gc(cfg: ModelConfig, gc) -> list[Violation]:
    """Every problem with ``gc``, one entry per offending layer; empty means valid."""
    dims = list(gc.dims if isinstance(gc, GranularityConfig) else gc)
    out: list[Violation] = []
    if len(dims) != cfg.n_layers:
        out.append(Violation(None, f"expected {cfg.n_layers} layer dims, got {len(dims)}"))
    for i, m in enumerate(dims[:cfg.n_layers]):
        try:
            resolve_slice(cfg.block_config(i), int(m))
        except (InvalidGranularityError, ValueError, TypeError) as exc:
            out.append(Violation(i, str(exc)))
    return out


def lattice(cfg: ModelConfig, layer: int = 0, floor: int | None = None) -> list[int]:
    """All valid Matryoshka dims for one layer, ascending, not below ``floor``."""
    bc = cfg.block_config(layer)
    step = bc.d_head // math.gcd(bc.expand, bc.d_head)
    lo = step if floor is None else max(step, -(-floor // step) * step)
    return list(range(lo, bc.max_m + 1, step))


def flops_ratio(cfg: ModelConfig, gc) -> float:
    dims = resolve_gc(cfg, gc)
    return float(np.mean([cfg.expand * m / cfg.block_config(i).inner for i, m in enumerate(dims)]))


def sample_gc(cfg: ModelConfig, target_ratio: float, seed: int, floor: int | None = None,
              tol: float = 0.05) -> GranularityConfig:
    """Random per-layer dims whose mean width ratio is as close to ``target_ratio`` as the lattice allows.

    Dims are first drawn uniformly from the valid lattice (at or above ``floor``,
    default the smallest trained granularity), then random layers are nudged
    one lattice step at a time towards the target.
    """
    if floor is None and cfg.granularities:
        floor = min(cfg.granularities)
    grids = [lattice(cfg, i, floor) for i in range(cfg.n_layers)]
    maxes = [cfg.block_config(i).max_m for i in range(cfg.n_layers)]
    lo = float(np.mean([g[0] / mx for g, mx in zip(grids, maxes)]))
    if not 0 < target_ratio <= 1 or target_ratio < lo - tol:
        raise ValueError(f"target ratio {target_ratio} outside the reachable range [{lo:.4f}, 1]")
    rng = np.random.default_rng(seed)
    pos = [int(rng.integers(len(g))) for g in grids]
    L = cfg.n_layers

    def mean_ratio() -> float:
        return sum(g[p] / mx for g, p, mx in zip(grids, pos, maxes)) / L

    while True:
        diff = target_ratio - mean_ratio()
        up = diff > 0
        movable = [i for i in range(L) if (pos[i] + 1 < len(grids[i]) if up else pos[i] > 0)]
        if not movable:
            break
        i = movable[int(rng.integers(len(movable)))]
        step_ratio = (grids[i][pos[i] + (1 if up else -1)] - grids[i][pos[i]]) / maxes[i] / L
        if abs(diff) <= abs(step_ratio) / 2:
            break
        pos[i] += 1 if up else -1
    return GranularityConfig(tuple(g[p] for g, p in zip(grids, pos)))


@dataclass(frozen=True)
class SubmodelSpec:
    gc: GranularityConfig
    est_params: int
    est_flops_ratio: float


def make_spec(cfg: ModelConfig, gc) -> SubmodelSpec:
    dims = resolve_gc(cfg, gc)
    return SubmodelSpec(GranularityConfig(tuple(dims)), sum(model_param_count(cfg, dims)), flops_ratio(cfg, dims))


def extract_submodel(params: ModelParams, gc) -> ModelParams:
    """Materialize copies of the ``gc`` slices as an ordinary standalone model."""
    cfg = params.config
    dims = resolve_gc(cfg, gc)
    blocks, inner = [], []
    for i, (blk, m) in enumerate(zip(params.blocks, dims)):
        sub, sub_cfg = materialize_block(blk, cfg.block_config(i), m)
        blocks.append(sub)
        inner.append(sub_cfg.inner)
    top = {k: ag.parameter(v.data.copy()) for k, v in params.top.items()}
    sub_cfg = replace(cfg, inner_dims=inner, granularities=[])
    return ModelParams(sub_cfg, top, blocks)


# ------------------------------------------------------------------ generation

def generate(params: ModelParams, prompt: Sequence[int], gc=None, max_new: int = 32,
             temperature: float | None = None, seed: int = 0) -> np.ndarray:
    """Prefill the prompt with one full-sequence forward, then decode step by step.

    ``temperature=None`` means greedy decoding.
    """
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    resolve_gc(params.config, gc)
    if max_new == 0:
        return prompt.copy()
    if prompt.size == 0:
        raise ValueError("generation needs a non-empty prompt")
    rng = np.random.default_rng(seed)

    def pick(logits: np.ndarray) -> int:
        if temperature is None:
            return int(np.argmax(logits))
        z = logits.astype(np.float64) / temperature
        p = np.exp(z - z.max())
        return int(rng.choice(len(p), p=p / p.sum()))

    with ag.no_grad():
        logits, states = lm_forward(params, prompt[None, :], gc, return_states=True)
    out = list(prompt)
    nxt = pick(logits.data[0, -1])
    for k in range(max_new):
        out.append(nxt)
        if k == max_new - 1:
            break
        nxt = pick(lm_step(params, states, np.array([nxt]), gc)[0])
    return np.asarray(out, dtype=np.int64)


# ------------------------------------------------------------------------ sweep

@dataclass
class SweepRow:
    ratio: float
    params: int
    dims: tuple[int, ...]
    loss: float | None
    error: str | None = None


def pareto_sweep(params: ModelParams, task, specs: Sequence[SubmodelSpec]) -> list[SweepRow]:
    """Evaluate each submodel on ``task``; rows sorted by compute ratio then size."""
    rows = []
    for spec in specs:
        try:
            loss = float(task.evaluate(params, spec.gc))
            rows.append(SweepRow(spec.est_flops_ratio, spec.est_params, spec.gc.dims, loss))
        except (MatMambaError, ValueError, ArithmeticError) as exc:
            rows.append(SweepRow(spec.est_flops_ratio, spec.est_params, spec.gc.dims, None, str(exc)))
    return sorted(rows, key=lambda r: (r.ratio, r.params, r.dims))


# -------------------------------------------------------------------- retrieval

@dataclass
class RetrievalIndex:
    embeddings: np.ndarray  # [N, d], rows L2-normalized
    labels: np.ndarray
    gc: tuple[int, ...]


def _normalize(x: np.ndarray) -> np.ndarray:
    return (x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)).astype(DTYPE)


def encode(params: ModelParams, images: np.ndarray, gc=None, batch_size: int = 256) -> np.ndarray:
    """L2-normalized [CLS] embeddings."""
    chunks = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            _, emb = vision_forward(params, images[i:i + batch_size], gc)
            chunks.append(emb.data)
    return _normalize(np.concatenate(chunks))


def build_index(params: ModelParams, images: np.ndarray, labels: np.ndarray, gc_db=None) -> RetrievalIndex:
    if len(images) == 0:
        raise StateError("cannot build a retrieval index from an empty database")
    dims = tuple(resolve_gc(params.config, gc_db))
    return RetrievalIndex(encode(params, images, dims), np.asarray(labels), dims)


def nearest(index: RetrievalIndex, queries: np.ndarray) -> np.ndarray:
    """Cosine 1-NN; ties go to the lowest database index."""
    if len(index.embeddings) == 0:
        raise StateError("retrieval index is empty")
    # BLAS may round identical columns differently, so near-equal scores count as ties
    sims = _normalize(queries).astype(np.float64) @ index.embeddings.astype(np.float64).T
    best = sims.max(axis=1, keepdims=True)
    return np.argmax(sims >= best - 1e-12, axis=1)


@dataclass
class RetrievalResult:
    neighbors: np.ndarray
    predicted: np.ndarray
    agreement: float


def query_1nn(index: RetrievalIndex, params: ModelParams, images: np.ndarray, gc_query=None,
              ref_params: ModelParams | None = None, ref_gc=None) -> RetrievalResult:
    """Retrieve with the query encoder at ``gc_query``.

    ``agreement`` is the fraction of queries whose neighbour matches the one
    found by the reference encoder (by default ``params`` at full width).
    """
    nn = nearest(index, encode(params, images, gc_query))
    ref = ref_params if ref_params is not None else params
    ref_nn = nearest(index, encode(ref, images, ref_gc))
    return RetrievalResult(nn, index.labels[nn], float(np.mean(nn == ref_nn)))


def mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean row-wise cosine similarity of two embedding sets."""
    return float(np.mean(np.sum(_normalize(a) * _normalize(b), axis=1)))
