"""MatMamba-LM and MatMamba-Vision: stacks of pre-norm residual MatMamba blocks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, Tensor
from .block import (
    RMS_EPS, BlockConfig, BlockParams, block_forward, block_from_arrays, block_param_count,
    block_step, init_block, init_step_state, resolve_slice, trunc_normal,
)
from .errors import DimensionError, InvalidGranularityError, SchemaError
from .ssd import StepState


@dataclass
class ModelConfig:
    kind: str = "lm"
    n_layers: int = 4
    d_model: int = 128
    expand: int = 2
    d_head: int = 16
    d_state: int = 16
    vocab_size: int = 256
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    num_classes: int = 10
    chunk_size: int = 16
    granularities: list[int] | None = None
    inner_dims: list[int] | None = None

    def __post_init__(self):
        if self.kind not in ("lm", "vision"):
            raise SchemaError(f"unknown model kind {self.kind!r}")
        if self.inner_dims is not None:
            self.inner_dims = [int(v) for v in self.inner_dims]
            if len(self.inner_dims) != self.n_layers:
                raise SchemaError("inner_dims needs one entry per layer")
            if self.granularities is None:
                self.granularities = []
        if self.granularities is None:
            d = self.d_model
            self.granularities = [d, d // 2, d // 4, d // 8]
        self.granularities = [int(m) for m in self.granularities]
        gs = self.granularities
        if gs:
            if gs[0] != self.d_model:
                raise InvalidGranularityError("the first granularity must equal d_model")
            if any(a <= b for a, b in zip(gs, gs[1:])):
                raise InvalidGranularityError(f"granularities must strictly decrease: {gs}")
        for i in range(self.n_layers):
            bc = self.block_config(i)
            for m in gs:
                resolve_slice(bc, m)
        if self.kind == "vision" and self.image_size % self.patch_size:
            raise DimensionError("image_size must be divisible by patch_size")

    def block_config(self, layer: int) -> BlockConfig:
        inner = None if self.inner_dims is None else self.inner_dims[layer]
        return BlockConfig(self.d_model, self.expand, self.d_head, self.d_state, d_inner=inner)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise SchemaError(f"unknown model config keys: {sorted(extra)}")
        return cls(**doc)


PRESETS: dict[str, dict] = {
    "lm-130m": dict(kind="lm", n_layers=24, d_model=768, d_head=64, d_state=128, vocab_size=50280),
    "lm-370m": dict(kind="lm", n_layers=48, d_model=1024, d_head=64, d_state=128, vocab_size=50280),
    "lm-790m": dict(kind="lm", n_layers=48, d_model=1536, d_head=64, d_state=128, vocab_size=50280),
    "lm-1.4b": dict(kind="lm", n_layers=48, d_model=2048, d_head=64, d_state=128, vocab_size=50280),
    "vision-135m": dict(kind="vision", n_layers=20, d_model=1024, d_head=64, d_state=128,
                        image_size=224, patch_size=16, channels=3, num_classes=1000),
    "vision-35m": dict(kind="vision", n_layers=20, d_model=512, d_head=64, d_state=128,
                       image_size=224, patch_size=16, channels=3, num_classes=1000),
    "lm-desk": dict(kind="lm", n_layers=4, d_model=128, d_head=16, d_state=16, vocab_size=256),
    "vision-desk": dict(kind="vision", n_layers=2, d_model=64, d_head=16, d_state=16,
                        image_size=8, patch_size=2, channels=1, num_classes=10),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass(frozen=True)
class GranularityConfig:
    """One Matryoshka dimension per layer."""

    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(m) for m in self.dims))

    @classmethod
    def uniform(cls, cfg: ModelConfig, m: int) -> "GranularityConfig":
        return cls((m,) * cfg.n_layers)

    @classmethod
    def full(cls, cfg: ModelConfig) -> "GranularityConfig":
        return cls(tuple(cfg.block_config(i).max_m for i in range(cfg.n_layers)))

    def __len__(self) -> int:
        return len(self.dims)



def resolve_gc(cfg: ModelConfig, gc) -> list[int]:
    if gc is None:
        return list(GranularityConfig.full(cfg).dims)
    if isinstance(gc, (int, np.integer)):
        return [int(gc)] * cfg.n_layers
    dims = list(gc.dims if isinstance(gc, GranularityConfig) else gc)
    if len(dims) != cfg.n_layers:
        raise InvalidGranularityError(f"granularity config has {len(dims)} entries for {cfg.n_layers} layers")
    for i, m in enumerate(dims):
        try:
            resolve_slice(cfg.block_config(i), int(m))
        except InvalidGranularityError as exc:
            raise InvalidGranularityError(f"layer {i}: {exc}") from None
    return [int(m) for m in dims]


# ------------------------------------------------------------------ parameters

def top_level_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    if cfg.kind == "lm":
        return {"embedding": (cfg.vocab_size, d), "final_norm_w": (d,)}
    return {
        "patch_w": (d, cfg.patch_size ** 2 * cfg.channels), "patch_b": (d,),
        "cls_token": (d,), "final_norm_w": (d,),
        "head_w": (cfg.num_classes, d), "head_b": (cfg.num_classes,),
    }


@dataclass
class ModelParams:
    config: ModelConfig
    top: dict[str, Tensor]
    blocks: list[BlockParams] = field(default_factory=list)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.top.items()
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named():
                yield f"layers.{i}.{name}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.parameters())

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        expected = set(top_level_shapes(cfg)) | {
            f"layers.{i}.{n}" for i in range(cfg.n_layers) for n in BlockParams.param_names()}
        missing, extra = expected - set(arrays), set(arrays) - expected
        if missing or extra:
            raise SchemaError(f"tensor set mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        top = {}
        for k, shape in top_level_shapes(cfg).items():
            if tuple(arrays[k].shape) != shape:
                raise SchemaError(f"{k} has shape {tuple(arrays[k].shape)}, expected {shape}")
            top[k] = ag.parameter(arrays[k])
        blocks = []
        for i in range(cfg.n_layers):
            prefix = f"layers.{i}."
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            try:
                blocks.append(block_from_arrays(cfg.block_config(i), sub))
            except DimensionError as exc:
                raise SchemaError(f"layer {i}: {exc}") from None
        return cls(cfg, top, blocks)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    shapes = top_level_shapes(cfg)
    top: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            value = np.zeros(shape, DTYPE)
        elif name == "final_norm_w":
            value = np.ones(shape, DTYPE)
        else:
            value = trunc_normal(rng, shape)
        top[name] = ag.parameter(value)
    blocks = [init_block(cfg.block_config(i), rng) for i in range(cfg.n_layers)]
    return ModelParams(cfg, top, blocks)


# --------------------------------------------------------------------- forward

def _backbone(params: ModelParams, h: Tensor, dims: list[int], return_states: bool = False):
    cfg = params.config
    states = []
    for i, (blk, m) in enumerate(zip(params.blocks, dims)):
        normed = ag.rmsnorm(h, blk.pre_norm_w, RMS_EPS)
        res = block_forward(blk, cfg.block_config(i), normed, m, cfg.chunk_size, return_state=return_states)
        if return_states:
            res, st = res
            states.append(st)
        h = ag.add(h, res)
    return (h, states) if return_states else h


def lm_forward(params: ModelParams, tokens, gc=None, return_states: bool = False):
    """Logits ``[b, l, V]`` for integer ``tokens[b, l]``."""
    cfg = params.config
    if cfg.kind != "lm":
        raise DimensionError("lm_forward needs an lm model")
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [b, l], got {tokens.shape}")
    dims = resolve_gc(cfg, gc)
    emb = params.top["embedding"]
    h = ag.take_rows(emb, tokens)
    res = _backbone(params, h, dims, return_states)
    h, states = res if return_states else (res, None)
    h = ag.rmsnorm(h, params.top["final_norm_w"], RMS_EPS)
    logits = ag.linear(h, emb)  # tied with the embedding
    return (logits, states) if return_states else logits


def lm_step(params: ModelParams, states: list[StepState], token: np.ndarray, gc=None) -> np.ndarray:
    """Logits ``[b, V]`` for one new token per row; ``states`` advance in place."""
    cfg = params.config
    dims = resolve_gc(cfg, gc)
    emb = params.top["embedding"].data
    h = emb[np.asarray(token)]
    for i, (blk, m) in enumerate(zip(params.blocks, dims)):
        x = h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + np.float32(RMS_EPS)) * blk.pre_norm_w.data
        h = h + block_step(blk, cfg.block_config(i), states[i], x.astype(DTYPE), m)
    fw = params.top["final_norm_w"].data
    h = h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + np.float32(RMS_EPS)) * fw
    return (h @ emb.T).astype(DTYPE, copy=False)


def empty_states(params: ModelParams, batch: int, gc=None) -> list[StepState]:
    cfg = params.config
    dims = resolve_gc(cfg, gc)
    return [init_step_state(cfg.block_config(i), m, batch) for i, m in enumerate(dims)]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[b, H, W, C]`` to row-major patches ``[b, (H/p)*(W/p), p*p*C]``."""
    b, H, W, C = images.shape
    if H % patch or W % patch:
        raise DimensionError(f"image {H}x{W} is not divisible into {patch}x{patch} patches")
    x = images.reshape(b, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, (H // patch) * (W // patch), patch * patch * C), dtype=DTYPE)


def vision_forward(params: ModelParams, images, gc=None) -> tuple[Tensor, Tensor]:
    """Returns ``(logits[b, classes], cls_embedding[b, d_model])``.

    The [CLS] token is appended after the patches so the causal scan has seen
    the whole image by the time it reaches it.
    """
    cfg = params.config
    if cfg.kind != "vision":
        raise DimensionError("vision_forward needs a vision model")
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim != 4 or images.shape[-1] != cfg.channels:
        raise DimensionError(f"images must be [b, H, W, {cfg.channels}], got {images.shape}")
    dims = resolve_gc(cfg, gc)
    top = params.top
    tokens = ag.linear(Tensor(patchify(images, cfg.patch_size)), top["patch_w"], top["patch_b"])
    b, n_tok, d = tokens.shape
    cls = ag.broadcast_to(ag.reshape(top["cls_token"], (1, 1, d)), (b, 1, d))
    h = _backbone(params, ag.concat([tokens, cls], axis=1), dims)
    last = ag.reshape(ag.slice_axis(h, 1, n_tok, n_tok + 1), (b, d))
    emb = ag.rmsnorm(last, top["final_norm_w"], RMS_EPS)
    return ag.linear(emb, top["head_w"], top["head_b"]), emb


# ------------------------------------------------------------------ accounting

def model_param_count(cfg: ModelConfig, gc=None) -> tuple[int, int]:
    """``(embed, non_embed)`` learnable parameter counts at ``gc`` (default full).

    For vision models the patch projection and its bias are the embedding; the
    [CLS] token and classifier head are non-embedding.
    """
    dims = resolve_gc(cfg, gc)
    d = cfg.d_model
    blocks = sum(block_param_count(cfg.block_config(i), m, "full") for i, m in enumerate(dims))
    if cfg.kind == "lm":
        return cfg.vocab_size * d, blocks + d
    embed = cfg.patch_size ** 2 * cfg.channels * d + d
    return embed, blocks + d + d + cfg.num_classes * d + cfg.num_classes
