"""Joint multi-granularity training.

Each step runs one forward per trained granularity, backpropagates that
granularity's weighted loss straight away (so only one graph is alive at a
time), lets the gradients pile up in the shared buffers, and then applies a
single clipped AdamW update.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, Tensor
from .errors import NumericError, SchemaError
from .models import ModelParams, lm_forward, vision_forward


@dataclass
class TrainConfig:
    g: int = 4
    lambdas: list[float] | None = None
    lr: float = 3e-4
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_steps: int = 100
    total_steps: int = 2000
    grad_clip: float = 1.0
    batch_size: int = 16
    seq_len: int = 256
    label_smoothing: float = 0.0
    seed: int = 0
    eval_every: int = 0
    ckpt_every: int = 0
    record_time: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.g < 1:
            raise SchemaError("g must be >= 1")
        if self.lambdas is None:
            self.lambdas = [1.0 / self.g] * self.g
        self.lambdas = [float(x) for x in self.lambdas]
        if len(self.lambdas) != self.g or any(x < 0 for x in self.lambdas):
            raise SchemaError(f"need {self.g} non-negative lambdas, got {self.lambdas}")
        if self.warmup_steps > self.total_steps:
            raise SchemaError("warmup_steps exceeds total_steps")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        extra = set(doc) - set(cls.__dataclass_fields__)
        if extra:
            raise SchemaError(f"unknown train config keys: {sorted(extra)}")
        return cls(**doc)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr``, then cosine decay to ``lr * min_lr_ratio`` at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    min_lr = cfg.lr * cfg.min_lr_ratio
    span = cfg.total_steps - cfg.warmup_steps
    progress = 1.0 if span == 0 else (step - cfg.warmup_steps) / span
    return min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
    return math.sqrt(total)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the factor."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    factor = 1.0 if norm <= max_norm else max_norm / norm
    if factor < 1.0:
        for p in params:
            if p.grad is not None:
                p.grad *= DTYPE(factor)
    return factor


class AdamW:
    """Decoupled weight decay Adam; 1-D tensors (norms, biases, A_log, D) are not decayed."""

    def __init__(self, params: ModelParams, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.1):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}

    def state_bytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())

    def step(self, params: ModelParams, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params.named_tensors():
            if p.grad is None:
                continue
            adamw_update(p, p.grad, self.m[name], self.v[name], lr, b1, b2, self.eps,
                         self.weight_decay if p.ndim >= 2 else 0.0, c1, c2)


def adamw_update(p: Tensor, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
                 beta1: float, beta2: float, eps: float, weight_decay: float,
                 c1: float, c2: float) -> None:
    """In-place AdamW step on one tensor with bias corrections ``c1``/``c2``."""
    m *= DTYPE(beta1)
    m += DTYPE(1 - beta1) * grad
    v *= DTYPE(beta2)
    v += DTYPE(1 - beta2) * grad * grad
    if weight_decay:
        p.data *= DTYPE(1.0 - lr * weight_decay)
    p.data -= (DTYPE(lr) * (m / c1) / (np.sqrt(v / c2) + DTYPE(eps))).astype(DTYPE, copy=False)


# ----------------------------------------------------------------------- tasks

class Task(Protocol):
    def sample(self, rng: np.random.Generator): ...

    def loss(self, params: ModelParams, batch, gc) -> Tensor: ...

    def evaluate(self, params: ModelParams, gc) -> float: ...


class TokenData:
    """Byte stream with a fixed tail split held out for validation."""

    def __init__(self, tokens: np.ndarray, val_fraction: float = 0.05):
        tokens = np.asarray(tokens)
        cut = int(len(tokens) * (1.0 - val_fraction))
        self.train = tokens[:cut]
        self.val = tokens[cut:]


class LMTask:
    def __init__(self, data: TokenData, seq_len: int, batch_size: int, eval_windows: int = 32):
        if len(data.train) <= seq_len + 1 or len(data.val) <= seq_len + 1:
            raise ValueError("corpus is too short for the requested seq_len")
        self.data = data
        self.seq_len = seq_len
        self.batch_size = batch_size
        starts = np.linspace(0, len(data.val) - seq_len - 1, eval_windows).astype(np.int64)
        self.val_windows = np.stack([data.val[s:s + seq_len + 1] for s in starts])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        starts = rng.integers(0, len(self.data.train) - self.seq_len - 1, size=self.batch_size)
        return np.stack([self.data.train[s:s + self.seq_len + 1] for s in starts])

    def loss(self, params: ModelParams, batch: np.ndarray, gc) -> Tensor:
        return ag.cross_entropy(lm_forward(params, batch[:, :-1], gc), batch[:, 1:])

    def evaluate(self, params: ModelParams, gc, batch_size: int = 16) -> float:
        with ag.no_grad():
            losses = [self.loss(params, self.val_windows[i:i + batch_size], gc).item() * len(
                self.val_windows[i:i + batch_size]) for i in range(0, len(self.val_windows), batch_size)]
        return float(sum(losses) / len(self.val_windows))


class VisionTask:
    def __init__(self, images: np.ndarray, labels: np.ndarray, batch_size: int,
                 label_smoothing: float = 0.1, val_images=None, val_labels=None):
        self.images = np.asarray(images, dtype=DTYPE)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.val_images = self.images if val_images is None else np.asarray(val_images, dtype=DTYPE)
        self.val_labels = self.labels if val_labels is None else np.asarray(val_labels, dtype=np.int64)

    def sample(self, rng: np.random.Generator):
        idx = rng.integers(0, len(self.images), size=self.batch_size)
        return self.images[idx], self.labels[idx]

    def loss(self, params: ModelParams, batch, gc) -> Tensor:
        images, labels = batch
        logits, _ = vision_forward(params, images, gc)
        return ag.cross_entropy(logits, labels, self.label_smoothing)

    def evaluate(self, params: ModelParams, gc, batch_size: int = 256) -> float:
        total = 0.0
        with ag.no_grad():
            for i in range(0, len(self.val_images), batch_size):
                logits, _ = vision_forward(params, self.val_images[i:i + batch_size], gc)
                total += ag.cross_entropy(logits, self.val_labels[i:i + batch_size]).item() * len(logits.data)
        return total / len(self.val_images)

    def accuracy(self, params: ModelParams, gc, batch_size: int = 256) -> float:
        hits = 0
        with ag.no_grad():
            for i in range(0, len(self.val_images), batch_size):
                logits, _ = vision_forward(params, self.val_images[i:i + batch_size], gc)
                hits += int((logits.data.argmax(-1) == self.val_labels[i:i + batch_size]).sum())
        return hits / len(self.val_images)


# ---------------------------------------------------------------- the step

def trained_granularities(params: ModelParams, cfg: TrainConfig) -> list[int]:
    grans = params.config.granularities
    if len(grans) < cfg.g:
        raise SchemaError(f"model defines {len(grans)} granularities, training needs {cfg.g}")
    return list(grans[:cfg.g])


def accumulate_joint_gradients(params: ModelParams, task: Task, batch, granularities: Sequence[int],
                               lambdas: Sequence[float]) -> list[float]:
    """Forward + backward of ``lambda_i * L_i`` for each granularity, summing into ``.grad``."""
    losses = []
    for m, lam in zip(granularities, lambdas):
        try:
            with np.errstate(invalid="ignore", over="ignore"):
                loss = task.loss(params, batch, m)
        except NumericError as exc:
            raise NumericError(f"granularity m={m}: {exc}") from None
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at granularity m={m}")
        ag.scale(loss, lam).backward()
        losses.append(value)
    return losses


def joint_loss(losses: Sequence[float], lambdas: Sequence[float]) -> float:
    return float(sum(l * w for l, w in zip(losses, lambdas)))


def joint_loss_step(params: ModelParams, task: Task, batch, cfg: TrainConfig, optimizer: AdamW,
                    lr: float) -> tuple[list[float], float]:
    """One training step: g forwards/backwards, one clipped optimizer update, zeroed grads."""
    params.zero_grad()
    losses = accumulate_joint_gradients(params, task, batch, trained_granularities(params, cfg), cfg.lambdas)
    clip_gradients(params.parameters(), cfg.grad_clip)
    optimizer.step(params, lr)
    params.zero_grad()
    return losses, joint_loss(losses, cfg.lambdas)


@dataclass
class TrainResult:
    params: ModelParams
    initial_val: dict[int, float]
    final_val: dict[int, float]
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def evaluate_all(params: ModelParams, task: Task, granularities: Sequence[int]) -> dict[int, float]:
    return {m: task.evaluate(params, m) for m in granularities}


def _check_finite(params: ModelParams, step: int) -> None:
    for name, t in params.named_tensors():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"parameter {name} became non-finite by step {step}")


def train(params: ModelParams, task: Task, cfg: TrainConfig,
          sink: Callable[[dict], None] | None = None, out_dir: str | Path | None = None,
          meta: dict | None = None) -> TrainResult:
    """Deterministic joint training loop; metrics go to ``sink``, checkpoints to ``out_dir``."""
    from .io import save_checkpoint

    grans = trained_granularities(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay)
    emit = sink or (lambda rec: None)
    history: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "model.ckpt" if out_dir is not None else None
    meta = {**(meta or {}), "train": cfg.to_dict()}

    initial = evaluate_all(params, task, grans)
    emit({"step": 0, "val": {str(m): v for m, v in initial.items()}})
    t0 = time.perf_counter()
    for step in range(1, cfg.total_steps + 1):
        lr = lr_schedule(step, cfg)
        batch = task.sample(rng)
        losses, _ = joint_loss_step(params, task, batch, cfg, opt, lr)
        rec = {"step": step, "lr": lr, "losses": losses}
        if cfg.record_time:
            rec["wall_time"] = time.perf_counter() - t0
        history.append(rec)
        emit(rec)
        if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.total_steps:
            emit({"step": step, "val": {str(m): v for m, v in evaluate_all(params, task, grans).items()}})
        if ckpt_path is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
            # a diverged model never overwrites the last good checkpoint
            _check_finite(params, step)
            save_checkpoint(params, ckpt_path, meta | {"step": step})
    final = evaluate_all(params, task, grans)
    emit({"step": cfg.total_steps, "val": {str(m): v for m, v in final.items()}})
    if ckpt_path is not None:
        _check_finite(params, cfg.total_steps)
        save_checkpoint(params, ckpt_path, meta | {"step": cfg.total_steps})
    return TrainResult(params, initial, final, history, ckpt_path)
