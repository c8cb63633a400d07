"""Command line entry point: ``matmamba <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import elastic
from .bench import bench
from .block import block_param_count
from .errors import MatMambaError
from .io import DataConfig, RunConfig, ingest_images, ingest_text, load_checkpoint, MetricsWriter, save_checkpoint, atomic_write
from .models import GranularityConfig, ModelConfig, init_params, model_param_count, preset, resolve_gc
from .training import LMTask, TokenData, TrainConfig, VisionTask, train


class UsageError(MatMambaError):
    """Bad flag combination or value; reported with exit status 2."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated number list, got {text!r}") from None


# ----------------------------------------------------------------- shared bits

def _gc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dims", type=_int_list, help="per-layer Matryoshka dims, comma separated")
    p.add_argument("--granularity", type=int, help="uniform Matryoshka dim for every layer")


def _gc(args, cfg: ModelConfig) -> list[int]:
    if args.dims is not None and args.granularity is not None:
        raise UsageError("conflicting flags: give either --dims or --granularity, not both")
    if args.dims is not None:
        if len(args.dims) != cfg.n_layers:
            raise UsageError(f"--dims has {len(args.dims)} entries but the model has {cfg.n_layers} layers")
        violations = elastic.validate_gc(cfg, args.dims)
        if violations:
            raise UsageError("invalid --dims: " + "; ".join(f"layer {v.layer}: {v.message}" for v in violations))
        return list(args.dims)
    if args.granularity is not None:
        try:
            return resolve_gc(cfg, args.granularity)
        except MatMambaError as exc:
            raise UsageError(f"invalid --granularity: {exc}") from None
    return resolve_gc(cfg, None)


def _run_config(args) -> RunConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise UsageError("conflicting flags: give either --config or --preset, not both")
    run = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "preset", None):
        run.model = preset(args.preset)
    if getattr(args, "data", None):
        if run.model.kind == "lm":
            run.data.text_path = args.data
        else:
            run.data.image_path = args.data
    return run


def _split_images(run: RunConfig):
    images, labels = ingest_images(run.data.image_path, run.data.pixel_mean, run.data.pixel_std)
    cut = int(len(images) * (1.0 - run.data.val_fraction))
    return images[:cut], labels[:cut], images[cut:], labels[cut:]


def _task(run: RunConfig, tcfg: TrainConfig):
    if run.model.kind == "lm":
        if not run.data.text_path:
            raise UsageError("no text corpus: pass --data or set data.text_path in --config")
        return LMTask(TokenData(ingest_text(run.data.text_path), run.data.val_fraction), tcfg.seq_len, tcfg.batch_size)
    if not run.data.image_path:
        raise UsageError("no image dataset: pass --data or set data.image_path in --config")
    xtr, ytr, xva, yva = _split_images(run)
    return VisionTask(xtr, ytr, tcfg.batch_size, tcfg.label_smoothing, xva, yva)


def _emit_table(rows: list[dict], out: str | None) -> None:
    buf = _stdio.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if out:
        atomic_write(out, buf.getvalue().encode())
    else:
        sys.stdout.write(buf.getvalue())


def _load(args):
    params, meta = load_checkpoint(args.ckpt)
    return params, meta


def _ckpt_run(args, params, meta) -> tuple[RunConfig, TrainConfig]:
    """Run config for a checkpoint command; without --config the training-time data and batch settings apply."""
    run = _run_config(args)
    run.model = params.config
    if args.config:
        return run, run.train
    if "data" in meta:
        saved = DataConfig.from_dict(meta["data"])
        if getattr(args, "data", None):
            saved.text_path, saved.image_path = run.data.text_path, run.data.image_path
        run.data = saved
    tcfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else run.train
    return run, tcfg


# -------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    run = _run_config(args)
    if args.seed is not None:
        run.train.seed = args.seed
    if args.steps is not None:
        run.train.total_steps = args.steps
        run.train.warmup_steps = min(run.train.warmup_steps, args.steps)
    run.train = TrainConfig.from_dict(run.train.to_dict())
    task = _task(run, run.train)
    params = init_params(run.model, run.train.seed)
    out = Path(args.out)
    atomic_write(out / "run.json", run.dumps().encode())
    with MetricsWriter(out / "metrics.jsonl") as sink:
        res = train(params, task, run.train, sink=sink, out_dir=out, meta={"data": dict(vars(run.data))})
    for m, v in res.final_val.items():
        print(f"m={m} val_loss {res.initial_val[m]:.4f} -> {v:.4f}")
    print(f"checkpoint {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    params, meta = _load(args)
    run, tcfg = _ckpt_run(args, params, meta)
    task = _task(run, tcfg)
    dims = _gc(args, params.config)
    rec = {"dims": dims, "loss": task.evaluate(params, dims)}
    if isinstance(task, VisionTask):
        rec["accuracy"] = task.accuracy(params, dims)
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_extract(args) -> int:
    params, meta = _load(args)
    dims = _gc(args, params.config)
    sub = elastic.extract_submodel(params, dims)
    save_checkpoint(sub, args.out, {**meta, "extracted_from": dims})
    print(f"wrote {args.out}: {sub.count():,} parameters")
    return 0


def cmd_generate(args) -> int:
    params, _ = _load(args)
    if params.config.kind != "lm":
        raise UsageError("generate needs a language model checkpoint")
    dims = _gc(args, params.config)
    prompt = np.frombuffer(args.prompt.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    toks = elastic.generate(params, prompt, dims, args.max_new, args.temperature, args.seed or 0)
    text = bytes(int(t) % 256 for t in toks).decode("utf-8", errors="replace")
    if args.out:
        atomic_write(args.out, text.encode("utf-8"))
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    params, meta = _load(args)
    run, tcfg = _ckpt_run(args, params, meta)
    task = _task(run, tcfg)
    cfg = params.config
    specs = [elastic.make_spec(cfg, GranularityConfig.uniform(cfg, m)) for m in cfg.granularities]
    seed = args.seed or 0
    for r in args.ratios:
        for k in range(args.samples):
            specs.append(elastic.make_spec(cfg, elastic.sample_gc(cfg, r, seed + k)))
    rows = elastic.pareto_sweep(params, task, specs)
    _emit_table([{"ratio": f"{r.ratio:.6f}", "params": r.params, "dims": " ".join(map(str, r.dims)),
                  "loss": "" if r.loss is None else f"{r.loss:.6f}", "error": r.error or ""} for r in rows], args.out)
    return 0


def cmd_retrieve(args) -> int:
    params, meta = _load(args)
    if params.config.kind != "vision":
        raise UsageError("retrieve needs a vision model checkpoint")
    run, _ = _ckpt_run(args, params, meta)
    if not run.data.image_path:
        raise UsageError("no image dataset: pass --data or set data.image_path in --config")
    db_x, db_y, q_x, q_y = _split_images(run)
    dims = _gc(args, params.config)
    index = elastic.build_index(params, db_x, db_y)
    res = elastic.query_1nn(index, params, q_x, dims)
    print(json.dumps({"dims": dims, "accuracy": float(np.mean(res.predicted == q_y)),
                      "agreement": res.agreement, "queries": int(len(q_x)), "database": int(len(db_x))},
                     sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    if args.ckpt:
        params, _ = _load(args)
    else:
        params = init_params(_run_config(args).model, args.seed or 0)
    cfg = params.config
    if args.dims is not None or args.granularity is not None:
        gcs = [_gc(args, cfg)]
    else:
        gcs = [resolve_gc(cfg, m) for m in cfg.granularities] or [resolve_gc(cfg, None)]
    rows = bench(params, gcs, args.seq_lens, args.batch, args.runs, seed=args.seed or 0)
    _emit_table([{"dims": " ".join(map(str, r.dims)), "seq_len": r.seq_len, "throughput": f"{r.throughput:.1f}",
                  "median_seconds": f"{r.median_seconds:.6f}", "peak_bytes": r.peak_bytes} for r in rows], args.out)
    return 0


def cmd_count_params(args) -> int:
    if args.ckpt:
        cfg = _load(args)[0].config
    else:
        cfg = _run_config(args).model
    if args.block is not None:
        bc = cfg.block_config(0)
        print(f"block m={args.block} weights-only {block_param_count(bc, args.block, 'weights-only'):,}")
        print(f"block m={args.block} full {block_param_count(bc, args.block, 'full'):,}")
        return 0
    embed, non_embed = model_param_count(cfg, _gc(args, cfg))
    print(f"embed {embed:,}")
    print(f"non-embed {non_embed:,}")
    return 0


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matmamba", description="Nested-width Mamba2 models on numpy.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, fn, help: str, *, model=True, ckpt=False, gc=False, seed=True, out=False, data=False):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        if model:
            p.add_argument("--config", help="JSON run config")
            p.add_argument("--preset", help="named model preset")
        if ckpt:
            p.add_argument("--ckpt", required=ckpt == "required", help="checkpoint path")
        if gc:
            _gc_flags(p)
        if seed:
            p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", required=out == "required")
        if data:
            p.add_argument("--data", help="text corpus (LM) or image dataset (vision)")
        return p

    p = command("train", cmd_train, "joint multi-granularity training", out="required", data=True)
    p.add_argument("--steps", type=int)
    command("eval", cmd_eval, "validation loss at one granularity config", ckpt="required", gc=True, data=True)
    command("extract", cmd_extract, "write a standalone submodel checkpoint", model=False, ckpt="required", gc=True,
            seed=False, out="required")
    p = command("generate", cmd_generate, "sample text from an LM checkpoint", model=False, ckpt="required", gc=True,
                out=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--temperature", type=float, help="omit for greedy decoding")
    p = command("sweep", cmd_sweep, "evaluate uniform and sampled mixed-width submodels", ckpt="required", out=True,
                data=True)
    p.add_argument("--ratios", type=_float_list, default=[0.5, 0.625, 0.75, 0.875])
    p.add_argument("--samples", type=int, default=3, help="sampled configs per ratio")
    command("retrieve", cmd_retrieve, "1-NN retrieval with a sliced query encoder", ckpt="required", gc=True,
            data=True)
    p = command("bench", cmd_bench, "inference throughput and peak memory", ckpt=True, gc=True, out=True)
    p.add_argument("--seq-lens", type=_int_list, default=[256])
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--runs", type=int, default=5)
    p = command("count-params", cmd_count_params, "parameter counts", ckpt=True, gc=True, seed=False)
    p.add_argument("--block", type=int, help="print one block's counts at this Matryoshka dim instead")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"matmamba {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MatMambaError, ValueError, KeyError, OSError) as exc:
        print(f"matmamba {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
