"""Command-line front end: ``saevit <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, SaevitError
from .model import (VARIANTS, build_model, count_params, load_config, model_forward, stage_geometry,
                    tiny_config, train_smoke, variant_config)
from .tensor import RngState, load_params, read_sat, save_params, write_sat

FORMATS = ("json", "text", "csv")


# -- output helpers -----------------------------------------------------------------

def _table_text(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
                     for r in cells)


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().rstrip("\n")


def _emit(args, payload: dict, header=None, rows=None, text=None):
    """Render according to --format and write to --out (or stdout)."""
    if args.format == "json" or (rows is None and text is None):
        out = json.dumps(payload, indent=1, default=_json_default)
    elif args.format == "csv" and rows is not None:
        out = _table_csv(header, rows)
    else:
        out = text if text is not None else _table_text(header, rows)
    if args.out and args.command not in ("correlate", "train-smoke", "forward"):
        Path(args.out).write_text(out + "\n")
    else:
        print(out)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _config(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return variant_config(args.variant)


# -- commands ---------------------------------------------------------------------

def cmd_info(args) -> int:
    from .analysis.flops import HEADER, model_flops
    cfg = _config(args)
    h = w = args.size
    geo = stage_geometry(cfg, h, w)
    params = count_params(build_model(cfg, RngState(args.seed)))
    flops = model_flops(cfg, 1, h, w)
    groups = flops.grouped(1)
    names = (["stem"] if cfg.toggles.use_stem else []) + [f"stage{i + 1}" for i in range(len(cfg.stages))]
    p_stage = {}
    for mod, n in params.by_module.items():
        key = mod.split(".")[0]
        p_stage[key] = p_stage.get(key, 0) + n
    rows = []
    for name, (c, hh, ww) in zip(names, geo):
        rows.append([name, f"{hh}x{ww}", c, p_stage.get(name, 0), groups.get(name, 0)])
    rows.append(["head", "1x1", cfg.num_classes, p_stage.get("head", 0), groups.get("head", 0)])
    rows.append(["total", "", "", params.total, flops.total])
    payload = {"model": cfg.to_dict(), "input": [1, cfg.in_channels, h, w], "convention": HEADER,
               "params": params.total, "macs": flops.total,
               "params_by_kind": dict(params.by_kind), "macs_by_kind": flops.by_kind(),
               "stages": [dict(zip(("name", "size", "channels", "params", "macs"), r)) for r in rows[:-1]]}
    text = _table_text(["stage", "output", "C", "params", "MACs"], rows)
    text += f"\n\n{cfg.name}: {params.total / 1e6:.3f} M params, {flops.total / 1e9:.3f} G MACs\n{HEADER}"
    _emit(args, payload, ["stage", "output", "channels", "params", "macs"], rows, text)
    return 0


def cmd_bench(args) -> int:
    from .analysis.bench import attention_bench
    rep = attention_bench(args.module, args.batch, args.h, args.w, args.c, args.heads, args.sr, args.win,
                          args.warmup_secs, args.iters, args.threads, args.seed)
    d = rep.to_dict()
    rows = [[k, d[k]] for k in ("module", "batch", "iterations", "warmup_secs", "macs", "mean_latency_ms",
                                "min_latency_ms", "std_latency_ms", "throughput_img_s")]
    _emit(args, d, ["field", "value"], rows, rep.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    from .analysis.gradcheck import TARGETS, run_target
    names = list(TARGETS) if args.target == "all" else [args.target]
    results = [run_target(n, seed=args.seed) for n in names]
    rows = []
    for r in results:
        tensor, err = r.worst
        rows.append([r.target, "PASS" if r.passed else "FAIL", tensor, f"{err:.3e}", f"{r.threshold:g}"])
    payload = results[0].to_dict() if len(results) == 1 else {"results": [r.to_dict() for r in results]}
    _emit(args, payload, ["target", "status", "worst_tensor", "rel_err", "threshold"], rows)
    return 0 if all(r.passed for r in results) else 1


def _correlate_one(args, ffn):
    from .analysis.correlation import capture_activations, channel_correlation
    cfg = _config(args).with_toggles(ffn=ffn)
    rng = RngState(args.seed)
    p = build_model(cfg, rng)
    if args.checkpoint:
        load_params(p, args.checkpoint)
        provenance = f"checkpoint:{args.checkpoint}"
    else:
        provenance = "random-init"
    x = rng.normal((args.batch, cfg.in_channels, args.size, args.size))
    acts = capture_activations(p, x, args.stage)
    rep = channel_correlation(acts, args.channels, rng)
    rep.meta.update(seed=args.seed, weights=provenance, ffn=ffn, model=cfg.name, stage=args.stage,
                    activation_shape=list(acts.shape))
    return rep


def cmd_correlate(args) -> int:
    ffns = ("ffn", "dwsffn", "ciffn") if args.ffn == "all" else (args.ffn,)
    out = Path(args.out or "correlation")
    reports = {}
    for ffn in ffns:
        rep = _correlate_one(args, ffn)
        rep.write(out / ffn if len(ffns) > 1 else out)
        reports[ffn] = rep
    rows = [[f, r.k, f"{r.abs_mean:.6f}", f"{r.std:.6f}", r.meta["weights"]] for f, r in reports.items()]
    header = ["ffn", "k", "abs_mean", "std", "weights"]
    if len(ffns) > 1:
        (out / "comparison.csv").write_text(_table_csv(header, rows) + "\n")
        (out / "comparison.json").write_text(json.dumps({f: r.stats() for f, r in reports.items()}, indent=1) + "\n")
    payload = {f: {k: v for k, v in r.stats().items() if k != "channels"} for f, r in reports.items()}
    payload["out"] = str(out)
    _emit(args, payload, header, rows)
    return 0


def cmd_forward(args) -> int:
    cfg = _config(args)
    p = build_model(cfg, RngState(args.seed))
    if args.checkpoint:
        load_params(p, args.checkpoint)
    x = read_sat(args.input)
    logits = model_forward(x, p)
    out = args.out or "logits.sat"
    write_sat(out, logits)
    _emit(args, {"input": list(x.shape), "logits": list(logits.shape), "out": str(out),
                 "argmax": logits.argmax(axis=1).tolist()}, text=f"wrote {out} {tuple(logits.shape)}")
    return 0


def cmd_train_smoke(args) -> int:
    cfg = load_config(args.config) if args.config else tiny_config()
    losses, p = train_smoke(cfg, steps=args.steps, lr=args.lr, seed=args.seed, n=args.samples,
                            input_size=args.size)
    out = Path(args.out or "train-smoke")
    out.mkdir(parents=True, exist_ok=True)
    (out / "loss.csv").write_text(_table_csv(["step", "loss"], [[i, f"{v:.9g}"] for i, v in enumerate(losses)]) + "\n")
    save_params(p, out / "checkpoint")
    (out / "checkpoint" / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    ratio = losses[-1] / losses[0]
    payload = {"steps": len(losses), "initial_loss": losses[0], "final_loss": losses[-1], "ratio": ratio,
               "out": str(out)}
    _emit(args, payload, ["field", "value"], [[k, v] for k, v in payload.items()],
          f"initial {losses[0]:.6f}  final {losses[-1]:.6g}  final/initial {ratio:.3e}")
    return 0


# -- parser -----------------------------------------------------------------------

def _threads_default() -> int:
    v = os.environ.get("SAEVIT_THREADS", "1")
    try:
        return max(1, int(v))
    except ValueError:
        raise ConfigError(f"SAEVIT_THREADS must be an integer, got {v!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default $SAEVIT_THREADS or 1)")
    common.add_argument("--format", choices=FORMATS, default="text")
    common.add_argument("--out", default=None)

    ap = argparse.ArgumentParser(prog="saevit", description="SAEViT reference implementation tools")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_flags(p, default="t"):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--variant", choices=VARIANTS, default=default)
        g.add_argument("--config", help="JSON model config")

    p = sub.add_parser("info", parents=[common], help="stage shapes, params and MACs")
    model_flags(p)
    p.add_argument("--size", type=int, default=224)
    p.set_defaults(fn=cmd_info)

    p = sub.add_parser("bench", parents=[common], help="time one attention module")
    p.add_argument("--module", choices=("saa", "sra", "mhsa", "window"), default="saa")
    p.add_argument("--h", type=int, default=56)
    p.add_argument("--w", type=int, default=56)
    p.add_argument("--c", type=int, default=256)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--sr", type=int, default=8)
    p.add_argument("--win", type=int, default=7)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--warmup-secs", type=float, default=5.0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--target", required=True, help="op, block, 'tiny-model' or 'all'")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("correlate", parents=[common], help="channel correlation of stage activations")
    model_flags(p)
    p.add_argument("--ffn", choices=("ffn", "dwsffn", "ciffn", "all"), default="ciffn")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--channels", type=int, default=100)
    p.add_argument("--stage", type=int, default=3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--size", type=int, default=224)
    p.set_defaults(fn=cmd_correlate)

    p = sub.add_parser("forward", parents=[common], help="logits for a .sat input tensor")
    model_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("train-smoke", parents=[common], help="overfit a synthetic set")
    p.add_argument("--config", default=None, help="JSON model config (default: tiny)")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(fn=cmd_train_smoke)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.threads is None:
            args.threads = _threads_default()
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return args.fn(args)
    except SaevitError as e:
        print(f"saevit {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as e:
        print(f"saevit {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
