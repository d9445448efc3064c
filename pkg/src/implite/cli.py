"""Command-line entry points: run, quantize, merge-lora, bench, inspect, serve, make-tiny."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import lora, quant, report, testing
from .container import inspect_container, read_container, write_container
from .errors import ImpError
from .llm import GenerationConfig
from .profiler import bench_model, total_latency
from .runner import ImpModel
from .server import DEFAULT_MAX_IMAGE_BYTES, make_server, serve_forever
from .vision import MODE_PAD, MODE_SQUARE, load_image_rgb

BENCH_PROMPT = "Describe the image in detail and explain what stands out the most."


def _generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def _image_mode_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--image-mode",
        choices=[MODE_PAD, MODE_SQUARE],
        default=MODE_PAD,
        help="preprocessing strategy for the input image",
    )


def _cfg_from_args(args, stop_ids) -> GenerationConfig:
    return GenerationConfig(
        max_new_tokens=args.max_new_tokens,
        temperature=args.temperature,
        top_p=args.top_p,
        seed=args.seed,
        stop_ids=stop_ids,
    )


def cmd_run(args) -> int:
    model = ImpModel.load(args.model)
    image = load_image_rgb(args.image) if args.image else None
    stop = frozenset() if args.no_stop else frozenset({model.tokenizer.special_tokens["eos"]})
    cfg = _cfg_from_args(args, stop)
    if args.json:
        result = model.run(args.prompt, image, cfg, args.image_mode)
    else:
        result = model.run(
            args.prompt,
            image,
            cfg,
            args.image_mode,
            on_text=lambda _tid, piece: print(piece, end="", flush=True),
        )
        print()
    if args.json:
        from .profiler import StageTimings

        payload = {
            "text": result.text,
            "token_ids": result.token_ids,
            "stats": StageTimings.from_turn(result).to_dict(),
        }
        print(json.dumps(payload))
    return 0


def cmd_quantize(args) -> int:
    manifest, loader = read_container(args.input)
    with loader:
        tensors = loader.load_all()
    new_manifest, new_tensors = quant.quantize_model(
        manifest, tensors, args.dtype, include_embeddings=args.embeddings
    )
    write_container(new_manifest, new_tensors, args.output)
    before = sum(t.nbytes for t in tensors.values())
    after = sum(t.nbytes for t in new_tensors.values())
    print(f"{args.input} -> {args.output} ({args.dtype}): tensor bytes {before} -> {after}")
    return 0


def cmd_merge_lora(args) -> int:
    manifest, loader = read_container(args.base)
    with loader:
        tensors = loader.load_all()
    adapters = lora.load_adapters(args.adapter)
    new_manifest, new_tensors = lora.merge_lora(manifest, tensors, adapters)
    write_container(new_manifest, new_tensors, args.output)
    print(f"merged {len(adapters)} adapters into {args.output}")
    return 0


def cmd_bench(args) -> int:
    image = load_image_rgb(args.image) if args.image else None
    records = []
    json_lines = []
    for path in args.model:
        model = ImpModel.load(path)
        cfg = GenerationConfig(
            max_new_tokens=args.max_new_tokens,
            temperature=0.0,
            seed=args.seed,
            stop_ids=frozenset(),  # fixed-length run: always generate max_new_tokens
        )
        median, runs = bench_model(
            model, image, args.prompt, cfg, repeats=args.repeats, warmup=args.warmup
        )
        label = os.path.basename(path)
        for i, r in enumerate(runs):
            json_lines.append(report.run_record(label, i, r))
        records.append(report.BenchRecord(label, model.precision, model.size_bytes, median))
        recomposed = total_latency(median)
        print(f"{label}: median T_total {median.t_total:.3f}s (recomposed {recomposed:.3f}s)")
    print()
    print(report.render_table(records))
    if args.json_out:
        report.write_jsonl(args.json_out, json_lines)
        print(f"wrote {len(json_lines)} runs to {args.json_out}")
    if args.fig_out:
        report.render_figure(records, args.fig_out)
        print(f"wrote figure to {args.fig_out}")
    return 0


def cmd_inspect(args) -> int:
    print(inspect_container(args.path).render())
    return 0


def cmd_serve(args) -> int:
    model_path = args.model or os.environ.get("IMP_MODEL")
    if not model_path:
        print("imp serve: --model is required (or set IMP_MODEL)", file=sys.stderr)
        return 2
    model = ImpModel.load(model_path)
    server = make_server(
        model,
        host=args.host,
        port=args.port,
        max_image_bytes=args.max_image_bytes,
        workers=args.workers,
        cors_origin=args.cors_origin,
        static_dir=args.static_dir,
    )
    serve_forever(server)
    return 0


def cmd_make_tiny(args) -> int:
    path = testing.build_tiny_model(args.out, seed=args.seed, image_res=args.image_res)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imp", description="desk-scale multimodal LLM inference toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="single-shot generation")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--image", help="PNG/JPEG input image")
    p.add_argument("--json", action="store_true", help="emit token ids, text and stats as JSON")
    p.add_argument("--no-stop", action="store_true", help="ignore EOS; generate max-new-tokens")
    _generation_flags(p)
    _image_mode_flag(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("quantize", help="rewrite weights in a low-bit block format")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--dtype", choices=["q8_0", "q4_0"], required=True)
    p.add_argument(
        "--embeddings", action="store_true", help="also quantize embedding-like tables"
    )
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("merge-lora", help="fold low-rank adapters into base weights")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True, help=".npz adapter set")
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_merge_lora)

    p = sub.add_parser("bench", help="stage-decomposed latency benchmark")
    p.add_argument("--model", action="append", required=True, help="repeatable")
    p.add_argument("--image", help="PNG/JPEG input image")
    p.add_argument("--prompt", default=BENCH_PROMPT)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out", help="write one JSON line per measured run")
    p.add_argument("--fig-out", help="write a stage-breakdown figure (png/pdf/svg)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="tensor and size summary of a container")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("serve", help="streaming HTTP chat service")
    p.add_argument("--model", help="container path (falls back to $IMP_MODEL)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--max-image-bytes", type=int, default=DEFAULT_MAX_IMAGE_BYTES)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--cors-origin", default=None)
    p.add_argument("--static-dir", default=None, help="serve a web UI from this directory")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("make-tiny", help="write a tiny random model for tests and demos")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-res", type=int, default=196)
    p.set_defaults(func=cmd_make_tiny)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ImpError as e:
        print(f"imp {args.command}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"imp {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
