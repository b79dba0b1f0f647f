"""
main.py: command-line surface of the raw metadata codec.

    python main.py gen-data  --out data/corpus --count 200
    python main.py train     --corpus data/corpus --out runs --lmbda 1.0
    python main.py compress  --raw a_raw.png --srgb a_srgb.png --model runs/model.ckpt --out a.rlcm
    python main.py decompress --srgb a_srgb.png --meta a.rlcm --model runs/model.ckpt --out a_hat.png
    python main.py eval | inspect | bppmap | errmap ...
"""
import os

# Load env vars before any other imports touch them
from dotenv import load_dotenv
load_dotenv()

# Single-threaded BLAS: fixed reduction order
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys
import time
from pathlib import Path

import numpy as np

import config
from coder import container_read, dump_header
from console import fail, fields, log, table, warn
from errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, CodecError
from ispdata import (
    degrade_srgb,
    list_corpus,
    quant_error_map,
    read_raw,
    read_srgb,
    write_corpus,
    write_csv,
    write_pgm,
    write_raw,
)
from metrics import bpp_map, psnr, split_statistic, ssim
from model import CodecModel
from pipeline import compress, decompress

EVAL_COLUMNS = ["name", "bpp", "bpp_estimated", "psnr", "ssim", "status"]


# ─────────────────────────────────────────────
# HELPERS
# ─────────────────────────────────────────────
RUN_FLAGS = ("jpeg_quality", "mask_strategy")


def run_settings(args) -> dict:
    """Per-invocation flags that live outside the config sections."""
    return {name: getattr(args, name) for name in RUN_FLAGS if hasattr(args, name)}


def _echo(resolved: dict, model: CodecModel | None = None, args=None):
    for line in config.echo_lines(resolved):
        log("Config", line)
    settings = run_settings(args) if args is not None else {}
    if settings:
        log("Config", "run: " + fields(**settings))

    if model is not None:
        log("Config", "net: " + " | ".join(f"{k}={v}" for k, v in model.config.model_dump().items()))
    log("Model", f"hash={model.model_hash.hex() if model is not None else 'n/a'}")


def _load_model(path: str, strategy: str | None = None) -> CodecModel:
    model = CodecModel.load(path)
    if strategy is not None and strategy != model.config.mask_strategy:
        model = model.with_strategy(strategy)
    return model


def _srgb_input(path, quality: int | None) -> np.ndarray:
    y = read_srgb(path)
    return y if quality is None else degrade_srgb(y, quality)


# ─────────────────────────────────────────────
# COMMANDS
# ─────────────────────────────────────────────
def cmd_gen_data(args) -> int:
    resolved = config.resolve(args, "corpus", "isp")
    _echo(resolved)
    items = write_corpus(args.out, resolved["corpus"], resolved["isp"])
    log("Data", fields(images=len(items), out=args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    from train import train_run

    resolved = config.resolve(args, "net", "train")
    _echo(resolved)
    pairs = [item.load() for item in list_corpus(args.corpus)]
    model, history = train_run(pairs, resolved["train"], resolved["net"], args.out)
    log("Model", f"hash={model.model_hash.hex()}")
    log("Train", fields(epochs=len(history), final_loss=history[-1].loss, best_loss=min(r.loss for r in history)))
    return EXIT_OK


def cmd_compress(args) -> int:
    model = _load_model(args.model)
    _echo({}, model, args)
    x, y = read_raw(args.raw), _srgb_input(args.srgb, args.jpeg_quality)
    data, stats, _ = compress(model, x, y, lmbda=args.lmbda)
    Path(args.out).write_bytes(data)
    log("Compress", fields(
        out=args.out,
        bpp=stats.bpp,
        estimated_bpp=stats.estimated_bpp,
        header_bytes=stats.header_bytes,
        seconds=stats.seconds,
    ))
    for s in stats.steps:
        log("Compress", fields(step=s.step, bits=s.bits, estimated_bits=s.estimated_bits, sampling_rate=s.sampling_rate))
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = _load_model(args.model)
    _echo({}, model, args)
    y = _srgb_input(args.srgb, args.jpeg_quality)
    t_start = time.time()
    x_hat, _ = decompress(model, y, Path(args.meta).read_bytes())
    write_raw(args.out, x_hat)
    log("Decompress", fields(out=args.out, width=x_hat.shape[-1], height=x_hat.shape[-2], seconds=time.time() - t_start))
    if args.truth:
        x = read_raw(args.truth)
        log("Decompress", fields(psnr=psnr(x, x_hat), ssim=ssim(x, x_hat)))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model, args.mask_strategy)
    _echo({}, model, args)
    items = list_corpus(args.corpus)
    rows, failed = [], 0
    for item in items:
        try:
            x, y = item.load()
            y = y if args.jpeg_quality is None else degrade_srgb(y, args.jpeg_quality)
            data, stats, _ = compress(model, x, y)
            x_hat, _ = decompress(model, y, data)
            row = [item.name, stats.bpp, stats.estimated_bpp, psnr(x, x_hat), ssim(x, x_hat), "ok"]
            log("Eval", fields(image=item.name, bpp=row[1], bpp_estimated=row[2], psnr=row[3], ssim=row[4]))
        except CodecError as exc:
            failed += 1
            fail("Eval", f"image={item.name} | {type(exc).__name__}: {exc}")
            row = [item.name, None, None, None, None, "failed"]
        rows.append(row)

    ok = [r for r in rows if r[-1] == "ok"]
    mean = ["mean"] + [float(np.mean([r[i] for r in ok])) if ok else None for i in range(1, 5)]
    mean.append("ok" if not failed else f"{failed} failed")
    write_csv(args.out, EVAL_COLUMNS, rows + [mean])
    table("Eval", EVAL_COLUMNS, [mean])
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_inspect(args) -> int:
    model = _load_model(args.model) if args.model else None
    _echo({}, model, args)
    data = Path(args.meta).read_bytes()
    container = container_read(data, expected_hash=model.model_hash if model else None)
    if args.dump_header:
        table(args.meta, ["field", "value"], dump_header(container, len(data)))
    else:
        log("Inspect", fields(bytes=len(data), bpp=container.bpp, steps=container.steps))
    return EXIT_OK


def cmd_bppmap(args) -> int:
    model = _load_model(args.model, args.mask_strategy)
    _echo({}, model, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, composite = [], []
    for item in list_corpus(args.corpus):
        x, y = item.load()
        _, stats, state = compress(model, x, y)
        maps = bpp_map(model, state["z_hat"], state["v_hat"], state["means"], state["records"])
        oh, ow = state["orig_size"]
        image = maps.image[:oh, :ow]
        write_pgm(out / f"{item.name}_bpp.pgm", image)
        for k, step_map in enumerate(maps.steps):
            write_pgm(out / f"{item.name}_step{k}.pgm", step_map)
        split = split_statistic(image)
        if "composite_halves" in item.name:
            composite.append(split)
        rows.append([
            item.name, maps.total_bits, stats.estimated_bpp, split["flat_mean"], split["texture_mean"], split["ratio"],
            " ".join(f"{b:.1f}" for b in maps.step_bits),
            " ".join(f"{r:.4f}" for r in maps.sampling_rates),
        ])
        log("BppMap", fields(image=item.name, bits=maps.total_bits, ratio=split["ratio"]))
    write_csv(
        out / "bppmap.csv",
        ["name", "bits", "bpp_estimated", "flat_mean", "texture_mean", "ratio", "step_bits", "sampling_rates"],
        rows,
    )
    if composite:
        flat = float(np.mean([s["flat_mean"] for s in composite]))
        texture = float(np.mean([s["texture_mean"] for s in composite]))
        log("BppMap", fields(composite_images=len(composite), flat_mean=flat, texture_mean=texture,
                             ratio=texture / flat if flat > 0 else float("inf")))
    else:
        warn("BppMap", "no composite_halves images in corpus; split statistic skipped")
    return EXIT_OK


def cmd_errmap(args) -> int:
    resolved = config.resolve(args, "isp")
    _echo(resolved)
    isp = resolved["isp"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for item in list_corpus(args.corpus):
        e = quant_error_map(read_raw(item.raw_path), isp)
        write_pgm(out / f"{item.name}_err.pgm", e)
        rows.append([item.name, float(e.max()), float(e.mean())])
        log("ErrMap", fields(image=item.name, max=rows[-1][1], mean=rows[-1][2]))
    write_csv(out / "errmap.csv", ["name", "max", "mean"], rows)
    return EXIT_OK


# ─────────────────────────────────────────────
# PARSER
# ─────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlcm", description="Raw-image metadata codec")
    parser.add_argument("--config", default=None, help="KEY=VALUE config file (defaults < file < flags)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic raw/sRGB corpus")
    p.add_argument("--out", default=config.RLCM_CORPUS)
    config.add_section_flags(p, "corpus", "isp")
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("train", help="rate-distortion training")
    p.add_argument("--corpus", default=config.RLCM_CORPUS)
    p.add_argument("--out", default=str(Path(config.RLCM_MODEL).parent))
    config.add_section_flags(p, "net", "train")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("compress", help="raw + sRGB -> metadata container")
    p.add_argument("--raw", required=True)
    p.add_argument("--srgb", required=True)
    p.add_argument("--model", default=config.RLCM_MODEL)
    p.add_argument("--out", required=True)
    p.add_argument("--lmbda", type=float, default=0.0, help="training lambda recorded in the container")
    p.add_argument("--jpeg-quality", type=int, default=None)
    p.set_defaults(run=cmd_compress)

    p = sub.add_parser("decompress", help="sRGB + container -> raw")
    p.add_argument("--srgb", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--model", default=config.RLCM_MODEL)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None, help="ground-truth raw PNG for PSNR/SSIM")
    p.add_argument("--jpeg-quality", type=int, default=None)
    p.set_defaults(run=cmd_decompress)

    p = sub.add_parser("eval", help="per-image and mean bpp / PSNR / SSIM")
    p.add_argument("--corpus", default=config.RLCM_CORPUS)
    p.add_argument("--model", default=config.RLCM_MODEL)
    p.add_argument("--out", default="eval.csv")
    p.add_argument("--jpeg-quality", type=int, default=None)
    p.add_argument("--mask-strategy", choices=["learned", "deterministic", "random"], default=None)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("inspect", help="container summary")
    p.add_argument("--meta", required=True)
    p.add_argument("--model", default=None, help="verify the container against this model")
    p.add_argument("--dump-header", action="store_true")
    p.set_defaults(run=cmd_inspect)

    p = sub.add_parser("bppmap", help="bit-allocation maps")
    p.add_argument("--corpus", default=config.RLCM_CORPUS)
    p.add_argument("--model", default=config.RLCM_MODEL)
    p.add_argument("--out", default="bppmaps")
    p.add_argument("--mask-strategy", choices=["learned", "deterministic", "random"], default=None)
    p.set_defaults(run=cmd_bppmap)

    p = sub.add_parser("errmap", help="sRGB quantization-error maps")
    p.add_argument("--corpus", default=config.RLCM_CORPUS)
    p.add_argument("--out", default="errmaps")
    config.add_section_flags(p, "isp")
    p.set_defaults(run=cmd_errmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except CodecError as exc:
        fail(args.command.capitalize(), f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    except (FileNotFoundError, ValueError) as exc:
        fail(args.command.capitalize(), str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
