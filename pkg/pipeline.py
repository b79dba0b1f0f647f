"""
Compress / decompress as LangGraph state graphs.

    compress:   prepare -> analyse -> step (loops N times) -> pack
    decompress: unpack  -> hyper   -> step (loops N times) -> synthesize

The step node handles one context step per visit; a conditional edge sends
the state back to it until every step is coded.
"""
import time

import numpy as np
from langgraph.graph import END, StateGraph

from codec_state import DecodeState, EncodeState
from coder import Bitstream, MetadataContainer, bits_per_pixel, container_read, container_write, rc_decode, rc_encode
from console import fields, log
from context import decode_step, encode_step, mark_decoded, prepare_schedule
from entropy import ChannelMeans, channel_means, quantize, select_factorized, table_bits, to_channel_rows
from errors import InvariantError, ShapeError
from schemas import CompressStats, StepStats
from tensor import Tensor, no_grad

RAW_KEYS = ("raw", "x")


def pad_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad (1, C, H, W) on the bottom/right up to a multiple of `multiple`."""
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return img
    return np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")


# ─────────────────────────────────────────────
# COMPRESS NODES
# ─────────────────────────────────────────────
def prepare_node(state: EncodeState) -> dict:
    model, raw, srgb = state["model"], state["raw"], state["srgb"]
    if raw.shape != srgb.shape:
        raise ShapeError(f"raw {raw.shape} and sRGB {srgb.shape} do not align", "image extents")
    multiple = model.config.pad_multiple
    return {
        "orig_size": tuple(raw.shape[-2:]),
        "x": Tensor(pad_to_multiple(raw, multiple)),
        "y": pad_to_multiple(srgb, multiple),
    }


def analyse_node(state: EncodeState) -> dict:
    model, x, y = state["model"], state["x"], state["y"]
    cfg = model.config
    with no_grad():
        z = model.analysis(x, y)
        z_hat = quantize(z)
        v = model.hyper_analysis(z, y)
        v_hat = quantize(v)
        means = channel_means(v) if cfg.use_channel_means else ChannelMeans.zeros(cfg.hyper_channels)
        tables, centre = select_factorized(model.tables, means, v_hat.shape)
        relative = to_channel_rows(v_hat).reshape(-1).astype(np.int64) - centre
        hyper = rc_encode(relative, tables)
        h, masks, decoded = prepare_schedule(model, y, v_hat)
    return {
        "z_hat": z_hat,
        "v_hat": v_hat,
        "means": means,
        "hyper_stream": hyper.data,
        "hyper_bits": table_bits(tables, relative),
        "h": h,
        "masks": masks,
        "step": 0,
        "decoded": decoded,
        "records": [],
    }


def encode_step_node(state: EncodeState) -> dict:
    k, model = state["step"], state["model"]
    with no_grad():
        record = encode_step(k, state["z_hat"], state["decoded"], state["masks"], state["y"], state["h"], model)
    log("Compress", fields(
        step=k,
        symbols=len(record.symbols),
        bits=record.stream.bit_length,
        estimated=record.estimated_bits,
        sampling_rate=record.sampling_rate,
    ))
    return {
        "records": state["records"] + [record],
        "decoded": mark_decoded(state["decoded"], state["masks"], k),
        "step": k + 1,
    }


def pack_node(state: EncodeState) -> dict:
    model = state["model"]
    oh, ow = state["orig_size"]
    ph, pw = state["y"].shape[-2:]
    container = MetadataContainer(
        orig_width=ow,
        orig_height=oh,
        pad_width=pw,
        pad_height=ph,
        steps=model.config.context_steps,
        model_hash=model.model_hash,
        lmbda=state["lmbda"],
        means=state["means"],
        hyper=state["hyper_stream"],
        latents=[r.stream.data for r in state["records"]],
    )
    data = container_write(container)
    estimated = state["hyper_bits"] + 16 * len(state["means"].values) + sum(r.estimated_bits for r in state["records"])
    stats = {
        "payload_bits": container.payload_bits,
        "header_bytes": len(data) - container.payload_bits // 8,
        "bpp": container.bpp,
        "estimated_bpp": bits_per_pixel(estimated, ow, oh),
        "steps": [
            StepStats(
                step=r.step,
                symbols=len(r.symbols),
                bits=r.stream.bit_length,
                estimated_bits=r.estimated_bits,
                sampling_rate=r.sampling_rate,
            )
            for r in state["records"]
        ],
    }
    return {"container": data, "stats": stats}


def route_steps_encode(state: EncodeState) -> str:
    if state["step"] < state["model"].config.context_steps:
        return "step"
    return "pack"


# ─────────────────────────────────────────────
# DECOMPRESS NODES
# ─────────────────────────────────────────────
def _assert_decode_inputs(state: dict):
    leaked = [key for key in RAW_KEYS if key in state]
    if leaked:
        raise InvariantError(f"decode state carries raw-image data: {leaked}")


def unpack_node(state: DecodeState) -> dict:
    _assert_decode_inputs(state)
    model, srgb = state["model"], state["srgb"]
    container = container_read(state["data"], expected_hash=model.model_hash)
    if srgb.shape[-2:] != (container.orig_height, container.orig_width):
        raise ShapeError(
            f"sRGB is {srgb.shape[-2:]}, container was written for "
            f"{container.orig_height}x{container.orig_width}",
            "image extents",
        )
    y = pad_to_multiple(srgb, model.config.pad_multiple)
    if y.shape[-2:] != (container.pad_height, container.pad_width):
        raise ShapeError("padded extents disagree with the container", "padded extents")
    if container.steps != model.config.context_steps:
        raise InvariantError(f"container has {container.steps} steps, model codes {model.config.context_steps}")
    return {"container": container, "y": y}


def hyper_node(state: DecodeState) -> dict:
    _assert_decode_inputs(state)
    model, container, y = state["model"], state["container"], state["y"]
    cfg = model.config
    s = cfg.pad_multiple
    shape = (1, cfg.hyper_channels, container.pad_height // s, container.pad_width // s)
    tables, centre = select_factorized(model.tables, container.means, shape)
    symbols = np.array(rc_decode(Bitstream(container.hyper), tables), dtype=np.int64) + centre
    v_hat = Tensor(symbols.reshape(shape[1], 1, shape[2], shape[3]).transpose(1, 0, 2, 3).astype(np.float64))
    with no_grad():
        h, masks, decoded = prepare_schedule(model, y, v_hat)
    latent = (1, cfg.latent_channels) + h.shape[-2:]
    return {
        "v_hat": v_hat,
        "h": h,
        "masks": masks,
        "step": 0,
        "decoded": decoded,
        "z_partial": np.zeros(latent),
        "records": [],
    }


def decode_step_node(state: DecodeState) -> dict:
    k, model = state["step"], state["model"]
    stream = Bitstream(state["container"].latents[k])
    z = state["z_partial"].copy()
    with no_grad():
        record = decode_step(k, stream, z, state["decoded"], state["masks"], state["y"], state["h"], model)
    return {
        "z_partial": z,
        "records": state["records"] + [record],
        "decoded": mark_decoded(state["decoded"], state["masks"], k),
        "step": k + 1,
    }


def synthesize_node(state: DecodeState) -> dict:
    _assert_decode_inputs(state)
    model, container = state["model"], state["container"]
    with no_grad():
        x_hat = model.synthesis(Tensor(state["z_partial"]), state["y"])
    return {"x_hat": x_hat.data[:, :, :container.orig_height, :container.orig_width]}


def route_steps_decode(state: DecodeState) -> str:
    if state["step"] < state["container"].steps:
        return "step"
    return "synthesize"


# ─── Build Graphs ──────────────────────────────────────────────
def _build_compress():
    graph = StateGraph(EncodeState)
    graph.add_node("prepare", prepare_node)
    graph.add_node("analyse", analyse_node)
    graph.add_node("step",    encode_step_node)
    graph.add_node("pack",    pack_node)

    graph.set_entry_point("prepare")
    graph.add_edge("prepare", "analyse")
    graph.add_conditional_edges("analyse", route_steps_encode, {"step": "step", "pack": "pack"})
    graph.add_conditional_edges("step",    route_steps_encode, {"step": "step", "pack": "pack"})
    graph.add_edge("pack", END)
    return graph.compile()


def _build_decompress():
    graph = StateGraph(DecodeState)
    graph.add_node("unpack",     unpack_node)
    graph.add_node("hyper",      hyper_node)
    graph.add_node("step",       decode_step_node)
    graph.add_node("synthesize", synthesize_node)

    graph.set_entry_point("unpack")
    graph.add_edge("unpack", "hyper")
    graph.add_conditional_edges("hyper", route_steps_decode, {"step": "step", "synthesize": "synthesize"})
    graph.add_conditional_edges("step",  route_steps_decode, {"step": "step", "synthesize": "synthesize"})
    graph.add_edge("synthesize", END)
    return graph.compile()


compress_workflow = _build_compress()
decompress_workflow = _build_decompress()


def _recursion_limit(model) -> dict:
    return {"recursion_limit": 10 + 2 * model.config.context_steps}


def compress(model, raw: np.ndarray, srgb: np.ndarray, lmbda: float = 0.0) -> tuple[bytes, CompressStats, dict]:
    """Encode one (raw, sRGB) pair; arrays are (1, 3, H, W)."""
    initial: EncodeState = {
        "model": model,
        "raw": raw,
        "srgb": srgb,
        "lmbda": lmbda,
        "orig_size": None,
        "x": None,
        "y": None,
        "z_hat": None,
        "v_hat": None,
        "means": None,
        "hyper_stream": None,
        "hyper_bits": None,
        "h": None,
        "masks": None,
        "step": 0,
        "decoded": None,
        "records": [],
        "container": None,
        "stats": None,
    }
    t_start = time.time()
    final = compress_workflow.invoke(initial, config=_recursion_limit(model))
    oh, ow = final["orig_size"]
    stats = CompressStats(width=ow, height=oh, seconds=time.time() - t_start, **final["stats"])
    return final["container"], stats, final


def decompress(model, srgb: np.ndarray, data: bytes) -> tuple[np.ndarray, dict]:
    """Reconstruct the raw image from the sRGB image and container bytes alone."""
    initial: DecodeState = {
        "model": model,
        "srgb": srgb,
        "data": data,
        "container": None,
        "y": None,
        "v_hat": None,
        "h": None,
        "masks": None,
        "step": 0,
        "decoded": None,
        "z_partial": None,
        "records": [],
        "x_hat": None,
    }
    _assert_decode_inputs(initial)
    final = decompress_workflow.invoke(initial, config=_recursion_limit(model))
    return final["x_hat"], final
