from typing import Any, Dict, List, Optional, TypedDict

import numpy as np


class EncodeState(TypedDict):
    # ── Input ──────────────────────────────────────────────────────
    model: Any                  # CodecModel
    raw:   np.ndarray           # (1, 3, H, W) in [0, 1]
    srgb:  np.ndarray           # (1, 3, H, W) uint8
    lmbda: float                # recorded in the container

    # ── Prepare ────────────────────────────────────────────────────
    orig_size: Optional[tuple]  # (H, W) before padding
    x:         Optional[Any]    # padded raw Tensor
    y:         Optional[np.ndarray]  # padded sRGB

    # ── Analysis / hyper ───────────────────────────────────────────
    z_hat: Optional[Any]        # quantized latent Tensor
    v_hat: Optional[Any]        # quantized hyper latent Tensor
    means: Optional[Any]        # ChannelMeans
    hyper_stream: Optional[bytes]
    hyper_bits:   Optional[float]   # table estimate
    h:     Optional[Any]        # hyper features
    masks: Optional[np.ndarray] # (1, N, h, w)

    # ── Step loop ──────────────────────────────────────────────────
    step:    int
    decoded: Optional[np.ndarray]
    records: List[Any]          # StepRecord per finished step

    # ── Output ─────────────────────────────────────────────────────
    container: Optional[bytes]
    stats:     Optional[Dict]


class DecodeState(TypedDict):
    # ── Input ──────────────────────────────────────────────────────
    model: Any
    srgb:  np.ndarray
    data:  bytes                # container bytes

    # ── Unpack ─────────────────────────────────────────────────────
    container: Optional[Any]    # MetadataContainer
    y:         Optional[np.ndarray]
    v_hat:     Optional[Any]
    h:         Optional[Any]
    masks:     Optional[np.ndarray]

    # ── Step loop ──────────────────────────────────────────────────
    step:      int
    decoded:   Optional[np.ndarray]
    z_partial: Optional[np.ndarray]
    records:   List[Any]

    # ── Output ─────────────────────────────────────────────────────
    x_hat: Optional[np.ndarray]  # (1, 3, H, W) cropped to the original extents
