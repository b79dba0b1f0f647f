"""
The seven networks: g_a, g_s, h_a, h_s, g_z (masked decoder), g_c (Gaussian
prior module) and g_m (order prediction), each conditioned on the sRGB image.

Networks are plain functions over a ParamSet; `init_params` registers every
weight under a `<net>.<layer>.<weight|bias>` name so parameter groups can be
inspected per net. Image-boundary convolutions in g_a/g_s reflect-pad;
entropy-model nets zero-pad.
"""
import math

import numpy as np

from conv import conv2d, deconv2d
from errors import DomainError, ShapeError
from schemas import NetConfig
from tensor import Tensor, as_tensor, concat, space_to_depth

SIGMA_FLOOR = 0.11
ORDER_FLOOR = 1e-12
NETS = ("g_a", "g_s", "h_a", "h_s", "g_z", "g_c", "g_m")


# ─────────────────────────────────────────────
# PARAMETER REGISTRATION
# ─────────────────────────────────────────────
def _conv(params, name: str, c_out: int, c_in: int, k: int, rng: np.random.Generator, bias: float = 0.0):
    std = math.sqrt(2.0 / (c_in * k * k))
    params.add(f"{name}.weight", rng.normal(0.0, std, (c_out, c_in, k, k)))
    params.add(f"{name}.bias", np.full(c_out, bias))


def _deconv(params, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
    std = math.sqrt(2.0 / (c_in * k * k / (stride * stride)))
    params.add(f"{name}.weight", rng.normal(0.0, std, (c_in, c_out, k, k)))
    params.add(f"{name}.bias", np.zeros(c_out))


def _stages(cfg: NetConfig) -> int:
    return int(math.log2(cfg.analysis_stride_total))


def _srgb_channels(stride: int) -> int:
    return 3 * stride * stride


def init_params(params, cfg: NetConfig, rng: np.random.Generator):
    hid, cz, cv, n = cfg.hidden_channels, cfg.latent_channels, cfg.hyper_channels, cfg.context_steps
    s_total = cfg.analysis_stride_total

    # ── g_a ────────────────────────────────────────────────────────
    c_in = 3
    for s in range(_stages(cfg)):
        c_in += _srgb_channels(2 ** s)
        _conv(params, f"g_a.down{s}.conv1", hid, c_in, 3, rng)
        _conv(params, f"g_a.down{s}.conv2", hid, hid, 3, rng)
        _conv(params, f"g_a.down{s}.skip", hid, c_in, 1, rng)
        for r in range(cfg.residual_blocks):
            _conv(params, f"g_a.res{s}_{r}.conv1", hid, hid, 3, rng)
            _conv(params, f"g_a.res{s}_{r}.conv2", hid, hid, 3, rng)
        c_in = hid
    _conv(params, "g_a.out", cz, hid + _srgb_channels(s_total), 3, rng)

    # ── g_s ────────────────────────────────────────────────────────
    _conv(params, "g_s.in", hid, cz + _srgb_channels(s_total), 3, rng)
    for s in reversed(range(_stages(cfg))):
        for r in range(cfg.residual_blocks):
            _conv(params, f"g_s.res{s}_{r}.conv1", hid, hid, 3, rng)
            _conv(params, f"g_s.res{s}_{r}.conv2", hid, hid, 3, rng)
        c_up = hid + _srgb_channels(2 ** (s + 1))
        _deconv(params, f"g_s.up{s}.deconv", c_up, hid, 4, rng, stride=2)
        _conv(params, f"g_s.up{s}.conv", hid, hid, 3, rng)
        _deconv(params, f"g_s.up{s}.skip", c_up, hid, 1, rng, stride=2)
    _conv(params, "g_s.out", 3, hid + 3, 3, rng, bias=0.5)

    # ── h_a / h_s ──────────────────────────────────────────────────
    _conv(params, "h_a.conv1", hid, cz + _srgb_channels(s_total), 3, rng)
    _conv(params, "h_a.conv2", cv, hid, 3, rng)
    _deconv(params, "h_s.deconv1", cv, hid, 4, rng, stride=2)
    _deconv(params, "h_s.deconv2", hid, hid, 4, rng, stride=2)
    _conv(params, "h_s.conv1", hid, hid + _srgb_channels(s_total), 3, rng)
    _conv(params, "h_s.conv2", 2 * cz, hid, 1, rng)

    # ── g_z / g_c / g_m ────────────────────────────────────────────
    _deconv(params, "g_z.mdeconv1", cz, hid, 3, rng)
    _deconv(params, "g_z.mdeconv2", hid, hid, 3, rng)
    _conv(params, "g_z.out", hid, hid + _srgb_channels(s_total), 1, rng)
    _conv(params, "g_c.conv1", hid, hid + 2 * cz, 1, rng)
    _conv(params, "g_c.conv2", 2 * cz, hid, 1, rng)
    _conv(params, "g_m.conv1", hid, _srgb_channels(s_total) + 2 * cz, 3, rng)
    _conv(params, "g_m.conv2", n, hid, 1, rng)


# ─────────────────────────────────────────────
# BUILDING BLOCKS
# ─────────────────────────────────────────────
def _c(params, name: str, x: Tensor, stride: int = 1, pad_mode: str = "reflect") -> Tensor:
    w = params[f"{name}.weight"]
    return conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[2] // 2, pad_mode=pad_mode)


def _up(params, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.weight"]
    if w.shape[2] == 1:
        return deconv2d(x, w, params[f"{name}.bias"], stride=2, output_padding=1)
    return deconv2d(x, w, params[f"{name}.bias"], stride=2, padding=1)


def _residual(params, name: str, x: Tensor, slope: float) -> Tensor:
    h = _c(params, f"{name}.conv1", x).leaky_relu(slope)
    return x + _c(params, f"{name}.conv2", h)


def srgb_condition(y, target_stride: int) -> Tensor:
    """8-bit sRGB -> [0, 1], rearranged to 1/target_stride resolution by space_to_depth."""
    a = as_tensor(y).data
    if a.ndim == 3:
        a = a[None]
    return space_to_depth(Tensor(a / 255.0), target_stride)


def _check_pair(x: Tensor, y, op: str):
    ys = as_tensor(y).shape[-2:]
    if x.shape[-2:] != ys:
        raise ShapeError(f"{op}: raw {x.shape[-2:]} vs sRGB {ys}", "spatial extents")


# ─────────────────────────────────────────────
# NETWORKS
# ─────────────────────────────────────────────
def analysis(params, cfg: NetConfig, x: Tensor, y) -> Tensor:
    _check_pair(x, y, "analysis")
    slope = cfg.leaky_slope
    h = x
    for s in range(_stages(cfg)):
        h = concat([h, srgb_condition(y, 2 ** s)])
        main = _c(params, f"g_a.down{s}.conv1", h, stride=2).leaky_relu(slope)
        main = _c(params, f"g_a.down{s}.conv2", main)
        h = main + _c(params, f"g_a.down{s}.skip", h, stride=2)
        for r in range(cfg.residual_blocks):
            h = _residual(params, f"g_a.res{s}_{r}", h, slope)
    h = concat([h, srgb_condition(y, cfg.analysis_stride_total)])
    return _c(params, "g_a.out", h)


def synthesis(params, cfg: NetConfig, z_hat: Tensor, y) -> Tensor:
    s_total = cfg.analysis_stride_total
    expected = tuple(d // s_total for d in as_tensor(y).shape[-2:])
    if z_hat.shape[-2:] != expected or z_hat.shape[1] != cfg.latent_channels:
        raise ShapeError(f"synthesis: latent {z_hat.shape} does not match sRGB at stride {s_total}", "latent")
    slope = cfg.leaky_slope
    h = _c(params, "g_s.in", concat([z_hat, srgb_condition(y, s_total)])).leaky_relu(slope)
    for s in reversed(range(_stages(cfg))):
        for r in range(cfg.residual_blocks):
            h = _residual(params, f"g_s.res{s}_{r}", h, slope)
        h = concat([h, srgb_condition(y, 2 ** (s + 1))])
        main = _up(params, f"g_s.up{s}.deconv", h).leaky_relu(slope)
        main = _c(params, f"g_s.up{s}.conv", main)
        h = main + _up(params, f"g_s.up{s}.skip", h)
    out = _c(params, "g_s.out", concat([h, srgb_condition(y, 1)]))
    return out.clamp(0.0, 1.0)


def hyper_analysis(params, cfg: NetConfig, z: Tensor, y) -> Tensor:
    h, w = z.shape[-2:]
    if h % cfg.hyper_stride_total or w % cfg.hyper_stride_total:
        raise ShapeError(f"hyper_analysis: latent {h}x{w} not divisible by {cfg.hyper_stride_total}", "latent extents")
    h_ = concat([z, srgb_condition(y, cfg.analysis_stride_total)])
    h_ = _c(params, "h_a.conv1", h_, stride=2, pad_mode="zeros").leaky_relu(cfg.leaky_slope)
    return _c(params, "h_a.conv2", h_, stride=2, pad_mode="zeros")


def hyper_synthesis(params, cfg: NetConfig, v_hat: Tensor, y) -> Tensor:
    s_total = cfg.analysis_stride_total
    expected = tuple(d // (s_total * cfg.hyper_stride_total) for d in as_tensor(y).shape[-2:])
    if v_hat.shape[-2:] != expected or v_hat.shape[1] != cfg.hyper_channels:
        raise ShapeError(f"hyper_synthesis: hyper latent {v_hat.shape} does not match sRGB", "hyper latent")
    slope = cfg.leaky_slope
    h = _up(params, "h_s.deconv1", v_hat).leaky_relu(slope)
    h = _up(params, "h_s.deconv2", h).leaky_relu(slope)
    h = concat([h, srgb_condition(y, s_total)])
    h = _c(params, "h_s.conv1", h, pad_mode="zeros").leaky_relu(slope)
    return _c(params, "h_s.conv2", h, pad_mode="zeros")


def _is_binary(mask: Tensor) -> bool:
    return bool(np.all((mask.data == 0.0) | (mask.data == 1.0)))


def masked_deconv(z_masked: Tensor, mask: Tensor, weight: Tensor, bias: Tensor, training: bool = False) -> Tensor:
    """(Deconv(M ⊙ ẑ) + b) / max(1, Deconv_1(M)), with Deconv_1 an all-one kernel."""
    if mask.shape[1] != 1:
        raise ShapeError(f"masked_deconv: mask must have one channel, got {mask.shape[1]}", "mask channels")
    if not training and not _is_binary(mask):
        raise DomainError("masked_deconv: soft masks are only allowed in training")
    k = weight.shape[2]
    ones = Tensor(np.ones((1, 1, k, k)))
    count = deconv2d(mask, ones, padding=k // 2)
    return deconv2d(z_masked, weight, bias, padding=k // 2) / count.clamp_min(1.0)


def apply_mask(z_hat: Tensor, mask: Tensor) -> Tensor:
    """M ⊙ ẑ; the +0 folds -0.0 into +0.0 so encoder and decoder inputs agree bitwise."""
    return z_hat * mask + 0.0


def masked_decoder(params, cfg: NetConfig, z_masked: Tensor, decoded_mask: Tensor, y, training: bool = False) -> Tensor:
    slope = cfg.leaky_slope
    p = params
    h = masked_deconv(z_masked, decoded_mask, p["g_z.mdeconv1.weight"], p["g_z.mdeconv1.bias"], training)
    h = h.leaky_relu(slope)
    k = p["g_z.mdeconv1.weight"].shape[2]
    visible = deconv2d(decoded_mask, Tensor(np.ones((1, 1, k, k))), padding=k // 2).clamp(0.0, 1.0)
    if not training:
        visible = Tensor((visible.data > 0).astype(np.float64))
    h = masked_deconv(h * visible, visible, p["g_z.mdeconv2.weight"], p["g_z.mdeconv2.bias"], training)
    h = h.leaky_relu(slope)
    h = concat([h, srgb_condition(y, cfg.analysis_stride_total)])
    return _c(params, "g_z.out", h, pad_mode="zeros")


def gaussian_prior(params, cfg: NetConfig, ctx: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
    if ctx.shape[-2:] != h.shape[-2:]:
        raise ShapeError(f"gaussian_prior: context {ctx.shape[-2:]} vs hyper features {h.shape[-2:]}", "spatial extents")
    out = _c(params, "g_c.conv1", concat([ctx, h]), pad_mode="zeros").leaky_relu(cfg.leaky_slope)
    out = _c(params, "g_c.conv2", out, pad_mode="zeros")
    cz = cfg.latent_channels
    mu = out[:, :cz]
    sigma = out[:, cz:].softplus().clamp_min(SIGMA_FLOOR)
    return mu, sigma


def order_net(params, cfg: NetConfig, y, h: Tensor) -> Tensor:
    """Positive unnormalized order probabilities m, N channels at latent resolution."""
    out = concat([srgb_condition(y, cfg.analysis_stride_total), h])
    out = _c(params, "g_m.conv1", out, pad_mode="zeros").leaky_relu(cfg.leaky_slope)
    out = _c(params, "g_m.conv2", out, pad_mode="zeros")
    return out.softplus().clamp_min(ORDER_FLOOR)
