"""Image quality (PSNR / SSIM), bits per pixel, and bit-allocation maps."""
from dataclasses import dataclass

import cv2
import numpy as np

from coder import MetadataContainer, bits_per_pixel
from context import StepRecord, step_positions
from entropy import ChannelMeans, select_factorized, select_gaussian, to_channel_rows
from errors import ShapeError
from tensor import Tensor, as_tensor, no_grad, resample

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10

# SSIM on [0, 1] data
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW = (11, 11)
SSIM_SIGMA = 1.5


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"compared images differ: {a.shape} vs {b.shape}", "image shape")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _same_shape(a, b)
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr_from_mse(err: float) -> float:
    if err < MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """dB on [0, 1] data, capped at 100 dB."""
    return psnr_from_mse(mse(a, b))


def _ssim_plane(p: np.ndarray, q: np.ndarray) -> float:
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu1 = cv2.GaussianBlur(p, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA)
    mu2 = cv2.GaussianBlur(q, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA)
    var1 = cv2.GaussianBlur(p * p, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA) - mu1 ** 2
    var2 = cv2.GaussianBlur(q * q, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA) - mu2 ** 2
    cov = cv2.GaussianBlur(p * q, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA) - mu1 * mu2
    index = ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) / ((mu1 ** 2 + mu2 ** 2 + c1) * (var1 + var2 + c2))
    return float(index.mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM averaged over channels; inputs (1, C, H, W) on [0, 1]."""
    _same_shape(a, b)
    a = np.asarray(a, dtype=np.float64).reshape(-1, *a.shape[-2:])
    b = np.asarray(b, dtype=np.float64).reshape(-1, *b.shape[-2:])
    return float(np.mean([_ssim_plane(p, q) for p, q in zip(a, b)]))


def bpp(container: MetadataContainer) -> float:
    return container.bpp


# ─────────────────────────────────────────────
# BIT-ALLOCATION MAPS
# ─────────────────────────────────────────────
@dataclass
class BppMaps:
    image: np.ndarray           # (H, W) bits per pixel at padded image resolution
    latent: np.ndarray          # (h, w) bits of ẑ per latent position
    hyper: np.ndarray           # (hv, wv) bits of v̂ per hyper position
    steps: list[np.ndarray]     # per step: bits of every position under that step's parameters
    step_bits: list[float]      # per step: bits of the positions the step actually codes
    sampling_rates: list[float]

    @property
    def total_bits(self) -> float:
        return float(self.latent.sum() + self.hyper.sum())


def _position_bits(model, mu: np.ndarray, sigma: np.ndarray, z: np.ndarray, positions: tuple) -> np.ndarray:
    tables, centre = select_gaussian(model.tables, model.scale_table, mu[0][positions], sigma[0][positions])
    relative = z[0][positions].astype(np.int64) - centre
    return np.array([t.bits(int(s)) for t, s in zip(tables, relative)])


def _upsample_mass(m: np.ndarray, r: int) -> np.ndarray:
    with no_grad():
        return resample(Tensor(m[None, None]), "bilinear_up_mass", r).data[0, 0]


def hyper_bit_map(model, v_hat, means: ChannelMeans) -> np.ndarray:
    v = as_tensor(v_hat).data
    tables, centre = select_factorized(model.tables, means, v.shape)
    relative = to_channel_rows(v).reshape(-1).astype(np.int64) - centre
    bits = np.array([t.bits(int(s)) for t, s in zip(tables, relative)])
    return bits.reshape(v.shape[1], *v.shape[-2:]).sum(axis=0)


def bpp_map(model, z_hat, v_hat, means: ChannelMeans, records: list[StepRecord]) -> BppMaps:
    """
    Per-pixel bit allocation. ẑ bits land on the latent position at the step
    that codes it; v̂ bits are spread over the latent grid with a
    mass-preserving upsample; the sum is upsampled again to image resolution.
    The image map sums to the estimated stream bits (means block excluded).
    """
    z = as_tensor(z_hat).data
    channels, (h, w) = z.shape[1], z.shape[-2:]
    latent = np.zeros((h, w))
    steps, step_bits = [], []
    everywhere = step_positions(np.ones((1, 1, h, w)), channels)
    for record in records:
        positions = step_positions(record.mask, channels)
        bits = _position_bits(model, record.mu, record.sigma, z, positions)
        np.add.at(latent, (positions[1], positions[2]), bits)
        step_bits.append(float(bits.sum()))

        full = np.zeros((h, w))
        np.add.at(full, (everywhere[1], everywhere[2]), _position_bits(model, record.mu, record.sigma, z, everywhere))
        steps.append(full)

    hyper = hyper_bit_map(model, v_hat, means)
    on_latent = latent + _upsample_mass(hyper, model.config.hyper_stride_total)
    image = _upsample_mass(on_latent, model.config.analysis_stride_total)
    return BppMaps(
        image=image,
        latent=latent,
        hyper=hyper,
        steps=steps,
        step_bits=step_bits,
        sampling_rates=[r.sampling_rate for r in records],
    )


def split_statistic(m: np.ndarray) -> dict:
    """Mean bits in the left (flat) and right (textured) halves of a composite image."""
    w = m.shape[-1]
    left, right = float(m[..., : w // 2].mean()), float(m[..., w // 2:].mean())
    return {"flat_mean": left, "texture_mean": right, "ratio": right / left if left > 0 else float("inf")}


def estimated_bpp(maps: BppMaps, means: ChannelMeans, width: int, height: int) -> float:
    return bits_per_pixel(maps.total_bits + 16 * len(means.values), width, height)
