"""
Rate-distortion training.

Training path: noise proxy for quantization and Gumbel-softmax masks.
Evaluation path (pipeline.py): hard rounding and argmax masks.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from console import fail, fields, log
from context import soft_masks
from entropy import channel_means, gaussian_likelihood_t, noise_proxy, quantize
from errors import NumericError
from ispdata import degrade_srgb, write_csv
from metrics import psnr_from_mse
from model import CodecModel
from schemas import EpochRecord, NetConfig, TrainConfig
from tensor import Tensor, backward

# ─────────────────────────────────────────────
# OPTIMIZER CONFIG
# ─────────────────────────────────────────────
ADAM_CONFIG = {
    "beta1": 0.9,
    "beta2": 0.999,
    "eps":   1e-8,
}

LOG_COLUMNS = ["epoch", "loss", "rate_z", "rate_v", "mse", "psnr", "lr"]
LN2 = math.log(2.0)


def rd_loss(rate_z, rate_v, mse, lmbda: float):
    """L = R_z + R_v + lambda * D, rates in bits per pixel."""
    return rate_z + rate_v + mse * lmbda


# ─────────────────────────────────────────────
# ADAM + PLATEAU
# ─────────────────────────────────────────────
@dataclass
class TrainState:
    lr: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_loss: float = math.inf
    stale_epochs: int = 0


def adam_step(params, grads: dict, state: TrainState, lr: float | None = None):
    """Bias-corrected Adam update in place. Parameters without a gradient are left alone."""
    lr = state.lr if lr is None else lr
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient", name)
    state.step += 1
    b1, b2, eps = ADAM_CONFIG["beta1"], ADAM_CONFIG["beta2"], ADAM_CONFIG["eps"]
    for name, grad in grads.items():
        if grad is None:
            continue
        p = params[name]
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_plateau(state: TrainState, epoch_loss: float, cfg: TrainConfig) -> float:
    """Cut lr by plateau_factor after plateau_patience epochs without relative improvement."""
    if epoch_loss < state.best_loss - cfg.plateau_threshold * abs(state.best_loss) or math.isinf(state.best_loss):
        state.best_loss = epoch_loss
        state.stale_epochs = 0
        return state.lr
    state.stale_epochs += 1
    if state.stale_epochs >= cfg.plateau_patience:
        state.lr *= cfg.plateau_factor
        state.stale_epochs = 0
    return state.lr


# ─────────────────────────────────────────────
# FORWARD PASS
# ─────────────────────────────────────────────
def _hyper_rows(v: Tensor) -> Tensor:
    """(1, C, h, w) -> (C, 1, h*w) for the factorized prior."""
    c = v.shape[1]
    return v.transpose(1, 0, 2, 3).reshape(c, 1, -1)


def forward_train(model: CodecModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                  rng: np.random.Generator) -> dict:
    """Relaxed forward pass; returns the loss Tensor and its parts (floats)."""
    net = model.config
    pixels = x.shape[-2] * x.shape[-1]
    x_in = Tensor(x if cfg.metadata else np.zeros_like(x))

    z = model.analysis(x_in, y)
    if not cfg.metadata:
        x_hat = model.synthesis(z, y)
        err = x_hat - Tensor(x)
        mse = (err * err).mean()
        loss = rd_loss(0.0, 0.0, mse, cfg.lmbda)
        return {"loss": loss, "rate_z": 0.0, "rate_v": 0.0, "mse": mse.item()}

    z_tilde = noise_proxy(z, rng)
    v = model.hyper_analysis(z, y)
    v_tilde = noise_proxy(v, rng)

    rows = _hyper_rows(v_tilde)
    if net.use_channel_means:
        means = channel_means(v).decoded()
        rows = rows - Tensor(means[:, None, None])
    rate_v = -(model.prior.likelihood_t(rows).log().sum()) / LN2

    ctx = net.context()
    h = model.hyper_synthesis(v_tilde, y)
    masks = soft_masks(model.order_net(y, h), model.buffer, ctx.tau)
    decoded = Tensor(np.zeros((1, 1) + z.shape[-2:]))
    rate_z = Tensor(0.0)
    for k in range(ctx.steps):
        mask_k = masks[:, k:k + 1]
        mu, sigma = model.step_parameters(z_tilde, decoded, y, h, training=True)
        bits = -(gaussian_likelihood_t(z_tilde, mu, sigma).log()) / LN2
        rate_z = rate_z + (bits * mask_k).sum()
        decoded = decoded + mask_k

    z_syn = z_tilde
    if cfg.straight_through:
        z_syn = z + Tensor(quantize(z).data - z.data)
    x_hat = model.synthesis(z_syn, y)
    err = x_hat - Tensor(x)
    mse = (err * err).mean()
    loss = rd_loss(rate_z / pixels, rate_v / pixels, mse, cfg.lmbda)
    return {
        "loss": loss,
        "rate_z": rate_z.item() / pixels,
        "rate_v": rate_v.item() / pixels,
        "mse": mse.item(),
    }


# ─────────────────────────────────────────────
# TRAINING LOOP
# ─────────────────────────────────────────────
def _crop(rng: np.random.Generator, x: np.ndarray, y: np.ndarray, patch: int):
    h, w = x.shape[-2:]
    if h <= patch and w <= patch:
        return x, y
    i = int(rng.integers(0, h - patch + 1)) if h > patch else 0
    j = int(rng.integers(0, w - patch + 1)) if w > patch else 0
    return x[..., i:i + patch, j:j + patch], y[..., i:i + patch, j:j + patch]


def prepare_pairs(pairs: list[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if cfg.jpeg_quality is None:
        return pairs
    return [(x, degrade_srgb(y, cfg.jpeg_quality)) for x, y in pairs]


def train_run(pairs: list[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig, net: NetConfig,
              out_dir: str | Path) -> tuple[CodecModel, list[EpochRecord]]:
    """
    Train on (raw, sRGB) pairs. Writes `train_log.csv` and `model.ckpt` (best
    epoch so far) into out_dir; the returned model carries built coding tables.
    A NaN loss or gradient aborts with NumericError and leaves the last good
    checkpoint on disk.
    """
    if not pairs:
        raise ValueError("training corpus is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out / "model.ckpt", out / "train_log.csv"

    rng = np.random.default_rng(cfg.seed)
    model = CodecModel.initialize(net, seed=cfg.seed)
    state = TrainState(lr=cfg.lr)
    pairs = prepare_pairs(pairs, cfg)
    history: list[EpochRecord] = []
    best = math.inf

    log("Train", fields(images=len(pairs), params=model.params.count(), lmbda=cfg.lmbda, epochs=cfg.epochs))
    for epoch in range(1, cfg.epochs + 1):
        totals = {"loss": 0.0, "rate_z": 0.0, "rate_v": 0.0, "mse": 0.0}
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), cfg.batch):
            model.params.zero_grad()
            batch = order[start:start + cfg.batch]
            for idx in batch:
                x, y = _crop(rng, *pairs[idx], cfg.patch)
                out_k = forward_train(model, x, y, cfg, rng)
                if not math.isfinite(out_k["loss"].item()):
                    fail("Train", fields(epoch=epoch, image=int(idx), loss=out_k["loss"].item()))
                    raise NumericError(f"loss diverged at epoch {epoch}; last good checkpoint kept at {ckpt_path}")
                backward(out_k["loss"] / len(batch))
                for key in totals:
                    value = out_k[key]
                    totals[key] += value.item() if isinstance(value, Tensor) else value
            grads = {name: t.grad for name, t in model.params.items()}
            try:
                adam_step(model.params, grads, state)
            except NumericError as exc:
                fail("Train", f"epoch={epoch} | {exc}")
                raise

        means = {key: value / len(pairs) for key, value in totals.items()}
        record = EpochRecord(
            epoch=epoch,
            loss=means["loss"],
            rate_z=means["rate_z"],
            rate_v=means["rate_v"],
            mse=means["mse"],
            psnr=psnr_from_mse(means["mse"]),
            lr=state.lr,
        )
        history.append(record)
        lr_plateau(state, record.loss, cfg)
        log("Train", fields(**record.model_dump()))

        if record.loss < best:
            best = record.loss
            model.invalidate_tables()
            model.save(ckpt_path)
        write_csv(log_path, LOG_COLUMNS, [[getattr(r, c) for c in LOG_COLUMNS] for r in history])

    model = CodecModel.load(ckpt_path)
    model.rebuild_tables()
    model.save(ckpt_path)
    log("Model", fields(hash=model.model_hash.hex()[:16], checkpoint=str(ckpt_path)))
    return model, history
