"""
sRGB-guided context model: Gumbel order masks and the N-step coding schedule.

Step k is coded with (mu, sigma) predicted from the part of ẑ decoded in
steps 0..k-1 (nothing for k = 0). Masks are never stored; encoder and
decoder regenerate them from the order logits, which depend only on the
sRGB image and v̂, and from the seeded Gumbel buffer.
"""
from dataclasses import dataclass, field

import numpy as np

from coder import Bitstream, RangeDecoder, rc_encode
from entropy import select_gaussian, table_bits
from errors import InvariantError, ShapeError
from tensor import Tensor, as_tensor, no_grad, softmax

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class GumbelBuffer:
    """
    Gumbel(0, 1) noise as a pure function of (seed, k, i, j).

    Counter-based, so any crop of a larger grid holds exactly the values of
    the smaller grid at shared coordinates, and nothing is stored.
    """

    def __init__(self, seed: int, max_extents: tuple[int, int, int]):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.max_extents = tuple(max_extents)
        self._key = splitmix64(np.array([self.seed], dtype=np.uint64))[0]

    def values(self, n: int, h: int, w: int) -> np.ndarray:
        for name, got, limit in zip(("steps", "height", "width"), (n, h, w), self.max_extents):
            if got > limit:
                raise ShapeError(f"Gumbel buffer holds {limit} {name}, asked for {got}", name)
        k, i, j = np.meshgrid(
            np.arange(n, dtype=np.uint64),
            np.arange(h, dtype=np.uint64),
            np.arange(w, dtype=np.uint64),
            indexing="ij",
        )
        counter = (k << np.uint64(42)) | (i << np.uint64(21)) | j
        bits = splitmix64(counter ^ self._key)
        u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53
        return -np.log(-np.log(u))


# ─────────────────────────────────────────────
# ORDER MASKS
# ─────────────────────────────────────────────
def _noise(g, shape: tuple) -> np.ndarray:
    if isinstance(g, GumbelBuffer):
        return g.values(*shape[1:])
    return np.asarray(g, dtype=np.float64)


def soft_masks(m: Tensor, g, tau: float) -> Tensor:
    """Gumbel-softmax over the step axis; m are positive unnormalized probabilities."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = (m.log() + Tensor(_noise(g, m.shape))) / tau
    return softmax(scores, axis=1)


def hard_masks(m, g, strategy: str = "learned") -> np.ndarray:
    """Per latent pixel, the step it is coded in: argmax over k, first maximum wins."""
    logits = np.log(as_tensor(m).data)
    noise = _noise(g, logits.shape)
    if strategy == "learned":
        scores = logits + noise
    elif strategy == "deterministic":
        scores = logits
    elif strategy == "random":
        scores = np.broadcast_to(noise, logits.shape)
    else:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    return np.argmax(scores, axis=1)


def one_hot(assignment: np.ndarray, steps: int) -> np.ndarray:
    """(B, h, w) step indices -> (B, N, h, w) binary masks."""
    return (assignment[:, None] == np.arange(steps)[None, :, None, None]).astype(np.float64)


def check_partition(masks: np.ndarray):
    total = masks.sum(axis=1)
    if not np.all(total == 1.0):
        bad = int(np.count_nonzero(total != 1.0))
        raise InvariantError(f"order masks are not a partition: {bad} latent pixels covered != 1 times")


def order_masks(model, y, h: Tensor) -> np.ndarray:
    """Binary (1, N, h, w) masks from decode-side data only: the sRGB image and hyper features."""
    ctx = model.config.context()
    logits = model.order_net(y, h)
    assignment = hard_masks(logits, model.buffer, ctx.mask_strategy)
    masks = one_hot(assignment, ctx.steps)
    check_partition(masks)
    return masks


def step_positions(mask: np.ndarray, channels: int) -> tuple:
    """Indices into (C, h, w) of a step's symbols, channel-major then row-major."""
    return np.nonzero(np.broadcast_to(mask[0, 0] != 0, (channels,) + mask.shape[-2:]))


# ─────────────────────────────────────────────
# SCHEDULE
# ─────────────────────────────────────────────
@dataclass
class StepRecord:
    step: int
    mask: np.ndarray          # (1, 1, h, w)
    mu: np.ndarray            # (1, C, h, w)
    sigma: np.ndarray         # (1, C, h, w)
    symbols: np.ndarray       # int64, in (c, i, j) order
    estimated_bits: float = 0.0
    stream: Bitstream | None = field(default=None, repr=False)

    @property
    def sampling_rate(self) -> float:
        return float(self.mask.mean())


def _select(model, mu: np.ndarray, sigma: np.ndarray, positions: tuple):
    return select_gaussian(model.tables, model.scale_table, mu[0][positions], sigma[0][positions])


def encode_step(k: int, z_hat: Tensor, decoded: np.ndarray, masks: np.ndarray, y, h: Tensor, model) -> StepRecord:
    mu, sigma = model.step_parameters(z_hat, Tensor(decoded), y, h)
    mask = masks[:, k:k + 1]
    positions = step_positions(mask, z_hat.shape[1])
    symbols = z_hat.data[0][positions].astype(np.int64)
    tables, centre = _select(model, mu.data, sigma.data, positions)
    relative = symbols - centre
    return StepRecord(
        step=k,
        mask=mask,
        mu=mu.data,
        sigma=sigma.data,
        symbols=symbols,
        estimated_bits=table_bits(tables, relative),
        stream=rc_encode(relative, tables),
    )


def decode_step(k: int, stream: Bitstream, z_partial: np.ndarray, decoded: np.ndarray,
                masks: np.ndarray, y, h: Tensor, model) -> StepRecord:
    """Decode step k into `z_partial` in place."""
    mu, sigma = model.step_parameters(Tensor(z_partial), Tensor(decoded), y, h)
    mask = masks[:, k:k + 1]
    positions = step_positions(mask, z_partial.shape[1])
    tables, centre = _select(model, mu.data, sigma.data, positions)
    decoder = RangeDecoder(stream)
    relative = np.array([decoder.decode_symbol(t) for t in tables], dtype=np.int64)
    decoder.finish()
    symbols = relative + centre
    z_partial[0][positions] = symbols
    return StepRecord(step=k, mask=mask, mu=mu.data, sigma=sigma.data, symbols=symbols, stream=stream)


def prepare_schedule(model, y, v_hat: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Hyper features, order masks and the empty decoded mask; identical on both sides."""
    h = model.hyper_synthesis(v_hat, y)
    masks = order_masks(model, y, h)
    return h, masks, np.zeros((1, 1) + h.shape[-2:])


def mark_decoded(decoded: np.ndarray, masks: np.ndarray, k: int) -> np.ndarray:
    return decoded + masks[:, k:k + 1]


def encode_schedule(z_hat: Tensor, y, v_hat: Tensor, model) -> list[StepRecord]:
    with no_grad():
        h, masks, decoded = prepare_schedule(model, y, v_hat)
        records = []
        for k in range(model.config.context().steps):
            records.append(encode_step(k, z_hat, decoded, masks, y, h, model))
            decoded = mark_decoded(decoded, masks, k)
    return records


def decode_schedule(streams: list[Bitstream], y, v_hat: Tensor, model) -> tuple[Tensor, list[StepRecord]]:
    cfg = model.config
    steps = cfg.context().steps
    if len(streams) != steps:
        raise InvariantError(f"{len(streams)} latent streams for {steps} steps")
    with no_grad():
        h, masks, decoded = prepare_schedule(model, y, v_hat)
        z = np.zeros((1, cfg.latent_channels) + h.shape[-2:])
        records = []
        for k, stream in enumerate(streams):
            records.append(decode_step(k, stream, z, decoded, masks, y, h, model))
            decoded = mark_decoded(decoded, masks, k)
    return Tensor(z), records
