"""
Likelihood models and their fixed-point coding tables.

Two models feed the range coder:
  * the conditional Gaussian for ẑ, coded through 64 scale x 16 offset tables
    (symbols recentred on floor(mu + 0.5)),
  * the channel-mean-centred factorized prior for v̂, coded through
    per-(channel, mean fraction) tables.

Every table is built in float64 and rounded once to 2^16 totals, so identical
parameters give identical tables everywhere.
"""
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, field_validator
from scipy import special

from errors import DomainError, EscapeRangeError, InvariantError
from tensor import Tensor, as_tensor

SIGMA_MIN = 0.11
SIGMA_MAX = 64.0
SCALE_LEVELS = 64
OFFSET_BINS = 16
CDF_PRECISION = 16
CDF_TOTAL = 1 << CDF_PRECISION
LIKELIHOOD_FLOOR = 2.0 ** -CDF_PRECISION
TRAIN_LIKELIHOOD_BOUND = 1e-9
MEAN_STEP = 64
MEAN_LIMIT = 512
ESCAPE_BITS = 16
FACTORIZED_MARGIN = 16
FACTORIZED_TAIL = 1e-6


# ─────────────────────────────────────────────
# QUANTIZATION
# ─────────────────────────────────────────────
def quantize(t) -> Tensor:
    """Round to nearest, ties away from zero. Signed zeros are normalized to +0."""
    a = as_tensor(t).data
    if not np.all(np.isfinite(a)):
        raise DomainError("quantize: NaN or Inf in input")
    return Tensor(np.sign(a) * np.floor(np.abs(a) + 0.5) + 0.0)


def noise_proxy(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Training stand-in for quantize: t + U(-1/2, 1/2)."""
    u = rng.uniform(-0.5, 0.5, size=t.shape)
    u[u == -0.5] = 0.0
    return t + Tensor(u)


# ─────────────────────────────────────────────
# GAUSSIAN
# ─────────────────────────────────────────────
def gaussian_likelihood(symbol, mu, sigma, floor: bool = False) -> np.ndarray:
    """P(s) = Phi((s+0.5-mu)/sigma) - Phi((s-0.5-mu)/sigma), evaluated on the lower tail."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < SIGMA_MIN * (1 - 1e-12)):
        raise DomainError(f"sigma below floor {SIGMA_MIN}: min={float(np.min(sigma))}")
    d = np.abs(np.asarray(symbol, dtype=np.float64) - np.asarray(mu, dtype=np.float64))
    p = special.ndtr((0.5 - d) / sigma) - special.ndtr((-0.5 - d) / sigma)
    if floor:
        p = np.maximum(p, LIKELIHOOD_FLOOR)
    return p


def gaussian_likelihood_t(values: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Differentiable Gaussian bin probability for training."""
    centred = values - mu
    upper = ((centred + 0.5) / sigma).ndtr()
    lower = ((centred - 0.5) / sigma).ndtr()
    return (upper - lower).clamp_min(TRAIN_LIKELIHOOD_BOUND)


def default_scale_table() -> np.ndarray:
    return np.exp(np.linspace(math.log(SIGMA_MIN), math.log(SIGMA_MAX), SCALE_LEVELS))


def gaussian_indexes(mu: np.ndarray, sigma: np.ndarray, scale_table: np.ndarray):
    """Map (mu, sigma) to (centre, scale index, offset bin)."""
    mu = np.asarray(mu, dtype=np.float64)
    centre = np.floor(mu + 0.5)
    offset = np.floor((mu - centre + 0.5) * OFFSET_BINS).astype(np.int64)
    rolled = offset >= OFFSET_BINS
    centre = np.where(rolled, centre + 1, centre)
    offset = np.where(rolled, 0, offset)
    log_step = math.log(scale_table[-1] / scale_table[0]) / (len(scale_table) - 1)
    position = np.log(np.asarray(sigma, dtype=np.float64) / scale_table[0]) / log_step
    scale = np.clip(np.floor(position + 0.5), 0, len(scale_table) - 1).astype(np.int64)
    return centre.astype(np.int64), scale, offset


def offset_centre(offset: int) -> float:
    """Representative fractional mean of an offset bin."""
    return -0.5 + (offset + 0.5) / OFFSET_BINS


# ─────────────────────────────────────────────
# CHANNEL MEANS
# ─────────────────────────────────────────────
class ChannelMeans(BaseModel):
    """Per-channel spatial means of v on a 1/64 grid, stored as int16 (value x 64)."""

    values: list[int]

    @field_validator("values")
    @classmethod
    def _in_range(cls, v: list[int]) -> list[int]:
        limit = MEAN_LIMIT * MEAN_STEP
        for q in v:
            if not -limit <= q < limit:
                raise DomainError(f"channel mean {q / MEAN_STEP} outside [-{MEAN_LIMIT}, {MEAN_LIMIT})")
        return v

    def decoded(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64) / MEAN_STEP

    @classmethod
    def zeros(cls, channels: int) -> "ChannelMeans":
        return cls(values=[0] * channels)


def channel_means(v) -> ChannelMeans:
    a = as_tensor(v).data
    means = a.mean(axis=(0, 2, 3))
    fixed = np.sign(means) * np.floor(np.abs(means) * MEAN_STEP + 0.5)
    limit = MEAN_LIMIT * MEAN_STEP
    if np.any(fixed < -limit) or np.any(fixed >= limit):
        raise DomainError(f"channel mean outside [-{MEAN_LIMIT}, {MEAN_LIMIT}): {means.tolist()}")
    return ChannelMeans(values=[int(q) for q in fixed])


def mean_split(means: ChannelMeans) -> tuple[np.ndarray, np.ndarray]:
    """Stored means -> (integer centre, fraction index in [0, 64)) per channel."""
    q = np.asarray(means.values, dtype=np.int64)
    centre = np.floor_divide(q + MEAN_STEP // 2, MEAN_STEP)
    return centre, q - MEAN_STEP * centre + MEAN_STEP // 2


# ─────────────────────────────────────────────
# FACTORIZED PRIOR
# ─────────────────────────────────────────────
class FactorizedPrior:
    """
    Per-channel monotone CDF network: K layers of softplus-positive matrices,
    biases, and tanh gates (all but the last layer). c(t) = sigmoid(logits(t)).
    """

    def __init__(self, params, channels: int, layers: int = 4, width: int = 3, prefix: str = "prior"):
        self.params = params
        self.channels = channels
        self.layers = layers
        self.width = width
        self.prefix = prefix

    @classmethod
    def init_params(cls, params, channels: int, rng: np.random.Generator, layers: int = 4,
                    width: int = 3, init_scale: float = 1.0, prefix: str = "prior") -> "FactorizedPrior":
        filters = (1,) + (width,) * (layers - 1) + (1,)
        scale = init_scale ** (1 / layers)
        for k in range(layers):
            init = np.log(np.expm1(1 / scale / filters[k + 1]))
            params.add(f"{prefix}.matrix{k}", np.full((channels, filters[k + 1], filters[k]), init))
            params.add(f"{prefix}.bias{k}", rng.uniform(-0.5, 0.5, (channels, filters[k + 1], 1)))
            if k < layers - 1:
                params.add(f"{prefix}.factor{k}", np.zeros((channels, filters[k + 1], 1)))
        return cls(params, channels, layers, width, prefix)

    def logits_cumulative(self, t: Tensor) -> Tensor:
        """t: (C, 1, n) -> logits (C, 1, n)."""
        logits = t
        for k in range(self.layers):
            logits = self.params[f"{self.prefix}.matrix{k}"].softplus() @ logits
            logits = logits + self.params[f"{self.prefix}.bias{k}"]
            if k < self.layers - 1:
                logits = logits + self.params[f"{self.prefix}.factor{k}"].tanh() * logits.tanh()
        return logits

    def cdf(self, t: np.ndarray) -> np.ndarray:
        """Numeric CDF per channel; t is (C, n)."""
        return special.expit(self._logits_numpy(np.asarray(t, dtype=np.float64)))

    def _logits_numpy(self, t: np.ndarray, channels=slice(None)) -> np.ndarray:
        logits = t[:, None, :]
        for k in range(self.layers):
            matrix = np.logaddexp(0.0, self.params[f"{self.prefix}.matrix{k}"].data[channels])
            logits = np.matmul(matrix, logits) + self.params[f"{self.prefix}.bias{k}"].data[channels]
            if k < self.layers - 1:
                gate = np.tanh(self.params[f"{self.prefix}.factor{k}"].data[channels])
                logits = logits + gate * np.tanh(logits)
        return logits[:, 0, :]

    def bin_probability(self, centred: np.ndarray, channels=slice(None)) -> np.ndarray:
        """c(t + 1/2) - c(t - 1/2) on (C, n), evaluated on the side of the median for precision."""
        lower = self._logits_numpy(centred - 0.5, channels)
        upper = self._logits_numpy(centred + 0.5, channels)
        sign = np.where(lower + upper > 0, -1.0, 1.0)
        return np.abs(special.expit(sign * upper) - special.expit(sign * lower))

    def likelihood_t(self, centred: Tensor) -> Tensor:
        """Differentiable version of `bin_probability` on (C, 1, n)."""
        upper = self.logits_cumulative(centred + 0.5).sigmoid()
        lower = self.logits_cumulative(centred - 0.5).sigmoid()
        return (upper - lower).clamp_min(TRAIN_LIKELIHOOD_BOUND)


def to_channel_rows(v) -> np.ndarray:
    """(1, C, h, w) -> (C, h*w)."""
    a = as_tensor(v).data
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def factorized_likelihood(v_hat, means: ChannelMeans, prior: FactorizedPrior, floor: bool = True) -> np.ndarray:
    """Probability of each v̂ element given the stored (fixed-point) channel means."""
    a = as_tensor(v_hat).data
    rows = to_channel_rows(a) - means.decoded()[:, None]
    p = prior.bin_probability(rows)
    if floor:
        p = np.maximum(p, LIKELIHOOD_FLOOR)
    b, c, h, w = a.shape
    return p.reshape(c, b, h, w).transpose(1, 0, 2, 3)


# ─────────────────────────────────────────────
# CDF TABLES
# ─────────────────────────────────────────────
def quantize_pmf(pmf: np.ndarray, total: int = CDF_TOTAL) -> np.ndarray:
    """
    Round a pmf to integer frequencies summing to `total`, each >= 1.

    Round-to-nearest first, then remove (or add) the surplus one unit at a time
    from the slots whose rounding overshot most (undershot most); stable
    ordering keeps the result platform independent.
    """
    pmf = np.maximum(np.asarray(pmf, dtype=np.float64), 0.0)
    if len(pmf) > total:
        raise InvariantError(f"{len(pmf)} symbols cannot share {total} frequency units")
    if pmf.sum() <= 0:
        pmf = np.ones_like(pmf)
    scaled = pmf / pmf.sum() * total
    freq = np.maximum(np.floor(scaled + 0.5), 1).astype(np.int64)
    surplus = int(freq.sum()) - total
    while surplus != 0:
        slack = freq - scaled
        if surplus > 0:
            candidates = np.nonzero(freq > 1)[0]
            order = candidates[np.argsort(-slack[candidates], kind="stable")]
            take = order[:surplus]
            freq[take] -= 1
        else:
            order = np.argsort(slack, kind="stable")
            take = order[:-surplus]
            freq[take] += 1
        surplus = int(freq.sum()) - total
    return freq


@dataclass(frozen=True)
class CdfTable:
    """Cumulative frequencies for symbols s_min..s_max, plus a trailing escape slot."""

    s_min: int
    cdf: np.ndarray
    escape: bool = True

    @classmethod
    def from_pmf(cls, s_min: int, pmf: np.ndarray, escape: bool = True) -> "CdfTable":
        pmf = np.asarray(pmf, dtype=np.float64)
        if escape:
            pmf = np.append(pmf, max(0.0, 1.0 - pmf.sum()))
        freq = quantize_pmf(pmf)
        return cls(s_min=int(s_min), cdf=np.concatenate([[0], np.cumsum(freq)]).astype(np.int64), escape=escape)

    @property
    def symbols(self) -> int:
        return len(self.cdf) - 1 - int(self.escape)

    @property
    def s_max(self) -> int:
        return self.s_min + self.symbols - 1

    def slot(self, s: int) -> int | None:
        idx = int(s) - self.s_min
        return idx if 0 <= idx < self.symbols else None

    def frequency(self, slot: int) -> tuple[int, int]:
        """(cumulative, frequency) of a slot."""
        return int(self.cdf[slot]), int(self.cdf[slot + 1] - self.cdf[slot])

    def probability(self, s: int) -> float:
        slot = self.slot(s)
        if slot is None:
            _, freq = self.frequency(self.symbols)
            return freq / CDF_TOTAL * 2.0 ** -ESCAPE_BITS
        return self.frequency(slot)[1] / CDF_TOTAL

    def bits(self, s: int) -> float:
        """Code length of s, including the raw escape payload when out of range."""
        slot = self.slot(s)
        if slot is None:
            if not self.escape:
                raise EscapeRangeError(f"symbol {s} outside [{self.s_min}, {self.s_max}] and no escape slot")
            return -math.log2(self.frequency(self.symbols)[1] / CDF_TOTAL) + ESCAPE_BITS
        return -math.log2(self.frequency(slot)[1] / CDF_TOTAL)

    def check(self):
        cdf = self.cdf
        if cdf[0] != 0 or cdf[-1] != CDF_TOTAL or np.any(np.diff(cdf) < 1):
            raise InvariantError(f"malformed CDF table starting at {self.s_min}")


@dataclass
class TableSet:
    gaussian: list[list[CdfTable]]    # [scale index][offset bin]
    factorized: list[list[CdfTable]]  # [channel][mean fraction index]


def zigzag(s: int) -> int:
    z = 2 * s if s >= 0 else -2 * s - 1
    if z >= 1 << ESCAPE_BITS:
        raise EscapeRangeError(f"symbol {s} exceeds the {ESCAPE_BITS}-bit escape payload")
    return z


def unzigzag(z: int) -> int:
    return z // 2 if z % 2 == 0 else -(z + 1) // 2


def build_gaussian_tables(scale_table: np.ndarray) -> list[list[CdfTable]]:
    grid = []
    for sigma in scale_table:
        bound = math.ceil(5 * sigma + 0.5)
        symbols = np.arange(-bound, bound + 1)
        row = []
        for offset in range(OFFSET_BINS):
            pmf = gaussian_likelihood(symbols, offset_centre(offset), sigma)
            row.append(CdfTable.from_pmf(-bound, pmf))
        grid.append(row)
    return grid


def factorized_range(prior: FactorizedPrior) -> list[tuple[int, int]]:
    """Per channel symbol range: where the CDF leaves its 1e-6 tails, widened by 16."""
    grid = np.arange(-MEAN_LIMIT - FACTORIZED_MARGIN, MEAN_LIMIT + FACTORIZED_MARGIN + 1, dtype=np.float64)
    cdf = prior.cdf(np.broadcast_to(grid, (prior.channels, len(grid))))
    ranges = []
    for row in cdf:
        inside = np.nonzero((row > FACTORIZED_TAIL) & (row < 1 - FACTORIZED_TAIL))[0]
        if len(inside):
            lo, hi = grid[inside[0]], grid[inside[-1]]
        else:
            lo = hi = grid[int(np.searchsorted(row, 0.5))]
        lo = int(max(lo - FACTORIZED_MARGIN, -MEAN_LIMIT))
        hi = int(min(hi + FACTORIZED_MARGIN, MEAN_LIMIT))
        ranges.append((lo, hi))
    return ranges


def build_factorized_tables(prior: FactorizedPrior) -> list[list[CdfTable]]:
    grid = []
    fractions = (np.arange(MEAN_STEP) - MEAN_STEP // 2) / MEAN_STEP
    for channel, (lo, hi) in enumerate(factorized_range(prior)):
        symbols = np.arange(lo, hi + 1, dtype=np.float64)
        centred = (symbols[None, :] - fractions[:, None]).reshape(1, -1)
        pmfs = prior.bin_probability(centred, slice(channel, channel + 1)).reshape(MEAN_STEP, -1)
        grid.append([CdfTable.from_pmf(lo, pmf) for pmf in pmfs])
    return grid


def build_cdf_tables(model) -> TableSet:
    return TableSet(
        gaussian=build_gaussian_tables(model.scale_table),
        factorized=build_factorized_tables(model.prior),
    )


# ─────────────────────────────────────────────
# TABLE LOOKUP
# ─────────────────────────────────────────────
def select_gaussian(tables: TableSet, scale_table: np.ndarray, mu, sigma) -> tuple[list[CdfTable], np.ndarray]:
    """Per element: the table to code with and the integer centre symbols are taken relative to."""
    centre, scale, offset = gaussian_indexes(mu, sigma, scale_table)
    picked = [tables.gaussian[s][o] for s, o in zip(scale.tolist(), offset.tolist())]
    return picked, centre


def select_factorized(tables: TableSet, means: ChannelMeans, shape: tuple) -> tuple[list[CdfTable], np.ndarray]:
    """Per v̂ element in (c, i, j) order: the table and the channel centre symbols are taken relative to."""
    centre, fraction = mean_split(means)
    channels, count = shape[1], int(np.prod(shape[2:]))
    if len(centre) != channels:
        raise InvariantError(f"{len(centre)} channel means for {channels} hyper channels")
    picked = []
    for c in range(channels):
        picked.extend([tables.factorized[c][int(fraction[c])]] * count)
    return picked, np.repeat(centre, count)


def table_bits(tables_per_symbol: list[CdfTable], symbols) -> float:
    return float(sum(t.bits(int(s)) for t, s in zip(tables_per_symbol, symbols)))
