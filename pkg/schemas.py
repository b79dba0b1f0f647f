import json
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _json_list(value):
    """Config files carry lists as JSON text (``GAINS=[2.0, 1.0, 1.6]``)."""
    if isinstance(value, str):
        return json.loads(value)
    return value


class ContextConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(default=2, ge=1, description="N, number of coding steps")
    tau: float = Field(default=0.5, gt=0, description="Gumbel-softmax temperature")
    mask_strategy: Literal["learned", "deterministic", "random"] = "learned"


class NetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    latent_channels: int = Field(default=32, ge=1, description="C_z")
    hyper_channels: int = Field(default=16, ge=1, description="C_v")
    analysis_stride_total: int = Field(default=8, description="spatial reduction of g_a")
    hyper_stride_total: int = Field(default=4, description="spatial reduction of h_a (fixed)")
    hidden_channels: int = Field(default=48, ge=1)
    residual_blocks: int = Field(default=2, ge=0, description="residual blocks per stage")
    context_steps: int = Field(default=2, ge=1, description="N: 2 for clean sRGB, 4 for degraded")
    leaky_slope: float = 0.2
    prior_layers: int = Field(default=4, ge=1, description="K, monotone layers of the factorized prior")
    prior_width: int = Field(default=3, ge=1)
    use_channel_means: bool = True
    tau: float = Field(default=0.5, gt=0)
    mask_strategy: Literal["learned", "deterministic", "random"] = "learned"

    @field_validator("analysis_stride_total")
    @classmethod
    def _stride_power_of_two(cls, v: int) -> int:
        if not _is_power_of_two(v) or v < 2:
            raise ValueError(f"analysis_stride_total must be a power of two >= 2, got {v}")
        return v

    @field_validator("hyper_stride_total")
    @classmethod
    def _hyper_stride_fixed(cls, v: int) -> int:
        if v != 4:
            raise ValueError(f"hyper_stride_total is fixed at 4, got {v}")
        return v

    @property
    def pad_multiple(self) -> int:
        return self.analysis_stride_total * self.hyper_stride_total

    def context(self) -> ContextConfig:
        return ContextConfig(steps=self.context_steps, tau=self.tau, mask_strategy=self.mask_strategy)


class IspConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gains: List[float] = Field(default=[1.9, 1.0, 1.6], min_length=3, max_length=3)
    ccm: List[List[float]] = Field(
        default=[[1.55, -0.40, -0.15], [-0.25, 1.45, -0.20], [0.05, -0.50, 1.45]],
        description="3x3 colour matrix, rows sum to 1",
    )
    gamma: float = Field(default=1 / 2.2, gt=0, le=1)
    levels: int = Field(default=256, ge=2)
    quantize: bool = True
    epsilon: float = Field(default=1e-3, gt=0)

    @field_validator("gains", "ccm", mode="before")
    @classmethod
    def _parse_lists(cls, v):
        return _json_list(v)

    @field_validator("gains")
    @classmethod
    def _positive_gains(cls, v: List[float]) -> List[float]:
        if any(g <= 0 for g in v):
            raise ValueError(f"white-balance gains must be positive, got {v}")
        return v

    @field_validator("ccm")
    @classmethod
    def _rows_sum_to_one(cls, v: List[List[float]]) -> List[List[float]]:
        if len(v) != 3 or any(len(row) != 3 for row in v):
            raise ValueError("ccm must be 3x3")
        for row in v:
            if abs(sum(row) - 1.0) > 1e-6:
                raise ValueError(f"ccm row {row} does not sum to 1")
        return v

    @classmethod
    def identity(cls, gamma: float = 1.0, quantize: bool = True) -> "IspConfig":
        return cls(
            gains=[1.0, 1.0, 1.0],
            ccm=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma=gamma,
            quantize=quantize,
        )


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lmbda: float = Field(default=1.0, gt=0, description="rate-distortion weight")
    lr: float = Field(default=1e-4, gt=0)
    plateau_factor: float = Field(default=0.1, gt=0, lt=1)
    plateau_patience: int = Field(default=20, ge=1)
    plateau_threshold: float = Field(default=1e-6, ge=0, description="relative improvement that counts")
    epochs: int = Field(default=30, ge=1)
    batch: int = Field(default=1, ge=1)
    patch: int = Field(default=64, ge=32)
    seed: int = 0
    jpeg_quality: Optional[int] = Field(default=None, ge=1, le=100, description="train on degraded sRGB")
    metadata: bool = Field(default=True, description="False trains the sRGB-only baseline")
    straight_through: bool = False

    @model_validator(mode="after")
    def _patch_multiple(self):
        if self.patch % 32:
            raise ValueError(f"patch must be a multiple of 32, got {self.patch}")
        return self

    @classmethod
    def degraded_defaults(cls, **overrides) -> "TrainConfig":
        values = {"lmbda": 0.05, "jpeg_quality": 50, "epochs": 60}
        values.update(overrides)
        return cls(**values)


class CorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    count: int = Field(default=200, ge=1)
    width: int = Field(default=64, ge=32)
    height: int = Field(default=64, ge=32)
    recipes: List[str] = Field(
        default=["flat", "gradient", "perlin_texture", "overexposed_mix", "composite_halves"]
    )
    seed: int = 0

    @field_validator("recipes", mode="before")
    @classmethod
    def _parse_recipes(cls, v):
        return _json_list(v)


# ─────────────────────────────────────────────
# REPORTS
# ─────────────────────────────────────────────
class EpochRecord(BaseModel):
    epoch: int
    loss: float
    rate_z: float
    rate_v: float
    mse: float
    psnr: float
    lr: float


class StepStats(BaseModel):
    step: int
    symbols: int
    bits: int
    estimated_bits: float
    sampling_rate: float = Field(description="fraction of latent pixels coded at this step")

    @property
    def bits_per_symbol(self) -> float:
        return self.bits / self.symbols if self.symbols else 0.0


class CompressStats(BaseModel):
    width: int
    height: int
    payload_bits: int
    header_bytes: int
    bpp: float
    estimated_bpp: float
    steps: List[StepStats]
    seconds: float


class EvalRow(BaseModel):
    name: str
    bpp: Optional[float] = None
    bpp_estimated: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    status: Literal["ok", "failed"] = "ok"
