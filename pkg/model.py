"""CodecModel: parameters, configuration, Gumbel seed and coding tables in one object."""
from pathlib import Path

import numpy as np

import checkpoint
import transforms
from checkpoint import Checkpoint, ParamSet
from context import GumbelBuffer
from entropy import FactorizedPrior, TableSet, build_cdf_tables, default_scale_table
from errors import ConfigError, InvariantError
from schemas import NetConfig
from tensor import Tensor

MAX_LATENT_EXTENT = 1 << 12


class CodecModel:
    def __init__(
        self,
        params: ParamSet,
        config: NetConfig,
        gumbel_seed: int,
        scale_table: np.ndarray | None = None,
        tables: TableSet | None = None,
    ):
        self.params = params
        self.config = config
        self.gumbel_seed = int(gumbel_seed)
        self.scale_table = default_scale_table() if scale_table is None else np.asarray(scale_table, dtype=np.float64)
        if np.any(self.scale_table <= 0) or np.any(np.diff(self.scale_table) <= 0):
            raise InvariantError("scale table must be positive and strictly increasing")
        self._tables = tables
        self.prior = FactorizedPrior(
            params, config.hyper_channels, layers=config.prior_layers, width=config.prior_width
        )
        self.buffer = GumbelBuffer(
            self.gumbel_seed, (config.context_steps, MAX_LATENT_EXTENT, MAX_LATENT_EXTENT)
        )

    @classmethod
    def initialize(cls, config: NetConfig, seed: int = 0, gumbel_seed: int | None = None) -> "CodecModel":
        rng = np.random.default_rng(seed)
        params = ParamSet()
        transforms.init_params(params, config, rng)
        FactorizedPrior.init_params(
            params, config.hyper_channels, rng, layers=config.prior_layers, width=config.prior_width
        )
        if gumbel_seed is None:
            gumbel_seed = int(rng.integers(0, 2 ** 63))
        return cls(params, config, gumbel_seed)

    # ── Identity ───────────────────────────────────────────────────
    def config_json(self) -> str:
        return self.config.model_dump_json()

    @property
    def model_hash(self) -> bytes:
        return checkpoint.model_digest(self.params.to_bytes(), self.config_json(), self.gumbel_seed)

    # ── Tables ─────────────────────────────────────────────────────
    @property
    def tables(self) -> TableSet:
        if self._tables is None:
            self._tables = build_cdf_tables(self)
        return self._tables

    def rebuild_tables(self) -> TableSet:
        self._tables = build_cdf_tables(self)
        return self._tables

    def invalidate_tables(self):
        self._tables = None

    # ── Networks ───────────────────────────────────────────────────
    def analysis(self, x: Tensor, y) -> Tensor:
        return transforms.analysis(self.params, self.config, x, y)

    def synthesis(self, z_hat: Tensor, y) -> Tensor:
        return transforms.synthesis(self.params, self.config, z_hat, y)

    def hyper_analysis(self, z: Tensor, y) -> Tensor:
        return transforms.hyper_analysis(self.params, self.config, z, y)

    def hyper_synthesis(self, v_hat: Tensor, y) -> Tensor:
        return transforms.hyper_synthesis(self.params, self.config, v_hat, y)

    def masked_decoder(self, z_masked: Tensor, decoded_mask: Tensor, y, training: bool = False) -> Tensor:
        return transforms.masked_decoder(self.params, self.config, z_masked, decoded_mask, y, training)

    def gaussian_prior(self, ctx: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        return transforms.gaussian_prior(self.params, self.config, ctx, h)

    def order_net(self, y, h: Tensor) -> Tensor:
        return transforms.order_net(self.params, self.config, y, h)

    def step_parameters(self, z_hat: Tensor, decoded_mask: Tensor, y, h: Tensor, training: bool = False):
        """(mu, sigma) for the next step given the decoded part of ẑ."""
        ctx = self.masked_decoder(transforms.apply_mask(z_hat, decoded_mask), decoded_mask, y, training)
        return self.gaussian_prior(ctx, h)

    # ── Persistence ────────────────────────────────────────────────
    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.params,
            config_json=self.config_json(),
            gumbel_seed=self.gumbel_seed,
            scale_table=self.scale_table,
            tables=self._tables,
        )

    def save(self, path: str | Path):
        checkpoint.save(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CodecModel":
        try:
            config = NetConfig.model_validate_json(ckpt.config_json)
        except ValueError as exc:
            raise ConfigError(f"checkpoint carries an invalid configuration: {exc}") from exc
        return cls(ckpt.params, config, ckpt.gumbel_seed, ckpt.scale_table, ckpt.tables)

    @classmethod
    def load(cls, path: str | Path) -> "CodecModel":
        return cls.from_checkpoint(checkpoint.load(path))

    def with_strategy(self, strategy: str) -> "CodecModel":
        """Same weights and tables, different order-mask strategy (changes the hash)."""
        try:
            config = NetConfig(**{**self.config.model_dump(), "mask_strategy": strategy})
        except ValueError as exc:
            raise ConfigError(f"unknown mask strategy {strategy!r}") from exc
        return CodecModel(self.params, config, self.gumbel_seed, self.scale_table, self._tables)
