"""Run configuration: a flat key/value schema, loadable from an INI file.

Example file::

    [run]
    data = corpus.sdf, more.xyz
    n_max = 9
    vocab = C, N, O, F
    steps = 2000
    class_conditional = true

Every key is a :class:`RunConfig` field; list values are comma separated.
``--set key=value`` on the command line overrides the file.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .dit import DiTConfig

CACHE_ENV = "D3MES_CACHE_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: list[str] = field(default_factory=list)
    cache_dir: str = ""  # empty: $D3MES_CACHE_DIR, else ./d3mes_cache
    n_max: int = 9
    vocab: list[str] = field(default_factory=lambda: ["C", "N", "O", "F"])
    # model
    hidden: int = 128
    depth: int = 6
    heads: int = 4
    patch: int = 3
    attn_heads: int = 4
    attn_channels: int = 16
    attn_vectors: int = 1  # type-1 outputs written to the coordinate channel
    use_attention: bool = True
    residual_attention: bool = False
    class_conditional: bool = False
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kl_weight: float = 1.0
    bin_width: float = 0.02
    center_noise: bool = True  # zero-mean coordinate noise
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 0.0
    lr_schedule: str = "constant"  # or "cosine": decay to 0 at the last step
    warmup_steps: int = 0
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    ema_decay: float = 0.0  # 0 disables EMA
    log_interval: int = 100
    checkpoint_interval: int = 0  # 0: only at the end
    # sampling
    bond_mode: str = "geometry"

    def validate(self) -> "RunConfig":
        errors = []
        if self.n_max < 3:
            errors.append("n_max must be >= 3")
        if len(self.vocab) > self.n_max:
            errors.append(f"vocabulary of {len(self.vocab)} elements exceeds grid side n_max={self.n_max}")
        if len(set(self.vocab)) != len(self.vocab):
            errors.append("vocabulary has duplicates")
        if "H" in self.vocab:
            errors.append("hydrogen cannot be in the heavy-atom vocabulary")
        if self.patch < 1 or self.n_max % self.patch:
            errors.append(f"patch size {self.patch} does not divide n_max {self.n_max}")
        if self.hidden % self.heads:
            errors.append(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 2:
            errors.append("hidden must be even")
        if self.attn_channels % self.attn_heads:
            errors.append("attn_channels not divisible by attn_heads")
        if self.T < 1:
            errors.append("T must be >= 1")
        if not (0 < self.beta_start <= self.beta_end < 1):
            errors.append("need 0 < beta_start <= beta_end < 1")
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            errors.append("lr, steps must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            errors.append(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.warmup_steps < 0:
            errors.append("warmup_steps must be >= 0")
        if not 0 <= self.ema_decay < 1:
            errors.append("ema_decay must be in [0, 1)")
        if self.bond_mode not in ("geometry", "channel"):
            errors.append(f"bond_mode must be 'geometry' or 'channel', got {self.bond_mode!r}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def dit_config(self) -> DiTConfig:
        return DiTConfig(
            hidden=self.hidden,
            depth=self.depth,
            heads=self.heads,
            patch=self.patch,
            grid=self.n_max,
            num_classes=2 if self.class_conditional else 0,
            n_vocab=len(self.vocab),
            use_attention=self.use_attention,
            residual_attention=self.residual_attention,
            attn_heads=self.attn_heads,
            attn_channels=self.attn_channels,
            attn_vectors=self.attn_vectors,
        )

    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir or os.environ.get(CACHE_ENV) or "d3mes_cache")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(k, v) for k, v in d.items()}).validate()

    @classmethod
    def load(
        cls, path: str | Path | None = None, overrides: Mapping[str, str] | None = None, base: Mapping[str, Any] | None = None
    ) -> "RunConfig":
        """Defaults, then ``base`` (e.g. :data:`DESK_PROFILE`), then the INI file, then ``overrides``."""
        values: dict[str, Any] = dict(base or {})
        if path is not None:
            parser = configparser.ConfigParser()
            parser.optionxform = str  # keys are case-sensitive (T)
            if not parser.read(path):
                raise ConfigError(f"cannot read config file {path}")
            if not parser.has_section("run"):
                raise ConfigError(f"{path}: missing [run] section")
            values.update(parser["run"])
        values.update(overrides or {})
        return cls.from_dict(values)


# Desk-scale profile: a 50-step chain (betas rescaled by 1000/T) and the
# optimiser and attention settings that fit 16 molecules in 5000 CPU steps.
DESK_PROFILE = dict(
    T=50,
    beta_start=2e-3,
    beta_end=0.4,
    residual_attention=True,
    attn_vectors=3,
    steps=5000,
    batch_size=64,
    lr=1e-3,
    lr_schedule="cosine",
    warmup_steps=200,
    ema_decay=0.999,
)

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    kind = _TYPES[name]
    try:
        if kind == "bool":
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind.startswith("list"):
            return [v.strip() for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return value.strip()
