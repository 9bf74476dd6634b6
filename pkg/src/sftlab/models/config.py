from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError
from .layers import subsample_out_freq

SUBSAMPLE_FACTOR = 4


def _check_common(cfg) -> None:
    if cfg.D % cfg.heads:
        raise ConfigError(f"D={cfg.D} is not divisible by heads={cfg.heads}")
    if cfg.V < 5:
        raise ConfigError(f"V={cfg.V} too small: blank, unknown, start and end need ids of their own")
    if cfg.subsample_factor != SUBSAMPLE_FACTOR:
        raise ConfigError(f"subsample_factor is fixed at {SUBSAMPLE_FACTOR}")
    if len(cfg.sub_channels) != len(cfg.sub_strides):
        raise ConfigError("sub_channels and sub_strides must have equal length")
    if sorted(cfg.sub_strides).count(2) != 2 or any(s not in (1, 2) for s in cfg.sub_strides):
        raise ConfigError("the subsampling stack needs exactly two stride-2 convolutions")
    if min(cfg.F, cfg.D, cfg.d_ff, cfg.heads) < 1 or cfg.N < 0:
        raise ConfigError("dimensions must be positive")


def _from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("sub_channels", "sub_strides"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


@dataclass(frozen=True)
class TransformerConfig:
    F: int = 16
    D: int = 64
    N: int = 2
    M: int = 2
    heads: int = 4
    d_ff: int = 128
    V: int = 36
    subsample_factor: int = SUBSAMPLE_FACTOR
    sub_channels: tuple[int, ...] = (16, 16)
    sub_strides: tuple[int, ...] = (2, 2)
    dropout: float = 0.0
    kind: str = field(default="transformer", init=False)

    def __post_init__(self):
        _check_common(self)
        if self.M < 0:
            raise ConfigError("M must be non-negative")

    @property
    def F_prime(self) -> int:
        return self.sub_channels[-1] * subsample_out_freq(self.F, self.sub_strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("kind")
        d["sub_channels"] = list(self.sub_channels)
        d["sub_strides"] = list(self.sub_strides)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TransformerConfig":
        return _from_dict(cls, data)

    @classmethod
    def paper(cls) -> "TransformerConfig":
        return cls(F=80, D=512, N=12, M=6, heads=8, d_ff=2048, V=5002, sub_channels=(512, 512))


@dataclass(frozen=True)
class RnntConfig:
    F: int = 16
    D: int = 64
    N: int = 2
    heads: int = 4
    d_ff: int = 128
    V: int = 36
    subsample_factor: int = SUBSAMPLE_FACTOR
    sub_channels: tuple[int, ...] = (8, 8, 16, 16)
    sub_strides: tuple[int, ...] = (1, 2, 1, 2)
    conv_kernel: int = 7
    embed_dim: int = 64
    pred_hidden: int = 64
    joint_hidden: int = 64
    dropout: float = 0.0
    kind: str = field(default="rnnt", init=False)

    def __post_init__(self):
        _check_common(self)
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")

    @property
    def F_prime(self) -> int:
        return self.sub_channels[-1] * subsample_out_freq(self.F, self.sub_strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("kind")
        d["sub_channels"] = list(self.sub_channels)
        d["sub_strides"] = list(self.sub_strides)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RnntConfig":
        return _from_dict(cls, data)

    @classmethod
    def paper(cls) -> "RnntConfig":
        return cls(
            F=80,
            D=512,
            N=12,
            heads=4,
            d_ff=2048,
            V=5002,
            sub_channels=(64, 64, 128, 128),
            conv_kernel=31,
            embed_dim=1024,
            pred_hidden=512,
            joint_hidden=512,
        )


def config_from_dict(kind: str, data: dict):
    if kind == "transformer":
        return TransformerConfig.from_dict(data)
    if kind == "rnnt":
        return RnntConfig.from_dict(data)
    raise ConfigError(f"unknown model kind {kind!r}")
