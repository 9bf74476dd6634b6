from ..errors import ConfigError
from .config import RnntConfig, TransformerConfig, config_from_dict
from .rnnt import RnntModel
from .rnnt import param_shapes as rnnt_param_shapes
from .transformer import TransformerModel
from .transformer import param_shapes as transformer_param_shapes


def param_shapes(config):
    if config.kind == "transformer":
        return transformer_param_shapes(config)
    return rnnt_param_shapes(config)


def build_model(config, seed: int = 0):
    if config.kind == "transformer":
        return TransformerModel.init(config, seed)
    if config.kind == "rnnt":
        return RnntModel.init(config, seed)
    raise ConfigError(f"unknown model kind {config.kind!r}")


def model_from_params(config, params):
    cls = TransformerModel if config.kind == "transformer" else RnntModel
    return cls(config, params)


__all__ = [
    "RnntConfig",
    "RnntModel",
    "TransformerConfig",
    "TransformerModel",
    "build_model",
    "config_from_dict",
    "model_from_params",
    "param_shapes",
]
