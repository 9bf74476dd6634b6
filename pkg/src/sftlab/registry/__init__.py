from .checkpoint import check_shapes, load_checkpoint, read_container, save_checkpoint, write_container
from .taxonomy import (
    TAGS_BY_KIND,
    Census,
    ModuleTag,
    census,
    classify_param,
    count_params,
    human_count,
    human_percent,
    is_bias,
)
from .tree import ParamTree

__all__ = [
    "TAGS_BY_KIND",
    "Census",
    "ModuleTag",
    "ParamTree",
    "census",
    "check_shapes",
    "classify_param",
    "count_params",
    "human_count",
    "human_percent",
    "is_bias",
    "load_checkpoint",
    "read_container",
    "save_checkpoint",
    "write_container",
]
