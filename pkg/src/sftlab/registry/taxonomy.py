"""Functional grouping of parameters and element-count censuses."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping

from ..errors import ClassificationError


class ModuleTag(str, enum.Enum):
    Embeddings = "embeddings"
    LayerNorm = "layer_norm"
    EncoderMhaFfn = "enc_mha_ffn"
    DecoderMhaFfn = "dec_mha_ffn"
    EncoderMhaConvFfn = "enc_mha_conv_ffn"
    Prediction = "prediction"
    Ctc = "ctc"
    Output = "output"

    @classmethod
    def parse(cls, name: str) -> "ModuleTag":
        key = name.strip()
        for tag in cls:
            if key in (tag.value, tag.name):
                return tag
        raise ClassificationError(f"unknown module tag {name!r}; expected one of {[t.value for t in cls]}")


TAGS_BY_KIND = {
    "transformer": frozenset({
        ModuleTag.Embeddings, ModuleTag.LayerNorm, ModuleTag.EncoderMhaFfn,
        ModuleTag.DecoderMhaFfn, ModuleTag.Ctc, ModuleTag.Output,
    }),
    "rnnt": frozenset({
        ModuleTag.Embeddings, ModuleTag.LayerNorm, ModuleTag.EncoderMhaConvFfn,
        ModuleTag.Prediction, ModuleTag.Output,
    }),
}

_BLOCK = r"block\d+"
_LINEAR = r"w\w*(\.b)?"
_RULES: list[tuple[re.Pattern, ModuleTag]] = [
    (re.compile(r"encoder\.sub\.(conv\d+|w0)(\.b)?"), ModuleTag.Embeddings),
    (re.compile(r"(decoder|pred)\.embed"), ModuleTag.Embeddings),
    (re.compile(rf"(encoder|decoder|conformer)\.({_BLOCK}\.)?ln\w*\.(gamma|beta)"), ModuleTag.LayerNorm),
    (re.compile(rf"encoder\.{_BLOCK}\.(self_attn|ffn)\.{_LINEAR}"), ModuleTag.EncoderMhaFfn),
    (re.compile(rf"decoder\.{_BLOCK}\.(self_attn|src_attn|ffn)\.{_LINEAR}"), ModuleTag.DecoderMhaFfn),
    (re.compile(rf"conformer\.{_BLOCK}\.(self_attn|ffn_pre|ffn_post|conv)\.{_LINEAR}"),
     ModuleTag.EncoderMhaConvFfn),
    (re.compile(r"conformer\.block\d+\.conv\.(pw1|pw2|dw)(\.b)?"), ModuleTag.EncoderMhaConvFfn),
    (re.compile(r"pred\.lstm\.w_(ih|hh)(\.b)?"), ModuleTag.Prediction),
    (re.compile(r"ctc\.w(\.b)?"), ModuleTag.Ctc),
    (re.compile(r"out\.w(\.b)?"), ModuleTag.Output),
    (re.compile(r"joint\.w_(enc|pred|out)(\.b)?"), ModuleTag.Output),
]


def classify_param(path: str) -> ModuleTag:
    """Tag of a canonical parameter path. Unknown paths raise."""
    hits = {tag for rx, tag in _RULES if rx.fullmatch(path)}
    if len(hits) != 1:
        raise ClassificationError(path)
    return hits.pop()


def is_bias(path: str) -> bool:
    """Additive shifts: linear/conv biases and layer-norm beta."""
    return path.endswith(".b") or path.endswith(".beta")


def _shapes(source) -> Mapping[str, tuple[int, ...]]:
    if hasattr(source, "params"):
        source = source.params
    if hasattr(source, "shapes"):
        return source.shapes()
    if isinstance(source, Mapping):
        return {k: tuple(getattr(v, "shape", v)) for k, v in source.items()}
    raise TypeError(f"cannot take parameter shapes from {type(source).__name__}")


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


def count_params(source, tags: Iterable[ModuleTag], include_bias: bool = True) -> int:
    """Exact element count over paths whose tag is in ``tags``.

    ``source`` may be a model, a ParamTree or a path -> shape mapping.
    """
    wanted = set(tags)
    total = 0
    for path, shape in _shapes(source).items():
        if classify_param(path) in wanted and (include_bias or not is_bias(path)):
            total += _numel(shape)
    return total


@dataclass(frozen=True)
class CensusRow:
    tag: ModuleTag
    weights: int
    biases: int

    @property
    def total(self) -> int:
        return self.weights + self.biases


@dataclass(frozen=True)
class Census:
    rows: tuple[CensusRow, ...]

    @property
    def weights(self) -> int:
        return sum(r.weights for r in self.rows)

    @property
    def biases(self) -> int:
        return sum(r.biases for r in self.rows)

    @property
    def total(self) -> int:
        return self.weights + self.biases

    def row(self, tag: ModuleTag) -> CensusRow:
        for r in self.rows:
            if r.tag == tag:
                return r
        return CensusRow(tag, 0, 0)

    def to_dict(self) -> dict:
        return {
            "rows": [{"tag": r.tag.value, "weights": r.weights, "biases": r.biases, "total": r.total}
                     for r in self.rows],
            "weights": self.weights,
            "biases": self.biases,
            "total": self.total,
        }


def census(source) -> Census:
    acc: dict[ModuleTag, list[int]] = {}
    for path, shape in _shapes(source).items():
        slot = acc.setdefault(classify_param(path), [0, 0])
        slot[1 if is_bias(path) else 0] += _numel(shape)
    order = list(ModuleTag)
    rows = tuple(CensusRow(t, *acc[t]) for t in sorted(acc, key=order.index))
    return Census(rows)


def human_count(n: int) -> str:
    """Millions with one decimal, halves rounded up: 62914560 -> '62.9M'."""
    m = (Decimal(n) / Decimal(10**6)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return f"{m}M"


def human_percent(part: int, whole: int) -> str:
    if whole == 0:
        return "0.0%"
    p = (Decimal(100) * Decimal(part) / Decimal(whole)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return f"{p}%"
