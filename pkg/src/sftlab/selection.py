"""Trainable-parameter masks: whole functional modules or individual elements
chosen at random or by weight magnitude inside a module scope."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, SelectionError
from .registry.checkpoint import read_container, write_container
from .registry.taxonomy import TAGS_BY_KIND, ModuleTag, classify_param, is_bias

KINDS = ("modules", "random", "smaller_magnitude", "larger_magnitude")
_KIND_ALIASES = {"smaller": "smaller_magnitude", "larger": "larger_magnitude"}


@dataclass(frozen=True)
class Strategy:
    kind: str = "modules"
    fraction: float = 1.0
    seed: int = 0
    ranking_scope: str = "global"
    include_bias: bool = True

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown selection kind {self.kind!r}")
        if kind != "modules" and not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.ranking_scope not in ("global", "per_tensor"):
            raise ConfigError(f"ranking_scope must be global or per_tensor, got {self.ranking_scope!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SelectionMask:
    bits: dict[str, np.ndarray]
    model_kind: str
    scope: tuple[str, ...] = ()
    strategy: dict = field(default_factory=dict)
    declared: int = -1

    def __post_init__(self):
        if self.declared < 0:
            self.declared = self.popcount

    @property
    def popcount(self) -> int:
        return int(sum(int(np.count_nonzero(b)) for b in self.bits.values()))

    @property
    def size(self) -> int:
        return int(sum(b.size for b in self.bits.values()))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: b.shape for k, b in self.bits.items()}

    def __getitem__(self, path: str) -> np.ndarray:
        return self.bits[path]

    def equal(self, other: "SelectionMask") -> bool:
        if list(self.bits) != list(other.bits):
            return False
        return all(self.bits[k].shape == other.bits[k].shape and np.array_equal(self.bits[k], other.bits[k])
                   for k in self.bits)


def _resolve(source, model_kind: str | None):
    """(kind, path -> array or shape) from a model, a ParamTree or a mapping."""
    kind = model_kind or getattr(source, "kind", None)
    tree = getattr(source, "params", source)
    if hasattr(tree, "arrays"):
        values = tree.arrays()
    elif isinstance(tree, Mapping):
        values = dict(tree)
    else:
        raise TypeError(f"cannot build a mask over {type(source).__name__}")
    if kind is None:
        tags = {classify_param(p) for p in values}
        kind = "rnnt" if ModuleTag.Prediction in tags or ModuleTag.EncoderMhaConvFfn in tags else "transformer"
    return kind, values


def _shape_of(v) -> tuple[int, ...]:
    return tuple(v.shape) if hasattr(v, "shape") else tuple(v)


def _check_tags(kind: str, tags: Iterable) -> frozenset:
    parsed = frozenset(t if isinstance(t, ModuleTag) else ModuleTag.parse(t) for t in tags)
    bad = parsed - TAGS_BY_KIND[kind]
    if bad:
        raise SelectionError(f"tags {sorted(t.value for t in bad)} do not exist in a {kind} model")
    return parsed


def _scope_label(tags) -> tuple[str, ...]:
    order = list(ModuleTag)
    return tuple(t.value for t in sorted(tags, key=order.index))


def selection_size(fraction: float, scope_size: int) -> int:
    """k = round(fraction * scope_size), halves rounded up, computed exactly."""
    return int((Decimal(repr(float(fraction))) * scope_size).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def select_modules(source, tags, model_kind: str | None = None) -> SelectionMask:
    kind, values = _resolve(source, model_kind)
    tags = _check_tags(kind, tags)
    bits = {p: np.full(_shape_of(v), classify_param(p) in tags, dtype=bool) for p, v in values.items()}
    return SelectionMask(bits, kind, _scope_label(tags), {"kind": "modules"})


def _k_smallest(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k smallest entries under the order (score, position)."""
    n = scores.size
    out = np.zeros(n, dtype=bool)
    if k <= 0:
        return out
    if k >= n:
        out[:] = True
        return out
    tau = np.partition(scores, k - 1)[k - 1]
    np.less(scores, tau, out=out)
    rest = k - int(np.count_nonzero(out))
    if rest:
        out[np.flatnonzero(scores == tau)[:rest]] = True
    return out


def _scores(kind: str, arrays: list[np.ndarray], seed: int) -> np.ndarray:
    if kind == "random":
        # one counter-based stream over the fixed enumeration order
        n = sum(a.size for a in arrays)
        return np.random.Generator(np.random.Philox(seed)).random(n)
    return np.concatenate([np.abs(np.asarray(a)).ravel() for a in arrays]) if arrays else np.zeros(0)


def _rank(kind: str, scores: np.ndarray, k: int) -> np.ndarray:
    if kind == "larger_magnitude":
        # the k largest are everything outside the n - k smallest
        return ~_k_smallest(scores, scores.size - k)
    return _k_smallest(scores, k)


def select_elements(source, scope_tags, strategy: Strategy, model_kind: str | None = None) -> SelectionMask:
    """Pick ``round(fraction * |scope|)`` elements inside the tagged scope.

    Elements are enumerated by (path, flat index) ascending. Magnitude
    strategies rank by ``|w|`` with that enumeration as the tie key; the
    larger-magnitude set is the complement of the smaller-magnitude set of
    the remaining size, so the two partition the scope exactly.
    """
    if strategy.kind == "modules":
        return select_modules(source, scope_tags, model_kind)
    kind, values = _resolve(source, model_kind)
    tags = _check_tags(kind, scope_tags)
    if not tags:
        raise SelectionError("element selection needs a non-empty scope")
    in_scope = sorted(p for p in values
                      if classify_param(p) in tags and (strategy.include_bias or not is_bias(p)))
    if strategy.kind != "random":
        missing = [p for p in in_scope if not hasattr(values[p], "dtype")]
        if missing:
            raise SelectionError(f"magnitude selection needs parameter values, got only shapes for {missing[0]}")
    bits = {p: np.zeros(_shape_of(v), dtype=bool) for p, v in values.items()}
    scope_size = sum(int(np.prod(bits[p].shape)) for p in in_scope)
    if strategy.kind == "random":
        arrays = [bits[p] for p in in_scope]  # only sizes matter
    else:
        arrays = [values[p] for p in in_scope]

    if strategy.ranking_scope == "global":
        k = selection_size(strategy.fraction, scope_size)
        if k == 0:
            raise SelectionError(f"fraction {strategy.fraction} of {scope_size} elements selects nothing")
        flat = _rank(strategy.kind, _scores(strategy.kind, arrays, strategy.seed), k)
        off = 0
        for p in in_scope:
            n = bits[p].size
            bits[p] = flat[off : off + n].reshape(bits[p].shape)
            off += n
    else:
        k = 0
        for i, p in enumerate(in_scope):
            kt = selection_size(strategy.fraction, bits[p].size)
            seed = np.random.SeedSequence([strategy.seed, i]).generate_state(1)[0]
            flat = _rank(strategy.kind, _scores(strategy.kind, [arrays[i]], int(seed)), kt)
            bits[p] = flat.reshape(bits[p].shape)
            k += kt
        if k == 0:
            raise SelectionError(f"fraction {strategy.fraction} selects nothing in any tensor")
    meta = strategy.to_dict()
    meta["scope_size"] = scope_size
    return SelectionMask(bits, kind, _scope_label(tags), meta, declared=k)


def mask_stats(mask: SelectionMask) -> dict:
    per_tag: dict[str, list[int]] = {}
    for p, b in mask.bits.items():
        slot = per_tag.setdefault(classify_param(p).value, [0, 0])
        slot[0] += int(np.count_nonzero(b))
        slot[1] += b.size
    selected, total = mask.popcount, mask.size
    out = {
        "selected": selected,
        "total": total,
        "fraction": selected / total if total else 0.0,
        "per_tag": {t: {"selected": s, "total": n} for t, (s, n) in per_tag.items()},
        "scope": list(mask.scope),
        "strategy": dict(mask.strategy),
    }
    scope_size = mask.strategy.get("scope_size")
    if scope_size:
        out["scope_fraction"] = selected / scope_size
    return out


def combine(*masks: SelectionMask) -> SelectionMask:
    """Element-wise OR of masks over the same tree."""
    if not masks:
        raise SelectionError("combine needs at least one mask")
    first = masks[0]
    for m in masks[1:]:
        if m.model_kind != first.model_kind or m.shapes() != first.shapes() or list(m.bits) != list(first.bits):
            raise SelectionError("masks are defined over different parameter trees")
    bits = {p: np.logical_or.reduce([m.bits[p] for m in masks]) for p in first.bits}
    scope = tuple(dict.fromkeys(t for m in masks for t in m.scope))
    return SelectionMask(bits, first.model_kind, scope,
                         {"kind": "combined", "parts": [m.strategy for m in masks]})


def parse_select(text: str) -> tuple[frozenset, Strategy]:
    """Parse ``modules:a,b`` or ``elements:<kind>:<fraction>[:key=value...]``.

    Recognised keys: seed, scope, rank (global | per_tensor), bias (0 | 1).
    ``modules:all``, ``modules:none`` and ``scope=all`` are shorthands.
    """
    parts = text.split(":")
    head = parts[0]
    if head == "modules":
        if len(parts) != 2:
            raise ConfigError(f"bad module selection {text!r}")
        body = parts[1].strip()
        if body == "all":
            return frozenset({"all"}), Strategy("modules")
        if body in ("", "none"):
            return frozenset(), Strategy("modules")
        return frozenset(_parse_tags(body)), Strategy("modules")
    if head != "elements" or len(parts) < 3:
        raise ConfigError(f"bad selection {text!r}")
    try:
        fraction = float(parts[2])
    except ValueError as exc:
        raise ConfigError(f"bad fraction in {text!r}") from exc
    opts = {"seed": 0, "scope": None, "rank": "global", "bias": True}
    for item in parts[3:]:
        key, sep, value = item.partition("=")
        if not sep or key not in opts:
            raise ConfigError(f"unknown selection option {item!r}")
        if key == "seed":
            opts["seed"] = int(value)
        elif key == "bias":
            opts["bias"] = value not in ("0", "false", "no")
        elif key == "scope":
            opts["scope"] = frozenset({"all"}) if value == "all" else frozenset(_parse_tags(value))
        else:
            opts["rank"] = value
    if opts["scope"] is None:
        raise ConfigError(f"element selection {text!r} needs scope=...")
    return opts["scope"], Strategy(parts[1], fraction, opts["seed"], opts["rank"], opts["bias"])


def _parse_tags(body: str) -> list[ModuleTag]:
    try:
        return [ModuleTag.parse(t) for t in body.split(",") if t.strip()]
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc


def build_mask(source, text: str, model_kind: str | None = None) -> SelectionMask:
    """Mask from a selection string (see :func:`parse_select`)."""
    tags, strategy = parse_select(text)
    kind, _ = _resolve(source, model_kind)
    if tags == frozenset({"all"}):
        tags = TAGS_BY_KIND[kind]
    return select_elements(source, tags, strategy, kind)


def save_mask(path, mask: SelectionMask) -> None:
    meta = {"scope": list(mask.scope), "strategy": mask.strategy, "declared": mask.declared}
    write_container(path, mask.model_kind, mask.bits, "bit", meta)


def load_mask(path) -> SelectionMask:
    header, arrays = read_container(path)
    if any(e["dtype"] != "bit" for e in header["entries"]):
        raise SelectionError(f"{path} is not a mask file")
    mask = SelectionMask(arrays, header["model_kind"], tuple(header.get("scope", ())),
                         header.get("strategy", {}), header.get("declared", -1))
    if mask.popcount != mask.declared:
        raise SelectionError(f"{path}: popcount {mask.popcount} differs from declared {mask.declared}")
    return mask
