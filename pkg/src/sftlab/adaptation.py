"""Masked Adam fine-tuning, staged incremental adaptation and the EWC
regulariser."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, no_grad, ops
from .data import Utterance, check_disjoint
from .errors import ConfigError, DivergenceError, NonFiniteGradientError
from .registry.tree import ParamTree
from .selection import SelectionMask


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def fresh(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps)


def _selected(mask: SelectionMask | None, path: str):
    """Bool array, or True when everything is trainable."""
    return True if mask is None else mask.bits[path]


def masked_adam_step(params: ParamTree, grads: dict[str, np.ndarray], mask: SelectionMask | None,
                     state: OptimizerState) -> ParamTree:
    """Bias-corrected Adam on the selected elements only.

    Gradients of frozen elements are zeroed before the moment update and the
    frozen values are copied through unchanged. The step is rejected as a
    whole if any selected gradient is non-finite.
    """
    masked = {}
    for path, g in grads.items():
        sel = _selected(mask, path)
        if sel is not True and not sel.any():
            continue
        g = g if sel is True else np.where(sel, g, 0)
        bad = ~np.isfinite(g)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonFiniteGradientError(path, i, float(g.ravel()[i]))
        masked[path] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for path, g in masked.items():
        p = params[path]
        dtype = p.data.dtype
        g = g.astype(dtype, copy=False)
        m = state.m.get(path)
        v = state.v.get(path)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        m = m.astype(dtype, copy=False)
        v = v.astype(dtype, copy=False)
        state.m[path], state.v[path] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = (p.data - update).astype(dtype, copy=False)
        sel = _selected(mask, path)
        p.data = new if sel is True else np.where(sel, new, p.data)
    return params


# ------------------------------------------------------------------ EWC


@dataclass
class EwcState:
    anchor: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"EWC strength must be non-negative, got {self.lam}")
        self.anchor = {k: np.array(v, copy=True) for k, v in self.anchor.items()}
        for v in self.anchor.values():
            v.setflags(write=False)


def compute_fisher(model, utts: list[Utterance], n_samples: int, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Mean squared per-utterance gradient over the first ``n_samples`` utterances."""
    if n_samples < 1 or not utts:
        raise ConfigError("Fisher estimation needs at least one utterance")
    sample = utts[:n_samples]
    acc = {k: np.zeros_like(t.data, dtype=np.float64) for k, t in model.params.items()}
    for u in sample:
        with Tape() as tape:
            loss = model.loss([u.frames], [u.tokens]).value
            if scale != 1.0:
                loss = ops.scale(loss, scale)
        tape.backward(loss)
        for k, t in model.params.items():
            g = t.grad if t.grad is not None else 0.0
            acc[k] += np.square(np.asarray(g, dtype=np.float64))
        model.params.zero_grad()
    return {k: (v / len(sample)).astype(model.params[k].data.dtype) for k, v in acc.items()}


def ewc_penalty(params: ParamTree, ewc: EwcState) -> Tensor:
    """(lam / 2) * sum_j F_j (theta_j - theta*_j)^2 as a differentiable scalar."""
    terms = []
    for path, p in params.items():
        f = ewc.fisher[path]
        a = ewc.anchor[path]
        if f.shape != p.shape or a.shape != p.shape:
            raise ConfigError(f"EWC state does not match parameter {path}")
        diff = ops.sub(p, Tensor.wrap(a.astype(p.data.dtype)))
        terms.append(ops.sum(ops.mul(Tensor.wrap(f.astype(p.data.dtype)), ops.square(diff))))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 0.5 * ewc.lam)


# ------------------------------------------------------------------ training loops


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    ewc_lambda: float | None = None
    fisher_samples: int = 256

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.ewc_lambda is not None and self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class StageResult:
    epoch_losses: list[float]
    batch_losses: list[list[float]]
    steps: int


def run_stage(model, utts: list[Utterance], mask: SelectionMask | None, optimizer: OptimizerState,
              cfg: TrainConfig, ewc: EwcState | None = None, stage: int = 0) -> StageResult:
    """Shuffled mini-batch epochs over ``utts`` with masked Adam updates.

    Tensors with no selected element are detached for the duration, so no
    gradient is computed for them. A non-finite loss or gradient aborts the
    stage with a DivergenceError carrying the last good parameters.
    """
    params = model.params
    saved_flags = {k: t.requires_grad for k, t in params.items()}
    for k, t in params.items():
        sel = _selected(mask, k)
        t.requires_grad = sel is True or bool(sel.any())
    trainable = [k for k, t in params.items() if t.requires_grad]
    epoch_losses, batch_losses, steps = [], [], 0
    try:
        if not trainable:
            return StageResult([], [], 0)
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, stage, epoch])
            order = rng.permutation(len(utts))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [utts[i] for i in order[start : start + cfg.batch_size]]
                with Tape() as tape:
                    lv = model.loss([u.frames for u in batch], [u.tokens for u in batch])
                    total = lv.value if ewc is None else ops.add(lv.value, ewc_penalty(params, ewc))
                value = float(total.item())
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at stage {stage}, epoch {epoch}, step {steps}",
                                          last_good=params.copy())
                tape.backward(total)
                grads = {k: params[k].grad for k in trainable if params[k].grad is not None}
                snapshot = params.copy()
                try:
                    masked_adam_step(params, grads, mask, optimizer)
                except NonFiniteGradientError as exc:
                    raise DivergenceError(str(exc), last_good=snapshot) from exc
                params.zero_grad()
                losses.append(value)
                steps += 1
            batch_losses.append(losses)
            epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
    finally:
        for k, t in params.items():
            t.requires_grad = saved_flags[k]
    return StageResult(epoch_losses, batch_losses, steps)


def dataset_loss(model, utts: list[Utterance], batch_size: int = 32) -> float:
    """Mean per-utterance training loss without recording gradients."""
    vals = []
    with no_grad():
        for start in range(0, len(utts), batch_size):
            batch = utts[start : start + batch_size]
            vals.extend(model.loss([u.frames for u in batch], [u.tokens for u in batch]).per_utterance.tolist())
    return float(np.mean(vals))


@dataclass
class Trajectory:
    baseline: list[dict]
    rows: list[dict]
    stage_results: list[StageResult]
    checkpoints: list


def run_incremental(model, stages: list[list[Utterance]], mask: SelectionMask | None, cfg: TrainConfig,
                    evaluate: Callable[[object], list[dict]], ewc: EwcState | None = None,
                    on_stage: Callable[[int, object], object] | None = None,
                    optimizer: OptimizerState | None = None) -> Trajectory:
    """Adapt through ``stages`` in order, evaluating after each one.

    ``evaluate(model)`` returns metric rows (one per test split). ``on_stage``
    is called as ``on_stage(k, model)`` after stage k and may return a
    checkpoint handle. The optimizer restarts from zero moments every stage.
    """
    check_disjoint({f"stage{k}": utts for k, utts in enumerate(stages, start=1)})
    base_opt = optimizer or OptimizerState(lr=cfg.lr)
    baseline = [{"stage": 0, **r, "loss": None} for r in evaluate(model)]
    rows, results, ckpts = [], [], []
    for k, utts in enumerate(stages, start=1):
        res = run_stage(model, utts, mask, base_opt.fresh(), cfg, ewc, stage=k)
        results.append(res)
        loss = res.epoch_losses[-1] if res.epoch_losses else None
        rows.extend({"stage": k, **r, "loss": loss} for r in evaluate(model))
        if on_stage is not None:
            ckpts.append(on_stage(k, model))
    return Trajectory(baseline, rows, results, ckpts)
