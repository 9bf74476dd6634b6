"""Sequence objectives: CTC, transducer, label NLL and their interpolation.

All dynamic programs run in log space on float64 copies of the inputs; the
results and gradients are cast back to the working precision. Blank is id 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.ops import _result
from .errors import ConfigError, InfeasibleAlignmentError, VocabularyError

BLANK = 0
NEG_INF = -np.inf


@dataclass
class LossValue:
    value: Tensor
    per_utterance: np.ndarray

    def item(self) -> float:
        return self.value.item()


def ctc_min_frames(target) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _lse(*arrays):
    out = arrays[0]
    for a in arrays[1:]:
        out = np.logaddexp(out, a)
    return out


def ctc_forward_backward(lp: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Return (-log p(target | lp), d loss / d lp) for one utterance.

    ``lp`` is V x T of per-frame log-probabilities.
    """
    lp = np.asarray(lp, dtype=np.float64)
    v, t_len = lp.shape
    target = [int(y) for y in target]
    if any(y <= BLANK or y >= v for y in target):
        raise VocabularyError(f"target ids must lie in [1, {v}); got {target}")
    need = ctc_min_frames(target)
    if t_len < need:
        raise InfeasibleAlignmentError(f"{t_len} frames cannot carry a target needing {need}")
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    s_len = ext.size
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[ext]  # (S, T)

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[1, 0]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        one = np.concatenate(([NEG_INF], prev[:-1]))
        two = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
        alpha[t] = _lse(prev, one, two) + emit[:, t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    skip_next = np.concatenate((skip[2:], [False, False]))
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[:, t + 1]
        one = np.concatenate((nxt[1:], [NEG_INF]))
        two = np.where(skip_next, np.concatenate((nxt[2:], [NEG_INF, NEG_INF])), NEG_INF)
        beta[t] = _lse(nxt, one, two)

    if s_len > 1:
        logp = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        logp = alpha[-1, -1]
    occ = np.exp(alpha + beta - logp)  # (T, S)
    grad = np.zeros((v, t_len))
    np.add.at(grad, (np.broadcast_to(ext, occ.shape), np.broadcast_to(np.arange(t_len)[:, None], occ.shape)), occ)
    return -float(logp), -grad


def _check_split(total: int, lengths) -> np.ndarray:
    offs = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
    if offs[-1] != total:
        raise ValueError(f"segment lengths sum to {offs[-1]}, tensor has {total}")
    return offs


def ctc_loss_batch(log_probs: Tensor, lengths, targets) -> Tensor:
    """Per-utterance CTC losses for frames packed along the time axis."""
    offs = _check_split(log_probs.shape[1], lengths)
    values = np.empty(len(targets))
    grads = np.empty(log_probs.shape)
    for i, tgt in enumerate(targets):
        a, b = offs[i], offs[i + 1]
        values[i], grads[:, a:b] = ctc_forward_backward(log_probs.data[:, a:b], tgt)
    dtype = log_probs.data.dtype

    def back(g):
        seg = np.repeat(g.astype(np.float64), np.diff(offs))
        return ((grads * seg[None, :]).astype(dtype),)

    return _result("ctc_loss", values.astype(dtype), (log_probs,), back)


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """-log p(target) under CTC for one V x T matrix of log-probabilities."""
    return ops.reshape(ctc_loss_batch(log_probs, [log_probs.shape[1]], [target]), ())


def transducer_forward_backward(lattice: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Return (-log p(target), gradient) for a V x T x (L+1) log-prob lattice."""
    lat = np.asarray(lattice, dtype=np.float64)
    v, t_len, u1 = lat.shape
    target = np.asarray([int(y) for y in target], dtype=np.int64)
    u_len = target.size
    if u1 != u_len + 1:
        raise ValueError(f"lattice has {u1} label positions, target needs {u_len + 1}")
    if np.any(target <= BLANK) or np.any(target >= v):
        raise VocabularyError(f"target ids must lie in [1, {v}); got {target.tolist()}")
    blank = lat[BLANK]  # (T, U+1)
    emit = lat[target, :, np.arange(u_len)].T if u_len else np.zeros((t_len, 0))  # (T, U)

    alpha = np.empty((t_len, u1))
    csum = np.concatenate((np.zeros((t_len, 1)), np.cumsum(emit, axis=1)), axis=1)
    alpha[0] = csum[0]
    for t in range(1, t_len):
        a = alpha[t - 1] + blank[t - 1]
        alpha[t] = csum[t] + np.logaddexp.accumulate(a - csum[t])
    logp = alpha[-1, -1] + blank[-1, -1]

    beta = np.empty((t_len, u1))
    suffix = np.concatenate((np.cumsum(emit[:, ::-1], axis=1)[:, ::-1], np.zeros((t_len, 1))), axis=1)
    beta[-1] = suffix[-1] + blank[-1, -1]
    for t in range(t_len - 2, -1, -1):
        b = beta[t + 1] + blank[t]
        beta[t] = suffix[t] + np.logaddexp.accumulate((b - suffix[t])[::-1])[::-1]

    grad = np.zeros_like(lat)
    g_blank = np.zeros((t_len, u1))
    g_blank[:-1] = np.exp(alpha[:-1] + blank[:-1] + beta[1:] - logp)
    g_blank[-1, -1] = 1.0
    grad[BLANK] = -g_blank
    if u_len:
        g_emit = np.exp(alpha[:, :-1] + emit + beta[:, 1:] - logp)  # (T, U)
        np.add.at(grad, (target[None, :].repeat(t_len, 0), np.arange(t_len)[:, None].repeat(u_len, 1),
                         np.arange(u_len)[None, :].repeat(t_len, 0)), -g_emit)
    return -float(logp), grad


def transducer_loss_batch(lattice: Tensor, shapes, targets) -> Tensor:
    """Per-utterance transducer losses.

    ``lattice`` is V x sum(T_i * (L_i + 1)); block i holds utterance i's
    lattice flattened row-major over (t, l). ``shapes`` lists (T_i, L_i + 1).
    """
    v = lattice.shape[0]
    sizes = [t * u for t, u in shapes]
    offs = _check_split(lattice.shape[1], sizes)
    values = np.empty(len(targets))
    grads = np.empty(lattice.shape)
    for i, ((t, u), tgt) in enumerate(zip(shapes, targets)):
        a, b = offs[i], offs[i + 1]
        values[i], g = transducer_forward_backward(lattice.data[:, a:b].reshape(v, t, u), tgt)
        grads[:, a:b] = g.reshape(v, -1)
    dtype = lattice.data.dtype

    def back(g):
        seg = np.repeat(g.astype(np.float64), sizes)
        return ((grads * seg[None, :]).astype(dtype),)

    return _result("transducer_loss", values.astype(dtype), (lattice,), back)


def transducer_loss(lattice: Tensor, target) -> Tensor:
    v, t, u = lattice.shape
    flat = ops.reshape(lattice, (v, t * u))
    return ops.reshape(transducer_loss_batch(flat, [(t, u)], [target]), ())


def nll_loss(log_probs: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """Mean over positions of -log p(y_l), with optional label smoothing.

    ``target`` already ends with the end token; its length must equal the
    number of columns of ``log_probs``.
    """
    return nll_loss_batch(log_probs, [len(target)], [target], smoothing).mean()


def nll_loss_batch(log_probs: Tensor, lengths, targets, smoothing: float = 0.0) -> Tensor:
    """Per-utterance mean token NLL for decoder outputs packed along columns."""
    v, n = log_probs.shape
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing {smoothing} outside [0, 1)")
    flat = np.concatenate([np.asarray(t, dtype=np.int64) for t in targets]) if targets else np.zeros(0, np.int64)
    if flat.size != n or list(lengths) != [len(t) for t in targets]:
        raise ValueError("targets do not match the packed decoder output")
    if flat.size and (flat.max() >= v or flat.min() < 0):
        raise VocabularyError(f"target id outside vocabulary of size {v}")
    seg = np.repeat(np.arange(len(targets)), lengths)
    weights = 1.0 / np.repeat(np.asarray(lengths, dtype=np.float64), lengths)
    picked = ops.pick(log_probs, flat, np.arange(n))
    token_nll = ops.scale(picked, -1.0)
    if smoothing > 0.0:
        sm = ops.reshape(ops.matmul(ops.const(np.full((1, v), 1.0 / v)), log_probs), (n,))
        token_nll = ops.add(ops.scale(token_nll, 1.0 - smoothing), ops.scale(sm, -smoothing))
    # segment mean as a matrix product keeps it on the tape in one op
    agg = np.zeros((len(targets), n))
    agg[seg, np.arange(n)] = weights
    return ops.reshape(ops.matmul(ops.const(agg), ops.reshape(token_nll, (n, 1))), (len(targets),))


def hybrid_loss(nll, ctc, w: float = 0.3):
    """(1 - w) * nll + w * ctc; works for floats and tensors alike."""
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"interpolation weight {w} outside [0, 1]")
    if isinstance(nll, Tensor) or isinstance(ctc, Tensor):
        return ops.add(ops.scale(nll, 1.0 - w), ops.scale(ctc, w))
    return (1.0 - w) * nll + w * ctc
