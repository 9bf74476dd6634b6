"""Shared building blocks: parameter shape tables, initialisation, and the
packed-sequence forward helpers used by both architectures.

Sequences from several utterances are packed side by side along the time
(column) axis. Attention uses block masks so that no position attends
across an utterance boundary.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.ops import conv_out_len
from ..errors import InputLengthError
from ..registry.tree import ParamTree

Shapes = dict[str, tuple[int, ...]]


def subsample_out_freq(n: int, strides) -> int:
    for s in strides:
        n = conv_out_len(n, 3, s, 1)
    return n


def subsample_out_len(t0: int, strides=(2, 2)) -> int:
    for s in strides:
        t0 = conv_out_len(t0, 3, s, 1)
    return t0


# ---------------------------------------------------------------- shapes


def linear_shapes(path: str, d_out: int, d_in: int, bias: bool = True) -> Shapes:
    out = {path: (d_out, d_in)}
    if bias:
        out[path + ".b"] = (d_out,)
    return out


def ln_shapes(path: str, d: int) -> Shapes:
    return {path + ".gamma": (d,), path + ".beta": (d,)}


def mha_shapes(path: str, d: int) -> Shapes:
    out: Shapes = {}
    for name in ("wq", "wk", "wv", "wo"):
        out.update(linear_shapes(f"{path}.{name}", d, d))
    return out


def ffn_shapes(path: str, d: int, d_ff: int) -> Shapes:
    return {**linear_shapes(f"{path}.w1", d_ff, d), **linear_shapes(f"{path}.w2", d, d_ff)}


def subsample_shapes(prefix: str, cfg) -> Shapes:
    out: Shapes = {}
    c_in = 1
    for i, c in enumerate(cfg.sub_channels, start=1):
        out[f"{prefix}.conv{i}"] = (c, c_in, 3, 3)
        out[f"{prefix}.conv{i}.b"] = (c,)
        c_in = c
    out.update(linear_shapes(f"{prefix}.w0", cfg.D, cfg.F_prime))
    return out


# ---------------------------------------------------------------- init


def init_params(shapes: Shapes, seed: int, d_model: int, embed_paths=()) -> ParamTree:
    """Seeded initialisation.

    Weights: uniform in +-1/sqrt(fan_in). Embeddings: normal with std
    1/sqrt(D). Biases and layer-norm shifts: zero. Layer-norm scales: one.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for path, shape in shapes.items():
        if path.endswith(".gamma"):
            arr = np.ones(shape)
        elif path.endswith(".beta") or path.endswith(".b"):
            arr = np.zeros(shape)
        elif path in embed_paths:
            arr = rng.normal(0.0, 1.0 / np.sqrt(d_model), size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        arrays[path] = arr
    return ParamTree.from_arrays(arrays)


# ---------------------------------------------------------------- forward helpers


def positional_encoding(d: int, positions) -> np.ndarray:
    """Sinusoidal encodings, one column per entry of ``positions``."""
    pos = np.asarray(positions, dtype=np.float64)[None, :]
    i = np.arange(d)[:, None]
    rates = np.power(10000.0, -(2 * (i // 2)) / d)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def linear(params: ParamTree, path: str, x: Tensor) -> Tensor:
    y = ops.matmul(params[path], x)
    if path + ".b" in params:
        y = ops.add_bias(y, params[path + ".b"], axis=0)
    return y


def layer_norm(params: ParamTree, path: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, params[path + ".gamma"], params[path + ".beta"])


def segment_ids(lengths) -> np.ndarray:
    return np.repeat(np.arange(len(lengths)), lengths)


def segment_positions(lengths) -> np.ndarray:
    return np.concatenate([np.arange(n) for n in lengths]) if len(lengths) else np.zeros(0, dtype=np.int64)


def block_mask(q_lengths, k_lengths, causal: bool = False) -> np.ndarray:
    """(Tk, Tq) boolean mask allowing key k for query q."""
    sq, sk = segment_ids(q_lengths), segment_ids(k_lengths)
    mask = sk[:, None] == sq[None, :]
    if causal:
        pq, pk = segment_positions(q_lengths), segment_positions(k_lengths)
        mask &= pk[:, None] <= pq[None, :]
    return mask


def mha(params: ParamTree, path: str, xq: Tensor, xkv: Tensor, mask: np.ndarray, heads: int, probe=None) -> Tensor:
    d, tq = xq.shape
    tk = xkv.shape[1]
    dh = d // heads
    q = ops.reshape(linear(params, f"{path}.wq", xq), (heads, dh, tq))
    k = ops.reshape(linear(params, f"{path}.wk", xkv), (heads, dh, tk))
    v = ops.reshape(linear(params, f"{path}.wv", xkv), (heads, dh, tk))
    scores = ops.scale(ops.bmm(ops.transpose(k, (0, 2, 1)), q), 1.0 / np.sqrt(dh))  # (h, Tk, Tq)
    attn = ops.softmax(scores, axis=1, mask=mask[None])
    if probe is not None:
        probe.append((path, attn.data.transpose(0, 2, 1).copy()))  # (h, Tq, Tk): rows are queries
    ctx = ops.reshape(ops.bmm(v, attn), (d, tq))
    return linear(params, f"{path}.wo", ctx)


def ffn(params: ParamTree, path: str, x: Tensor, activation=ops.relu) -> Tensor:
    return linear(params, f"{path}.w2", activation(linear(params, f"{path}.w1", x)))


def subsample(params: ParamTree, prefix: str, cfg, frames: list[np.ndarray]) -> tuple[Tensor, list[int]]:
    """Conv stack + projection + positional encoding for a list of F x T0 inputs.

    Returns the packed D x sum(T) output and the per-utterance lengths T.
    """
    for x in frames:
        if x.ndim != 2 or x.shape[0] != cfg.F:
            raise ValueError(f"expected {cfg.F} x T0 features, got {x.shape}")
        if x.shape[1] < cfg.subsample_factor:
            raise InputLengthError(f"T0={x.shape[1]} is shorter than the subsampling factor {cfg.subsample_factor}")
    b = len(frames)
    lens = [x.shape[1] for x in frames]
    tmax = max(lens)
    batch = np.zeros((b, 1, cfg.F, tmax))
    for i, x in enumerate(frames):
        batch[i, 0, :, : x.shape[1]] = x
    h = Tensor(batch)
    n_conv = len(cfg.sub_channels)
    for i, stride in enumerate(cfg.sub_strides, start=1):
        h = ops.conv2d(h, params[f"{prefix}.conv{i}"], stride=stride, pad=1)
        h = ops.relu(ops.add_bias(h, params[f"{prefix}.conv{i}.b"], axis=1))
        lens = [conv_out_len(n, 3, stride, 1) for n in lens]
        if i < n_conv and len(set(lens)) > 1:
            # zero the padded tail so later convs see the same zero padding
            # an unbatched run would
            tcur = h.shape[3]
            valid = (np.arange(tcur)[None, :] < np.asarray(lens)[:, None]).astype(h.data.dtype)
            h = ops.mul(h, Tensor.wrap(np.ascontiguousarray(np.broadcast_to(valid[:, None, None, :], h.shape))))
    _, c, fp, tp = h.shape
    cols = ops.reshape(ops.transpose(h, (1, 2, 0, 3)), (c * fp, b * tp))
    keep = np.concatenate([i * tp + np.arange(n) for i, n in enumerate(lens)])
    cols = ops.take(cols, keep, axis=1)
    x = linear(params, f"{prefix}.w0", cols)
    pe = positional_encoding(cfg.D, segment_positions(lens)).astype(x.data.dtype)
    return ops.add(x, Tensor.wrap(pe)), lens
