"""Conformer encoder + LSTM prediction network + joint network (RNN-T)."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops
from ..losses import LossValue, transducer_loss_batch
from ..registry.tree import ParamTree
from ..vocab import Vocab
from . import layers
from .config import RnntConfig
from .layers import block_mask, ffn, layer_norm, linear, mha


def param_shapes(cfg: RnntConfig) -> layers.Shapes:
    d = cfg.D
    shapes = layers.subsample_shapes("encoder.sub", cfg)
    for i in range(cfg.N):
        p = f"conformer.block{i}"
        shapes.update(layers.ln_shapes(f"{p}.ln_ffn_pre", d))
        shapes.update(layers.ffn_shapes(f"{p}.ffn_pre", d, cfg.d_ff))
        shapes.update(layers.ln_shapes(f"{p}.ln_attn", d))
        shapes.update(layers.mha_shapes(f"{p}.self_attn", d))
        shapes.update(layers.ln_shapes(f"{p}.ln_conv", d))
        shapes.update(layers.linear_shapes(f"{p}.conv.pw1", 2 * d, d))
        shapes[f"{p}.conv.dw"] = (d, cfg.conv_kernel)
        shapes[f"{p}.conv.dw.b"] = (d,)
        shapes.update(layers.ln_shapes(f"{p}.ln_conv_inner", d))
        shapes.update(layers.linear_shapes(f"{p}.conv.pw2", d, d))
        shapes.update(layers.ln_shapes(f"{p}.ln_ffn_post", d))
        shapes.update(layers.ffn_shapes(f"{p}.ffn_post", d, cfg.d_ff))
        shapes.update(layers.ln_shapes(f"{p}.ln_out", d))
    e, h = cfg.embed_dim, cfg.pred_hidden
    shapes["pred.embed"] = (e, cfg.V)
    shapes.update(layers.linear_shapes("pred.lstm.w_ih", 4 * h, e))
    shapes.update(layers.linear_shapes("pred.lstm.w_hh", 4 * h, h, bias=False))
    shapes.update(layers.linear_shapes("joint.w_enc", cfg.joint_hidden, d))
    shapes.update(layers.linear_shapes("joint.w_pred", cfg.joint_hidden, h, bias=False))
    shapes.update(layers.linear_shapes("joint.w_out", cfg.V, cfg.joint_hidden, bias=False))
    return shapes


class RnntModel:
    kind = "rnnt"

    def __init__(self, config: RnntConfig, params: ParamTree):
        self.config = config
        self.params = params
        self.vocab = Vocab(config.V)

    @classmethod
    def init(cls, config: RnntConfig, seed: int = 0) -> "RnntModel":
        return cls(config, layers.init_params(param_shapes(config), seed, config.D, embed_paths=("pred.embed",)))

    # -- encoder ---------------------------------------------------------

    def subsample(self, frames):
        return layers.subsample(self.params, "encoder.sub", self.config, frames)

    def conv_module(self, path: str, x: Tensor, lengths) -> Tensor:
        p = self.params
        h = ops.glu(linear(p, f"{path}.conv.pw1", x))
        h = ops.add_bias(ops.depthwise_conv1d(h, p[f"{path}.conv.dw"], lengths), p[f"{path}.conv.dw.b"], axis=0)
        h = ops.swish(layer_norm(p, f"{path}.ln_conv_inner", h))
        return linear(p, f"{path}.conv.pw2", h)

    def encode_packed(self, x: Tensor, lengths, probe=None) -> Tensor:
        p, cfg = self.params, self.config
        mask = block_mask(lengths, lengths)
        for i in range(cfg.N):
            b = f"conformer.block{i}"
            x = ops.add(x, ops.scale(ffn(p, f"{b}.ffn_pre", layer_norm(p, f"{b}.ln_ffn_pre", x), ops.swish), 0.5))
            h = layer_norm(p, f"{b}.ln_attn", x)
            x = ops.add(x, mha(p, f"{b}.self_attn", h, h, mask, cfg.heads, probe))
            x = ops.add(x, self.conv_module(b, layer_norm(p, f"{b}.ln_conv", x), lengths))
            x = ops.add(x, ops.scale(ffn(p, f"{b}.ffn_post", layer_norm(p, f"{b}.ln_ffn_post", x), ops.swish), 0.5))
            x = layer_norm(p, f"{b}.ln_out", x)
        return x

    def encode(self, frames, probe=None) -> tuple[Tensor, list[int]]:
        x, lengths = self.subsample(frames)
        return self.encode_packed(x, lengths, probe), lengths

    # -- prediction network ----------------------------------------------

    def lstm_cell(self, ids, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One LSTM step for a batch of input token ids (columns)."""
        p = self.params
        hdim = self.config.pred_hidden
        b = h.shape[1]
        x = ops.take(p["pred.embed"], ids, axis=1)
        gates = ops.add(linear(p, "pred.lstm.w_ih", x), ops.matmul(p["pred.lstm.w_hh"], h))
        gates = ops.reshape(gates, (4, hdim, b))
        i_g = ops.sigmoid(ops.reshape(ops.take(gates, [0], axis=0), (hdim, b)))
        f_g = ops.sigmoid(ops.reshape(ops.take(gates, [1], axis=0), (hdim, b)))
        g_g = ops.tanh(ops.reshape(ops.take(gates, [2], axis=0), (hdim, b)))
        o_g = ops.sigmoid(ops.reshape(ops.take(gates, [3], axis=0), (hdim, b)))
        c = ops.add(ops.mul(f_g, c), ops.mul(i_g, g_g))
        return ops.mul(o_g, ops.tanh(c)), c

    def lstm_zero_state(self, b: int) -> tuple[Tensor, Tensor]:
        dtype = self.params["pred.embed"].data.dtype
        zeros = np.zeros((self.config.pred_hidden, b), dtype=dtype)
        return Tensor.wrap(zeros), Tensor.wrap(zeros.copy())

    def predict_packed(self, prefixes: list[list[int]]) -> Tensor:
        """LSTM states h_0..h_n for each prefix, packed: H x sum(n_i + 1).

        h_l summarises ``[sos] + prefix[:l]`` starting from a zero state.
        """
        b = len(prefixes)
        steps = max(len(pre) for pre in prefixes) + 1
        ids = np.full((steps, b), self.vocab.sos, dtype=np.int64)
        for i, pre in enumerate(prefixes):
            ids[1 : len(pre) + 1, i] = pre
        h, c = self.lstm_zero_state(b)
        outs = []
        for s in range(steps):
            h, c = self.lstm_cell(ids[s], h, c)
            outs.append(h)
        stacked = ops.concat(outs, axis=1)  # column s * b + i
        keep = np.concatenate([np.arange(len(pre) + 1) * b + i for i, pre in enumerate(prefixes)])
        return ops.take(stacked, keep, axis=1)

    def predict(self, prefix: list[int]) -> Tensor:
        return self.predict_packed([list(prefix)])

    # -- joint network -----------------------------------------------------

    def joint_packed(self, enc: Tensor, enc_lengths, pred: Tensor, pred_lengths) -> Tensor:
        """Lattice log-probabilities V x sum(T_i * U_i), (t, u) row-major per utterance."""
        p = self.params
        e = linear(p, "joint.w_enc", enc)
        q = ops.matmul(p["joint.w_pred"], pred)
        e_idx, q_idx = [], []
        e_off = q_off = 0
        for t_len, u_len in zip(enc_lengths, pred_lengths):
            e_idx.append(np.repeat(np.arange(t_len), u_len) + e_off)
            q_idx.append(np.tile(np.arange(u_len), t_len) + q_off)
            e_off += t_len
            q_off += u_len
        z = ops.tanh(ops.add(ops.take(e, np.concatenate(e_idx), axis=1), ops.take(q, np.concatenate(q_idx), axis=1)))
        return ops.log_softmax(ops.matmul(p["joint.w_out"], z), axis=0)

    def joint(self, enc_t: Tensor, pred_u: Tensor) -> Tensor:
        """Log-probabilities for one (frame, context) pair; inputs are D x 1 and H x 1."""
        return ops.reshape(self.joint_packed(enc_t, [1], pred_u, [1]), (self.config.V,))

    def joint_pairs(self, enc_proj: Tensor, pred: Tensor) -> Tensor:
        """Column-wise joint: ``enc_proj`` is the projected encoder (J x B), ``pred`` H x B."""
        z = ops.tanh(ops.add(enc_proj, ops.matmul(self.params["joint.w_pred"], pred)))
        return ops.log_softmax(ops.matmul(self.params["joint.w_out"], z), axis=0)

    def joint_enc_proj(self, enc: Tensor) -> Tensor:
        return linear(self.params, "joint.w_enc", enc)

    def lattice(self, frames: np.ndarray, tokens: list[int]) -> Tensor:
        enc, lengths = self.encode([frames])
        pred = self.predict(tokens)
        lat = self.joint_packed(enc, lengths, pred, [len(tokens) + 1])
        return ops.reshape(lat, (self.config.V, lengths[0], len(tokens) + 1))

    def loss(self, frames: list[np.ndarray], tokens: list[list[int]]) -> LossValue:
        enc, lengths = self.encode(frames)
        pred = self.predict_packed(tokens)
        u_lengths = [len(t) + 1 for t in tokens]
        lat = self.joint_packed(enc, lengths, pred, u_lengths)
        per = transducer_loss_batch(lat, list(zip(lengths, u_lengths)), tokens)
        return LossValue(ops.mean(per), per.data.copy())
