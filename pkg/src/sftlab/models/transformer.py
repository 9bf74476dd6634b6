"""Hybrid CTC/attention Transformer with pre-norm residual blocks."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops
from ..losses import LossValue, ctc_loss_batch, hybrid_loss, nll_loss_batch
from ..registry.tree import ParamTree
from ..vocab import Vocab
from . import layers
from .config import TransformerConfig
from .layers import block_mask, ffn, layer_norm, linear, mha


def param_shapes(cfg: TransformerConfig) -> layers.Shapes:
    d = cfg.D
    shapes = layers.subsample_shapes("encoder.sub", cfg)
    for i in range(cfg.N):
        p = f"encoder.block{i}"
        shapes.update(layers.ln_shapes(f"{p}.ln1", d))
        shapes.update(layers.mha_shapes(f"{p}.self_attn", d))
        shapes.update(layers.ln_shapes(f"{p}.ln2", d))
        shapes.update(layers.ffn_shapes(f"{p}.ffn", d, cfg.d_ff))
    shapes.update(layers.ln_shapes("encoder.ln_out", d))
    shapes["decoder.embed"] = (d, cfg.V)
    for i in range(cfg.M):
        p = f"decoder.block{i}"
        shapes.update(layers.ln_shapes(f"{p}.ln1", d))
        shapes.update(layers.mha_shapes(f"{p}.self_attn", d))
        shapes.update(layers.ln_shapes(f"{p}.ln2", d))
        shapes.update(layers.mha_shapes(f"{p}.src_attn", d))
        shapes.update(layers.ln_shapes(f"{p}.ln3", d))
        shapes.update(layers.ffn_shapes(f"{p}.ffn", d, cfg.d_ff))
    shapes.update(layers.ln_shapes("decoder.ln_out", d))
    shapes.update(layers.linear_shapes("ctc.w", cfg.V, d))
    shapes.update(layers.linear_shapes("out.w", cfg.V, d))
    return shapes


class TransformerModel:
    kind = "transformer"

    def __init__(self, config: TransformerConfig, params: ParamTree):
        self.config = config
        self.params = params
        self.vocab = Vocab(config.V)
        self.ctc_weight = 0.3
        self.label_smoothing = 0.0

    @classmethod
    def init(cls, config: TransformerConfig, seed: int = 0) -> "TransformerModel":
        return cls(config, layers.init_params(param_shapes(config), seed, config.D, embed_paths=("decoder.embed",)))

    # -- encoder ---------------------------------------------------------

    def subsample(self, frames: list[np.ndarray]) -> tuple[Tensor, list[int]]:
        return layers.subsample(self.params, "encoder.sub", self.config, frames)

    def encode_packed(self, x: Tensor, lengths, probe=None) -> Tensor:
        p, cfg = self.params, self.config
        mask = block_mask(lengths, lengths)
        for i in range(cfg.N):
            b = f"encoder.block{i}"
            h = layer_norm(p, f"{b}.ln1", x)
            x = ops.add(x, mha(p, f"{b}.self_attn", h, h, mask, cfg.heads, probe))
            x = ops.add(x, ffn(p, f"{b}.ffn", layer_norm(p, f"{b}.ln2", x)))
        return layer_norm(p, "encoder.ln_out", x)

    def encode(self, frames: list[np.ndarray], probe=None) -> tuple[Tensor, list[int]]:
        x, lengths = self.subsample(frames)
        return self.encode_packed(x, lengths, probe), lengths

    def ctc_log_probs(self, enc: Tensor) -> Tensor:
        return ops.log_softmax(linear(self.params, "ctc.w", enc), axis=0)

    # -- decoder ---------------------------------------------------------

    def decode_packed(self, enc: Tensor, enc_lengths, prefixes: list[list[int]]) -> Tensor:
        """Teacher-forced log-probabilities, V x sum(len(prefix) + 1).

        Column j of utterance i predicts the token following
        ``[sos] + prefix[:j]``.
        """
        p, cfg = self.params, self.config
        ids = np.concatenate([[self.vocab.sos] + list(pre) for pre in prefixes]).astype(np.int64)
        dec_lengths = [len(pre) + 1 for pre in prefixes]
        z = ops.take(p["decoder.embed"], ids, axis=1)
        pe = layers.positional_encoding(cfg.D, layers.segment_positions(dec_lengths)).astype(z.data.dtype)
        x = ops.add(z, Tensor.wrap(pe))
        self_mask = block_mask(dec_lengths, dec_lengths, causal=True)
        src_mask = block_mask(dec_lengths, enc_lengths)
        for i in range(cfg.M):
            b = f"decoder.block{i}"
            h = layer_norm(p, f"{b}.ln1", x)
            x = ops.add(x, mha(p, f"{b}.self_attn", h, h, self_mask, cfg.heads))
            h = layer_norm(p, f"{b}.ln2", x)
            x = ops.add(x, mha(p, f"{b}.src_attn", h, enc, src_mask, cfg.heads))
            x = ops.add(x, ffn(p, f"{b}.ffn", layer_norm(p, f"{b}.ln3", x)))
        x = layer_norm(p, "decoder.ln_out", x)
        return ops.log_softmax(linear(p, "out.w", x), axis=0)

    def decode(self, enc: Tensor, prefix: list[int]) -> Tensor:
        """Single-utterance decoder pass: V x (len(prefix) + 1)."""
        return self.decode_packed(enc, [enc.shape[1]], [list(prefix)])

    # -- training objective ----------------------------------------------

    def loss(self, frames: list[np.ndarray], tokens: list[list[int]]) -> LossValue:
        enc, lengths = self.encode(frames)
        ctc = ctc_loss_batch(self.ctc_log_probs(enc), lengths, tokens)
        dec = self.decode_packed(enc, lengths, tokens)
        targets = [list(t) + [self.vocab.eos] for t in tokens]
        nll = nll_loss_batch(dec, [len(t) for t in targets], targets, self.label_smoothing)
        per = hybrid_loss(nll, ctc, self.ctc_weight)
        return LossValue(ops.mean(per), per.data.copy())
