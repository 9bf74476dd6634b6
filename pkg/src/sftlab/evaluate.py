"""Corpus-level evaluation of a model on named splits."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import no_grad
from .decode import ctc_greedy_decode, joint_beam_search, rnnt_beam_decode, rnnt_greedy_decode
from .errors import ConfigError
from .metrics import WerReport, corpus_wer, edit_distance

METHODS = ("joint", "ctc_greedy", "rnnt_greedy", "rnnt_beam")


@dataclass(frozen=True)
class DecodeConfig:
    method: str = ""  # empty: joint for the Transformer, rnnt_greedy for RNN-T
    beam: int = 10
    ctc_weight: float = 0.3
    max_symbols_per_frame: int = 5
    batch: int = 16

    def __post_init__(self):
        if self.method and self.method not in METHODS:
            raise ConfigError(f"unknown decoding method {self.method!r}")
        if self.beam < 1 or self.batch < 1:
            raise ConfigError("beam and batch must be positive")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError("ctc_weight must lie in [0, 1]")

    def resolve(self, model_kind: str) -> "DecodeConfig":
        if self.method:
            if (self.method.startswith("rnnt")) != (model_kind == "rnnt"):
                raise ConfigError(f"decoding method {self.method} does not apply to {model_kind}")
            return self
        kw = asdict(self)
        kw["method"] = "rnnt_greedy" if model_kind == "rnnt" else "joint"
        return DecodeConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DecodeConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown decode keys: {sorted(unknown)}")
        return cls(**data)


def transcribe(model, utts, cfg: DecodeConfig) -> list[list[int]]:
    cfg = cfg.resolve(model.kind)
    out: list[list[int]] = []
    for start in range(0, len(utts), cfg.batch):
        chunk = utts[start : start + cfg.batch]
        frames = [u.frames for u in chunk]
        if cfg.method == "joint":
            out.extend(h.tokens for h in joint_beam_search(model, frames, cfg.beam, cfg.ctc_weight))
        elif cfg.method == "ctc_greedy":
            with no_grad():
                enc, lengths = model.encode(frames)
                lp = model.ctc_log_probs(enc).data
            offs = np.concatenate([[0], np.cumsum(lengths)])
            out.extend(model.vocab.strip(ctc_greedy_decode(lp[:, offs[i] : offs[i + 1]]))
                       for i in range(len(chunk)))
        elif cfg.method == "rnnt_greedy":
            out.extend(rnnt_greedy_decode(model, f, cfg.max_symbols_per_frame) for f in frames)
        else:
            out.extend(rnnt_beam_decode(model, f, cfg.beam, cfg.max_symbols_per_frame).tokens for f in frames)
    return out


def score_split(utts, hyps) -> tuple[WerReport, list[WerReport]]:
    per = [edit_distance(u.tokens, h) for u, h in zip(utts, hyps)]
    return corpus_wer(per), per


def evaluate_suite(model, splits: dict, names, cfg: DecodeConfig = DecodeConfig(), transcriber=None) -> list[dict]:
    """One row per requested split, in the order given.

    ``transcriber(model, utts, cfg)`` replaces decoding when supplied.
    """
    missing = [n for n in names if n not in splits]
    if missing:
        raise ConfigError(f"missing split(s): {', '.join(missing)}")
    run = transcriber or transcribe
    rows = []
    for name in names:
        utts = splits[name]
        total, _ = score_split(utts, run(model, utts, cfg))
        rows.append({"split": name, **total.to_dict(), "n_utts": len(utts)})
    return rows
