"""Decoders: CTC best path, joint CTC/attention beam search, transducer
greedy and beam search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ConfigError

NEG_INF = -np.inf


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    attention: float = 0.0
    ctc: float = 0.0
    finished: bool = True


def ctc_greedy_decode(log_probs, blank: int = 0) -> list[int]:
    """Best path: per-frame argmax (ties go to the lower id), merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = np.argmax(lp, axis=0)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


# ------------------------------------------------------------------ CTC prefix scores


def ctc_prefix_init(x: np.ndarray, blank: int = 0) -> np.ndarray:
    """Forward variables of the empty prefix. ``x`` is (B, T, V); returns (B, T, 2) as
    [ending in a label, ending in blank]."""
    r = np.full(x.shape[:2] + (2,), NEG_INF)
    r[:, :, 1] = np.cumsum(x[:, :, blank], axis=1)
    return r


def ctc_prefix_extend(x: np.ndarray, r: np.ndarray, last: np.ndarray, blank: int = 0):
    """Score every one-token extension of each prefix.

    x: (B, T, V) frame log-probabilities (padding frames must put all mass on
    blank); r: (B, T, 2) forward variables of the prefixes; last: (B,) final
    token of each prefix, -1 for the empty prefix.

    Returns psi (B, V), the log-probability that the labelling starts with
    prefix + c, the extended forward variables (B, T, 2, V), and the
    log-probability that the labelling equals the prefix exactly (B,).
    """
    b, t_max, v = x.shape
    rows = np.arange(b)
    full = np.logaddexp(r[:, -1, 0], r[:, -1, 1])
    phi = np.repeat(np.logaddexp(r[:, :, 0], r[:, :, 1])[:, :, None], v, axis=2)  # (B, T, V)
    has_last = last >= 0
    phi[rows[has_last], :, last[has_last]] = r[rows[has_last], :, 1]
    rn = np.full((b, t_max, v), NEG_INF)
    rb = np.full((b, t_max, v), NEG_INF)
    start = ~has_last
    rn[start, 0, :] = x[start, 0, :]
    psi = rn[:, 0, :].copy()
    for t in range(1, t_max):
        rn[:, t] = np.logaddexp(rn[:, t - 1], phi[:, t - 1]) + x[:, t]
        rb[:, t] = np.logaddexp(rb[:, t - 1], rn[:, t - 1]) + x[:, t, blank][:, None]
        psi = np.logaddexp(psi, phi[:, t - 1] + x[:, t])
    return psi, np.stack([rn, rb], axis=2), full


def _pad_ctc(lps: list[np.ndarray], blank: int) -> np.ndarray:
    """Stack V x T_i log-prob matrices into (B, T_max, V), padding with certain blanks."""
    v = lps[0].shape[0]
    t_max = max(lp.shape[1] for lp in lps)
    x = np.full((len(lps), t_max, v), NEG_INF)
    x[:, :, blank] = 0.0
    for i, lp in enumerate(lps):
        x[i, : lp.shape[1]] = lp.T
    return x


# ------------------------------------------------------------------ joint CTC/attention


@dataclass
class _Beam:
    utt: int
    tokens: list[int]
    att: float
    ctc: float
    score: float
    r: np.ndarray | None = field(repr=False)
    complete: bool = True


def _mix(att: np.ndarray, ctc: np.ndarray, w: float) -> np.ndarray:
    """(1 - w) * att + w * ctc, with a zero weight removing its term entirely."""
    if w == 0.0:
        return att.copy()
    if w == 1.0:
        return ctc.copy()
    return (1 - w) * att + w * ctc


def _encode_all(model, frames: list[np.ndarray]):
    with no_grad():
        enc, lengths = model.encode(frames)
        ctc_lp = model.ctc_log_probs(enc).data.astype(np.float64)
    offs = np.concatenate([[0], np.cumsum(lengths)])
    encs = [enc.data[:, offs[i] : offs[i + 1]] for i in range(len(frames))]
    lps = [ctc_lp[:, offs[i] : offs[i + 1]] for i in range(len(frames))]
    return encs, lps, lengths


def joint_beam_search(model, frames: list[np.ndarray], beam: int = 10, ctc_weight: float = 0.3,
                      max_len: int | None = None) -> list[Hypothesis]:
    """Joint CTC/attention beam search for a batch of utterances.

    A hypothesis h scores ``(1 - w) * log p_att(h) + w * log p_ctc(h...)`` where
    the CTC term is the prefix probability. Every token of the vocabulary
    except blank and start is a candidate. Search stops for an utterance
    once no running hypothesis can beat its best finished one (both terms
    only decrease as a prefix grows) or after ``max_len`` tokens
    (default: twice the encoder length).
    """
    if beam < 1:
        raise ConfigError("beam must be at least 1")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ConfigError(f"ctc_weight must lie in [0, 1], got {ctc_weight}")
    vocab = model.vocab
    w = ctc_weight
    encs, lps, lengths = _encode_all(model, frames)
    x_all = _pad_ctc(lps, vocab.blank)
    n = len(frames)
    limits = [max_len if max_len is not None else 2 * t for t in lengths]
    r0 = ctc_prefix_init(x_all, vocab.blank)
    running: list[list[_Beam]] = [[_Beam(i, [], 0.0, 0.0, 0.0, r0[i])] for i in range(n)]
    finished: list[list[_Beam]] = [[] for _ in range(n)]
    banned = np.zeros(model.config.V, dtype=bool)
    banned[[vocab.blank, vocab.sos]] = True
    while any(running):
        flat = [h for hs in running for h in hs]
        enc_cat = Tensor.wrap(np.concatenate([encs[h.utt] for h in flat], axis=1))
        with no_grad():
            dec = model.decode_packed(enc_cat, [lengths[h.utt] for h in flat], [h.tokens for h in flat]).data
        ends = np.cumsum([len(h.tokens) + 1 for h in flat]) - 1
        att = dec[:, ends].T.astype(np.float64)  # (H, V)
        idx = np.array([h.utt for h in flat])
        psi, r_ext, full = ctc_prefix_extend(x_all[idx], np.stack([h.r for h in flat]),
                                             np.array([h.tokens[-1] if h.tokens else -1 for h in flat]),
                                             vocab.blank)
        psi[:, vocab.eos] = full
        att_cum = np.array([h.att for h in flat])[:, None] + att
        total = _mix(att_cum, psi, w)
        total[np.isnan(total)] = NEG_INF
        total[:, banned] = NEG_INF
        new_running: list[list[_Beam]] = [[] for _ in range(n)]
        pos = 0
        for i in range(n):
            hs = running[i]
            if not hs:
                continue
            block = total[pos : pos + len(hs)].ravel()
            # stable order: hypothesis rank, then token id
            order = np.argsort(-block, kind="stable")[:beam]
            for flat_k in order:
                if block[flat_k] == NEG_INF:
                    break
                hi, c = divmod(int(flat_k), total.shape[1])
                h = hs[hi]
                g = pos + hi
                cand = _Beam(i, h.tokens + [c], float(att_cum[g, c]), float(psi[g, c]), float(block[flat_k]),
                             r_ext[g, :, :, c].copy())
                if c == vocab.eos:
                    cand.tokens = h.tokens
                    finished[i].append(cand)
                elif len(cand.tokens) >= limits[i]:
                    cand.r, cand.complete = None, False
                    finished[i].append(cand)
                else:
                    new_running[i].append(cand)
            pos += len(hs)
            best_done = max((f.score for f in finished[i] if f.complete), default=NEG_INF)
            if new_running[i] and max(h.score for h in new_running[i]) <= best_done:
                new_running[i] = []
        running = new_running
    out = []
    for i in range(n):
        done = [f for f in finished[i] if f.complete]
        if not (done or finished[i]):
            # every extension scored -inf, e.g. non-finite model outputs
            out.append(Hypothesis([], NEG_INF, NEG_INF, NEG_INF, finished=False))
            continue
        best = max(done or finished[i], key=lambda f: f.score)
        out.append(Hypothesis(vocab.strip(best.tokens), best.score, best.att, best.ctc, finished=best.complete))
    return out


def joint_beam_decode(model, frames: np.ndarray, beam: int = 10, ctc_weight: float = 0.3,
                      max_len: int | None = None) -> Hypothesis:
    return joint_beam_search(model, [frames], beam, ctc_weight, max_len)[0]


def joint_greedy_decode(model, frames: np.ndarray, ctc_weight: float = 0.3, max_len: int | None = None) -> Hypothesis:
    """One hypothesis, extended by the best-scoring token until end-of-sentence."""
    vocab = model.vocab
    encs, lps, lengths = _encode_all(model, [frames])
    x = _pad_ctc(lps, vocab.blank)
    r = ctc_prefix_init(x, vocab.blank)[0]
    limit = max_len if max_len is not None else 2 * lengths[0]
    tokens: list[int] = []
    att_sum = 0.0
    enc = Tensor.wrap(encs[0])
    while True:
        with no_grad():
            att = model.decode(enc, tokens).data[:, -1].astype(np.float64)
        psi, r_ext, full = ctc_prefix_extend(x, r[None], np.array([tokens[-1] if tokens else -1]), vocab.blank)
        psi = psi[0]
        psi[vocab.eos] = full[0]
        total = _mix(att_sum + att, psi, ctc_weight)
        total[[vocab.blank, vocab.sos]] = NEG_INF
        c = int(np.argmax(total))
        att_sum += att[c]
        if c == vocab.eos:
            return Hypothesis(vocab.strip(tokens), float(total[c]), float(att_sum), float(psi[c]))
        tokens.append(c)
        r = r_ext[0, :, :, c].copy()
        if len(tokens) >= limit:
            return Hypothesis(vocab.strip(tokens), float(total[c]), float(att_sum), float(psi[c]), finished=False)


# ------------------------------------------------------------------ transducer


def _rnnt_prepare(model, frames):
    with no_grad():
        enc, lengths = model.encode([frames])
        proj = model.joint_enc_proj(enc)
    return proj.data, lengths[0]


def rnnt_greedy_decode(model, frames: np.ndarray, max_symbols_per_frame: int = 5) -> list[int]:
    """Per frame, emit the argmax token until blank or the symbol cap, then move on."""
    vocab = model.vocab
    proj, t_len = _rnnt_prepare(model, frames)
    with no_grad():
        h, c = model.lstm_cell(np.array([vocab.sos]), *model.lstm_zero_state(1))
        tokens: list[int] = []
        for t in range(t_len):
            e = Tensor.wrap(proj[:, t : t + 1])
            for _ in range(max_symbols_per_frame):
                lp = model.joint_pairs(e, h).data[:, 0]
                k = int(np.argmax(lp))
                if k == vocab.blank:
                    break
                tokens.append(k)
                h, c = model.lstm_cell(np.array([k]), h, c)
    return vocab.strip(tokens)


@dataclass
class _RHyp:
    tokens: tuple
    score: float
    h: Tensor
    c: Tensor


def rnnt_beam_decode(model, frames: np.ndarray, beam: int = 10, max_symbols_per_frame: int = 5) -> Hypothesis:
    """Frame-synchronous transducer beam search.

    Within a frame, hypotheses are expanded for at most
    ``max_symbols_per_frame`` rounds; each round keeps the ``beam`` best
    extensions, and those ending in blank move on to the next frame (equal
    label sequences are merged by log-sum). With beam 1 this is greedy
    decoding.
    """
    if beam < 1:
        raise ConfigError("beam must be at least 1")
    vocab = model.vocab
    proj, t_len = _rnnt_prepare(model, frames)
    with no_grad():
        h0, c0 = model.lstm_cell(np.array([vocab.sos]), *model.lstm_zero_state(1))
        hyps = [_RHyp((), 0.0, h0, c0)]
        for t in range(t_len):
            e = Tensor.wrap(proj[:, t : t + 1])
            active, moved = hyps, {}
            for rnd in range(max_symbols_per_frame + 1):
                if not active:
                    break
                cands = []
                for hi, hyp in enumerate(active):
                    lp = model.joint_pairs(e, hyp.h).data[:, 0].astype(np.float64)
                    cands.append((hyp.score + lp[vocab.blank], hi, vocab.blank))
                    if rnd < max_symbols_per_frame:
                        for k in range(len(lp)):
                            if k != vocab.blank:
                                cands.append((hyp.score + lp[k], hi, k))
                cands.sort(key=lambda z: -z[0])  # stable: ties keep (hyp, token) order
                nxt = []
                for score, hi, k in cands[:beam]:
                    hyp = active[hi]
                    if k == vocab.blank:
                        prev = moved.get(hyp.tokens)
                        if prev is None:
                            moved[hyp.tokens] = _RHyp(hyp.tokens, score, hyp.h, hyp.c)
                        else:
                            prev.score = float(np.logaddexp(prev.score, score))
                    else:
                        h, c = model.lstm_cell(np.array([k]), hyp.h, hyp.c)
                        nxt.append(_RHyp(hyp.tokens + (k,), score, h, c))
                active = nxt
            hyps = sorted(moved.values(), key=lambda z: -z.score)[:beam]
    best = hyps[0]
    return Hypothesis(vocab.strip(list(best.tokens)), best.score)
