import itertools

import numpy as np
import pytest
from oracles import collapse, ctc_brute_force, edit_graph_distances

from sftlab.autodiff import Tensor, no_grad, precision
from sftlab.data import SOURCE_CLEAN, TARGET_DEV, TARGET_IN
from sftlab.decode import (
    ctc_greedy_decode,
    ctc_prefix_extend,
    ctc_prefix_init,
    joint_beam_decode,
    joint_beam_search,
    joint_greedy_decode,
    rnnt_beam_decode,
    rnnt_greedy_decode,
)
from sftlab.errors import ConfigError
from sftlab.evaluate import DecodeConfig, evaluate_suite, score_split, transcribe
from sftlab.losses import ctc_loss
from sftlab.metrics import WerReport, corpus_wer, edit_distance, forgetting
from sftlab.models import RnntConfig, RnntModel


def _lp_from_argmax(ids, v=4):
    lp = np.full((v, len(ids)), -5.0)
    lp[ids, np.arange(len(ids))] = -0.1
    return lp


# ------------------------------------------------------------------ CTC greedy


def test_ctc_greedy_collapse_rule():
    assert ctc_greedy_decode(_lp_from_argmax([0, 2, 2, 0, 2])) == [2, 2]
    assert ctc_greedy_decode(_lp_from_argmax([0, 0, 0])) == []
    assert ctc_greedy_decode(_lp_from_argmax([1, 1, 3, 0, 3, 3])) == [1, 3, 3]


def test_ctc_greedy_ties_go_to_lower_id():
    lp = np.log(np.full((4, 3), 0.25))
    assert ctc_greedy_decode(lp) == []
    lp[2:, 1] = np.log(0.4)
    assert ctc_greedy_decode(lp) == [2]


# ------------------------------------------------------------------ CTC prefix scores


def _prefix_state(x, prefix):
    """Forward variables of ``prefix`` built by successive extension."""
    r = ctc_prefix_init(x)
    last = np.array([-1])
    for c in prefix:
        _, r_ext, _ = ctc_prefix_extend(x, r, last)
        r = r_ext[:, :, :, c]
        last = np.array([c])
    return r, last


def _brute_prefix(lp, prefix):
    """Sum over all frame paths whose collapsed labelling starts with ``prefix``."""
    v, t = lp.shape
    total = 0.0
    for path in itertools.product(range(v), repeat=t):
        if tuple(collapse(path)[: len(prefix)]) == tuple(prefix):
            total += np.exp(sum(lp[k, i] for i, k in enumerate(path)))
    return np.log(total) if total > 0 else -np.inf


def test_prefix_scores_match_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v, t = 3, int(rng.integers(2, 6))
        z = rng.normal(size=(v, t))
        lp = z - np.log(np.exp(z).sum(axis=0))
        prefix = [int(k) for k in rng.integers(1, v, size=int(rng.integers(0, 3)))]
        x = lp.T[None]
        r, last = _prefix_state(x, prefix)
        psi, _, full = ctc_prefix_extend(x, r, last)
        for c in range(1, v):
            np.testing.assert_allclose(psi[0, c], _brute_prefix(lp, prefix + [c]), atol=1e-9)
        exact = -ctc_brute_force(lp, prefix) if prefix else lp[0].sum()
        np.testing.assert_allclose(full[0], exact, atol=1e-9)


def test_completed_prefix_score_equals_ctc_loss():
    rng = np.random.default_rng(1)
    with precision("wide"):
        for _ in range(30):
            v, t = 6, int(rng.integers(6, 20))
            z = rng.normal(size=(v, t))
            lp = z - np.log(np.exp(z).sum(axis=0))
            target = [int(k) for k in rng.integers(1, v, size=int(rng.integers(1, 5)))]
            x = lp.T[None]
            r, last = _prefix_state(x, target)
            _, _, full = ctc_prefix_extend(x, r, last)
            loss = ctc_loss(Tensor.wrap(lp), target).item()
            assert abs(full[0] + loss) <= 1e-6


def test_padding_frames_do_not_change_prefix_scores():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 7))
    lp = z - np.log(np.exp(z).sum(axis=0))
    x = lp.T[None]
    padded = np.full((1, 10, 4), -np.inf)
    padded[0, :, 0] = 0.0
    padded[0, :7] = lp.T
    for prefix in ([], [1], [2, 3]):
        r1, l1 = _prefix_state(x, prefix)
        r2, l2 = _prefix_state(padded, prefix)
        p1, _, f1 = ctc_prefix_extend(x, r1, l1)
        p2, _, f2 = ctc_prefix_extend(padded, r2, l2)
        np.testing.assert_allclose(p1[:, 1:], p2[:, 1:], atol=1e-12)
        np.testing.assert_allclose(f1, f2, atol=1e-12)


# ------------------------------------------------------------------ joint decoding


def test_beam_one_equals_greedy(trained_transformer, small_corpus):
    utts = small_corpus[SOURCE_CLEAN][:25] + small_corpus[TARGET_DEV][:25]
    beam = joint_beam_search(trained_transformer, [u.frames for u in utts], beam=1)
    for u, b in zip(utts, beam):
        g = joint_greedy_decode(trained_transformer, u.frames)
        assert b.tokens == g.tokens
        # float32 network outputs; packing differs between the two paths
        assert b.score == pytest.approx(g.score, abs=1e-5)


def _attention_beam_reference(model, frames, beam):
    """Plain attention-only beam search, one hypothesis at a time."""
    vocab = model.vocab
    with no_grad():
        enc, lengths = model.encode([frames])
    limit = 2 * lengths[0]
    running, finished = [([], 0.0)], []
    while running:
        cands = []
        for tokens, score in running:
            with no_grad():
                lp = model.decode(enc, tokens).data[:, -1].astype(np.float64)
            for c in range(model.config.V):
                if c not in (vocab.blank, vocab.sos):
                    cands.append((score + lp[c], len(cands), tokens, c))
        cands.sort(key=lambda z: (-z[0], z[1]))
        running = []
        for score, _, tokens, c in cands[:beam]:
            if c == vocab.eos:
                finished.append((tokens, score))
            elif len(tokens) + 1 >= limit:
                pass
            else:
                running.append((tokens + [c], score))
    return max(finished, key=lambda z: z[1])


def test_zero_ctc_weight_is_pure_attention_search(trained_transformer, small_corpus):
    for u in small_corpus[TARGET_DEV][:8]:
        hyp = joint_beam_decode(trained_transformer, u.frames, beam=3, ctc_weight=0.0)
        tokens, score = _attention_beam_reference(trained_transformer, u.frames, 3)
        assert hyp.tokens == tokens
        assert hyp.score == pytest.approx(score, abs=1e-5)
        assert hyp.attention == pytest.approx(score, abs=1e-5)


def test_beam_sweep_mean_score_non_decreasing(trained_transformer, small_corpus):
    frames = [u.frames for u in small_corpus[TARGET_DEV][:40]]
    means = []
    for b in (1, 2, 4, 10):
        scores = np.array([h.score for h in joint_beam_search(trained_transformer, frames, beam=b)])
        assert np.all(np.isfinite(scores))
        means.append(scores.mean())
    assert all(y >= x - 1e-6 for x, y in zip(means, means[1:]))


def _exhaustive_best(model, frames, w, max_len):
    """Global optimum of the joint score over every hypothesis up to ``max_len`` tokens."""
    vocab = model.vocab
    with no_grad():
        enc, _ = model.encode([frames])
        lp = model.ctc_log_probs(enc).data.astype(np.float64)
    symbols = [k for k in range(model.config.V) if k not in (vocab.blank, vocab.sos, vocab.eos)]
    best = -np.inf
    for n in range(max_len):
        for seq in itertools.product(symbols, repeat=n):
            with no_grad():
                att = model.decode(enc, list(seq)).data.astype(np.float64)
            a = sum(att[k, i] for i, k in enumerate(seq)) + att[vocab.eos, n]
            c = -ctc_brute_force(lp, list(seq)) if seq else lp[0].sum()
            best = max(best, (1 - w) * a + w * c)
    return best


def test_exhaustive_beam_reaches_global_optimum_and_bounds_smaller_beams():
    from sftlab.models import TransformerConfig, TransformerModel

    cfg = TransformerConfig(F=8, D=8, N=1, M=1, heads=2, d_ff=16, V=6, sub_channels=(2, 2))
    model = TransformerModel.init(cfg, seed=4)
    rng = np.random.default_rng(4)
    # 3 candidate symbols + end: every prefix of up to 2 tokens fits in a beam of 64
    for _ in range(5):
        frames = rng.normal(size=(8, 12)).astype(np.float32)
        for w in (0.0, 0.3):
            opt = _exhaustive_best(model, frames, w, max_len=3)
            top = joint_beam_decode(model, frames, beam=64, ctc_weight=w, max_len=3)
            if top.finished:
                assert top.score == pytest.approx(opt, abs=1e-5)
            for b in (1, 2, 4):
                small = joint_beam_decode(model, frames, beam=b, ctc_weight=w, max_len=3)
                if small.finished:
                    assert small.score <= opt + 1e-5


def test_batched_search_equals_single(trained_transformer, small_corpus):
    utts = small_corpus[SOURCE_CLEAN][:6]
    batch = joint_beam_search(trained_transformer, [u.frames for u in utts], beam=4)
    for u, h in zip(utts, batch):
        single = joint_beam_decode(trained_transformer, u.frames, beam=4)
        assert single.tokens == h.tokens
        assert single.score == pytest.approx(h.score, abs=1e-6)


def test_hypotheses_exclude_special_tokens(trained_transformer, small_corpus):
    for h in joint_beam_search(trained_transformer, [u.frames for u in small_corpus[TARGET_IN][:10]], beam=3):
        assert all(2 <= t <= 33 for t in h.tokens)


def test_length_cap_returns_unfinished_flag(trained_transformer, small_corpus):
    u = small_corpus[SOURCE_CLEAN][0]
    h = joint_beam_decode(trained_transformer, u.frames, beam=2, max_len=1)
    assert not h.finished and len(h.tokens) <= 1
    assert np.isfinite(h.score)


def test_joint_decoding_argument_checks(trained_transformer, small_corpus):
    f = small_corpus[SOURCE_CLEAN][0].frames
    with pytest.raises(ConfigError):
        joint_beam_decode(trained_transformer, f, beam=0)
    with pytest.raises(ConfigError):
        joint_beam_decode(trained_transformer, f, ctc_weight=1.5)


# ------------------------------------------------------------------ transducer decoding


@pytest.fixture(scope="module")
def rnnt_model():
    return RnntModel.init(RnntConfig(), seed=3)


def _constant_joint(model, favourite: int):
    """Make the joint emit ``favourite`` with certainty-like preference at every step."""
    m = RnntModel(model.config, model.params.copy())
    p = m.params
    p["joint.w_enc"].data[...] = 0.0
    p["joint.w_enc.b"].data[...] = 5.0
    p["joint.w_pred"].data[...] = 0.0
    p["joint.w_out"].data[...] = 0.0
    p["joint.w_out"].data[favourite] = 1.0
    return m


def test_rnnt_blank_preferring_joint_emits_nothing(rnnt_model, small_corpus):
    m = _constant_joint(rnnt_model, 0)
    for u in small_corpus[SOURCE_CLEAN][:3]:
        assert rnnt_greedy_decode(m, u.frames) == []
        assert rnnt_beam_decode(m, u.frames, beam=4).tokens == []


def test_rnnt_symbol_cap_bounds_emission(rnnt_model, small_corpus):
    m = _constant_joint(rnnt_model, 5)
    u = small_corpus[SOURCE_CLEAN][0]
    with no_grad():
        _, lengths = m.encode([u.frames])
    for cap in (1, 3):
        out = rnnt_greedy_decode(m, u.frames, max_symbols_per_frame=cap)
        assert out == [5] * (lengths[0] * cap)


def test_rnnt_greedy_equals_beam_one(rnnt_model, small_corpus):
    for u in small_corpus[SOURCE_CLEAN][:25] + small_corpus[TARGET_DEV][:25]:
        assert rnnt_greedy_decode(rnnt_model, u.frames) == rnnt_beam_decode(rnnt_model, u.frames, beam=1).tokens


# ------------------------------------------------------------------ edit distance


def test_edit_distance_examples():
    assert edit_distance([1, 2, 3], [1, 2, 3]).wer == 0.0
    r = edit_distance([1, 9, 3], [1, 3])
    assert (r.substitutions, r.deletions, r.insertions) == (0, 1, 0)
    assert r.wer == pytest.approx(1 / 3)
    r = edit_distance([1, 2], [1, 5, 2, 7])
    assert (r.substitutions, r.deletions, r.insertions, r.wer) == (0, 0, 2, 1.0)


def test_edit_distance_tie_preferences():
    # one substitution beats a deletion plus an insertion
    r = edit_distance([1], [2])
    assert (r.substitutions, r.deletions, r.insertions) == (1, 0, 0)
    # equal-cost alignments with a length change: substitution then deletion
    r = edit_distance([1, 2], [3])
    assert (r.substitutions, r.deletions, r.insertions) == (1, 1, 0)


def test_empty_reference_flagged():
    r = edit_distance([], [4, 4])
    assert r.empty_reference and r.insertions == 2 and r.wer == 2.0
    assert not edit_distance([], []).empty_reference
    assert edit_distance([], []).wer == 0.0


def test_edit_distance_matches_exhaustive_oracle():
    strings, dist = edit_graph_distances(3, 6)
    for i, a in enumerate(strings):
        row = dist[i]
        for j, b in enumerate(strings):
            r = edit_distance(a, b)
            assert r.errors == row[j]
            assert r.deletions - r.insertions == len(a) - len(b)


def test_edit_distance_is_a_metric():
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(0, 4, size=rng.integers(0, 9))) for _ in range(60)]
    d = lambda a, b: edit_distance(a, b).errors
    for _ in range(300):
        a, b, c = (seqs[i] for i in rng.integers(0, len(seqs), size=3))
        assert d(a, b) == d(b, a)
        assert d(a, c) <= d(a, b) + d(b, c)
        assert (d(a, b) == 0) == (a == b)


def test_corpus_wer_pools_errors():
    reports = [edit_distance([1, 2, 3, 4], [1, 2, 3, 4]), edit_distance([1], [2])]
    total = corpus_wer(reports)
    assert total.wer == pytest.approx(1 / 5)
    assert total.wer != np.mean([r.wer for r in reports])
    assert (WerReport(1, 2, 3, 10) + WerReport(1, 0, 0, 5)).errors == 7


def test_forgetting_zero_at_stage_zero():
    wers = {0: {"a": 0.1, "b": 0.2}, 1: {"a": 0.15, "b": 0.1}}
    f = forgetting(wers, ["a", "b"])
    assert f[0] == {"a": 0.0, "b": 0.0}
    assert f[1]["a"] == pytest.approx(0.05) and f[1]["b"] == pytest.approx(-0.1)


# ------------------------------------------------------------------ evaluation suite


def _echo(model, utts, cfg):
    return [list(u.tokens) for u in utts]


def test_perfect_transcriber_scores_zero(small_corpus):
    names = [SOURCE_CLEAN, TARGET_DEV, TARGET_IN]
    rows = evaluate_suite(None, small_corpus.splits, names, transcriber=_echo)
    assert [r["split"] for r in rows] == names
    assert all(r["wer"] == 0.0 for r in rows)


def test_suite_aggregation_identity(trained_transformer, small_corpus):
    cfg = DecodeConfig(beam=2)
    names = [SOURCE_CLEAN, TARGET_DEV]
    splits = {n: small_corpus[n][:10] for n in names}
    rows = evaluate_suite(trained_transformer, splits, names, cfg)
    assert len(rows) == len(names)
    for row, name in zip(rows, names):
        hyps = transcribe(trained_transformer, splits[name], cfg)
        total, per = score_split(splits[name], hyps)
        errors = sum(r.errors for r in per)
        n_ref = sum(r.n_ref for r in per)
        assert row["wer"] == errors / n_ref == total.wer
        assert row["n_utts"] == 10


def test_suite_missing_split_named(small_corpus):
    with pytest.raises(ConfigError, match="nonexistent"):
        evaluate_suite(None, small_corpus.splits, [SOURCE_CLEAN, "nonexistent"], transcriber=_echo)


def test_decode_config_resolution():
    assert DecodeConfig().resolve("transformer").method == "joint"
    assert DecodeConfig().resolve("rnnt").method == "rnnt_greedy"
    with pytest.raises(ConfigError):
        DecodeConfig(method="rnnt_beam").resolve("transformer")
    with pytest.raises(ConfigError):
        DecodeConfig.from_dict({"bam": 3})


def test_ctc_greedy_method_matches_direct_decode(trained_transformer, small_corpus):
    utts = small_corpus[SOURCE_CLEAN][:5]
    hyps = transcribe(trained_transformer, utts, DecodeConfig(method="ctc_greedy"))
    for u, h in zip(utts, hyps):
        with no_grad():
            enc, _ = trained_transformer.encode([u.frames])
            lp = trained_transformer.ctc_log_probs(enc).data
        assert h == trained_transformer.vocab.strip(ctc_greedy_decode(lp))
