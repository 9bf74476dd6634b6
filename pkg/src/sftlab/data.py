"""Seeded synthetic acoustic domains and the staged split layout.

A domain is a token bigram chain plus an acoustic rendering: every token is a
prototype vector, held for a random number of frames, perturbed by Gaussian
noise and passed through a fixed linear channel. The target domain differs
from the source in prototypes, channel and bigram table.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DisjointnessError
from .registry.checkpoint import read_container, write_container
from .vocab import Vocab

# split names in corpus order
SOURCE_TRAIN = "source-train"
SOURCE_CLEAN = "source-test-clean"
SOURCE_OTHER = "source-test-other"
STAGES = ("target-stage1", "target-stage2", "target-stage3")
TARGET_DEV = "target-dev"
TARGET_IN = "target-test-in"
TARGET_OUT = "target-test-out"
SPLITS = (SOURCE_TRAIN, SOURCE_CLEAN, SOURCE_OTHER, *STAGES, TARGET_DEV, TARGET_IN, TARGET_OUT)
SOURCE_TESTS = (SOURCE_CLEAN, SOURCE_OTHER)
TARGET_TESTS = (TARGET_DEV, TARGET_IN, TARGET_OUT)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    seed: int
    prototypes: np.ndarray  # n_tokens x F
    channel: np.ndarray  # F x F
    channel_bias: np.ndarray  # F
    initial: np.ndarray  # n_tokens
    transitions: np.ndarray  # n_tokens x n_tokens, rows sum to 1
    frames_per_token: tuple[int, int] = (8, 16)
    length: tuple[int, int] = (3, 10)
    noise_std: float = 0.3

    def __post_init__(self):
        n, f = self.prototypes.shape
        if self.channel.shape != (f, f) or self.channel_bias.shape != (f,):
            raise ConfigError("channel shape does not match the feature dimension")
        if self.transitions.shape != (n, n) or self.initial.shape != (n,):
            raise ConfigError("bigram table does not match the token count")
        if not np.allclose(self.transitions.sum(axis=1), 1.0) or not np.isclose(self.initial.sum(), 1.0):
            raise ConfigError("transition rows must sum to 1")
        diffs = self.prototypes[:, None, :] - self.prototypes[None, :, :]
        d = np.sqrt((diffs**2).sum(-1)) + np.eye(n)
        if d.min() <= 0:
            raise ConfigError("token prototypes must be distinct")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad frames_per_token {self.frames_per_token}")
        if not 1 <= self.length[0] <= self.length[1]:
            raise ConfigError(f"bad length range {self.length}")

    @property
    def n_tokens(self) -> int:
        return self.prototypes.shape[0]

    @property
    def F(self) -> int:
        return self.prototypes.shape[1]


def stationary(transitions: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix."""
    vals, vecs = np.linalg.eig(transitions.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    v = np.abs(v)
    return v / v.sum()


def _orthogonal(rng, f: int, near_identity: float | None = None) -> np.ndarray:
    g = rng.normal(size=(f, f))
    if near_identity is not None:
        g = np.eye(f) + near_identity * g
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def _bigram(rng, n: int, concentration: float) -> np.ndarray:
    return rng.dirichlet(np.full(n, concentration), size=n)


@dataclass(frozen=True)
class SynthConfig:
    """Every knob of the synthetic corpus; the corpus is a pure function of it."""

    seed: int = 0
    n_tokens: int = 32
    F: int = 16
    frames_per_token: tuple[int, int] = (8, 16)
    length: tuple[int, int] = (3, 10)
    noise_std: float = 0.3
    other_noise_std: float = 0.6
    concentration: float = 0.3
    proto_shift: float = 0.3
    channel_shift: float = 0.3
    channel_offset: float = 0.0
    lm_shift: float = 1.0
    target_vocab: float = 0.5
    out_rotation: float = 0.3
    source_train: int = 2000
    source_test_clean: int = 300
    source_test_other: int = 300
    stage_size: int = 600
    target_dev: int = 200
    target_test_in: int = 300
    target_test_out: int = 300

    def __post_init__(self):
        for f in ("source_train", "source_test_clean", "source_test_other", "stage_size", "target_dev",
                  "target_test_in", "target_test_out", "n_tokens", "F"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_token"] = list(self.frames_per_token)
        d["length"] = list(self.length)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        kw = dict(data)
        for key in ("frames_per_token", "length"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def source_domain(cfg: SynthConfig) -> DomainSpec:
    rng = np.random.default_rng([cfg.seed, 1])
    n, f = cfg.n_tokens, cfg.F
    trans = _bigram(rng, n, cfg.concentration)
    return DomainSpec(
        name="source", seed=cfg.seed,
        prototypes=rng.normal(size=(n, f)),
        channel=_orthogonal(rng, f),
        channel_bias=0.1 * rng.normal(size=f),
        initial=stationary(trans), transitions=trans,
        frames_per_token=cfg.frames_per_token, length=cfg.length, noise_std=cfg.noise_std,
    )


def target_domain(cfg: SynthConfig, source: DomainSpec) -> DomainSpec:
    rng = np.random.default_rng([cfg.seed, 2])
    n, f = source.prototypes.shape
    # the target chain lives on a random subset of the tokens
    support = np.sort(rng.choice(n, size=max(2, int(round(cfg.target_vocab * n))), replace=False))
    own = np.zeros((n, n))
    own[:, support] = _bigram(rng, len(support), cfg.concentration)[rng.integers(0, len(support), size=n)]
    own[support[:, None], support[None, :]] = _bigram(rng, len(support), cfg.concentration)
    trans = (1 - cfg.lm_shift) * source.transitions + cfg.lm_shift * own
    offset = rng.normal(size=f)
    offset *= cfg.channel_offset / np.linalg.norm(offset)
    return replace(
        source, name="target",
        prototypes=source.prototypes + cfg.proto_shift * rng.normal(size=(n, f)),
        channel=_orthogonal(rng, f, cfg.channel_shift) @ source.channel,
        channel_bias=source.channel_bias + 0.1 * rng.normal(size=f) + offset,
        initial=stationary(trans), transitions=trans,
    )


def rotated(spec: DomainSpec, angle: float, seed: int, name: str) -> DomainSpec:
    """Same domain heard through an extra fixed rotation of the channel."""
    rng = np.random.default_rng([seed, 3])
    return replace(spec, name=name, channel=_orthogonal(rng, spec.F, angle) @ spec.channel)


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # F x T0, float32
    tokens: list[int]  # model-vocabulary ids
    durations: list[int]
    domain: str
    split: str

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


def gen_utterance(spec: DomainSpec, stream: int, index: int, split: str = "", uid: str | None = None) -> Utterance:
    """One utterance, fully determined by (spec.seed, stream, index)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, stream, index])))
    n_tok = int(rng.integers(spec.length[0], spec.length[1] + 1))
    seq = [int(rng.choice(spec.n_tokens, p=spec.initial))]
    for _ in range(n_tok - 1):
        seq.append(int(rng.choice(spec.n_tokens, p=spec.transitions[seq[-1]])))
    lo, hi = spec.frames_per_token
    durations = [int(d) for d in rng.integers(lo, hi + 1, size=n_tok)]
    clean = np.repeat(spec.prototypes[seq], durations, axis=0)  # T0 x F
    noisy = clean + spec.noise_std * rng.normal(size=clean.shape)
    frames = (spec.channel @ noisy.T + spec.channel_bias[:, None]).astype(np.float32)
    vocab = Vocab(spec.n_tokens + 4)
    return Utterance(uid or f"{spec.name}-{stream}-{index:06d}", frames, [vocab.token_id(k) for k in seq],
                     durations, spec.name, split)


def gen_domain(spec: DomainSpec, n: int, stream: int = 0, split: str = "") -> list[Utterance]:
    if n < 1:
        raise ConfigError("need at least one utterance")
    return [gen_utterance(spec, stream, i, split) for i in range(n)]


@dataclass
class Corpus:
    config: SynthConfig
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> list[Utterance]:
        if name not in self.splits:
            raise KeyError(f"no split named {name!r}")
        return self.splits[name]

    def ids(self, name: str) -> list[str]:
        return [u.id for u in self.splits[name]]

    def manifest(self) -> dict:
        return {"spec": self.config.to_dict(),
                "splits": [{"name": k, "count": len(v), "utterance_ids": [u.id for u in v]}
                           for k, v in self.splits.items()]}


def check_disjoint(groups: dict[str, list[Utterance]]) -> None:
    seen: dict[str, str] = {}
    for name, utts in groups.items():
        for u in utts:
            if u.id in seen and seen[u.id] != name:
                raise DisjointnessError(f"utterance {u.id} appears in both {seen[u.id]} and {name}")
            seen[u.id] = name


def make_corpus(cfg: SynthConfig) -> Corpus:
    src = source_domain(cfg)
    tgt = target_domain(cfg, src)
    other = replace(src, name="source-other", noise_std=cfg.other_noise_std)
    out = rotated(tgt, cfg.out_rotation, cfg.seed, "target-out")

    def split(spec, stream, n, name):
        return [gen_utterance(spec, stream, i, name, f"{name}-{i:06d}") for i in range(n)]

    c = Corpus(cfg)
    c.splits[SOURCE_TRAIN] = split(src, 10, cfg.source_train, SOURCE_TRAIN)
    c.splits[SOURCE_CLEAN] = split(src, 11, cfg.source_test_clean, SOURCE_CLEAN)
    c.splits[SOURCE_OTHER] = split(other, 12, cfg.source_test_other, SOURCE_OTHER)
    pool = split(tgt, 20, 3 * cfg.stage_size, "target-train")
    order = np.random.default_rng([cfg.seed, 4]).permutation(len(pool))
    for s, name in enumerate(STAGES):
        part = sorted(order[s * cfg.stage_size : (s + 1) * cfg.stage_size].tolist())
        c.splits[name] = [replace(pool[i], split=name) for i in part]
    c.splits[TARGET_DEV] = split(tgt, 21, cfg.target_dev, TARGET_DEV)
    c.splits[TARGET_IN] = split(tgt, 22, cfg.target_test_in, TARGET_IN)
    c.splits[TARGET_OUT] = split(out, 23, cfg.target_test_out, TARGET_OUT)
    check_disjoint(c.splits)
    return c


# ------------------------------------------------------------------ io


def save_corpus(corpus: Corpus, path) -> None:
    arrays, dtypes = {}, {}
    for name, utts in corpus.splits.items():
        arrays[f"{name}.frames"] = (np.concatenate([u.frames for u in utts], axis=1) if utts
                                    else np.zeros((corpus.config.F, 0), np.float32))
        arrays[f"{name}.n_frames"] = np.array([u.n_frames for u in utts], dtype=np.int32)
        arrays[f"{name}.tokens"] = np.array([t for u in utts for t in u.tokens], dtype=np.int32)
        arrays[f"{name}.durations"] = np.array([d for u in utts for d in u.durations], dtype=np.int32)
        arrays[f"{name}.n_tokens"] = np.array([len(u.tokens) for u in utts], dtype=np.int32)
        dtypes.update({f"{name}.frames": "f32", f"{name}.n_frames": "i32", f"{name}.tokens": "i32",
                       f"{name}.durations": "i32", f"{name}.n_tokens": "i32"})
    manifest = corpus.manifest()
    for entry in manifest["splits"]:
        entry["domains"] = [u.domain for u in corpus.splits[entry["name"]]]
    write_container(path, "dataset", arrays, dtypes, {"manifest": manifest})
    Path(str(path) + ".json").write_text(json.dumps(corpus.manifest(), indent=1))


def load_corpus(path) -> Corpus:
    header, arrays = read_container(path)
    if header.get("model_kind") != "dataset":
        raise ConfigError(f"{path} is not a dataset file")
    manifest = header["manifest"]
    corpus = Corpus(SynthConfig.from_dict(manifest["spec"]))
    for entry in manifest["splits"]:
        name = entry["name"]
        frames = arrays[f"{name}.frames"]
        t_ends = np.cumsum(arrays[f"{name}.n_frames"])
        l_ends = np.cumsum(arrays[f"{name}.n_tokens"])
        utts = []
        for i, uid in enumerate(entry["utterance_ids"]):
            t0, t1 = (t_ends[i - 1] if i else 0), t_ends[i]
            l0, l1 = (l_ends[i - 1] if i else 0), l_ends[i]
            utts.append(Utterance(uid, np.ascontiguousarray(frames[:, t0:t1]),
                                  arrays[f"{name}.tokens"][l0:l1].tolist(),
                                  arrays[f"{name}.durations"][l0:l1].tolist(), entry["domains"][i], name))
        if len(utts) != entry["count"]:
            raise ConfigError(f"{path}: split {name} has {len(utts)} utterances, manifest says {entry['count']}")
        corpus.splits[name] = utts
    return corpus


# ------------------------------------------------------------------ diagnostics


def frame_labels(utts: list[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    """(frames F x sum T0, per-frame token id)."""
    x = np.concatenate([u.frames for u in utts], axis=1)
    y = np.concatenate([np.repeat(u.tokens, u.durations) for u in utts])
    return x, y


def gaussian_shift_error(source: list[Utterance], target: list[Utterance]) -> float:
    """Frame error rate on ``target`` of a diagonal Gaussian classifier fit on ``source``."""
    xs, ys = frame_labels(source)
    xt, yt = frame_labels(target)
    classes = np.unique(ys)
    mu = np.stack([xs[:, ys == c].mean(axis=1) for c in classes])
    var = np.stack([xs[:, ys == c].var(axis=1) for c in classes]) + 1e-6
    prior = np.log(np.array([(ys == c).mean() for c in classes]))
    ll = (-0.5 * (((xt.T[:, None, :] - mu[None]) ** 2) / var[None] + np.log(var[None])).sum(-1)) + prior
    pred = classes[np.argmax(ll, axis=1)]
    return float(np.mean(pred != yt))
