"""Independent brute-force references used by the test-suite."""

from __future__ import annotations

import itertools

import numpy as np


def collapse(path, blank=0):
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def ctc_brute_force(lp: np.ndarray, target) -> float:
    """-log sum over every frame labelling that collapses to target."""
    v, t = lp.shape
    total = 0.0
    for path in itertools.product(range(v), repeat=t):
        if collapse(path) == list(target):
            total += np.exp(sum(lp[s, i] for i, s in enumerate(path)))
    return -np.log(total)


def transducer_brute_force(lattice: np.ndarray, target) -> float:
    """-log sum over all orderings of T blanks and L emissions ending in blank."""
    v, t_len, u1 = lattice.shape
    n_lab = u1 - 1
    total = 0.0
    steps = t_len - 1 + n_lab  # the final blank at (T-1, L) is fixed
    for emit_pos in itertools.combinations(range(steps), n_lab):
        t = u = 0
        logp = 0.0
        emit_pos = set(emit_pos)
        for k in range(steps):
            if k in emit_pos:
                logp += lattice[target[u], t, u]
                u += 1
            else:
                logp += lattice[0, t, u]
                t += 1
        logp += lattice[0, t_len - 1, n_lab]
        total += np.exp(logp)
    return -np.log(total)


def naive_conv2d(x, w, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ic in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ic, i * stride + a, j * stride + b] * w[oc, ic, a, b]
                out[oc, i, j] = acc
    return out


def all_strings(alphabet: int, max_len: int):
    out = []
    for n in range(max_len + 1):
        out.extend(itertools.product(range(alphabet), repeat=n))
    return out


def edit_graph_distances(alphabet: int, max_len: int):
    """All-pairs edit distances by breadth-first search on the single-edit graph.

    Nodes are all strings up to max_len; an optimal script never needs a
    longer intermediate string, so distances are exact. Uses repeated boolean
    matrix products over the adjacency matrix.
    """
    strings = all_strings(alphabet, max_len)
    index = {s: i for i, s in enumerate(strings)}
    n = len(strings)
    adj = np.zeros((n, n), dtype=np.float32)
    for s, i in index.items():
        for p in range(len(s)):
            adj[i, index[s[:p] + s[p + 1 :]]] = 1  # deletion
            for c in range(alphabet):
                if c != s[p]:
                    adj[i, index[s[:p] + (c,) + s[p + 1 :]]] = 1
        if len(s) < max_len:
            for p in range(len(s) + 1):
                for c in range(alphabet):
                    adj[i, index[s[:p] + (c,) + s[p:]]] = 1
    dist = np.full((n, n), -1, dtype=np.int64)
    np.fill_diagonal(dist, 0)
    frontier = np.eye(n, dtype=np.float32)
    reached = np.eye(n, dtype=bool)
    d = 0
    while not reached.all():
        d += 1
        frontier = ((frontier @ adj) > 0) & ~reached
        dist[frontier] = d
        reached |= frontier
        frontier = frontier.astype(np.float32)
    return strings, dist
