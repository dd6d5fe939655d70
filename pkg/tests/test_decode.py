"""Verification losslessness, proved by exhaustive enumeration.

The enumeration driver replays the decode machinery under every possible
outcome of its discrete random choices (bernoulli coins and categorical
draws), accumulating path probabilities. The expected distribution is the
toy target's own conditional law, which is known exactly, so agreement
within 1e-9 is a complete correctness proof at these sizes.
"""

from collections import defaultdict

import numpy as np
import pytest

from specdec.decode import (DecodeConfig, DraftTree, build_draft_tree,
                            verify_chain, verify_tree)
from specdec.rng import Rng, derive_seed

# ------------------------------------------------------- enumeration driver


class _Probe(Exception):
    def __init__(self, options):
        self.options = options  # list of (value, probability)


class ReplayRng:
    """Replays a prescribed list of choice indices; raises _Probe with the
    available options when the prescription runs out."""

    def __init__(self, choices):
        self.choices = list(choices)
        self.pos = 0
        self.mass = 1.0

    def _choose(self, options):
        if self.pos < len(self.choices):
            idx = self.choices[self.pos]
            self.pos += 1
            val, p = options[idx]
            self.mass *= p
            return val
        raise _Probe(options)

    def bernoulli(self, p):
        opts = []
        if p > 0:
            opts.append((True, min(p, 1.0)))
        if p < 1:
            opts.append((False, 1.0 - min(p, 1.0)))
        return self._choose(opts)

    def categorical(self, probs):
        w = np.asarray(probs, dtype=np.float64)
        w = w / w.sum()
        return self._choose([(int(i), float(w[i])) for i in np.flatnonzero(w)])


def enumerate_outcomes(fn):
    """Exact outcome distribution of fn(rng) over all random paths."""
    results = defaultdict(float)
    stack = [()]
    while stack:
        prefix = stack.pop()
        rng = ReplayRng(prefix)
        try:
            results[fn(rng)] += rng.mass
        except _Probe as probe:
            for i in range(len(probe.options)):
                stack.append(prefix + (i,))
    return dict(results)


def test_enumeration_driver_is_exact():
    def coin_pair(rng):
        return (rng.bernoulli(0.25), rng.categorical([0.5, 0.3, 0.2]))

    dist = enumerate_outcomes(coin_pair)
    assert abs(sum(dist.values()) - 1.0) < 1e-12
    assert abs(dist[(True, 0)] - 0.125) < 1e-12
    assert abs(dist[(False, 2)] - 0.15) < 1e-12


# ------------------------------------------------------------- toy universe


def _dist_for(ctx: tuple, vocab: int, tag: str) -> np.ndarray:
    """Deterministic strictly-positive distribution for a context."""
    rng = Rng(derive_seed(0xBEEF, tag, len(ctx), *[t + 1 for t in ctx]))
    w = 0.15 + rng.uniform_array(vocab)
    return w / w.sum()


class ToyTables:
    def __init__(self, vocab: int):
        self.vocab = vocab
        self._cache: dict = {}

    def _get(self, tag: str, ctx: tuple) -> np.ndarray:
        key = (tag, ctx)
        if key not in self._cache:
            self._cache[key] = _dist_for(ctx, self.vocab, tag)
        return self._cache[key]

    def target(self, ctx: tuple) -> np.ndarray:
        return self._get("target", ctx)

    def draft(self, ctx: tuple) -> np.ndarray:
        return self._get("draft", ctx)


class ToySession:
    """Draft-session stand-in: q comes from a conditional table keyed by the
    token path from the decode context."""

    def __init__(self, tables: ToyTables, ctx: tuple):
        self.tables = tables
        self.ctx = ctx  # committed tokens, last one is the tree root

    def root_handle(self):
        return self.ctx[:-1]

    def expand(self, token, handle, depth):
        path = handle + (token,)
        return self.tables.draft(path), path


def _node_paths(tree: DraftTree):
    paths = []
    for i in range(tree.n):
        chain = []
        j = i
        while j != -1:
            chain.append(tree.tokens[j])
            j = tree.parents[j]
        paths.append(tuple(chain[::-1]))
    return paths


def _run_round(tables: ToyTables, ctx: tuple, cfg: DecodeConfig, rng) -> tuple:
    """One speculative round on toy tables; returns the committed tokens."""
    session = ToySession(tables, ctx)
    tree = build_draft_tree(session, ctx[-1], cfg, rng)
    prefix = ctx[:-1]
    node_probs = np.stack([tables.target(prefix + p) for p in _node_paths(tree)])
    if cfg.mode == "chain":
        chain_tokens = tree.tokens[1:]
        chain_q = [tree.node_q[i] for i in range(len(chain_tokens))]
        accepted, final = verify_chain(node_probs, chain_tokens, chain_q,
                                       cfg.temperature, rng)
        return tuple(accepted) + (final,)
    path, final = verify_tree(tree, node_probs, cfg.temperature, rng, rng)
    return tuple(tree.tokens[j] for j in path) + (final,)


def _stream_first_n(tables: ToyTables, root: int, cfg: DecodeConfig, n: int):
    """Exact distribution of the first n stream tokens, composing per-round
    kernels with memoization on the committed context."""
    kernels: dict[tuple, dict] = {}

    def kernel(ctx):
        if ctx not in kernels:
            kernels[ctx] = enumerate_outcomes(lambda rng: _run_round(tables, ctx, cfg, rng))
        return kernels[ctx]

    dist = defaultdict(float)
    frontier = [((root,), (), 1.0)]
    while frontier:
        ctx, emitted, mass = frontier.pop()
        for seq, p in kernel(ctx).items():
            new = emitted + seq
            if len(new) >= n:
                dist[new[:n]] += mass * p
            else:
                frontier.append((ctx + seq, new, mass * p))
    return dict(dist)


def _ar_first_n(tables: ToyTables, root: int, n: int):
    dist = {}

    def rec(ctx, mass):
        if len(ctx) - 1 == n:
            dist[ctx[1:]] = dist.get(ctx[1:], 0.0) + mass
            return
        p = tables.target(ctx)
        for tok in range(tables.vocab):
            if p[tok] > 0:
                rec(ctx + (tok,), mass * p[tok])

    rec((root,), 1.0)
    return dist


def _assert_dists_match(got, expect, tol=1e-9):
    assert abs(sum(got.values()) - 1.0) < 1e-9
    keys = set(got) | set(expect)
    worst = max(abs(got.get(k, 0.0) - expect.get(k, 0.0)) for k in keys)
    assert worst < tol, f"max deviation {worst:.3e}"


# ------------------------------------------------- losslessness: exhaustive


def test_chain_stream_matches_target_exactly():
    """V=4, gamma=2 chain: the joint law of the first 3 emitted tokens equals
    autoregressive sampling to 1e-9."""
    tables = ToyTables(4)
    cfg = DecodeConfig(temperature=1.0, mode="chain", gamma=2, seed=0)
    got = _stream_first_n(tables, root=0, cfg=cfg, n=3)
    expect = _ar_first_n(tables, root=0, n=3)
    _assert_dists_match(got, expect)


def test_tree_first_token_matches_target_exactly():
    """V=3, 7-node trees (full binary: K=2, depth 2): the first emitted
    token's law equals the target conditional to 1e-9, enumerating build
    sampling, acceptance coins, and residual draws."""
    tables = ToyTables(3)
    cfg = DecodeConfig(temperature=1.0, mode="tree", k=2, total_tokens=7,
                       depth=2, seed=0)
    dist = enumerate_outcomes(
        lambda rng: _run_round(tables, (1,), cfg, rng)[0]
    )
    expect = tables.target((1,))
    for tok in range(3):
        assert abs(dist.get(tok, 0.0) - expect[tok]) < 1e-9


def test_tree_stream_matches_target_exactly():
    """Smaller tree (5 nodes), two emitted tokens across rounds."""
    tables = ToyTables(3)
    cfg = DecodeConfig(temperature=1.0, mode="tree", k=2, total_tokens=5,
                       depth=2, seed=0)
    got = _stream_first_n(tables, root=2, cfg=cfg, n=2)
    expect = _ar_first_n(tables, root=2, n=2)
    _assert_dists_match(got, expect)


def test_greedy_chain_walk_semantics():
    tables = ToyTables(4)
    cfg = DecodeConfig(temperature=0.0, mode="chain", gamma=3, seed=0)
    out = _run_round(tables, (0,), cfg, None)
    # every committed token must be the target argmax given its history
    ctx = (0,)
    for tok in out:
        assert tok == int(np.argmax(tables.target(ctx)))
        ctx = ctx + (tok,)


def test_greedy_tree_walk_semantics():
    tables = ToyTables(4)
    cfg = DecodeConfig(temperature=0.0, mode="tree", k=3, total_tokens=10,
                       depth=3, seed=0)
    out = _run_round(tables, (2,), cfg, None)
    ctx = (2,)
    for tok in out:
        assert tok == int(np.argmax(tables.target(ctx)))
        ctx = ctx + (tok,)


# -------------------------------------------------------- verify unit cases


def test_verify_chain_identical_distributions_always_accept():
    p = np.array([[0.4, 0.6], [0.7, 0.3], [0.5, 0.5]])
    q = [p[0], p[1]]
    dist = enumerate_outcomes(
        lambda rng: tuple(verify_chain(p, [1, 0], q, 1.0, rng)[0])
    )
    assert dist == {(1, 0): 1.0}


def test_verify_chain_disjoint_supports_reject_all():
    p = np.array([[0.0, 0.3, 0.7], [0.2, 0.3, 0.5]])
    q = [np.array([1.0, 0.0, 0.0])]

    def run(rng):
        acc, nxt = verify_chain(p, [0], q, 1.0, rng)
        return tuple(acc), nxt

    dist = enumerate_outcomes(run)
    # zero accepted; next token sampled from the residual, which is p itself
    total = defaultdict(float)
    for (acc, nxt), mass in dist.items():
        assert acc == ()
        total[nxt] += mass
    assert abs(total[1] - 0.3) < 1e-12 and abs(total[2] - 0.7) < 1e-12


def test_verify_chain_zero_q_on_proposal_errors():
    p = np.array([[0.5, 0.5], [0.5, 0.5]])
    q = [np.array([1.0, 0.0])]
    with pytest.raises(Exception, match="outside draft support"):
        verify_chain(p, [1], q, 1.0, Rng(0))


def test_verify_tree_reduces_to_verify_chain_on_chains():
    tables = ToyTables(4)
    cfg = DecodeConfig(temperature=1.0, mode="chain", gamma=3, seed=5)
    for trial in range(40):
        rng_build = Rng(derive_seed(3, trial))
        session = ToySession(tables, (0,))
        tree = build_draft_tree(session, 0, cfg, rng_build)
        node_probs = np.stack([tables.target(p) for p in _node_paths(tree)])
        chain_tokens = tree.tokens[1:]
        chain_q = [tree.node_q[i] for i in range(len(chain_tokens))]
        r1 = Rng(derive_seed(7, trial))
        acc_chain, final_chain = verify_chain(node_probs, chain_tokens, chain_q,
                                              1.0, r1)
        r2 = Rng(derive_seed(7, trial))
        path, final_tree = verify_tree(tree, node_probs, 1.0, r2, r2)
        assert [tree.tokens[j] for j in path] == acc_chain
        assert final_tree == final_chain


# ---------------------------------------------------------------- tree build


def test_chain_build_is_a_chain():
    tables = ToyTables(4)
    cfg = DecodeConfig(temperature=0.0, mode="chain", gamma=5, seed=0)
    tree = build_draft_tree(ToySession(tables, (0,)), 0, cfg, Rng(0))
    assert tree.n == 6  # root + gamma candidates
    assert tree.parents == [-1, 0, 1, 2, 3, 4]
    assert max(tree.depths) == 5
    tree.validate(cfg)


def test_tree_build_respects_budgets_and_closure():
    tables = ToyTables(4)
    cfg = DecodeConfig(temperature=0.0, mode="tree", k=3, total_tokens=9,
                       depth=3, seed=0)
    tree = build_draft_tree(ToySession(tables, (1,)), 1, cfg, Rng(0))
    tree.validate(cfg)
    assert tree.n <= 9
    kept = set(range(tree.n))
    for i in range(1, tree.n):
        assert tree.parents[i] in kept  # ancestors closed by construction


def brute_force_top_subtree(tables, root, cfg):
    """Enumerate the complete candidate tree to the depth limit; keep the
    top-budget nodes by cumulative probability (parents break ties)."""
    nodes = [((root,), 0.0, -1, 0)]  # (path, cum, parent, creation order)
    order = [0]

    def rec(path, cum, parent_idx, depth):
        if depth >= cfg.depth:
            return
        q = tables.draft(path)
        top = np.argsort(-q, kind="stable")[: cfg.k]
        for tok in top:
            if q[tok] <= 0:
                continue
            idx = len(nodes)
            nodes.append((path + (int(tok),), cum + float(np.log(q[tok])), idx, depth + 1))
            rec(path + (int(tok),), cum + float(np.log(q[tok])), idx, depth + 1)

    rec((root,), 0.0, 0, 0)
    ranked = sorted(range(len(nodes)), key=lambda i: (-nodes[i][1], i))
    kept = ranked[: cfg.total_tokens]
    return {nodes[i][0] for i in kept}


def test_tree_build_matches_brute_force_top_subtree():
    """Hand-set conditional tables, V=3, depth 3: the kept node set equals
    the global top-total_tokens subtree by cumulative probability."""
    tables = ToyTables(3)
    for budget in (3, 5, 7, 10):
        cfg = DecodeConfig(temperature=0.0, mode="tree", k=3, total_tokens=budget,
                           depth=3, seed=0)
        tree = build_draft_tree(ToySession(tables, (0,)), 0, cfg, Rng(0))
        got = set(_node_paths(tree))
        expect = brute_force_top_subtree(tables, 0, cfg)
        assert got == expect


def test_tree_validate_rejects_malformed():
    cfg = DecodeConfig(mode="tree", k=2, total_tokens=8, depth=3)
    bad = DraftTree(tokens=[1, 2], parents=[-1, 5], logqs=[0.0, -1.0],
                    cums=[0.0, -1.0], depths=[0, 1], node_q=[None, None],
                    trials=[[], []], kept_children=[{}, {}])
    with pytest.raises(ValueError, match="topologically"):
        bad.validate(cfg)
    bad2 = DraftTree(tokens=[1, 2], parents=[-1, 0], logqs=[0.0, -1.0],
                     cums=[0.0, -2.5], depths=[0, 1], node_q=[None, None],
                     trials=[[], []], kept_children=[{}, {}])
    with pytest.raises(ValueError, match="cumulative"):
        bad2.validate(cfg)


def test_config_chain_iff_k1():
    assert DecodeConfig(mode="chain", k=10).k == 1
    assert DecodeConfig(mode="tree", k=1).mode == "chain"
    with pytest.raises(ValueError):
        DecodeConfig(mode="wat")
