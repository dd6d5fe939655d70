"""Speculative decoding loop: dynamic draft-tree construction, lossless
chain/tree verification, acceptance accounting, and KV rollback.

Verification preserves the target distribution exactly. At temperature 0
it is the greedy argmax walk. At temperature > 0, draft proposals are
sampled (children without replacement per node) and verified by recursive
rejection: trial i of a node tests accept probability min(1, p/q_i) where
q_i is the draft distribution renormalized after zeroing already-tried
children, and p deflates by each rejected trial's residual. Exhaustion
samples the remaining residual. The same construction replayed with the
same seed reproduces the full trace.
"""

from __future__ import annotations

import heapq
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import VOCAB
from .model import DraftModel, KvCache, TargetModel, causal_allow, kv_rollback
from .rng import Rng, derive_seed


class LosslessnessError(RuntimeError):
    pass


@dataclass
class DecodeConfig:
    temperature: float = 0.0
    k: int = 10
    total_tokens: int = 60
    depth: int = 7
    max_new_tokens: int = 16
    mode: str = "tree"  # "tree" or "chain" (chain <=> k == 1)
    gamma: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode == "chain":
            self.k = 1
        elif self.mode == "tree" and self.k == 1:
            self.mode = "chain"
        if self.mode not in ("tree", "chain"):
            raise ValueError(f"unknown decode mode {self.mode!r}")


@dataclass
class DecodeReport:
    S: int = 0
    R: int = 0
    sigma: float = 0.0
    tau: float = 0.0
    per_round_accepts: list[int] = field(default_factory=list)
    draft_kv_lens: list[int] = field(default_factory=list)
    target_kv_lens: list[int] = field(default_factory=list)
    branch: str | None = None
    wall_ns: int = 0
    ar_wall_ns: int = 0
    target_forwards: int = 0


class StepRng:
    """Disjoint substreams for draft sampling, acceptance coins, and
    residual/bonus/root resampling."""

    def __init__(self, seed: int):
        base = Rng(seed)
        self.draft = base.split("draft")
        self.accept = base.split("accept")
        self.residual = base.split("residual")


def softmax64(logits: np.ndarray, temp: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------- draft tree


@dataclass
class _Node:
    token: int
    parent: int
    logq: float
    cum: float
    depth: int
    in_handle: object  # session handle of the parent's expansion output


@dataclass
class DraftTree:
    """Kept candidate tree in topological (score-descending) order.
    Node 0 is the root (the last verified token)."""

    tokens: list[int]
    parents: list[int]
    logqs: list[float]
    cums: list[float]
    depths: list[int]
    node_q: list[np.ndarray | None]     # draft distribution of expanded nodes
    trials: list[list[int]]             # proposed children in trial order (incl. pruned)
    kept_children: list[dict[int, int]]

    @property
    def n(self) -> int:
        return len(self.tokens)

    def validate(self, cfg: DecodeConfig) -> None:
        total = cfg.gamma + 1 if cfg.mode == "chain" else cfg.total_tokens
        depth_limit = cfg.gamma if cfg.mode == "chain" else cfg.depth
        if self.n > total:
            raise ValueError("tree exceeds node budget")
        for i in range(self.n):
            if self.depths[i] > depth_limit:
                raise ValueError("tree exceeds depth limit")
            par = self.parents[i]
            if i == 0:
                if par != -1:
                    raise ValueError("root must have parent -1")
                continue
            if not 0 <= par < i:
                raise ValueError("nodes must be topologically ordered")
            if abs(self.cums[i] - (self.cums[par] + self.logqs[i])) > 1e-9:
                raise ValueError("cumulative log-prob mismatch")
        for kids in self.kept_children:
            if len(kids) > cfg.k:
                raise ValueError("node exceeds child budget")


class ModelDraftSession:
    """Tree-expansion view over a draft model and its KV cache. Handles are
    (feature row, ancestor KV rows); expansion appends one cache row under a
    tree attention mask (prefix + ancestors + self)."""

    def __init__(self, draft: DraftModel, cache: KvCache, seed_feature: np.ndarray,
                 temp: float):
        self.draft = draft
        self.cache = cache
        self.prefix = cache.length
        self.seed_feature = seed_feature
        self.temp = temp

    def root_handle(self):
        return (self.seed_feature, ())

    def expand(self, token: int, handle, depth: int):
        feat_prev, anc_rows = handle
        pos = self.prefix + depth
        emb = self.draft.target.embed_tokens([token], [pos])
        x = self.draft.prep_rows(emb, feat_prev[None, :])
        width = self.cache.length + 1
        allow = np.zeros((1, width), dtype=np.bool_)
        allow[0, : self.prefix] = True
        for r in anc_rows:
            allow[0, r] = True
        allow[0, width - 1] = True
        row = self.cache.length
        feats, logits = self.draft.forward_rows(self.cache, x, allow)
        q = softmax64(logits[0], self.temp if self.temp > 0 else 1.0)
        return q, (feats[0], anc_rows + (row,))


def _propose_children(q: np.ndarray, k: int, temp: float, rng: Rng):
    """Child tokens in trial order. Greedy: top-k by probability (stable
    ties). Stochastic: sequential sampling without replacement, which is
    what verification's renormalized-q trials assume."""
    out = []
    if temp == 0:
        order = np.argsort(-q, kind="stable")
        for tok in order[:k]:
            if q[tok] <= 0.0:
                break
            out.append((int(tok), float(np.log(q[tok]))))
        return out
    qm = q.copy()
    for _ in range(k):
        s = qm.sum()
        if s <= 0.0:
            break
        tok = rng.categorical(qm / s)
        out.append((int(tok), float(np.log(q[tok]))))
        qm[tok] = 0.0
    return out


def build_draft_tree(session, root_token: int, cfg: DecodeConfig, rng: Rng) -> DraftTree:
    """Best-first expansion: repeatedly expand the unexpanded node with the
    highest cumulative log-prob, adding its k children, until the node
    budget or depth limit stops growth. The kept set is exactly the
    top-budget subtree by cumulative probability (children never outscore
    parents, so the pop order enumerates nodes in rank order)."""
    if root_token is None:
        raise ValueError("empty context")
    k = 1 if cfg.mode == "chain" else cfg.k
    depth_limit = cfg.gamma if cfg.mode == "chain" else cfg.depth
    total = cfg.gamma + 1 if cfg.mode == "chain" else cfg.total_tokens

    nodes: list[_Node] = [_Node(root_token, -1, 0.0, 0.0, 0, session.root_handle())]
    node_q: list[np.ndarray | None] = [None]
    trials: list[list[int]] = [[]]
    heap = [(0.0, 0, 0)]  # (-cum, creation index, node index)
    kept: list[int] = []
    while heap and len(kept) < total:
        _, _, idx = heapq.heappop(heap)
        kept.append(idx)
        node = nodes[idx]
        if node.depth >= depth_limit or len(kept) >= total:
            continue
        q, out_handle = session.expand(node.token, node.in_handle, node.depth)
        node_q[idx] = q
        children = _propose_children(q, k, cfg.temperature, rng)
        trials[idx] = [tok for tok, _ in children]
        for tok, logq in children:
            child = _Node(tok, idx, logq, node.cum + logq, node.depth + 1, out_handle)
            nodes.append(child)
            node_q.append(None)
            trials.append([])
            heapq.heappush(heap, (-child.cum, len(nodes) - 1, len(nodes) - 1))

    remap = {old: new for new, old in enumerate(kept)}
    tree = DraftTree(
        tokens=[nodes[i].token for i in kept],
        parents=[-1] + [remap[nodes[i].parent] for i in kept[1:]],
        logqs=[nodes[i].logq for i in kept],
        cums=[nodes[i].cum for i in kept],
        depths=[nodes[i].depth for i in kept],
        node_q=[node_q[i] for i in kept],
        trials=[trials[i] for i in kept],
        kept_children=[{} for _ in kept],
    )
    for j in range(1, tree.n):
        tree.kept_children[tree.parents[j]][tree.tokens[j]] = j
    return tree


def tree_allow(prefix: int, parents: list[int]) -> np.ndarray:
    """Attention permissions for a batched tree forward: full prefix plus
    each node's ancestors and itself."""
    n = len(parents)
    allow = np.zeros((n, prefix + n), dtype=np.bool_)
    allow[:, :prefix] = True
    for i in range(n):
        j = i
        while j != -1:
            allow[i, prefix + j] = True
            j = parents[j]
    return allow


# -------------------------------------------------------------- verification


def _trial_q(qm: np.ndarray) -> np.ndarray:
    s = qm.sum()
    if s <= 0.0:
        raise LosslessnessError("draft distribution exhausted")
    return qm / s


def verify_chain(target_probs: np.ndarray, draft_tokens, draft_probs, temp: float,
                 rng: Rng | None):
    """Accept/reject a drafted chain. target_probs has len(draft_tokens)+1
    rows (the last one feeds the bonus token). Greedy mode accepts while the
    draft token matches argmax p; stochastic mode accepts token t with
    probability min(1, p(t)/q(t)) and samples norm(max(p-q,0)) on the first
    rejection, or a bonus from the final row if everything was accepted."""
    gamma = len(draft_tokens)
    if target_probs.shape[0] != gamma + 1:
        raise ValueError("need one target row per draft token plus the bonus row")
    if temp == 0:
        for i, tok in enumerate(draft_tokens):
            best = int(np.argmax(target_probs[i]))
            if tok != best:
                return list(draft_tokens[:i]), best
        return list(draft_tokens), int(np.argmax(target_probs[gamma]))
    for i, tok in enumerate(draft_tokens):
        p = np.asarray(target_probs[i], dtype=np.float64)
        q = np.asarray(draft_probs[i], dtype=np.float64)
        if q[tok] <= 0.0:
            raise LosslessnessError("proposal outside draft support")
        if rng.bernoulli(min(1.0, p[tok] / q[tok])):
            continue
        residual = np.maximum(p - q, 0.0)
        total = residual.sum()
        if total <= 0.0:
            raise LosslessnessError("empty residual distribution")
        return list(draft_tokens[:i]), int(rng.categorical(residual / total))
    return list(draft_tokens), int(rng.categorical(np.asarray(target_probs[gamma],
                                                              dtype=np.float64)))


def verify_tree(tree: DraftTree, node_probs: np.ndarray, temp: float,
                accept_rng: Rng | None, residual_rng: Rng | None):
    """Walk the tree from the root. Returns (accepted node indices along the
    path, final emitted token). The final token is either the greedy argmax
    at the first mismatch (T=0), a residual draw after rejecting a node's
    trials, a bonus draw at an unexpanded leaf, or an accepted proposal that
    was pruned from the kept set (it has no subtree to continue into)."""
    path: list[int] = []
    cur = 0
    while True:
        if temp == 0:
            best = int(np.argmax(node_probs[cur]))
            nxt = tree.kept_children[cur].get(best)
            if nxt is None:
                return path, best
            path.append(nxt)
            cur = nxt
            continue
        p = np.asarray(node_probs[cur], dtype=np.float64).copy()
        accepted = None
        if tree.trials[cur]:
            qm = tree.node_q[cur].copy()
            for tok in tree.trials[cur]:
                qt = _trial_q(qm)
                if qt[tok] <= 0.0:
                    raise LosslessnessError("proposal outside draft support")
                if accept_rng.bernoulli(min(1.0, p[tok] / qt[tok])):
                    accepted = tok
                    break
                p = np.maximum(p - qt, 0.0)
                total = p.sum()
                if total <= 0.0:
                    raise LosslessnessError("empty residual distribution")
                p = p / total
                qm[tok] = 0.0
        if accepted is None:
            return path, int(residual_rng.categorical(p))
        nxt = tree.kept_children[cur].get(accepted)
        if nxt is None:
            return path, accepted  # accepted but pruned: ends the round
        path.append(nxt)
        cur = nxt


# ------------------------------------------------------------------ decode


def _sample_row(logits_row: np.ndarray, temp: float, rng: Rng | None) -> int:
    if temp == 0:
        return int(np.argmax(logits_row))
    return int(rng.categorical(softmax64(logits_row, temp)))


def autoregressive_decode(target: TargetModel, prompt_ids, visual, cfg: DecodeConfig):
    """Plain incremental decoding; the latency baseline for tau."""
    rng = Rng(derive_seed(cfg.seed, "ar-decode"))
    t0 = time.perf_counter_ns()
    with T.no_grad():
        cache = target.new_cache()
        logits, _ = target.forward(prompt_ids, visual, cache)
        out: list[int] = []
        row = logits[-1]
        while True:
            tok = _sample_row(row, cfg.temperature, rng)
            if tok == VOCAB.EOS:
                break
            out.append(tok)
            if len(out) >= cfg.max_new_tokens:
                break
            logits, _ = target.forward([tok], None, cache)
            row = logits[-1]
    return out, time.perf_counter_ns() - t0


def decode(target: TargetModel, draft: DraftModel, comp, sample, cfg: DecodeConfig,
           trace_fh=None):
    """Full speculative decode of one sample. The target prefills the full
    visual tokens and emits the root; the draft prefills compressed visual
    tokens; rounds alternate draft-tree construction with one batched target
    verification forward, committing accepted tokens to both caches."""
    srng = StepRng(derive_seed(cfg.seed, "decode"))
    t0 = time.perf_counter_ns()
    report = DecodeReport()
    with T.no_grad():
        fwd0 = target.forward_count
        visual = sample.visual
        if visual is None:
            raise ValueError("sample has no visual tokens attached")
        n_vis = visual.shape[0]

        tcache = target.new_cache()
        logits, feats = target.forward(sample.prompt_ids, visual, tcache)
        root_tok = _sample_row(logits[-1], cfg.temperature, srng.residual)

        prompt_emb = target.params["emb"].data[np.asarray(sample.prompt_ids)]
        comp_out, gate = comp.compress(
            T.Tensor(prompt_emb), T.Tensor(visual), training=False,
            sample_seed=sample.scene_seed,
        )
        cv = comp_out.data
        m = cv.shape[0]
        report.branch = gate.branch

        dcache = draft.new_cache()
        p_len = len(sample.prompt_ids)
        d = target.dims.d_model
        emb_rows = np.concatenate(
            [
                cv + target.pos[:m],
                target.embed_tokens(sample.prompt_ids, np.arange(m, m + p_len)),
            ]
        )
        prev_rows = np.concatenate(
            [
                np.zeros((m, d), dtype=np.float32),
                feats[n_vis - 1 : n_vis + p_len - 1],
            ]
        )
        x = draft.prep_rows(emb_rows, prev_rows)
        draft.forward_rows(dcache, x, causal_allow(0, m + p_len))
        dcache.visual_len = m
        draft_prefix = dcache.length

        last_feat = feats[-1]
        output: list[int] = []
        done = False
        if root_tok == VOCAB.EOS:
            done = True
        else:
            output.append(root_tok)
            done = len(output) >= cfg.max_new_tokens

        while not done:
            if dcache.visual_len != m:
                raise RuntimeError("draft visual KV length drifted")
            r0 = time.perf_counter_ns()
            session = ModelDraftSession(draft, dcache, last_feat, cfg.temperature)
            tree = build_draft_tree(session, root_tok, cfg, srng.draft)

            tprefix = tcache.length
            positions = tprefix + np.asarray(tree.depths)
            rows = target.embed_tokens(tree.tokens, positions)
            allow = tree_allow(tprefix, tree.parents)
            vfeats, vlogits = target.forward_rows(tcache, rows, allow)
            if cfg.temperature > 0:
                node_probs = softmax64(vlogits, cfg.temperature)
            else:
                node_probs = vlogits

            if cfg.mode == "chain":
                chain_tokens = tree.tokens[1:]
                chain_q = [tree.node_q[i] for i in range(len(chain_tokens))]
                accepted_tokens, final_tok = verify_chain(
                    node_probs, chain_tokens, chain_q, cfg.temperature, srng.accept
                )
                path = list(range(1, 1 + len(accepted_tokens)))
            else:
                path, final_tok = verify_tree(
                    tree, node_probs, cfg.temperature, srng.accept, srng.residual
                )

            committed = [tree.tokens[j] for j in path] + [final_tok]
            appended = 0
            for tk in committed:
                if tk == VOCAB.EOS:
                    done = True
                    break
                output.append(tk)
                appended += 1
                if len(output) >= cfg.max_new_tokens:
                    done = True
                    break
            report.R += 1
            report.per_round_accepts.append(appended + (1 if report.R == 1 else 0))

            tcache.select_tail(tprefix, [tprefix] + [tprefix + j for j in path])
            last_idx = path[-1] if path else 0
            if not done:
                kv_rollback(dcache, draft_prefix)
                toks = [root_tok] + [tree.tokens[j] for j in path]
                prev_nodes = ([0] + path)[: len(path)]
                prev_feats = np.stack(
                    [last_feat] + [vfeats[j] for j in prev_nodes]
                )
                pos = np.arange(draft_prefix, draft_prefix + len(toks))
                emb = draft.target.embed_tokens(toks, pos)
                xr = draft.prep_rows(emb, prev_feats)
                draft.forward_rows(dcache, xr, causal_allow(draft_prefix, len(toks)))
                draft_prefix = dcache.length
                last_feat = vfeats[last_idx]
                root_tok = final_tok

            report.draft_kv_lens.append(dcache.length)
            report.target_kv_lens.append(tcache.length)
            if trace_fh is not None:
                trace_fh.write(
                    json.dumps(
                        {
                            "proposed": tree.n - 1,
                            "accepted": appended,
                            "branch": gate.branch,
                            "draft_kv": dcache.length,
                            "target_kv": tcache.length,
                            "round_ns": time.perf_counter_ns() - r0,
                        }
                    )
                    + "\n"
                )

        report.S = len(output)
        report.sigma = report.S / max(report.R, 1)
        report.wall_ns = time.perf_counter_ns() - t0
        report.target_forwards = target.forward_count - fwd0
    return output, report
