"""Frozen target transformer (teacher/verifier) and the single-layer draft.

The draft owns an input layer norm, a fusion map from (token embedding,
previous position's feature) to model space, and one decoder layer. Its
token embedding and output head are references to the target's tensors,
never copies. Inference runs through the fused backend stack kernel with
external KV caches; training builds autograd graphs over the same math.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import backend as K
from . import tensor as T
from .rng import Rng, derive_seed


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    vocab: int = 64
    max_ctx: int = 512
    eps: float = 1e-5

    @property
    def d_ff(self) -> int:
        return self.d_model * self.ffn_mult


def sinusoid_table(max_ctx: int, d: int, scale: float = 0.3) -> np.ndarray:
    # scaled down so position never drowns out token content at small d
    pos = np.arange(max_ctx, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((max_ctx, d), dtype=np.float64)
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return (scale * table).astype(np.float32)


def causal_allow(cur_len: int, t: int) -> np.ndarray:
    allow = np.zeros((t, cur_len + t), dtype=np.bool_)
    for i in range(t):
        allow[i, : cur_len + i + 1] = True
    return allow


class KvCache:
    """Per-layer key/value rows with a valid-length cursor. Truncation
    discards exactly the tail; continuing afterwards is bitwise identical
    to a fresh prefill of the kept prefix."""

    def __init__(self, n_layers: int, max_ctx: int, d_model: int):
        self.k = np.zeros((n_layers, max_ctx, d_model), dtype=np.float32)
        self.v = np.zeros((n_layers, max_ctx, d_model), dtype=np.float32)
        self.length = 0
        self.visual_len = 0

    def truncate(self, keep_len: int) -> "KvCache":
        if keep_len > self.length:
            raise ValueError("keep_len exceeds cache length")
        self.length = keep_len
        return self

    def select_tail(self, base: int, rows: list[int]) -> None:
        """Compact scattered rows (absolute indices >= base) down to
        positions base..base+len(rows)."""
        idx = np.asarray(rows, dtype=np.int64)
        self.k[:, base : base + len(rows)] = self.k[:, idx]
        self.v[:, base : base + len(rows)] = self.v[:, idx]
        self.length = base + len(rows)

    def clone(self) -> "KvCache":
        out = KvCache.__new__(KvCache)
        out.k = self.k.copy()
        out.v = self.v.copy()
        out.length = self.length
        out.visual_len = self.visual_len
        return out


def kv_rollback(cache: KvCache, keep_len: int) -> KvCache:
    return cache.truncate(keep_len)


def _layer_param_specs(dims: ModelDims, n_layers: int):
    d, f = dims.d_model, dims.d_ff
    return [
        ("ln1_g", (n_layers, d), "ones"),
        ("ln1_b", (n_layers, d), "zeros"),
        ("wq", (n_layers, d, d), d),
        ("bq", (n_layers, d), "zeros"),
        ("wk", (n_layers, d, d), d),
        ("bk", (n_layers, d), "zeros"),
        ("wv", (n_layers, d, d), d),
        ("bv", (n_layers, d), "zeros"),
        ("wo", (n_layers, d, d), "resid"),
        ("bo", (n_layers, d), "zeros"),
        ("ln2_g", (n_layers, d), "ones"),
        ("ln2_b", (n_layers, d), "zeros"),
        ("w1", (n_layers, d, f), d),
        ("b1", (n_layers, f), "zeros"),
        ("w2", (n_layers, f, d), "resid_ff"),
        ("b2", (n_layers, d), "zeros"),
    ]


def _init_params(specs, dims: ModelDims, rng: Rng, n_layers: int) -> dict[str, T.Tensor]:
    params: dict[str, T.Tensor] = {}
    for name, shape, kind in specs:
        r = rng.split("param", name)
        if kind == "ones":
            data = np.ones(shape, dtype=np.float32)
        elif kind == "zeros":
            data = np.zeros(shape, dtype=np.float32)
        else:
            if kind == "resid":
                scale = 1.0 / np.sqrt(dims.d_model) / np.sqrt(2.0 * n_layers)
            elif kind == "resid_ff":
                scale = 1.0 / np.sqrt(dims.d_ff) / np.sqrt(2.0 * n_layers)
            elif kind == "head":
                scale = 0.02
            else:
                scale = 1.0 / np.sqrt(float(kind))
            data = r.normal_array(shape, scale=scale)
        params[name] = T.Tensor(data, requires_grad=True)
    return params


_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
               "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class _StackMixin:
    """Shared forward machinery over stacked per-layer parameters."""

    dims: ModelDims
    params: dict[str, T.Tensor]
    n_layers: int

    def _stack_args(self):
        p = self.params
        return tuple(p[k].data for k in _LAYER_KEYS)

    def _run_stack(self, cache: KvCache, x: np.ndarray, allow: np.ndarray) -> np.ndarray:
        args = self._stack_args()
        (ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo,
         ln2g, ln2b, w1, b1, w2, b2) = args
        h = K.stack_forward(
            cache.k, cache.v, cache.length, x, allow, self.dims.n_heads, self.dims.eps,
            ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2,
        )
        cache.length += x.shape[0]
        return h

    def _stack_train(self, x: T.Tensor, allow: np.ndarray) -> T.Tensor:
        """Autograd twin of the fused stack kernel (full sequence, no cache)."""
        p = self.params
        dims = self.dims
        dh = dims.d_model // dims.n_heads
        h = x
        for l in range(self.n_layers):
            u = T.layer_norm(h, T.layer_slice(p["ln1_g"], l), T.layer_slice(p["ln1_b"], l), dims.eps)
            q = T.linear(u, T.layer_slice(p["wq"], l), T.layer_slice(p["bq"], l))
            k = T.linear(u, T.layer_slice(p["wk"], l), T.layer_slice(p["bk"], l))
            v = T.linear(u, T.layer_slice(p["wv"], l), T.layer_slice(p["bv"], l))
            heads = []
            for hd in range(dims.n_heads):
                lo = hd * dh
                heads.append(
                    T.attention(
                        T.narrow(q, 1, lo, dh), T.narrow(k, 1, lo, dh),
                        T.narrow(v, 1, lo, dh), allow,
                    )
                )
            ctx = T.concat(heads, axis=1)
            h = T.add(h, T.linear(ctx, T.layer_slice(p["wo"], l), T.layer_slice(p["bo"], l)))
            u2 = T.layer_norm(h, T.layer_slice(p["ln2_g"], l), T.layer_slice(p["ln2_b"], l), dims.eps)
            f1 = T.gelu(T.linear(u2, T.layer_slice(p["w1"], l), T.layer_slice(p["b1"], l)))
            h = T.add(h, T.linear(f1, T.layer_slice(p["w2"], l), T.layer_slice(p["b2"], l)))
        return h


class TargetModel(_StackMixin):
    """Multi-layer decoder with token embedding, sinusoidal positions, and
    an output head applied after a final layer norm. Exposes both logits
    and penultimate features (post last block, pre final norm) on every
    forward."""

    def __init__(self, dims: ModelDims, seed: int, grid: int = 8):
        self.dims = dims
        self.n_layers = dims.n_layers
        self.seed = seed
        self.grid = grid
        rng = Rng(derive_seed(seed, "target-init"))
        d = dims.d_model
        specs = [
            ("emb", (dims.vocab, d), 0.5 * d),  # scale 1/sqrt(0.5 d): row norm ~ sqrt(2)
            ("head_w", (d, dims.vocab), "head"),  # near-zero readout: untrained CE ~ ln V
            ("head_b", (dims.vocab,), "zeros"),
            ("lnf_g", (d,), "ones"),
            ("lnf_b", (d,), "zeros"),
        ] + _layer_param_specs(dims, dims.n_layers)
        self.params = _init_params(specs, dims, rng, dims.n_layers)
        self.pos = sinusoid_table(dims.max_ctx, d)
        from .data import make_projection  # local import avoids cycle

        self.projection = make_projection(grid, d, derive_seed(seed, "projection"))
        self._align_grounded_embeddings()
        self._prime_retrieval_head()
        self.forward_count = 0

    def _align_grounded_embeddings(self) -> None:
        """Start the embeddings of grounded words (coordinates, colors,
        shapes) aligned with the frozen projector's feature directions, the
        toy analog of a projector trained into token-embedding space. They
        remain ordinary trainable rows afterwards."""
        from .data import (COLOR_WORDS, N_COLORS, N_SHAPES, SHAPE_WORDS, VOCAB)

        emb = self.params["emb"].data
        target_norm = float(np.sqrt(2.0))
        rows: list[tuple[int, int]] = []
        for s, word in enumerate(SHAPE_WORDS):
            rows.append((VOCAB.index[word], s))
        for c, word in enumerate(COLOR_WORDS):
            rows.append((VOCAB.index[word], N_SHAPES + c))
        for i in range(self.grid):
            rows.append((VOCAB.index[f"r{i}"], N_SHAPES + N_COLORS + i))
            rows.append((VOCAB.index[f"c{i}"], N_SHAPES + N_COLORS + self.grid + i))
        for tok, proj_row in rows:
            v = self.projection[proj_row].astype(np.float64)
            emb[tok] = (v * (target_norm / np.linalg.norm(v))).astype(np.float32)

    def _prime_retrieval_head(self, beta: float = 1.3) -> None:
        """Start one mid-stack attention head as a coordinate matcher: its
        query and key maps both project onto the frozen row/col feature
        directions, so content carrying a coordinate embedding immediately
        attends to grid cells with that coordinate. Breaks the cold-start
        deadlock where retrieval has no gradient until several heads exist
        at once; all weights remain trainable."""
        from .data import N_COLORS, N_SHAPES

        d = self.dims.d_model
        dh = d // self.dims.n_heads
        n_dirs = min(2 * self.grid, dh)
        basis = np.zeros((d, dh), dtype=np.float64)
        for i in range(n_dirs):
            v = self.projection[N_SHAPES + N_COLORS + i].astype(np.float64)
            basis[:, i] = v / np.linalg.norm(v)
        layer = min(1, self.dims.n_layers - 1)
        primed = (beta * basis).astype(np.float32)
        self.params["wq"].data[layer, :, :dh] = primed
        self.params["wk"].data[layer, :, :dh] = primed

    # ------------------------------------------------------------ inference

    def new_cache(self) -> KvCache:
        return KvCache(self.dims.n_layers, self.dims.max_ctx, self.dims.d_model)

    def embed_tokens(self, token_ids, positions) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        pos = np.asarray(positions, dtype=np.int64)
        return self.params["emb"].data[ids] + self.pos[pos]

    def visual_rows(self, visual: np.ndarray, start_pos: int = 0) -> np.ndarray:
        n = visual.shape[0]
        return visual + self.pos[start_pos : start_pos + n]

    def head_infer(self, features: np.ndarray) -> np.ndarray:
        p = self.params
        normed = K.layer_norm_rows(features, p["lnf_g"].data, p["lnf_b"].data, self.dims.eps)
        return K.matmul_bias(normed, p["head_w"].data, p["head_b"].data)

    def forward_rows(self, cache: KvCache, x: np.ndarray, allow: np.ndarray):
        """Core incremental forward: returns (features, logits), extends cache."""
        if cache.length + x.shape[0] > self.dims.max_ctx:
            raise ValueError("position overflow beyond max context")
        if not allow.any(axis=1).all():
            raise ValueError("unattendable query")
        self.forward_count += 1
        feats = self._run_stack(cache, x, allow)
        return feats, self.head_infer(feats)

    def forward(self, token_ids, visual_tokens, cache: KvCache):
        """Spec-shaped convenience: causal incremental forward. When the
        cache is empty and visual tokens are given, they are consumed first
        (always uncompressed on the target side)."""
        n_new = (visual_tokens.shape[0] if visual_tokens is not None and cache.length == 0
                 else 0) + (len(token_ids) if token_ids is not None else 0)
        if cache.length + n_new > self.dims.max_ctx:
            raise ValueError("position overflow beyond max context")
        rows = []
        if visual_tokens is not None and cache.length == 0:
            rows.append(self.visual_rows(visual_tokens))
            cache.visual_len = visual_tokens.shape[0]
        if token_ids is not None and len(token_ids):
            start = cache.length + sum(r.shape[0] for r in rows)
            rows.append(self.embed_tokens(token_ids, np.arange(start, start + len(token_ids))))
        if not rows:
            raise ValueError("nothing to forward")
        x = np.concatenate(rows, axis=0) if len(rows) > 1 else rows[0]
        allow = causal_allow(cache.length, x.shape[0])
        feats, logits = self.forward_rows(cache, x, allow)
        return logits, feats

    # ------------------------------------------------------------- training

    def forward_train(self, x: T.Tensor, allow: np.ndarray):
        feats = self._stack_train(x, allow)
        p = self.params
        normed = T.layer_norm(feats, p["lnf_g"], p["lnf_b"], self.dims.eps)
        logits = T.linear(normed, p["head_w"], p["head_b"])
        return feats, logits

    def embed_train(self, token_ids, positions) -> T.Tensor:
        rows = T.embedding(self.params["emb"], np.asarray(token_ids, dtype=np.int64))
        pos = T.Tensor(self.pos[np.asarray(positions, dtype=np.int64)])
        return T.add(rows, pos)

    # ---------------------------------------------------------------- misc

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def set_frozen(self, frozen: bool = True) -> None:
        for p in self.params.values():
            p.requires_grad = not frozen

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out["visual_projection"] = self.projection
        return out

    def meta(self) -> dict:
        import dataclasses

        return {
            "kind": "target",
            "seed": self.seed,
            "grid": self.grid,
            "dims": dataclasses.asdict(self.dims),
        }


class DraftModel(_StackMixin):
    """One decoder layer fed by layer_norm(W_fuse . [token embedding ;
    previous feature]). Embedding, head, and final norm are the target's
    own tensors (weight identity)."""

    def __init__(self, target: TargetModel, seed: int):
        self.target = target
        self.dims = target.dims
        self.n_layers = 1
        self.seed = seed
        d = self.dims.d_model
        rng = Rng(derive_seed(seed, "draft-init"))
        specs = [
            ("fuse_w", (2 * d, d), 2 * d),
            ("fuse_b", (d,), "zeros"),
            ("lnin_g", (d,), "ones"),
            ("lnin_b", (d,), "zeros"),
        ] + _layer_param_specs(self.dims, 1)
        self.params = _init_params(specs, self.dims, rng, 1)

    # ------------------------------------------------------------ inference

    def new_cache(self) -> KvCache:
        return KvCache(1, self.dims.max_ctx, self.dims.d_model)

    def prep_rows(self, emb_rows: np.ndarray, prev_feats: np.ndarray) -> np.ndarray:
        """Fusion + input layer norm over already position-encoded rows."""
        p = self.params
        fused = K.matmul_bias(
            np.concatenate([emb_rows, prev_feats], axis=1), p["fuse_w"].data, p["fuse_b"].data
        )
        return K.layer_norm_rows(fused, p["lnin_g"].data, p["lnin_b"].data, self.dims.eps)

    def forward_rows(self, cache: KvCache, x: np.ndarray, allow: np.ndarray):
        if cache.length + x.shape[0] > self.dims.max_ctx:
            raise ValueError("position overflow beyond max context")
        if not allow.any(axis=1).all():
            raise ValueError("tree mask row fully masked")
        feats = self._run_stack(cache, x, allow)
        return feats, self.target.head_infer(feats)

    def forward(self, token_ids, prev_features, cache: KvCache, tree_mask=None):
        """Spec-shaped forward: token ids paired with the features aligned
        to them (the previous position's feature). tree_mask, when given,
        is the (T, T) permission matrix among the new rows; the cached
        prefix is always visible."""
        t = len(token_ids)
        positions = np.arange(cache.length, cache.length + t)
        emb = self.target.embed_tokens(token_ids, positions)
        x = self.prep_rows(emb, prev_features)
        if tree_mask is None:
            allow = causal_allow(cache.length, t)
        else:
            allow = np.zeros((t, cache.length + t), dtype=np.bool_)
            allow[:, : cache.length] = True
            allow[:, cache.length :] = tree_mask
        feats, logits = self.forward_rows(cache, x, allow)
        return logits, feats

    # ------------------------------------------------------------- training

    def prep_train(self, emb_rows: T.Tensor, prev_feats: T.Tensor) -> T.Tensor:
        p = self.params
        fused = T.linear(T.concat([emb_rows, prev_feats], axis=1), p["fuse_w"], p["fuse_b"])
        return T.layer_norm(fused, p["lnin_g"], p["lnin_b"], self.dims.eps)

    def forward_train(self, x: T.Tensor, allow: np.ndarray):
        feats = self._stack_train(x, allow)
        tp = self.target.params
        normed = T.layer_norm(feats, tp["lnf_g"], tp["lnf_b"], self.dims.eps)
        logits = T.linear(normed, tp["head_w"], tp["head_b"])
        return feats, logits

    # ---------------------------------------------------------------- misc

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def meta(self) -> dict:
        return {"kind": "draft", "seed": self.seed}


def target_layer_param_count(dims: ModelDims) -> int:
    d, f = dims.d_model, dims.d_ff
    return 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Manifest (JSON) plus flat little-endian float32 arrays in manifest order."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": "specdec-checkpoint-v1",
        "meta": meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    arrays: dict[str, np.ndarray] = {}
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        raw = fh.read()
    off = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        arrays[entry["name"]] = np.ascontiguousarray(arr, dtype=np.float32)
        off += 4 * n
    return arrays, manifest["meta"]


def load_target(path: str) -> TargetModel:
    arrays, meta = load_checkpoint(path)
    dims = ModelDims(**{k: v for k, v in meta["dims"].items()})
    model = TargetModel(dims, seed=meta["seed"], grid=meta.get("grid", 8))
    for name, tpar in model.params.items():
        tpar.data[...] = arrays[name]
    model.projection = arrays["visual_projection"]
    return model


def load_draft(path: str, target: TargetModel):
    """Returns (draft, compressor_arrays, meta); compressor state is handled
    by the compressor module."""
    arrays, meta = load_checkpoint(path)
    draft = DraftModel(target, seed=meta["seed"])
    comp_arrays = {}
    for name, arr in arrays.items():
        if name.startswith("compressor."):
            comp_arrays[name.removeprefix("compressor.")] = arr
        else:
            draft.params[name].data[...] = arr
    return draft, comp_arrays, meta
