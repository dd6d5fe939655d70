"""Elastic visual-token compressor for the draft side.

Four primitives (random pruning, average pooling, strided convolution, and
a single-cross-attention resampler) feed three fusion modes: a weighted
combination over a shared ratio, multi-granularity concatenation, and
question-conditioned dynamic selection with a text-only branch. Selection
trains through straight-through Gumbel-Softmax and runs as a plain argmax
at inference. Target-side inputs are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng, derive_seed

SELECT_BRANCHES = ("prune", "pool", "conv", "resample", "text_only")
WEIGHTED_BRANCHES = ("prune", "pool", "conv")
MODES = ("weighted", "concat", "select", "fixed")


@dataclass
class CompressorSpec:
    mode: str = "select"
    prune_ratio: int = 20
    pool_ratio: int = 20
    conv_ratio: int = 3
    resampler_queries: int = 2
    weighted_ratio: int = 3
    gumbel_temp: float = 1.0
    seed: int = 0
    fixed_branch: str | None = None  # for mode="fixed"; "none" bypasses compression

    def validate(self) -> "CompressorSpec":
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "weighted" and self.weighted_ratio > 5:
            raise ValueError("weighted mode caps the shared ratio at 5x")
        if self.mode == "fixed" and self.fixed_branch not in (
            "prune", "pool", "conv", "resample", "text_only", "none",
        ):
            raise ValueError("fixed mode needs a branch name")
        for r in (self.prune_ratio, self.pool_ratio, self.conv_ratio, self.weighted_ratio):
            if r < 1:
                raise ValueError("ratios must be >= 1")
        if self.resampler_queries < 1:
            raise ValueError("resampler needs >= 1 query")
        return self

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "prune_ratio": self.prune_ratio,
            "pool_ratio": self.pool_ratio, "conv_ratio": self.conv_ratio,
            "resampler_queries": self.resampler_queries,
            "weighted_ratio": self.weighted_ratio, "gumbel_temp": self.gumbel_temp,
            "seed": self.seed, "fixed_branch": self.fixed_branch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompressorSpec":
        return cls(**d).validate()


@dataclass
class GateDecision:
    logits: np.ndarray | None = None
    weights: np.ndarray | None = None  # soft weights, sum to 1
    branch: str | None = None          # chosen branch (select / fixed)
    hard: bool = False                 # one-hot forward (training ST) or argmax


def _ceil_div(n: int, r: int) -> int:
    return -(-n // r)


def prune_indices(n: int, ratio: int, seed: int) -> np.ndarray:
    """First ceil(n/ratio) entries of a seeded permutation, sorted ascending."""
    m = _ceil_div(n, ratio)
    perm = Rng(seed).permutation(n)
    return np.sort(perm[:m])


def prune_tokens(visual: T.Tensor, ratio: int, seed: int) -> T.Tensor:
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    idx = prune_indices(visual.data.shape[0], ratio, seed)
    return T.gather_rows(visual, idx)


def pool_tokens(visual: T.Tensor, ratio: int) -> T.Tensor:
    return T.avg_pool1d(visual, window=ratio, stride=ratio)


def conv_compress(visual: T.Tensor, ratio: int, kernel: T.Tensor, bias: T.Tensor) -> T.Tensor:
    """Strided conv with right-padding by repetition of the final token, so
    the output length is ceil(n/ratio) like the parameter-free branches."""
    n = visual.data.shape[0]
    m = _ceil_div(n, ratio)
    pad = m * ratio - n
    x = T.pad_repeat_last(visual, pad)
    return T.conv1d(x, kernel, stride=ratio, bias=bias)


def resample_tokens(visual: T.Tensor, queries: T.Tensor, wk: T.Tensor,
                    wv: T.Tensor, wo: T.Tensor) -> T.Tensor:
    if visual.data.shape[0] == 0:
        raise ValueError("nothing to resample")
    keys = T.matmul(visual, wk)
    vals = T.matmul(visual, wv)
    mask = np.ones((queries.data.shape[0], visual.data.shape[0]), dtype=np.bool_)
    return T.matmul(T.attention(queries, keys, vals, mask), wo)


def gate_features(prompt_embeds: T.Tensor, visual: T.Tensor | None) -> T.Tensor:
    """concat(mean prompt embedding, mean visual token), shape (1, 2d)."""
    if prompt_embeds.data.shape[0] == 0:
        raise ValueError("nonempty prompt required")
    d = prompt_embeds.data.shape[1]
    pmean = T.mean_axis0(prompt_embeds)
    if visual is None or visual.data.shape[0] == 0:
        vmean = T.Tensor(np.zeros(d, dtype=np.float32))
    else:
        vmean = T.mean_axis0(visual)
    return T.reshape(T.concat([pmean, vmean], axis=0), (1, 2 * d))


def gumbel_softmax(logits: T.Tensor, temp: float, rng: Rng, hard: bool) -> T.Tensor:
    """softmax((logits + G)/temp) with G = -ln(-ln U); hard forwards the
    one-hot argmax while gradients follow the soft path (straight-through)."""
    if not temp > 0:
        raise ValueError("temperature must be positive")
    n = logits.data.size
    u = np.clip(rng.uniform_array(n), 2.0**-53, None)
    g = (-np.log(-np.log(u))).astype(np.float32).reshape(logits.data.shape)
    noisy = T.mul_const(T.add(logits, T.Tensor(g)), 1.0 / temp)
    soft = T.softmax(noisy, axis=-1)
    if not hard:
        return soft
    onehot = np.zeros_like(soft.data)
    flat = int(np.argmax(soft.data))
    onehot.reshape(-1)[flat] = 1.0
    return T.add(soft, T.Tensor(onehot - soft.data))


class Compressor:
    """Holds the spec plus trainable gate/conv/resampler parameters."""

    def __init__(self, spec: CompressorSpec, d_model: int, init_seed: int = 0):
        self.spec = spec.validate()
        self.d = d_model
        rng = Rng(derive_seed(init_seed, "compressor-init"))
        d = d_model
        conv_ratio = spec.weighted_ratio if spec.mode == "weighted" else spec.conv_ratio
        kernel = np.zeros((conv_ratio, d, d), dtype=np.float32)
        for j in range(conv_ratio):
            kernel[j] = np.eye(d, dtype=np.float32) / conv_ratio  # start as averaging
        q = spec.resampler_queries
        self.params: dict[str, T.Tensor] = {
            "gate_w": T.Tensor(np.zeros((2 * d, len(SELECT_BRANCHES)), dtype=np.float32),
                               requires_grad=True),
            "gate_b": T.Tensor(np.zeros(len(SELECT_BRANCHES), dtype=np.float32),
                               requires_grad=True),
            "conv_w": T.Tensor(kernel, requires_grad=True),
            "conv_b": T.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
            "res_q": T.Tensor(rng.split("res_q").normal_array((q, d), scale=0.2),
                              requires_grad=True),
            "res_wk": T.Tensor(rng.split("res_wk").normal_array((d, d), scale=1.0 / np.sqrt(d)),
                               requires_grad=True),
            "res_wv": T.Tensor(rng.split("res_wv").normal_array((d, d), scale=1.0 / np.sqrt(d)),
                               requires_grad=True),
            "res_wo": T.Tensor(rng.split("res_wo").normal_array((d, d), scale=1.0 / np.sqrt(d)),
                               requires_grad=True),
        }

    # ------------------------------------------------------------ branches

    def _branch(self, name: str, visual: T.Tensor, ratio_override: int | None,
                sample_seed: int) -> T.Tensor:
        s = self.spec
        p = self.params
        if name == "prune":
            r = ratio_override or s.prune_ratio
            return prune_tokens(visual, r, derive_seed(s.seed, "prune", sample_seed))
        if name == "pool":
            return pool_tokens(visual, ratio_override or s.pool_ratio)
        if name == "conv":
            r = ratio_override or s.conv_ratio
            if r != p["conv_w"].data.shape[0]:
                raise ValueError("conv kernel size does not match requested ratio")
            return conv_compress(visual, r, p["conv_w"], p["conv_b"])
        if name == "resample":
            return resample_tokens(visual, p["res_q"], p["res_wk"], p["res_wv"], p["res_wo"])
        if name == "text_only":
            return T.Tensor(np.zeros((0, self.d), dtype=np.float32))
        if name == "none":
            return visual
        raise ValueError(f"unknown branch {name!r}")

    def output_count(self, n: int) -> int | None:
        """Closed-form output length; None for select mode (branch-dependent)."""
        s = self.spec
        if s.mode == "weighted":
            return _ceil_div(n, s.weighted_ratio)
        if s.mode == "concat":
            return (_ceil_div(n, s.prune_ratio) + _ceil_div(n, s.pool_ratio)
                    + _ceil_div(n, s.conv_ratio) + s.resampler_queries)
        if s.mode == "fixed":
            return branch_output_count(s.fixed_branch, s, n)
        return None

    # ------------------------------------------------------------ compress

    def compress(self, prompt_embeds: T.Tensor, visual: T.Tensor, training: bool,
                 rng: Rng | None = None, sample_seed: int = 0):
        """Returns (compressed visual tokens, GateDecision)."""
        s = self.spec
        if s.mode == "fixed":
            out = self._branch(s.fixed_branch, visual, None, sample_seed)
            return out, GateDecision(branch=s.fixed_branch)

        if s.mode == "concat":
            parts = [
                self._branch("prune", visual, None, sample_seed),
                self._branch("pool", visual, None, sample_seed),
                self._branch("conv", visual, None, sample_seed),
                self._branch("resample", visual, None, sample_seed),
            ]
            return T.concat(parts, axis=0), GateDecision(branch=None)

        feats = gate_features(prompt_embeds, visual)
        logits = T.reshape(
            T.linear(feats, self.params["gate_w"], self.params["gate_b"]),
            (len(SELECT_BRANCHES),),
        )

        if s.mode == "weighted":
            wlogits = T.narrow(logits, 0, 0, len(WEIGHTED_BRANCHES))
            weights = T.softmax(wlogits, axis=-1)
            r = s.weighted_ratio
            out = None
            for i, name in enumerate(WEIGHTED_BRANCHES):
                br = self._branch(name, visual, r, sample_seed)
                if out is not None and br.data.shape != out.data.shape:
                    raise ValueError("shape-incompatible fusion")
                term = T.scale_by(br, T.pick(weights, i))
                out = term if out is None else T.add(out, term)
            return out, GateDecision(logits=logits.data.copy(),
                                     weights=weights.data.copy(), hard=False)

        # select mode
        if training:
            if rng is None:
                raise ValueError("training-time selection needs an rng")
            st = gumbel_softmax(logits, s.gumbel_temp, rng, hard=True)
            chosen = int(np.argmax(st.data))
            name = SELECT_BRANCHES[chosen]
            branch_out = self._branch(name, visual, None, sample_seed)
            if name == "text_only":
                out = branch_out  # no visual rows; gate learns via other samples
            else:
                out = T.scale_by(branch_out, T.pick(st, chosen))
            return out, GateDecision(logits=logits.data.copy(), weights=st.data.copy(),
                                     branch=name, hard=True)
        chosen = int(np.argmax(logits.data))
        name = SELECT_BRANCHES[chosen]
        out = self._branch(name, visual, None, sample_seed)
        soft = np.exp(logits.data.astype(np.float64) - logits.data.max())
        return out, GateDecision(logits=logits.data.copy(),
                                 weights=(soft / soft.sum()).astype(np.float32),
                                 branch=name, hard=True)

    # ---------------------------------------------------------------- misc

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"compressor.{k}": t.data for k, t in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Load matching arrays; shape mismatches (a sweep re-sizing the conv
        kernel or query count) keep their fresh deterministic init."""
        for k, t in self.params.items():
            if k in arrays and arrays[k].shape == t.data.shape:
                t.data[...] = arrays[k]


def branch_output_count(branch: str, spec: CompressorSpec, n: int) -> int:
    if branch == "prune":
        return _ceil_div(n, spec.prune_ratio)
    if branch == "pool":
        return _ceil_div(n, spec.pool_ratio)
    if branch == "conv":
        return _ceil_div(n, spec.conv_ratio)
    if branch == "resample":
        return spec.resampler_queries
    if branch == "text_only":
        return 0
    if branch == "none":
        return n
    raise ValueError(f"unknown branch {branch!r}")
