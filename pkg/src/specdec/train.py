"""Target pretraining and online draft distillation.

Distillation is strictly online: every step runs the frozen teacher forward
(full visual tokens) inside the step and aligns the draft at both the logit
level (cross-entropy against teacher soft targets) and the feature level
(smooth L1 against penultimate features), weighted by lambda_logit and
lambda_feat. Nothing teacher-produced ever touches disk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .compressor import Compressor, CompressorSpec
from .data import VOCAB, Sample, attach_visuals
from .decode import DecodeConfig, autoregressive_decode, decode, softmax64
from .model import DraftModel, ModelDims, TargetModel, causal_allow
from .rng import Rng, derive_seed


class AdamW:
    """Decoupled weight decay Adam; moments kept in float64, parameters
    updated in place so shared tensors stay shared."""

    def __init__(self, params: list[T.Tensor], lr: float, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data.astype(np.float64)
            p.data[...] = (p.data.astype(np.float64) - self.lr * upd).astype(np.float32)


# ------------------------------------------------------------- sequencing


def answer_region(sample: Sample, n_vis: int):
    """Row span whose predictions cover answer tokens plus EOS."""
    p_len = len(sample.prompt_ids)
    a_len = len(sample.answer_ids)
    start = n_vis + p_len - 1
    return start, a_len + 1


def full_token_seq(sample: Sample) -> list[int]:
    return list(sample.prompt_ids) + list(sample.answer_ids) + [VOCAB.EOS]


def _one_hot(ids, vocab: int) -> np.ndarray:
    out = np.zeros((len(ids), vocab), dtype=np.float32)
    out[np.arange(len(ids)), ids] = 1.0
    return out


def teacher_forward(target: TargetModel, sample: Sample):
    """Frozen full-visual forward over prompt+answer+EOS; returns per-row
    (logits, features) as plain arrays."""
    with T.no_grad():
        cache = target.new_cache()
        tokens = full_token_seq(sample)
        n_vis = sample.visual.shape[0]
        rows = np.concatenate(
            [
                target.visual_rows(sample.visual),
                target.embed_tokens(tokens, np.arange(n_vis, n_vis + len(tokens))),
            ]
        )
        feats, logits = target.forward_rows(cache, rows, causal_allow(0, rows.shape[0]))
    return logits, feats


# --------------------------------------------------------------- pretrain


def pretrain_target(dataset: list[Sample], steps: int, lr: float, seed: int,
                    dims: ModelDims = ModelDims(), grid: int = 8,
                    batch_size: int = 32, log_every: int = 100,
                    progress=None) -> tuple[TargetModel, list[float]]:
    """Train a fresh target on next-token prediction over answer tokens."""
    model = TargetModel(dims, seed, grid)
    attach_visuals(dataset, model.projection)
    opt = AdamW(model.parameters(), lr=lr, betas=(0.9, 0.95))
    brng = Rng(derive_seed(seed, "pretrain-batches"))
    losses: list[float] = []
    n = len(dataset)
    for step in range(steps):
        idxs = [brng.randint(n) for _ in range(batch_size)]
        total = None
        for b in idxs:
            s = dataset[b]
            ce = _target_sample_loss(model, s)
            total = ce if total is None else T.add(total, ce)
        loss = T.mul_const(total, 1.0 / batch_size)
        val = float(loss.data)
        if not np.isfinite(val):
            raise RuntimeError(f"pretraining diverged (loss NaN) at step {step}")
        losses.append(val)
        loss.backward()
        opt.step()
        opt.zero_grad()
        if progress is not None and (step % log_every == 0 or step == steps - 1):
            progress(step, val)
    return model, losses


def _target_sample_loss(model: TargetModel, s: Sample) -> T.Tensor:
    tokens = full_token_seq(s)
    n_vis = s.visual.shape[0]
    x = T.concat(
        [
            T.Tensor(model.visual_rows(s.visual)),
            model.embed_train(tokens, np.arange(n_vis, n_vis + len(tokens))),
        ],
        axis=0,
    )
    t_total = x.data.shape[0]
    _, logits = model.forward_train(x, causal_allow(0, t_total))
    start, span = answer_region(s, n_vis)
    pred = T.narrow(logits, 0, start, span)
    answer = list(s.answer_ids) + [VOCAB.EOS]
    return T.cross_entropy(pred, T.Tensor(_one_hot(answer, model.dims.vocab)))


def eval_ce(model: TargetModel, samples: list[Sample]) -> float:
    """Mean next-token cross-entropy over answer rows, no gradients."""
    total = 0.0
    with T.no_grad():
        for s in samples:
            total += float(_target_sample_loss(model, s).data)
    return total / len(samples)


def is_lookup(sample: Sample) -> bool:
    words = VOCAB.decode(sample.prompt_ids)
    return words[1] == "what" and words[2] in ("color", "shape")


def lookup_accuracy(model: TargetModel, samples: list[Sample],
                    max_new: int = 14) -> float:
    """Greedy exact-answer accuracy on cell-lookup questions."""
    lookups = [s for s in samples if is_lookup(s)]
    if not lookups:
        raise ValueError("no cell-lookup samples in the split")
    cfg = DecodeConfig(temperature=0.0, max_new_tokens=max_new)
    hits = 0
    for s in lookups:
        out, _ = autoregressive_decode(model, s.prompt_ids, s.visual, cfg)
        hits += out == list(s.answer_ids)
    return hits / len(lookups)


# ------------------------------------------------------------ distillation


@dataclass
class DistillConfig:
    lambda_logit: float = 0.1
    lambda_feat: float = 1.0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    smooth_l1_beta: float = 1.0
    gumbel_temp: float = 1.0

    def validate(self) -> "DistillConfig":
        if self.lambda_logit < 0 or self.lambda_feat < 0:
            raise ValueError("lambdas must be nonnegative")
        if self.lambda_logit == 0 and self.lambda_feat == 0:
            raise ValueError("at least one lambda must be positive")
        return self

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d).validate()


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    sigma: float
    tau: float
    wall_ns: int


def online_distill_loss(z_q: T.Tensor, z_p: np.ndarray, f_q: T.Tensor,
                        f_p: np.ndarray, cfg: DistillConfig) -> T.Tensor:
    """lambda_logit * CE(z_q, softmax(z_p)) + lambda_feat * SmoothL1(f_q, f_p)."""
    if z_q.data.shape != z_p.shape or f_q.data.shape != f_p.shape:
        raise ValueError("shape mismatch between draft and teacher tensors")
    teacher = T.Tensor(softmax64(z_p).astype(np.float32))
    ce = T.cross_entropy(z_q, teacher)
    sl = T.smooth_l1(f_q, T.Tensor(f_p), cfg.smooth_l1_beta)
    return T.add(T.mul_const(ce, cfg.lambda_logit), T.mul_const(sl, cfg.lambda_feat))


def _draft_sample_loss(draft: DraftModel, comp: Compressor, target: TargetModel,
                       s: Sample, cfg: DistillConfig, rng: Rng) -> T.Tensor:
    z_p, f_p = teacher_forward(target, s)
    n_vis = s.visual.shape[0]
    tokens = full_token_seq(s)

    prompt_emb = T.Tensor(target.params["emb"].data[np.asarray(s.prompt_ids)])
    cv, _ = comp.compress(prompt_emb, T.Tensor(s.visual), training=True,
                          rng=rng, sample_seed=s.scene_seed)
    m = cv.data.shape[0]
    d = target.dims.d_model

    text_emb = target.embed_train(tokens, np.arange(m, m + len(tokens)))
    if m:
        vis_emb = T.add(cv, T.Tensor(target.pos[:m]))
        emb_rows = T.concat([vis_emb, text_emb], axis=0)
    else:
        emb_rows = text_emb
    prev = np.concatenate(
        [
            np.zeros((m, d), dtype=np.float32),
            f_p[n_vis - 1 : n_vis + len(tokens) - 1],
        ]
    )
    x = draft.prep_train(emb_rows, T.Tensor(prev))
    feats_q, logits_q = draft.forward_train(x, causal_allow(0, x.data.shape[0]))

    start_t, span = answer_region(s, n_vis)
    start_d = m + len(s.prompt_ids) - 1
    z_q = T.narrow(logits_q, 0, start_d, span)
    f_q = T.narrow(feats_q, 0, start_d, span)
    return online_distill_loss(z_q, z_p[start_t : start_t + span], f_q,
                               f_p[start_t : start_t + span], cfg)


def train_step(batch: list[Sample], draft: DraftModel, comp: Compressor,
               target: TargetModel, opt: AdamW, cfg: DistillConfig,
               rng: Rng, batch_id: int = 0) -> float:
    """One online-distillation step over a batch; teacher stays frozen."""
    total = None
    for b, s in enumerate(batch):
        part = _draft_sample_loss(draft, comp, target, s, cfg, rng.split("sample", b))
        total = part if total is None else T.add(total, part)
    loss = T.mul_const(total, 1.0 / len(batch))
    val = float(loss.data)
    if not np.isfinite(val):
        raise RuntimeError(f"distillation loss NaN at batch {batch_id}")
    loss.backward()
    opt.step()
    opt.zero_grad()
    return val


DEFAULT_EVAL_CFG = DecodeConfig(mode="chain", gamma=5, temperature=0.0,
                                max_new_tokens=12)


def evaluate(draft: DraftModel, comp: Compressor, target: TargetModel,
             eval_set: list[Sample], dcfg: DecodeConfig = DEFAULT_EVAL_CFG,
             allow_small: bool = False, warmup: bool = True):
    """Mean sigma and mean wall-clock speedup over the eval set; tau is
    measured per sample against its own autoregressive baseline."""
    if len(eval_set) < 30 and not allow_small:
        raise ValueError("evaluation needs at least 30 samples")
    if warmup and eval_set:
        s0 = eval_set[0]
        autoregressive_decode(target, s0.prompt_ids, s0.visual, dcfg)
        decode(target, draft, comp, s0, dcfg)
    sigmas, taus, reports = [], [], []
    for i, s in enumerate(eval_set):
        cfg_s = DecodeConfig(**{**vars(dcfg), "seed": derive_seed(dcfg.seed, "eval", i)})
        _, ar_ns = autoregressive_decode(target, s.prompt_ids, s.visual, cfg_s)
        _, rep = decode(target, draft, comp, s, cfg_s)
        rep.ar_wall_ns = ar_ns
        rep.tau = ar_ns / rep.wall_ns if rep.wall_ns else 0.0
        sigmas.append(rep.sigma)
        taus.append(rep.tau)
        reports.append(rep)
    return float(np.mean(sigmas)), float(np.mean(taus)), reports


def scaling_experiment(target: TargetModel, train_set: list[Sample],
                       eval_set: list[Sample], cfg: DistillConfig,
                       spec: CompressorSpec | None = None,
                       dcfg: DecodeConfig = DEFAULT_EVAL_CFG,
                       csv_path=None, progress=None,
                       start_epoch: int = 0,
                       draft: DraftModel | None = None,
                       comp: Compressor | None = None,
                       allow_small_eval: bool = False):
    """Train continuously for cfg.epochs epochs, checkpointing the metrics
    after each one. Returns (records, draft, compressor)."""
    cfg.validate()
    if draft is None:
        draft = DraftModel(target, seed=derive_seed(cfg.seed, "draft"))
    if comp is None:
        spec = spec or CompressorSpec(gumbel_temp=cfg.gumbel_temp)
        comp = Compressor(spec, target.dims.d_model,
                          init_seed=derive_seed(cfg.seed, "compressor"))
    target.set_frozen(True)
    opt = AdamW(draft.parameters() + comp.parameters(), lr=cfg.lr,
                betas=cfg.betas, weight_decay=cfg.weight_decay)
    records: list[EpochRecord] = []
    n = len(train_set)
    steps_per_epoch = max(1, n // cfg.batch_size)
    header_needed = csv_path is not None and start_epoch == 0
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter_ns()
        erng = Rng(derive_seed(cfg.seed, "epoch", epoch))
        order = erng.permutation(n)
        losses = []
        for step in range(steps_per_epoch):
            batch = [train_set[order[(step * cfg.batch_size + j) % n]]
                     for j in range(cfg.batch_size)]
            losses.append(
                train_step(batch, draft, comp, target, opt, cfg,
                           erng.split("step", step), batch_id=step)
            )
        sigma, tau, _ = evaluate(draft, comp, target, eval_set, dcfg,
                                 allow_small=allow_small_eval)
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), sigma, tau,
                          time.perf_counter_ns() - t0)
        records.append(rec)
        if csv_path is not None:
            mode = "w" if header_needed else "a"
            with open(csv_path, mode, encoding="utf-8") as fh:
                if header_needed:
                    fh.write("epoch,loss,sigma,tau,wall_ns\n")
                    header_needed = False
                fh.write(f"{rec.epoch},{rec.loss:.6f},{rec.sigma:.6f},"
                         f"{rec.tau:.6f},{rec.wall_ns}\n")
        if progress is not None:
            progress(rec)
        target.set_frozen(True)
    return records, draft, comp
