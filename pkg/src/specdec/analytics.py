"""Analytic latency model and report aggregation.

The round cost model is R * (gamma * t_q(1) + t_p(gamma) + t_sample) and
the speedup over plain autoregressive decoding is S * t_p(1) divided by
that total; equivalently (S/R) divided by the three normalized cost terms.
Verification cost t_p(gamma) is measured at probe lengths and interpolated,
never assumed flat. Under iid per-token acceptance probability alpha, the
expected accepted length of a gamma-token chain is alpha(1-alpha^gamma)/(1-alpha).
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import causal_allow
from .rng import Rng, derive_seed


@dataclass
class SigmaQuery:
    alpha: float
    gamma: int


def sigma_expected(q: SigmaQuery) -> float:
    if not 0.0 <= q.alpha:
        raise ValueError("alpha must be nonnegative")
    if q.alpha >= 1.0:
        raise ValueError("alpha >= 1 hits the formula pole (iid assumption breaks)")
    if q.gamma < 1:
        raise ValueError("gamma must be >= 1")
    if q.alpha == 0.0:
        return 0.0
    return q.alpha * (1.0 - q.alpha**q.gamma) / (1.0 - q.alpha)


@dataclass
class LatencyParams:
    t_p1: float
    t_q1: float
    t_sample: float
    gamma_table: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        for v in (self.t_p1, self.t_q1, self.t_sample):
            if v < 0:
                raise ValueError("costs must be nonnegative")
        if self.gamma_table:
            self.gamma_table = sorted(self.gamma_table)
            g1 = [t for g, t in self.gamma_table if g == 1]
            if g1 and abs(g1[0] - self.t_p1) > 1e-12:
                raise ValueError("t_p_gamma(1) must equal t_p1")

    def t_p(self, gamma: float) -> float:
        if not self.gamma_table:
            return self.t_p1
        gs = np.array([g for g, _ in self.gamma_table], dtype=np.float64)
        ts = np.array([t for _, t in self.gamma_table], dtype=np.float64)
        if gamma >= gs[-1] and len(gs) >= 2:
            slope = (ts[-1] - ts[-2]) / (gs[-1] - gs[-2])
            return float(ts[-1] + slope * (gamma - gs[-1]))
        return float(np.interp(gamma, gs, ts))


def sd_latency(rounds: int, gamma: int, costs: LatencyParams) -> float:
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return rounds * (gamma * costs.t_q1 + costs.t_p(gamma) + costs.t_sample)


def speedup_model(s_tokens: int, rounds: int, gamma: int, costs: LatencyParams) -> float:
    if s_tokens < 1 or rounds < 1:
        raise ValueError("token and round counts must be >= 1")
    total = sd_latency(rounds, gamma, costs)
    if total <= 0:
        raise ValueError("zero denominator in speedup model")
    return s_tokens * costs.t_p1 / total


def speedup_model_ratio(s_tokens: int, rounds: int, gamma: int,
                        costs: LatencyParams) -> float:
    """Algebraically identical form: sigma / sum of normalized cost terms."""
    if costs.t_p1 <= 0:
        raise ValueError("zero denominator in speedup model")
    denom = (gamma * costs.t_q1 / costs.t_p1 + costs.t_p(gamma) / costs.t_p1
             + costs.t_sample / costs.t_p1)
    if denom <= 0:
        raise ValueError("zero denominator in speedup model")
    return (s_tokens / rounds) / denom


def _median_time_ns(fn, reps: int = 9) -> float:
    out = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        out.append(time.perf_counter_ns() - t0)
    return float(statistics.median(out))


def _timer_tick_ns() -> float:
    ticks = []
    for _ in range(50):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        ticks.append(max(b - a, 1))
    return float(statistics.median(ticks))


def calibrate_costs(target, draft, probe_lengths=(1, 2, 4, 8, 16, 32, 64),
                    ctx_len: int = 80, reps: int = 9, warmup: int = 3) -> LatencyParams:
    """Measure the Eq-symbol costs on the actual engine: median-of-reps
    timings of target forwards at each probe batch size (tabulated and
    interpolated), single-row draft forwards, and the sampling step."""
    rng = Rng(derive_seed(0xC0575, "calibration"))
    d = target.dims.d_model
    vocab = target.dims.vocab
    tick = _timer_tick_ns()

    with T.no_grad():
        base = target.new_cache()
        ctx_rows = rng.normal_array((ctx_len, d), scale=0.5)
        target.forward_rows(base, ctx_rows, causal_allow(0, ctx_len))

        def probe_target(gamma: int):
            rows = rng.normal_array((gamma, d), scale=0.5)
            allow = causal_allow(base.length, gamma)

            def run():
                target.forward_rows(base, rows, allow)
                base.truncate(ctx_len)

            return run

        table = []
        for g in sorted(set(probe_lengths)):
            fn = probe_target(g)
            for _ in range(warmup):
                fn()
            med = _median_time_ns(fn, reps)
            if med <= 10 * tick:
                raise RuntimeError("unmeasurable: timer resolution exceeds signal")
            table.append((g, med * 1e-9))

        dbase = draft.new_cache()
        dctx = rng.normal_array((16, d), scale=0.5)
        draft.forward_rows(dbase, dctx, causal_allow(0, 16))
        drow_emb = rng.normal_array((1, d), scale=0.5)
        drow_feat = rng.normal_array((1, d), scale=0.5)

        def run_draft():
            x = draft.prep_rows(drow_emb, drow_feat)
            draft.forward_rows(dbase, x, causal_allow(dbase.length, 1))
            dbase.truncate(16)

        for _ in range(warmup):
            run_draft()
        t_q1 = _median_time_ns(run_draft, reps)
        if t_q1 <= 10 * tick:
            raise RuntimeError("unmeasurable: timer resolution exceeds signal")

    from .decode import verify_chain  # local import avoids a cycle at module load

    gamma_s = 5
    p_rows = np.abs(rng.normal_array((gamma_s + 1, vocab))).astype(np.float64) + 0.1
    p_rows /= p_rows.sum(axis=1, keepdims=True)
    q_rows = [p_rows[i].copy() for i in range(gamma_s)]
    toks = [int(np.argmax(r)) for r in q_rows]
    sample_rng = Rng(derive_seed(0xC0575, "sample-cost"))

    def run_sample():
        verify_chain(p_rows, toks, q_rows, 1.0, sample_rng)

    for _ in range(warmup):
        run_sample()
    t_sample = _median_time_ns(run_sample, reps)

    t_p1 = dict(table)[1] if any(g == 1 for g, _ in table) else table[0][1]
    return LatencyParams(t_p1=t_p1, t_q1=t_q1 * 1e-9, t_sample=t_sample * 1e-9,
                         gamma_table=table)


# -------------------------------------------------------------- aggregation

SUMMARY_COLUMNS = ["model", "mode", "branch", "temperature", "n_samples",
                   "sigma_mean", "tau_mean", "tau_pred"]


def aggregate_reports(entries: list[dict]) -> list[dict]:
    """Group run entries by (model, mode, branch, temperature); emit mean and
    median sigma/tau per group plus the model-predicted tau when present."""
    if not entries:
        raise ValueError("no reports to aggregate")
    groups: dict[tuple, list[dict]] = {}
    for e in entries:
        key = (e["model"], e["mode"], str(e.get("branch")), e["temperature"])
        groups.setdefault(key, []).append(e)
    rows = []
    for (model, mode, branch, temp), items in sorted(groups.items()):
        sigmas = [e["sigma"] for e in items]
        taus = [e["tau"] for e in items]
        preds = [e["tau_pred"] for e in items if e.get("tau_pred") is not None]
        rows.append(
            {
                "model": model,
                "mode": mode,
                "branch": branch,
                "temperature": temp,
                "n_samples": len(items),
                "sigma_mean": float(np.mean(sigmas)),
                "sigma_median": float(np.median(sigmas)),
                "tau_mean": float(np.mean(taus)),
                "tau_median": float(np.median(taus)),
                "tau_pred": float(np.mean(preds)) if preds else None,
            }
        )
    return rows


def write_summary_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r["model"], r["mode"], r["branch"], r["temperature"],
                    r["n_samples"], f"{r['sigma_mean']:.6f}", f"{r['tau_mean']:.6f}",
                    "" if r["tau_pred"] is None else f"{r['tau_pred']:.6f}",
                ]
            )
