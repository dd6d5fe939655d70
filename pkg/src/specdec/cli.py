"""Command-line harness: data generation, training, decoding, benchmarks,
ablation sweeps, and the training-time scaling experiment.

Exit codes: 0 success, 1 usage error (including missing artifacts),
2 invariant breach (a losslessness failure is never silent).

Every command honors --seed; randomized subsystems draw from namespaced
subseeds of it (data=1, init=2, gumbel=3, decode=4) so changing one phase
never perturbs another. SPECDEC_OUT sets the default output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analytics
from . import data as D
from . import train as TR
from .compressor import Compressor, CompressorSpec
from .decode import DecodeConfig, autoregressive_decode, decode
from .model import DraftModel, ModelDims, TargetModel, load_draft, load_target, save_checkpoint
from .rng import derive_seed

EXIT_USAGE = 1
EXIT_INVARIANT = 2

SEED_DOMAINS = {"data": 1, "init": 2, "gumbel": 3, "decode": 4}


def domain_seed(global_seed: int, domain: str) -> int:
    return derive_seed(global_seed, SEED_DOMAINS[domain])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _fail(msg: str, code: int = EXIT_USAGE):
    sys.stderr.write(f"error: {msg}\n")
    sys.exit(code)


def _out_dir(args) -> str:
    base = getattr(args, "out_dir", None) or os.environ.get("SPECDEC_OUT", ".")
    os.makedirs(base, exist_ok=True)
    return base


def _need(path: str, what: str):
    if not path or not os.path.exists(path):
        _fail(f"missing {what}: {path!r}")


def _load_config_overrides(args, keys: list[str]) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        _need(args.config, "config file")
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg.update(json.load(fh))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _dump_run_config(out_dir: str, name: str, payload: dict):
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _decode_cfg(args, seed: int) -> DecodeConfig:
    return DecodeConfig(
        temperature=args.temperature,
        k=args.k,
        total_tokens=args.total_tokens,
        depth=args.depth,
        max_new_tokens=args.max_new_tokens,
        mode=args.mode,
        gamma=args.gamma,
        seed=seed,
    )


def _add_decode_flags(p: argparse.ArgumentParser):
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--mode", choices=["tree", "chain"], default="chain")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--total-tokens", dest="total_tokens", type=int, default=60)
    p.add_argument("--depth", type=int, default=7)
    p.add_argument("--gamma", type=int, default=5)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=16)


def _compressor_spec(args) -> CompressorSpec:
    return CompressorSpec(
        mode=args.compressor,
        fixed_branch=args.branch if args.compressor == "fixed" else None,
    )


# ------------------------------------------------------------------ verbs


def cmd_gen_data(args):
    out_dir = _out_dir(args)
    seed = domain_seed(args.seed, "data")
    samples = D.gen_dataset(args.n, seed, mix=args.mix, grid=args.grid)
    D.save_dataset(args.out, samples)
    _dump_run_config(out_dir, "gen_data_config.json",
                     {"n": args.n, "seed": args.seed, "mix": args.mix,
                      "grid": args.grid, "out": args.out})
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_pretrain_target(args):
    _need(args.data, "dataset file")
    out_dir = _out_dir(args)
    dataset = D.load_dataset(args.data)
    dims = ModelDims()
    n_hold = max(1, len(dataset) // 10)
    train_set, heldout = dataset[:-n_hold], dataset[-n_hold:]
    model, losses = TR.pretrain_target(
        train_set, steps=args.steps, lr=args.lr,
        seed=domain_seed(args.seed, "init"), dims=dims, grid=args.grid,
        batch_size=args.batch_size,
        progress=lambda s, l: print(f"step {s}: loss {l:.4f}"),
    )
    D.attach_visuals(heldout, model.projection)
    ce = TR.eval_ce(model, heldout)
    acc = TR.lookup_accuracy(model, heldout + train_set[: args.acc_samples])
    print(f"held-out answer CE: {ce:.4f} nats; cell-lookup accuracy: {acc:.3f}")
    save_checkpoint(args.out, model.state_arrays(), model.meta())
    np.savetxt(os.path.join(out_dir, "pretrain_loss.csv"), np.asarray(losses),
               header="loss", comments="")
    _dump_run_config(out_dir, "pretrain_config.json",
                     {"data": args.data, "steps": args.steps, "lr": args.lr,
                      "seed": args.seed, "out": args.out})
    if ce >= 0.7 or acc <= 0.9:
        print("warning: pretraining gates not met (CE < 0.7 and accuracy > 0.9)")
    return 0


def cmd_train_draft(args):
    _need(args.data, "dataset file")
    _need(args.target, "target checkpoint")
    out_dir = _out_dir(args)
    target = load_target(args.target)
    dataset = D.load_dataset(args.data)
    D.attach_visuals(dataset, target.projection)
    n_eval = max(30, len(dataset) // 10)
    train_set, eval_set = dataset[:-n_eval], dataset[-n_eval:]

    preset = {"lr": 8e-5, "batch_size": 128} if args.preset == "paper" else {}
    cfg = TR.DistillConfig(
        epochs=args.epochs, seed=domain_seed(args.seed, "init"),
        lr=preset.get("lr", args.lr), batch_size=preset.get("batch_size", args.batch_size),
    )
    spec = _compressor_spec(args)

    draft = comp = None
    start_epoch = 0
    csv_path = os.path.join(out_dir, "epochs.csv")
    if args.resume:
        _need(args.out, "draft checkpoint to resume")
        draft, comp_arrays, meta = load_draft(args.out, target)
        spec = CompressorSpec.from_dict(meta["compressor_spec"])
        comp = Compressor(spec, target.dims.d_model)
        comp.load_state(comp_arrays)
        start_epoch = meta.get("epochs_done", 0)

    records, draft, comp = TR.scaling_experiment(
        target, train_set, eval_set, cfg, spec=spec,
        dcfg=_decode_cfg(args, domain_seed(args.seed, "decode")),
        csv_path=csv_path, start_epoch=start_epoch, draft=draft, comp=comp,
        progress=lambda r: print(
            f"epoch {r.epoch}: loss {r.loss:.4f} sigma {r.sigma:.3f} tau {r.tau:.3f}"
        ),
    )
    arrays = draft.state_arrays() | comp.state_arrays()
    meta = draft.meta() | {"compressor_spec": spec.to_dict(), "epochs_done": cfg.epochs}
    save_checkpoint(args.out, arrays, meta)
    _dump_run_config(out_dir, "train_draft_config.json",
                     {"data": args.data, "target": args.target, "epochs": args.epochs,
                      "seed": args.seed, "preset": args.preset,
                      "compressor": spec.to_dict(), "out": args.out})
    return 0


def _load_engine(args):
    _need(args.target, "target checkpoint")
    _need(args.draft, "draft checkpoint")
    target = load_target(args.target)
    draft, comp_arrays, meta = load_draft(args.draft, target)
    spec = CompressorSpec.from_dict(meta["compressor_spec"])
    if getattr(args, "compressor", None):
        spec = _compressor_spec(args)
    comp = Compressor(spec, target.dims.d_model)
    comp.load_state(comp_arrays)
    return target, draft, comp, spec


def cmd_decode(args):
    target, draft, comp, _ = _load_engine(args)
    _need(args.data, "dataset file")
    dataset = D.load_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        _fail(f"sample index {args.index} out of range")
    sample = D.attach_visuals([dataset[args.index]], target.projection)[0]
    cfg = _decode_cfg(args, domain_seed(args.seed, "decode"))
    trace_fh = open(args.trace, "w", encoding="utf-8") if args.trace else None
    try:
        tokens, report = decode(target, draft, comp, sample, cfg, trace_fh=trace_fh)
    finally:
        if trace_fh:
            trace_fh.close()
    ar_tokens, ar_ns = autoregressive_decode(target, sample.prompt_ids, sample.visual, cfg)
    report.ar_wall_ns = ar_ns
    report.tau = ar_ns / report.wall_ns if report.wall_ns else 0.0
    print("prompt:", " ".join(D.VOCAB.decode(sample.prompt_ids)))
    print("output:", " ".join(D.VOCAB.decode(tokens)))
    print(f"S={report.S} R={report.R} sigma={report.sigma:.3f} tau={report.tau:.3f} "
          f"branch={report.branch} accepts={report.per_round_accepts}")
    if cfg.temperature == 0 and tokens != ar_tokens:
        _fail("losslessness breach: speculative output differs from autoregressive",
              EXIT_INVARIANT)
    return 0


def _bench_one(target, draft, comp, sample, cfg, i):
    cfg_s = DecodeConfig(**{**vars(cfg), "seed": derive_seed(cfg.seed, "bench", i)})
    ar_tokens, ar_ns = autoregressive_decode(target, sample.prompt_ids, sample.visual, cfg_s)
    tokens, rep = decode(target, draft, comp, sample, cfg_s)
    rep.ar_wall_ns = ar_ns
    rep.tau = ar_ns / rep.wall_ns if rep.wall_ns else 0.0
    return tokens, ar_tokens, rep


def cmd_bench(args):
    target, draft, comp, spec = _load_engine(args)
    _need(args.data, "dataset file")
    out_dir = _out_dir(args)
    dataset = D.load_dataset(args.data)[: args.n]
    D.attach_visuals(dataset, target.projection)
    cfg = _decode_cfg(args, domain_seed(args.seed, "decode"))

    if dataset:  # warm the kernels before timing
        _bench_one(target, draft, comp, dataset[0], cfg, 0)

    results = []
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futs = [pool.submit(_bench_one, target, draft, comp, s, cfg, i)
                    for i, s in enumerate(dataset)]
            results = [f.result() for f in futs]
    else:
        results = [_bench_one(target, draft, comp, s, cfg, i)
                   for i, s in enumerate(dataset)]

    mismatches = 0
    entries = []
    trace_path = os.path.join(out_dir, "bench_trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as tfh:
        for i, (tokens, ar_tokens, rep) in enumerate(results):
            if cfg.temperature == 0 and tokens != ar_tokens:
                mismatches += 1
                sys.stderr.write(f"losslessness breach on sample {i}\n")
            entries.append({
                "model": args.model_name, "mode": cfg.mode,
                "branch": spec.fixed_branch if spec.mode == "fixed" else spec.mode,
                "temperature": cfg.temperature, "sigma": rep.sigma, "tau": rep.tau,
                "tau_pred": None,
            })
            tfh.write(json.dumps({
                "sample": i, "S": rep.S, "R": rep.R, "sigma": rep.sigma,
                "tau": rep.tau, "accepts": rep.per_round_accepts,
                "draft_kv": rep.draft_kv_lens, "target_kv": rep.target_kv_lens,
            }) + "\n")

    if args.predict_tau and results:
        costs = analytics.calibrate_costs(target, draft)
        s_mean = float(np.mean([r.S for _, _, r in results]))
        r_mean = float(np.mean([max(r.R, 1) for _, _, r in results]))
        pred = analytics.speedup_model(max(int(round(s_mean)), 1),
                                       max(int(round(r_mean)), 1), cfg.gamma, costs)
        for e in entries:
            e["tau_pred"] = pred

    rows = analytics.aggregate_reports(entries)
    summary_path = os.path.join(out_dir, "bench_summary.csv")
    analytics.write_summary_csv(summary_path, rows)
    for r in rows:
        print(f"{r['model']} {r['mode']} branch={r['branch']} T={r['temperature']}: "
              f"sigma={r['sigma_mean']:.3f} tau={r['tau_mean']:.3f} n={r['n_samples']}")
    print(f"summary: {summary_path}\ntrace: {trace_path}")
    if mismatches:
        _fail(f"{mismatches} losslessness breaches", EXIT_INVARIANT)
    return 0


def cmd_ablate(args):
    target, draft, comp, base_spec = _load_engine(args)
    _need(args.data, "dataset file")
    out_dir = _out_dir(args)
    dataset = D.load_dataset(args.data)[: args.n]
    D.attach_visuals(dataset, target.projection)
    cfg = _decode_cfg(args, domain_seed(args.seed, "decode"))

    sweeps: list[tuple[str, CompressorSpec]] = []
    if args.axis in ("mode", "all"):
        sweeps.append(("baseline", CompressorSpec(mode="fixed", fixed_branch="none")))
        sweeps.append(("weighted", CompressorSpec(mode="weighted")))
        sweeps.append(("concat", CompressorSpec(mode="concat")))
        sweeps.append(("select", CompressorSpec(mode="select")))
    if args.axis in ("branch", "all"):
        for br in ("prune", "pool", "conv", "resample", "text_only"):
            sweeps.append((br, CompressorSpec(mode="fixed", fixed_branch=br)))
    if args.axis in ("ratio", "all"):
        for br in ("prune", "pool", "conv"):
            for r in (2, 3, 5, 10, 20, 30):
                kw = {f"{br}_ratio": r}
                sweeps.append((f"{br}@{r}", CompressorSpec(mode="fixed", fixed_branch=br, **kw)))
        for nq in (1, 2, 4, 8, 10, 20):
            sweeps.append((f"resample@{nq}",
                           CompressorSpec(mode="fixed", fixed_branch="resample",
                                          resampler_queries=nq)))

    entries = []
    for label, spec in sweeps:
        c = Compressor(spec, target.dims.d_model)
        c.load_state({k.removeprefix("compressor."): v
                      for k, v in comp.state_arrays().items()})
        sigma, tau, _ = TR.evaluate(draft, c, target, dataset, cfg, allow_small=True)
        entries.append({"model": args.model_name, "mode": spec.mode, "branch": label,
                        "temperature": cfg.temperature, "sigma": sigma, "tau": tau,
                        "tau_pred": None})
        print(f"{label}: sigma={sigma:.3f} tau={tau:.3f}")
    rows = analytics.aggregate_reports(entries)
    path = os.path.join(out_dir, "ablate_summary.csv")
    analytics.write_summary_csv(path, rows)
    print(f"summary: {path}")
    return 0


def cmd_scaling(args):
    _need(args.data, "dataset file")
    _need(args.target, "target checkpoint")
    out_dir = _out_dir(args)
    target = load_target(args.target)
    dataset = D.load_dataset(args.data)
    D.attach_visuals(dataset, target.projection)
    n_eval = max(30, len(dataset) // 10)
    train_set, eval_set = dataset[:-n_eval], dataset[-n_eval:]
    cfg = TR.DistillConfig(epochs=args.epochs, seed=domain_seed(args.seed, "init"),
                           lr=args.lr, batch_size=args.batch_size)
    csv_path = os.path.join(out_dir, "scaling.csv")
    records, _, _ = TR.scaling_experiment(
        target, train_set, eval_set, cfg,
        dcfg=_decode_cfg(args, domain_seed(args.seed, "decode")),
        csv_path=csv_path,
        progress=lambda r: print(
            f"epoch {r.epoch}: loss {r.loss:.4f} sigma {r.sigma:.3f} tau {r.tau:.3f}"
        ),
    )
    print(f"wrote {len(records)} epoch records to {csv_path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="specdec",
                     description="speculative decoding engine for a toy VLM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a dataset file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", type=float, default=0.2)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-target", help="pretrain the frozen target")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--acc-samples", dest="acc_samples", type=int, default=100)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(fn=cmd_pretrain_target)

    p = sub.add_parser("train-draft", help="online-distill the draft + compressor")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--compressor", choices=["weighted", "concat", "select", "fixed"],
                   default="select")
    p.add_argument("--branch", default="none")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out-dir", dest="out_dir")
    _add_decode_flags(p)
    p.set_defaults(fn=cmd_train_draft)

    p = sub.add_parser("decode", help="decode one sample and print the report")
    p.add_argument("--target", required=True)
    p.add_argument("--draft", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace")
    p.add_argument("--compressor", choices=["weighted", "concat", "select", "fixed"])
    p.add_argument("--branch", default="none")
    p.add_argument("--out-dir", dest="out_dir")
    _add_decode_flags(p)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("bench", help="AR baseline vs speculative over an eval set")
    p.add_argument("--target", required=True)
    p.add_argument("--draft", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--model-name", dest="model_name", default="toy-vlm")
    p.add_argument("--predict-tau", dest="predict_tau", action="store_true")
    p.add_argument("--compressor", choices=["weighted", "concat", "select", "fixed"])
    p.add_argument("--branch", default="none")
    p.add_argument("--out-dir", dest="out_dir")
    _add_decode_flags(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="sweep compressor branches/modes/ratios")
    p.add_argument("--target", required=True)
    p.add_argument("--draft", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", choices=["branch", "mode", "ratio", "all"], required=True)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-name", dest="model_name", default="toy-vlm")
    p.add_argument("--out-dir", dest="out_dir")
    _add_decode_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("scaling", help="multi-epoch training-time scaling run")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir")
    _add_decode_flags(p)
    p.set_defaults(fn=cmd_scaling)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except Exception as exc:  # invariant breaches are never silent
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
