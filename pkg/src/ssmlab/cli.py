"""Command-line entry point: every experiment is a subcommand.

Declarative JSON configs drive train/eval/sweep; scalar flags override config
fields via --set section.key=value. Every output file embeds the resolved
config hash, seed, precision mode, and code version, so equal hashes plus
equal seeds mean byte-identical artifacts (single-threaded).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import carry as carrymod
from . import charts
from . import evaluator
from . import kernellab
from . import models as modelsmod
from . import ndcore as nd
from . import stability
from . import train as trainmod


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling

MODEL_KEYS = {f.name for f in fields(modelsmod.ModelConfig)} | {"preset"}
TRAIN_KEYS = {f.name for f in fields(trainmod.TrainConfig)}
DATA_KEYS = {"corpus", "demo_corpus_bytes", "markov_stay", "markov_states", "markov_tokens"}
EVAL_KEYS = {"lengths", "mode", "carry_across_windows", "position_avg", "T0",
             "epsilon", "eval_slots", "eval_fraction", "svg"}
SWEEP_KEYS = {"T_train", "policy", "size"}
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS,
            "eval": EVAL_KEYS, "sweep": SWEEP_KEYS}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for section, content in cfg.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} "
                              f"(expected one of {sorted(SECTIONS)})")
        if not isinstance(content, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        bad = set(content) - SECTIONS[section]
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg.setdefault(section, {})[key] = value
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def args_digest(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "fn"}


def provenance_for(cfg: dict, seed: int) -> dict:
    precision = cfg.get("train", {}).get("precision", "float64")
    return {"config_hash": config_hash(cfg), "seed": seed,
            "precision": precision, "version": __version__}


def build_model_config(cfg: dict) -> modelsmod.ModelConfig:
    spec = dict(cfg.get("model", {}))
    preset = spec.pop("preset", None)
    base = asdict(modelsmod.config_from_preset(preset)) if preset else asdict(modelsmod.ModelConfig())
    base.update(spec)
    base["decay_range"] = tuple(base["decay_range"])
    return modelsmod.ModelConfig(**base)


def build_train_config(cfg: dict) -> trainmod.TrainConfig:
    return trainmod.TrainConfig(**cfg.get("train", {}))


def resolve_corpus(cfg: dict) -> np.ndarray:
    data = cfg.get("data", {})
    if "corpus" in data:
        path = Path(data["corpus"])
        if not path.exists():
            raise ConfigError(f"corpus file not found: {path}")
        return carrymod.load_corpus_file(path)
    if data.get("markov_states"):
        spec = evaluator.two_state_spec(data.get("markov_stay", 0.9)) \
            if data["markov_states"] == 2 else \
            evaluator.random_spec(np.random.default_rng(0), data["markov_states"])
        return spec.sample(data.get("markov_tokens", 1 << 19), seed=1)
    return carrymod.load_corpus(carrymod.build_demo_corpus(
        data.get("demo_corpus_bytes", 1_200_000)))


def run_dir_for(out_root, cfg: dict, seed: int) -> Path:
    return Path(out_root) / f"{config_hash(cfg)}_s{seed}"


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    train_cfg = build_train_config(cfg)
    if args.seed is not None:
        train_cfg.seed = args.seed
    corpus = resolve_corpus(cfg)
    prov = provenance_for(cfg, train_cfg.seed)
    out = run_dir_for(args.out, cfg, train_cfg.seed)
    nd.set_dtype(train_cfg.precision)
    model = modelsmod.LanguageModel(build_model_config(cfg), seed=train_cfg.seed)
    monitor = stability.OverflowMonitor(M=nd.float_max())
    result = trainmod.train_run(model, train_cfg, corpus, out_dir=out,
                                monitor=monitor, provenance=prov)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (out / "done.json").write_text(json.dumps(prov, sort_keys=True) + "\n")
    print(f"run complete: {out}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _eval_report(model, corpus, cfg, prov):
    ev = cfg.get("eval", {})
    lengths = ev.get("lengths") or [32, 64, 128, 256, 512, 1024, 2048]
    frac = ev.get("eval_fraction", 0.1)
    slots = ev.get("eval_slots", 16)
    n_eval = max(int(len(corpus) * frac), max(lengths) + 1)
    # align the slice so doubling length sets cover the same token span
    block = slots * max(lengths)
    if n_eval > block:
        n_eval = (n_eval // block) * block + 1
    stream = corpus[len(corpus) - n_eval:]
    t0 = ev.get("T0", model.train_T or lengths[0])
    return evaluator.perplexity_by_length(
        model, stream, lengths, mode=ev.get("mode", "contiguous"),
        carry_across_windows=ev.get("carry_across_windows", False),
        position_avg=ev.get("position_avg", "all"),
        T0=t0, epsilon=ev.get("epsilon", 0.01),
        seed=prov["seed"], eval_slots=ev.get("eval_slots", 16),
        provenance=prov)


def cmd_eval(args) -> int:
    cfg = apply_overrides(load_config(args.config) if args.config else {}, args.set)
    model, doc = modelsmod.load_checkpoint(args.checkpoint)
    if args.lengths:
        cfg.setdefault("eval", {})["lengths"] = [int(x) for x in args.lengths.split(",")]
    if args.mode:
        cfg.setdefault("eval", {})["mode"] = args.mode
    if args.carry_windows:
        cfg.setdefault("eval", {})["carry_across_windows"] = True
    validate_config(cfg)
    seed = args.seed if args.seed is not None else 0
    prov = provenance_for(cfg, seed)
    corpus = resolve_corpus(cfg)
    report = _eval_report(model, corpus, cfg, prov)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"report_{prov['config_hash']}_s{seed}_{report.mode}"
    report.to_csv(out / f"{stem}.csv")
    report.to_json(out / f"{stem}.json")
    if cfg.get("eval", {}).get("svg", True):
        svg = charts.line_chart_svg(
            {report.mode: (report.lengths, report.perplexities)},
            title="perplexity vs evaluation length",
            description=json.dumps(prov, sort_keys=True))
        (out / f"{stem}.svg").write_text(svg)
    print(f"classification: {report.classification}")
    for L, p in zip(report.lengths, report.perplexities):
        print(f"  L={L:>6d}  ppl={p:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    sweep = cfg.get("sweep", {})
    t_trains = sweep.get("T_train", [16, 64])
    policies = sweep.get("policy", ["zero", "previous"])
    sizes = sweep.get("size", ["tiny"])
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    lengths = cfg.get("eval", {}).get("lengths") or [32, 64, 128, 256]
    for size in sizes:
        for T in t_trains:
            for policy in policies:
                cell_cfg = json.loads(json.dumps(cfg))
                cell_cfg.pop("sweep", None)
                cell_cfg.setdefault("model", {})["preset"] = size
                cell_cfg.setdefault("train", {})["T"] = T
                cell_cfg["train"]["carry_kind"] = policy
                seed = cell_cfg.get("train", {}).get("seed", 0)
                cell_dir = run_dir_for(out_root, cell_cfg, seed)
                prov = provenance_for(cell_cfg, seed)
                row = {"size": size, "T_train": T, "policy": policy,
                       "config_hash": prov["config_hash"], "status": "ok"}
                try:
                    if (cell_dir / "done.json").exists():
                        model, _ = modelsmod.load_checkpoint(cell_dir / "checkpoint.bin")
                        row["status"] = "cached"
                    else:
                        train_cfg = build_train_config(cell_cfg)
                        corpus = resolve_corpus(cell_cfg)
                        nd.set_dtype(train_cfg.precision)
                        model = modelsmod.LanguageModel(build_model_config(cell_cfg), seed=seed)
                        trainmod.train_run(model, train_cfg, corpus, out_dir=cell_dir,
                                           provenance=prov)
                        (cell_dir / "done.json").write_text(
                            json.dumps(prov, sort_keys=True) + "\n")
                    report = _eval_report(model, resolve_corpus(cell_cfg), cell_cfg, prov)
                    row["classification"] = report.classification
                    for L, p in zip(report.lengths, report.perplexities):
                        row[f"ppl_{L}"] = p
                except Exception as exc:  # cell failures recorded, sweep continues
                    row["status"] = f"failed: {exc}"
                    row["classification"] = ""
                rows.append(row)
    agg = out_root / "sweep.csv"
    cols = ["size", "T_train", "policy", "config_hash", "status", "classification"] + \
        [f"ppl_{L}" for L in lengths]
    with open(agg, "w", newline="") as fh:
        fh.write(",".join(cols) + "\r\n")
        for row in rows:
            fh.write(",".join(str(row.get(c, "")) for c in cols) + "\r\n")
    print(f"sweep aggregate: {agg}")
    for row in rows:
        print(f"  {row['size']} T={row['T_train']} {row['policy']}: "
              f"{row.get('classification', '')} [{row['status']}]")
    return 0


def cmd_kernel(args) -> int:
    target = kernellab.kernel_by_name(args.target)
    ms = [int(x) for x in args.ms.split(",")] if args.ms else [args.m]
    rows = kernellab.error_summary(args.target, target, ms, args.T, args.t,
                                   grid_n=args.grid_n, quad_n=args.quad_n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = {"config_hash": config_hash({"kernel": args_digest(args)}), "seed": 0,
            "precision": nd.dtype_name(), "version": __version__}
    csv_path = out / f"kernel_{args.target.replace(':', '_')}.csv"
    cols = ["target", "m", "T", "t", "residual_rms", "ridge",
            "error_inside", "error_outside", "error_heldout_2T"]
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(cols + ["config_hash", "seed", "precision", "version"]) + "\r\n")
        for row in rows:
            vals = [repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols]
            fh.write(",".join(vals + [prov["config_hash"], "0", prov["precision"],
                                      prov["version"]]) + "\r\n")
    kernellab.write_summary_json(out / f"kernel_{args.target.replace(':', '_')}.json",
                                 rows, provenance=prov)
    fit = kernellab.fit_kernel(target, ms[-1], args.T, args.grid_n)
    kernellab.write_samples_csv(out / f"kernel_{args.target.replace(':', '_')}_samples.csv",
                                fit, target, s_max=min(args.t, 4 * args.T),
                                provenance=prov)
    for row in rows:
        print(f"m={row['m']:>3d} residual={row['residual_rms']:.3e} "
              f"extrap[{args.T},{row['t']:g}]={row['error_outside']:.6e}")
    return 0


def cmd_oracle(args) -> int:
    if args.states == 2:
        spec = evaluator.two_state_spec(args.stay)
    else:
        spec = evaluator.random_spec(np.random.default_rng(args.seed), args.states)
    verdict = evaluator.entropy_monotonicity_check(spec, k_max=args.kmax)
    print(f"conditioning-reduces-entropy chain for {args.states} states, "
          f"k <= {args.kmax}: {'PASS' if verdict.ok else 'FAIL'} "
          f"(max violation {verdict.max_violation:.2e})")
    for row in verdict.rows:
        print(f"  k={row['k']:>2d}  H(full)={row['full']:.6f}  "
              f"H(drop_first)={row['drop_first']:.6f}  H(marginal)={row['marginal']:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"ok": verdict.ok, "max_violation": verdict.max_violation,
               "rows": verdict.rows,
               "provenance": {"config_hash": config_hash({"oracle": args_digest(args)}),
                              "seed": args.seed, "precision": nd.dtype_name(),
                              "version": __version__}}
        (out / "oracle.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0 if verdict.ok else 1


def cmd_stability(args) -> int:
    budget = stability.StabilityBudget(M=args.M, lam=args.lam, u_norm1=args.u1,
                                       x_sup=args.xsup, h0_inf=args.h0)
    res = stability.max_safe_decay(budget)
    print(f"lambda* = {res.lambda_star:.6g}" +
          ("  [no safe decay exists]" if res.no_safe_decay else ""))
    if args.T:
        print(f"hidden bound at T={args.T}: {stability.hidden_bound(budget, args.T):.6g}")
    try:
        asym = stability.hidden_bound(budget, float('inf'))
        print(f"hidden bound at T=inf: {asym:.6g}")
    except stability.DivergentBound:
        print("hidden bound at T=inf: divergent (decay >= 1)")
    return 0


def cmd_make_corpus(args) -> int:
    blob = carrymod.build_demo_corpus(args.min_bytes)
    Path(args.out).write_bytes(blob)
    print(f"wrote {len(blob)} bytes to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmlab",
                                description="state-space model length-extension lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a declarative config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="runs")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--set", action="append", default=[],
                   help="override config scalar: section.key=value")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="perplexity-vs-length report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--out", default="reports")
    e.add_argument("--lengths", default=None, help="comma-separated lengths")
    e.add_argument("--mode", choices=["contiguous", "shuffled"], default=None)
    e.add_argument("--carry-windows", action="store_true",
                   help="carry hidden state across evaluation windows")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--set", action="append", default=[])
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="grid of (T_train, policy, size) cells")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="sweeps")
    s.add_argument("--set", action="append", default=[])
    s.set_defaults(fn=cmd_sweep)

    k = sub.add_parser("kernel", help="memory-kernel fitting and extrapolation error")
    k.add_argument("--target", default="power_law:2")
    k.add_argument("--m", type=int, default=8)
    k.add_argument("--ms", default=None, help="comma-separated m values")
    k.add_argument("--T", type=float, default=5.0)
    k.add_argument("--t", type=float, default=50.0)
    k.add_argument("--grid-n", dest="grid_n", type=int, default=400)
    k.add_argument("--quad-n", dest="quad_n", type=int, default=2048)
    k.add_argument("--out", default="reports")
    k.set_defaults(fn=cmd_kernel)

    o = sub.add_parser("oracle", help="entropy monotonicity check on a Markov language")
    o.add_argument("--states", type=int, default=2)
    o.add_argument("--stay", type=float, default=0.9)
    o.add_argument("--kmax", type=int, default=10)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default=None)
    o.set_defaults(fn=cmd_oracle)

    st = sub.add_parser("stability", help="safe-decay and hidden-state bounds")
    st.add_argument("--M", type=float, required=True)
    st.add_argument("--u1", type=float, required=True)
    st.add_argument("--xsup", type=float, required=True)
    st.add_argument("--h0", type=float, default=0.0)
    st.add_argument("--lam", type=float, default=0.5)
    st.add_argument("--T", type=int, default=None)
    st.set_defaults(fn=cmd_stability)

    mc = sub.add_parser("make-corpus", help="write the offline demo text corpus")
    mc.add_argument("--out", required=True)
    mc.add_argument("--min-bytes", dest="min_bytes", type=int, default=1_200_000)
    mc.set_defaults(fn=cmd_make_corpus)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, modelsmod.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
