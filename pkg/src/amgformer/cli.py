"""Command line entry point.

Subcommands: gen, train, eval, gradcheck, bench, report.
Exit codes: 0 ok, 1 usage/config, 2 numeric failure, 3 I/O.
Set AMGFORMER_OUT_ROOT to prefix every relative output directory.
"""
import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import gradcheck as gc
from . import mgao, ops
from .checkpoint import load_checkpoint
from .config import RunConfig, default_dict, load_config
from .errors import (ConfigError, ContractError, DataError, DegenerateError,
                     NumericError, ParameterError, ShapeError)
from .evaluation import evaluate_combinations, held_out_bundles
from .mmv import read_mmv, write_mmv
from .phantoms import generate
from .reporting import write_report_bundle
from .tape import Tensor
from .training import train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

ABLATIONS = {
    "baseline": dict(use_qib=False, use_mgao=False, use_mqae=False),
    "+mgao": dict(use_qib=False, use_mgao=True, use_mqae=False),
    "+mgao+qib": dict(use_qib=True, use_mgao=True, use_mqae=False),
    "full": dict(use_qib=True, use_mgao=True, use_mqae=True),
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def cmd_gen(args) -> int:
    cfg = _load(args)
    out_dir = cfg.resolved_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    ss = np.random.SeedSequence((cfg.seed, 0xDA7A))
    seeds = [int(s) for s in ss.generate_state(max(args.n, 1), np.uint64)][:args.n]
    entries = []
    for i, seed in enumerate(seeds):
        bundle = generate(cfg.phantom, seed, batch=1)
        name = f"case_{i:04d}.mmv"
        path = os.path.join(out_dir, name)
        write_mmv(path, bundle)
        entries.append({"file": name, "seed": seed, "sha256": _file_sha256(path)})
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "phantom": dataclasses.asdict(cfg.phantom),
        "cases": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(entries)} case(s) + manifest to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    net_cfg = cfg.net
    if args.ablate:
        net_cfg = dataclasses.replace(net_cfg, **ABLATIONS[args.ablate])
    settings = cfg.train_settings()
    if args.steps is not None:
        settings = dataclasses.replace(settings, steps=args.steps)
    t0 = time.perf_counter()
    out = train(net_cfg, cfg.phantom, cfg.loss, settings)
    seconds = round(time.perf_counter() - t0, 2)
    run = {
        "config_hash": cfg.config_hash(),
        "ablate": args.ablate,
        "modules": {k: getattr(net_cfg, k)
                    for k in ("use_qib", "use_mgao", "use_mqae")},
        "seed": cfg.seed,
        "steps": settings.steps,
        "seconds": seconds,
        "checkpoint": out["checkpoint"],
        "checkpoint_sha256": _file_sha256(out["checkpoint"]),
        "log": out["log"],
    }
    with open(os.path.join(settings.out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(run, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"trained {settings.steps} step(s) in {seconds}s -> {out['checkpoint']}")
    return EXIT_OK


def _load_cases(cfg: RunConfig, test_dir):
    if test_dir:
        names = sorted(n for n in os.listdir(test_dir) if n.endswith(".mmv"))
        if not names:
            raise DataError(f"no .mmv cases under {test_dir}")
        return [read_mmv(os.path.join(test_dir, n)) for n in names]
    return held_out_bundles(cfg.phantom, seed=cfg.eval.case_seed,
                            count=cfg.eval.cases)


def cmd_eval(args) -> int:
    cfg = _load(args)
    net, manifest = load_checkpoint(args.checkpoint)
    cases = _load_cases(cfg, args.test_dir)
    mode = cfg.eval.combinations
    if args.combinations:
        mode = "all" if args.combinations == "15" else args.combinations
    window = cfg.eval.window if args.window is None else args.window
    combos = [(True,) * 4] if mode == "full-only" else None
    meta = {
        "seed": cfg.seed,
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": _file_sha256(args.checkpoint),
        "config_hash": cfg.config_hash(),
        "net_seed": manifest["seed"],
    }
    report = evaluate_combinations(net, cases, window=window,
                                   combos=combos, meta=meta)
    out_dir = cfg.resolved_out_dir()
    written = write_report_bundle(report, out_dir)
    wt = report.aggregate["WT"]
    print(f"evaluated {report.n_cases} case(s) x {len(report.combos)} combination(s)")
    print(f"WT mean {100 * wt['avg']:.2f}% std {100 * wt['std']:.2f}%")
    for key in ("csv", "json", "markdown-table"):
        print(f"  {written[key]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.dtype == "f64" else np.float32
    suites = {}
    if args.scope in ("op", "all"):
        suites.update(gc.op_cases())
    if args.scope in ("module", "all"):
        suites.update({k: v for k, v in gc.module_cases().items()
                       if k.startswith("module:")})
    if args.scope in ("end2end", "all"):
        suites.update({k: v for k, v in gc.module_cases().items()
                       if k.startswith("network:")})
    failed = False
    for name, builder in suites.items():
        tol = args.tol
        if name.startswith("network:"):
            tol = max(tol, 1e-4)  # composed error accumulates end to end
        report = gc.grad_check(builder, seeds=args.seeds, tol=tol, h=args.h,
                               dtype=dtype)
        print(report.summary())
        failed = failed or not report.passed
    if failed:
        print("gradcheck: FAIL", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck: all suites passed")
    return EXIT_OK


def _attention_inputs(rng, n, heads, head_dim):
    shape = (1, heads, n, head_dim)
    q = Tensor(rng.normal(size=shape).astype(np.float32))
    k = Tensor(rng.normal(size=shape).astype(np.float32))
    v = Tensor(rng.normal(size=shape).astype(np.float32))
    return q, k, v


def _dense_oracle(q, k, v):
    """Plain f64 softmax attention, independent of the library path."""
    logits = np.einsum("bhnd,bhmd->bhnm", q.data.astype(np.float64),
                       k.data.astype(np.float64))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    return np.einsum("bhnm,bhmd->bhnd", w, v.data.astype(np.float64))


def _row_entropies(scores, mask):
    """Entropy (nats) of each row's kept-softmax distribution."""
    out = []
    for h in range(scores.shape[1]):  # per head to cap the working set
        s = np.where(mask[0, h], scores[0, h].astype(np.float64), -np.inf)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        logw = np.log(np.where(w > 0.0, w, 1.0))  # dropped entries contribute 0
        out.append(-(w * logw).sum(axis=-1))
    return np.concatenate(out)


def cmd_bench(args) -> int:
    from .config import resolve_out
    sizes = [int(s) for s in args.sizes.split(",")]
    ratios = [float(r) for r in args.ratios.split(",")]
    if any(n < 1 for n in sizes):
        raise ParameterError("bench sizes must be positive")
    mgao.validate_ratios(ratios)
    rng = np.random.default_rng(args.seed)
    tau = Tensor(np.ones(args.heads, dtype=np.float32))
    rows, hist_rows = [], []
    bins = 12
    for n in sizes:
        q, k, v = _attention_inputs(rng, n, args.heads, args.head_dim)
        t0 = time.perf_counter()
        oracle = _dense_oracle(q, k, v)
        dense_ms = 1e3 * (time.perf_counter() - t0)
        scores = np.einsum("bhnd,bhmd->bhnm", q.data, k.data)
        edges = np.linspace(0.0, np.log(max(n, 2)), bins + 1)
        for r in ratios:
            t0 = time.perf_counter()
            out = mgao.sparse_attention(q, k, v, r, tau)
            sparse_ms = 1e3 * (time.perf_counter() - t0)
            mask = ops.topk_row_mask(scores, mgao.keep_count(r, n))
            ent = _row_entropies(scores, mask)
            rows.append({
                "n": n, "ratio": r,
                "dense_ms": f"{dense_ms:.3f}", "sparse_ms": f"{sparse_ms:.3f}",
                "kept_density": f"{float(mask.mean()):.4f}",
                "row_entropy_mean": f"{float(ent.mean()):.4f}",
                "oracle_equal": str(bool(np.abs(out.data - oracle).max() <= 1e-5))
                                if r == 1.0 else "",
            })
            counts, _ = np.histogram(ent, bins=edges)
            for i, c in enumerate(counts):
                hist_rows.append({"n": n, "ratio": r,
                                  "bin_lo": f"{edges[i]:.4f}",
                                  "bin_hi": f"{edges[i + 1]:.4f}",
                                  "count": int(c)})
    out_path = resolve_out(args.out or "bench_attention.csv")
    hist_path = os.path.splitext(out_path)[0] + "_entropy_hist.csv"
    import csv as _csv
    for path, data in ((out_path, rows), (hist_path, hist_rows)):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = _csv.DictWriter(f, fieldnames=list(data[0]))
            writer.writeheader()
            writer.writerows(data)
    # warn-only sanity: same-ratio timings should not shrink as N grows
    for r in ratios:
        series = [float(row["sparse_ms"]) for row in rows if row["ratio"] == r]
        if any(b < a for a, b in zip(series, series[1:])):
            print(f"warning: sparse timings not monotone in N for ratio {r}",
                  file=sys.stderr)
    print(f"wrote {len(rows)} rows to {out_path}")
    print(f"wrote entropy histograms to {hist_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .config import resolve_out
    from .evaluation import StabilityReport
    with open(args.input, "r", encoding="utf-8") as f:
        report = StabilityReport.from_json(f.read())
    out_dir = (resolve_out(args.out) if args.out
               else os.path.dirname(os.path.abspath(args.input)))
    written = write_report_bundle(report, out_dir)
    for key in ("csv", "json", "markdown-table"):
        print(written[key])
    return EXIT_OK


def build_parser() -> _Parser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="amgformer", formatter_class=fmt,
                description="Four-branch segmentation workbench: synthetic data, "
                            "training, stability evaluation, gradient checking.")
    p.add_argument("--dump-config", action="store_true",
                   help="print the default config JSON and exit")
    sub = p.add_subparsers(dest="command")

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, formatter_class=fmt)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON config file (flags win on overlap)")
        sp.add_argument("--seed", type=int, help="override config seed")
        sp.add_argument("--out", help=out_help)

    g = add("gen", "generate phantom cases as .mmv files")
    common(g, "output directory (default: config out_dir)")
    g.add_argument("--n", type=int, default=5, help="number of cases")

    t = add("train", "train a model")
    common(t, "run directory for checkpoint/logs (default: config out_dir)")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--ablate", choices=sorted(ABLATIONS),
                   help="module toggle set (default: config toggles, i.e. full)")

    e = add("eval", "evaluate a checkpoint across modality combinations")
    common(e, "report output directory (default: config out_dir)")
    e.add_argument("--checkpoint", required=True, help="trained .ckpt file")
    e.add_argument("--test-dir",
                   help=".mmv case directory (default: generated held-out set)")
    e.add_argument("--combinations", choices=("15", "all", "full-only"),
                   help="column set: 15/all or full-only (default: config eval.combinations)")
    e.add_argument("--window", type=int,
                   help="sliding-window size (default: config eval.window)")

    gr = add("gradcheck", "finite-difference gradient verification")
    gr.add_argument("--scope", choices=("op", "module", "end2end", "all"),
                    default="all", help="which suites to run")
    gr.add_argument("--seeds", type=int, default=20, help="random cases per suite")
    gr.add_argument("--tol", type=float, default=1e-5,
                    help="max relative error (end2end floor 1e-4)")
    gr.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    gr.add_argument("--dtype", choices=("f64", "f32"), default="f64",
                    help="check precision")

    b = add("bench", "attention timing and sparsity statistics")
    b.add_argument("--sizes", default="64,256,1024,4096",
                   help="comma-separated token counts")
    b.add_argument("--ratios", default="0.5,0.65,0.75,0.8,1.0",
                   help="comma-separated keep ratios, ascending")
    b.add_argument("--heads", type=int, default=4, help="attention heads")
    b.add_argument("--head-dim", type=int, default=8, help="channels per head")
    b.add_argument("--seed", type=int, default=0, help="input RNG seed")
    b.add_argument("--out", default="bench_attention.csv", help="CSV path")

    r = add("report", "re-render a stored JSON report")
    r.add_argument("--input", required=True, help="report.json path")
    r.add_argument("--out", help="output directory (default: alongside input)")
    return p


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
             "gradcheck": cmd_gradcheck, "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse raises for --help (code 0) and usage errors (mapped to 1)
        return int(exc.code or 0)
    if args.dump_config:
        print(json.dumps(default_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ParameterError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DegenerateError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
