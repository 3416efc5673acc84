"""Command-line entry point: ``vrwkv <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 numerical
divergence.

Options may also come from ``--config PATH``, a flat JSON object whose keys
are the long option names with dashes replaced by underscores. Explicit flags
win over the file. Commands that write files also write ``config.json``, the
resolved options, into the output directory; replaying it with ``--config``
reproduces the run.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from vrwkv import bench, checkpoint
from vrwkv.gradcheck import check_kernel, check_model, check_shift
from vrwkv.kernel import biwkv_forward, biwkv_oracle, flops_estimate
from vrwkv.model import ModelConfig, init_params
from vrwkv.train import SyntheticTask, TrainBudget, TrainingDivergence, evaluate, make_dataset, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("vrwkv")


class UsageError(Exception):
    pass


def _ints(s):
    return [int(x) for x in str(s).split(",") if x.strip()]


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


MODEL_DEFAULTS = dict(embed_dim=16, hidden_dim=64, depth=2, patch_size=4, num_classes=10,
                      image_size=32, image_channels=3, extra_norm=False, layer_scale_init=1.0,
                      shift_mode="quad", shift_literal=False, attention="bi",
                      channel_out_proj=False)

DEFAULTS = {
    "oracle-check": dict(T="1,2,3,8,32,64", C="1,4,16", seeds=20, inject_bug=False, tol=1e-10,
                         precision="f64"),
    "gradcheck": dict(scope="kernel", T=16, C=8, seeds=10, zero_gy=False, tol=None,
                      precision="f64"),
    "bench": dict(mechanism="biwkv,quadratic", T="", C=64, reps=9, precision="f32", check=False),
    "erf": dict(MODEL_DEFAULTS, depth=1, image_size=64, erf_size=64, checkpoint="",
                precision="f64"),
    "flops": dict(T=16384, C=192, depth=0),
    "stability": dict(T=65536, C=8, wmax=5.0, unsafe=False, precision="both"),
    "train": dict(MODEL_DEFAULTS, steps=2000, batch_size=32, n_train=1000, lr=5e-3,
                  weight_decay=0.05, warmup_steps=100, log_every=1, task_seed=None,
                  noise=0.1, precision="f32"),
    "eval": dict(checkpoint="", n=1000, task_seed=None, precision="f32"),
}
DEFAULT_T = {"biwkv": "4096,8192,16384,32768,65536", "biwkv-numpy": "4096,8192,16384",
             "quadratic": "1024,2048,4096,8192"}


def _add_model_flags(p):
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--image-size", type=int, help="base resolution of the position embedding")
    p.add_argument("--extra-norm", type=_bool)
    p.add_argument("--layer-scale-init", type=float)
    p.add_argument("--shift-mode", choices=["quad", "causal", "bidirectional", "none"])
    p.add_argument("--shift-literal", type=_bool)
    p.add_argument("--attention", choices=["bi", "causal"])
    p.add_argument("--channel-out-proj", type=_bool)


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat JSON file of option values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=["f32", "f64", "both"])
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vrwkv", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(parents=[common], argument_default=argparse.SUPPRESS)

    p = sub.add_parser("oracle-check", help="recurrent Bi-WKV vs direct summation", **kw)
    p.add_argument("--T", help="comma-separated token counts")
    p.add_argument("--C", help="comma-separated channel counts")
    p.add_argument("--seeds", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--inject-bug", action="store_true", help="flip a decay sign (negative control)")

    p = sub.add_parser("gradcheck", help="analytic gradients vs finite differences", **kw)
    p.add_argument("--scope", choices=["kernel", "shift", "model"])
    p.add_argument("--T", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--zero-gy", action="store_true", help="smoke case with zero upstream gradient")

    p = sub.add_parser("bench", help="runtime scaling in T", **kw)
    p.add_argument("--mechanism", help="comma-separated: biwkv, biwkv-numpy, quadratic")
    p.add_argument("--T", help="comma-separated ascending token counts (default per mechanism)")
    p.add_argument("--C", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--check", action="store_true", help="exit 1 if the scaling bands fail")

    p = sub.add_parser("erf", help="effective receptive field of the centre token", **kw)
    _add_model_flags(p)
    p.add_argument("--erf-size", type=int, help="input resolution for the ERF")
    p.add_argument("--checkpoint", help="use trained parameters instead of a fresh init")

    p = sub.add_parser("flops", help="analytic Bi-WKV FLOPs", **kw)
    p.add_argument("--T", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--depth", type=int, help="also print per-layer counts and the total")

    p = sub.add_parser("stability", help="Bi-WKV at large T, safe vs unsafe", **kw)
    p.add_argument("--T", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--wmax", type=float)
    p.add_argument("--unsafe", action="store_true",
                   help="no /T bounding, no max-exponent tracking, single precision")

    p = sub.add_parser("train", help="train on the synthetic task", **kw)
    _add_model_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--task-seed", type=int, help="dataset seed (defaults to --seed)")
    p.add_argument("--noise", type=float)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on the synthetic task", **kw)
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--task-seed", type=int)
    return parser


def resolve(args):
    """Merge command defaults, the ``--config`` file, and explicit flags."""
    given = vars(args).copy()
    cmd = given.pop("command")
    opts = dict(DEFAULTS[cmd], seed=0, out="")
    path = given.pop("config", None)
    if path:
        try:
            with open(path) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a flat JSON object")
        file_cfg.pop("command", None)
        unknown = set(file_cfg) - set(opts)
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        opts.update(file_cfg)
    given.pop("verbose", None)
    opts.update(given)
    opts["command"] = cmd
    return opts


def _dtype(name):
    return {"f32": np.float32, "f64": np.float64}[name]


def _model_config(opts):
    names = {f.name for f in fields(ModelConfig)}
    try:
        return ModelConfig(**{k: opts[k] for k in names if k in opts})
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))


def _outdir(opts):
    out = opts["out"] or os.path.join("out", opts["command"])
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}")
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _write_config(out, opts):
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(opts, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_report(opts, report, name="report.json"):
    if opts["out"]:
        out = _outdir(opts)
        _write_config(out, opts)
        with open(os.path.join(out, name), "w") as f:
            json.dump(report, f, indent=2)


# --------------------------------------------------------------------------
# commands


def cmd_oracle_check(opts):
    if opts["precision"] != "f64":
        raise UsageError("oracle-check runs in float64 only")
    Ts, Cs, seeds, tol = _ints(opts["T"]), _ints(opts["C"]), int(opts["seeds"]), float(opts["tol"])
    base = int(opts["seed"])
    rows, failures = [], []
    t0 = time.perf_counter()
    for T in Ts:
        for C in Cs:
            worst, worst_seed = 0.0, None
            for s in range(seeds):
                rng = np.random.default_rng([base, T, C, s])
                k, v = rng.uniform(-2, 2, (2, T, C))
                w, u = rng.uniform(-2, 2, (2, C))
                y, _ = biwkv_forward(k, v, w, u, _flip_decay=opts["inject_bug"])
                err = float(np.max(np.abs(y - biwkv_oracle(k, v, w, u))))
                if err >= worst:
                    worst, worst_seed = err, s
                if not err < tol:
                    failures.append({"T": T, "C": C, "seed": s, "max_abs_err": err})
            rows.append({"T": T, "C": C, "worst_max_abs_err": worst, "worst_seed": worst_seed})
            print(f"T={T:<5d} C={C:<4d} worst max-abs err {worst:.3e} (seed {worst_seed})")
    elapsed = time.perf_counter() - t0
    ok = not failures
    for f in failures[:20]:
        print(f"FAIL T={f['T']} C={f['C']} seed={f['seed']} max-abs err {f['max_abs_err']:.3e}")
    print(f"{'PASS' if ok else 'FAIL'}: {len(Ts) * len(Cs) * seeds} cases, tol {tol:g}, {elapsed:.2f} s")
    _write_report(opts, {"pass": ok, "tol": tol, "rows": rows, "failures": failures,
                         "seconds": elapsed})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(opts):
    if opts["precision"] != "f64":
        raise UsageError("gradcheck runs in float64 only")
    scope = opts["scope"]
    seeds = range(int(opts["seed"]), int(opts["seed"]) + int(opts["seeds"]))
    tol = 1e-5 if opts["tol"] is None else float(opts["tol"])
    if scope == "kernel":
        res = check_kernel(int(opts["T"]), int(opts["C"]), seeds, zero_gy=opts["zero_gy"])
    elif scope == "shift":
        res = check_shift(seeds, zero_gy=opts["zero_gy"])
    else:
        res = check_model(seeds, zero_gy=opts["zero_gy"])
    ok = all(v < tol for v in res.worst.values())
    for name, err in sorted(res.worst.items()):
        print(f"{name:<32s} worst rel err {err:.3e}  {'ok' if err < tol else 'FAIL'}")
    if opts["zero_gy"]:
        print(f"max |analytic| {res.max_analytic:.3e}  max |numeric| {res.max_numeric:.3e}")
    print(f"{'PASS' if ok else 'FAIL'}: scope {scope}, tol {tol:g}")
    _write_report(opts, {"pass": ok, "scope": scope, "tol": tol, "worst": res.worst})
    return EXIT_OK if ok else EXIT_FAIL


def check_scaling(records):
    """Acceptance bands: Bi-WKV doubling ratio in [1.6, 2.6] for T >= 8192,
    quadratic ratio >= 3.4 for T >= 4096. Returns ``(ok, lines)``."""
    ok, lines = True, []
    by = {}
    for r in records:
        by.setdefault(r.mechanism, []).append(r)
    for mech, recs in by.items():
        if mech.startswith("biwkv"):
            lo, hi, min_T = 1.6, 2.6, 8192
        else:
            lo, hi, min_T = 3.4, float("inf"), 4096
        ratios = bench.doubling_ratios(recs, min_T)
        if not ratios:
            lines.append(f"{mech}: no doubling pair with T >= {min_T}")
            ok = False
        for T, r in ratios:
            good = lo <= r <= hi
            ok &= good
            lines.append(f"{mech}: T {T}->{2 * T} ratio {r:.2f} {'ok' if good else 'FAIL'}")
    return ok, lines


def cmd_bench(opts):
    dtype = _dtype(opts["precision"] if opts["precision"] != "both" else "f32")
    out = _outdir(opts)
    _write_config(out, opts)
    records = []
    for mech in [m.strip() for m in opts["mechanism"].split(",") if m.strip()]:
        if mech not in bench.MECHANISMS:
            raise UsageError(f"unknown mechanism {mech!r}")
        Ts = _ints(opts["T"] or DEFAULT_T[mech])
        try:
            recs = bench.bench_scaling(mech, Ts, int(opts["C"]), int(opts["reps"]), dtype=dtype,
                                       seed=int(opts["seed"]))
        except ValueError as e:
            raise UsageError(str(e))
        for r in recs:
            flag = "  (below timing floor)" if r.flagged else ""
            print(f"{mech:<12s} T={r.T:<6d} median {r.median_seconds:.4e} s  "
                  f"{r.activation_bytes} bytes{flag}")
        records += recs
    bench.write_bench_csv(records, os.path.join(out, "bench.csv"))
    ok, lines = check_scaling(records)
    for line in lines:
        print(line)
    print(f"wrote {os.path.join(out, 'bench.csv')}")
    return EXIT_FAIL if (opts["check"] and not ok) else EXIT_OK


def cmd_erf(opts):
    cfg = _model_config(opts)
    dtype = _dtype("f64" if opts["precision"] == "both" else opts["precision"])
    if opts["checkpoint"]:
        meta, params = checkpoint.load(opts["checkpoint"])
        cfg = ModelConfig.from_dict(meta.get("model", meta))
        params = {k: v.astype(dtype) for k, v in params.items()}
    else:
        params = init_params(cfg, int(opts["seed"]), dtype)
    size = int(opts["erf_size"])
    if size % cfg.patch_size:
        raise UsageError(f"erf size {size} not divisible by patch size {cfg.patch_size}")
    erf = bench.erf_map(params, cfg, size, seed=int(opts["seed"]))
    out = _outdir(opts)
    _write_config(out, opts)
    bench.write_erf_csv(erf, os.path.join(out, "erf.csv"))
    bench.write_erf_svg(erf, os.path.join(out, "erf.svg"))
    print(f"grid {erf.shape[0]}x{erf.shape[1]}, nonzero cells {int((erf > 0).sum())}, "
          f"min {erf.min():.3e}")
    print(f"wrote {os.path.join(out, 'erf.csv')} and erf.svg")
    return EXIT_OK


def cmd_flops(opts):
    try:
        per_layer = flops_estimate(opts["T"], opts["C"])
    except (ValueError, OverflowError) as e:
        raise UsageError(str(e))
    print(per_layer)
    depth = int(opts["depth"])
    for i in range(depth):
        print(f"layer {i} {per_layer}")
    if depth:
        print(f"total {per_layer * depth}")
    return EXIT_OK


def cmd_stability(opts):
    T, C, wmax = int(opts["T"]), int(opts["C"]), float(opts["wmax"])
    rng = np.random.default_rng(int(opts["seed"]))
    k = rng.standard_normal((T, C))
    v = rng.standard_normal((T, C))
    w = np.linspace(-wmax, wmax, C)
    u = np.zeros(C)
    if opts["unsafe"]:
        with np.errstate(all="ignore"):
            y, _ = biwkv_forward(k, v, w, u, bounded=False, safe=False, dtype=np.float32)
        bad = int((~np.isfinite(y)).sum())
        print(f"unsafe f32 T={T} C={C} w in [{-wmax}, {wmax}]: {bad} non-finite outputs")
        if bad:
            print("overflow detected (expected for the unsafe ablation)")
            return EXIT_DIVERGED
        print("FAIL: unsafe ablation did not overflow")
        return EXIT_FAIL
    precs = ["f32", "f64"] if opts["precision"] == "both" else [opts["precision"]]
    ok = True
    for p in precs:
        y, _ = biwkv_forward(k, v, w, u, dtype=_dtype(p))
        finite = bool(np.all(np.isfinite(y)))
        ok &= finite
        print(f"safe {p} T={T} C={C}: {'finite' if finite else 'NON-FINITE'} "
              f"(|y| max {np.nanmax(np.abs(y)):.3g})")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(opts):
    cfg = _model_config(opts)
    seed = int(opts["seed"])
    task_seed = seed if opts["task_seed"] is None else int(opts["task_seed"])
    task = SyntheticTask(seed=task_seed, num_classes=cfg.num_classes, image_size=cfg.image_size,
                         noise=float(opts["noise"]))
    names = {f.name for f in fields(TrainBudget)}
    budget = TrainBudget(**{k: opts[k] for k in names})
    out = _outdir(opts)
    _write_config(out, opts)
    try:
        res = train(cfg, task, budget, seed=seed, dtype=_dtype(opts["precision"]),
                    log_path=os.path.join(out, "log.jsonl"),
                    checkpoint_path=os.path.join(out, "checkpoint.vrwk"))
    except TrainingDivergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({"final_loss": res.final_loss, "final_accuracy": res.final_accuracy}))
    return EXIT_OK


def cmd_eval(opts):
    if not opts["checkpoint"]:
        raise UsageError("--checkpoint is required")
    try:
        meta, params = checkpoint.load(opts["checkpoint"])
    except (OSError, checkpoint.CheckpointError) as e:
        raise UsageError(f"cannot load checkpoint: {e}")
    cfg = ModelConfig.from_dict(meta["model"])
    task_kw = dict(meta.get("task", {}))
    if opts["task_seed"] is not None:
        task_kw["seed"] = int(opts["task_seed"])
    task = SyntheticTask(**task_kw)
    images, labels = make_dataset(task, int(opts["n"]))
    dtype = _dtype("f32" if opts["precision"] == "both" else opts["precision"])
    params = {k: v.astype(dtype) for k, v in params.items()}
    loss, acc = evaluate(params, cfg, images.astype(dtype), labels)
    print(json.dumps({"loss": loss, "accuracy": acc, "n": len(labels), "task_seed": task.seed}))
    return EXIT_OK


COMMANDS = {"oracle-check": cmd_oracle_check, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
            "erf": cmd_erf, "flops": cmd_flops, "stability": cmd_stability, "train": cmd_train,
            "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[opts["command"]](opts)
    except UsageError as e:
        print(f"vrwkv {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
