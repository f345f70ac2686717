"""Command-line orchestration: make-toy | induce | prune | eval | bench.

Options can come from a flat key=value config file (section-prefixed keys,
e.g. ``si.lambda=0.001``) with command-line flags taking precedence. Every
report path writes CSV plus a rendered figure alongside it.
"""

from __future__ import annotations

import os

# Honor SI_THREADS before numpy is pulled in by the library modules.
_threads = os.environ.get("SI_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evalkit, importance, masking, reporting, tensorfile
from .core import Rng
from .distribution import OptConfig, save_transforms
from .errors import ConfigError, SiPruneError
from .evalkit import SiConfig, write_csv
from .feature import FeatureLossConfig
from .model import (Linear, Model, build_toy_model, layer_inputs,
                    load_model, save_model)

_CONFIG_KEYS = {
    "model", "toy", "calib", "calib_synth", "pattern", "metric", "seed",
    "out_dir", "si.stage", "si.lambda", "si.alpha", "si.p", "si.lr",
    "si.epochs", "si.mask_refresh_period", "si.optimize_delta",
    "si.optimize_attention", "si.distribution_weight", "si.eps_init",
}


def load_config(path: str) -> dict[str, str]:
    cfg: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        cfg[key] = value
    return cfg


def _merged(args, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    flag = key.split(".")[-1].replace("-", "_")
    val = getattr(args, flag, None)
    if val is not None:
        return val
    return args._config.get(key, default)


def _load_model(args) -> Model:
    model_path = _merged(args, "model")
    toy = _merged(args, "toy")
    seed = int(_merged(args, "seed", 0))
    if model_path and toy:
        raise ConfigError("give either model or toy, not both")
    if model_path:
        return load_model(model_path)
    if toy:
        try:
            depth, d_model, d_hidden = (int(v) for v in str(toy).split(","))
        except ValueError as e:
            raise ConfigError(f"toy spec must be depth,d_model,d_hidden: {toy!r}") from e
        return build_toy_model(depth, d_model, d_hidden, seed)
    raise ConfigError("missing required key: model or toy")


def _load_calib(args, model: Model) -> np.ndarray:
    calib_path = _merged(args, "calib")
    synth = _merged(args, "calib_synth")
    seed = int(_merged(args, "seed", 0))
    if calib_path:
        tensors = tensorfile.load_tensors(calib_path)
        if "calib" not in tensors:
            raise ConfigError(f"calibration file {calib_path} has no 'calib' tensor")
        return tensors["calib"]
    n = int(synth) if synth else 128
    return Rng(seed + 1).normal((model.d_in, n))


def _si_config(args) -> SiConfig:
    feature = FeatureLossConfig(
        lam=float(_merged(args, "si.lambda", 1e-3)),
        alpha=float(_merged(args, "si.alpha", 0.01)),
        p=(lambda p: p if p == "spectral" else float(p))(_merged(args, "si.p", 2.0)),
        eps_init=float(_merged(args, "si.eps_init", 1e-4)),
        distribution_weight=float(_merged(args, "si.distribution_weight", 0.0)),
    )
    opt = OptConfig(
        lr=float(_merged(args, "si.lr", 0.5)),
        epochs=int(_merged(args, "si.epochs", 5)),
        mask_refresh_period=int(_merged(args, "si.mask_refresh_period", 8)),
        optimize_delta=str(_merged(args, "si.optimize_delta", "true")).lower()
        in ("1", "true", "yes"),
        optimize_attention=str(_merged(args, "si.optimize_attention", "true")).lower()
        in ("1", "true", "yes"),
    )
    return SiConfig(stage=str(_merged(args, "si", None)
                              or _merged(args, "si.stage", "distribution")),
                    feature=feature, opt=opt)


def _out_dir(args) -> Path:
    out = Path(_merged(args, "out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _all_scores(model: Model, transforms, d_base) -> np.ndarray:
    """Flat activation-aware scores across every prunable projection."""
    chunks = []
    for layer in model.layers:
        t = transforms[layer.name]
        if isinstance(layer, Linear):
            d = importance.fast_refresh(d_base[layer.name], t.s)
            chunks.append(importance.score_activation(layer.weight, d).ravel())
        else:
            d = d_base[layer.name]
            chunks.append(importance.score_activation(
                layer.wq * t.s_a[:, None], d).ravel())
            chunks.append(importance.score_activation(
                layer.wk / t.s_a[:, None], d).ravel())
    return np.concatenate(chunks)[None, :]


# --- subcommands ---------------------------------------------------------------

def cmd_make_toy(args) -> int:
    toy = _merged(args, "toy")
    if not toy:
        raise ConfigError("missing required key: toy")
    model = _load_model(args)
    out = Path(_merged(args, "out_dir", ".")) / "toy_model.sif" \
        if args.out is None else Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    print(f"wrote {out} ({len(model.layers)} layers, toy={toy})")
    return 0


def cmd_induce(args) -> int:
    model = _load_model(args)
    calib = _load_calib(args, model)
    pattern = masking.parse_pattern(str(_merged(args, "pattern", "0.5")))
    si = _si_config(args)
    if si.stage == "off":
        raise ConfigError("induce requires si stage != off")
    out = _out_dir(args)

    transforms, traces = evalkit.run_induction(model, calib, pattern, si)
    from .distribution import absorb
    absorbed = absorb(model, transforms)
    save_model(absorbed, out / "absorbed_model.sif")
    save_transforms(transforms, out / "transforms.sif")
    rows = [(stage, step, val) for stage, points in traces.items()
            for step, val in points]
    write_csv(out / "trace.csv", ["stage", "step", "objective"], rows)
    reporting.trace_figure(traces, out / "trace.png")
    print(f"wrote {out / 'absorbed_model.sif'}, transforms and objective trace")
    return 0


def cmd_prune(args) -> int:
    model = _load_model(args)
    calib = _load_calib(args, model)
    pattern = masking.parse_pattern(str(_merged(args, "pattern", "0.5")))
    metric = str(_merged(args, "metric", "wanda"))
    out = _out_dir(args)

    inputs = layer_inputs(model, calib)
    d_base = {name: importance.hessian_diag(a) for name, a in inputs.items()}
    masks = evalkit.baseline_masks(model, d_base, pattern, metric)

    pruned = model.copy()
    reports = []
    for layer in pruned.layers:
        if isinstance(layer, Linear):
            layer.weight *= masks[layer.name]
            reports.append(evalkit.sparsity_report(layer.name,
                                                   masks[layer.name], pattern))
        else:
            layer.wq *= masks[layer.name + "#q"]
            layer.wk *= masks[layer.name + "#k"]
            reports.append(evalkit.sparsity_report(layer.name + "#q",
                                                   masks[layer.name + "#q"], pattern))
            reports.append(evalkit.sparsity_report(layer.name + "#k",
                                                   masks[layer.name + "#k"], pattern))
    save_model(pruned, out / "pruned_model.sif")
    write_csv(out / "sparsity.csv",
              ["layer", "zeros", "total", "rate", "pattern_ok"],
              [(r.layer_name, r.zeros, r.total, f"{r.rate:.6f}", r.pattern_ok)
               for r in reports])
    print(f"wrote {out / 'pruned_model.sif'} and sparsity report")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args)
    calib = _load_calib(args, model)
    pattern = masking.parse_pattern(str(_merged(args, "pattern", "0.5")))
    metric = str(_merged(args, "metric", "wanda-fast"))
    si = _si_config(args)
    out = _out_dir(args)

    result = evalkit.compare_pipelines(model, calib, pattern, metric, si)
    rows = [(r["layer"], f"{r['frob_no_si']:.12g}", f"{r['frob_si']:.12g}",
             f"{r['rel_no_si']:.12g}", f"{r['rel_si']:.12g}")
            for r in result["rows"]]
    totals = result["totals"]
    rows.append(("TOTAL", f"{totals['frob_no_si']:.12g}",
                 f"{totals['frob_si']:.12g}", "", f"{totals['ratio']:.12g}"))
    write_csv(out / "compare.csv",
              ["layer", "frob_no_si", "frob_si", "rel_no_si", "rel_si_or_ratio"],
              rows)
    reporting.distortion_figure(result["rows"], out / "compare.png")

    inputs = layer_inputs(model, calib)
    d_base = {name: importance.hessian_diag(a) for name, a in inputs.items()}
    from .distribution import identity_transforms
    for tag, tr in (("no_si", identity_transforms(model)),
                    ("si", result["transforms"])):
        hist = evalkit.score_histogram(_all_scores(model, tr, d_base), 64)
        write_csv(out / f"scores_hist_{tag}.csv",
                  ["bin_low", "bin_high", "count"],
                  [(f"{lo:.12g}", f"{hi:.12g}", c) for lo, hi, c in hist])
        reporting.histogram_figure(hist, out / f"scores_hist_{tag}.png",
                                   f"importance distribution ({tag})")

    print(f"SI/no-SI distortion ratio: {totals['ratio']:.6f} "
          f"(absorb rel err {result['absorb_rel_err']:.3g}); reports in {out}")
    return 0


def cmd_bench(args) -> int:
    d_in = int(args.d_in)
    n = int(args.n)
    iters = int(args.iters)
    out = _out_dir(args)
    result = importance.benchmark_refresh(d_in, n, iters,
                                          seed=int(_merged(args, "seed", 0)))
    write_csv(out / "bench.csv",
              ["method", "update_time_s", "avg_time_per_iter_s", "speedup"],
              [("classical_recompute", f"{result['classical_s'] * iters:.6f}",
                f"{result['classical_s']:.9f}", "1.00"),
               ("fast_update", f"{result['fast_s'] * iters:.6f}",
                f"{result['fast_s']:.9f}", f"{result['speedup']:.2f}")])
    reporting.bench_figure(result, out / "bench.png")
    print(f"fast refresh speedup: {result['speedup']:.2f}x "
          f"(fast-path matmuls: {result['fast_matmuls']}); wrote {out / 'bench.csv'}")
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siprune",
        description="Post-training sparsity toolkit with absorbable "
                    "scale/shift induction.",
        epilog="Config file: flat key=value lines; keys: "
               + ", ".join(sorted(_CONFIG_KEYS)) + ". Flags override the file.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, calib=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--model", help="model file path")
        p.add_argument("--toy", help="toy model spec: depth,d_model,d_hidden")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        if calib:
            p.add_argument("--calib", help="calibration tensor file")
            p.add_argument("--calib-synth", dest="calib_synth", type=int,
                           help="synthetic calibration sample count")
            p.add_argument("--pattern", help="sparsity pattern: rate or n:m")
            p.add_argument("--metric", choices=importance.METRICS)

    def si_opts(p):
        p.add_argument("--si", choices=evalkit.STAGES, dest="si")
        p.add_argument("--epochs", dest="epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--p", dest="p")

    p = sub.add_parser("make-toy", help="write a seeded toy model file")
    common(p, calib=False)
    p.add_argument("--out", help="output model path")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("induce", help="learn and absorb induction transforms")
    common(p)
    si_opts(p)
    p.set_defaults(func=cmd_induce)

    p = sub.add_parser("prune", help="score, mask and write a pruned model")
    common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="compare pruning with and without induction")
    common(p)
    si_opts(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="fast refresh vs classical recompute timing")
    common(p, calib=False)
    p.add_argument("--d-in", dest="d_in", type=int, default=2048)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--iters", type=int, default=128)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args._config = load_config(args.config) if getattr(args, "config", None) else {}
    # flag-to-config bridging for si.* overrides
    if getattr(args, "lam", None) is not None:
        args._config["si.lambda"] = str(args.lam)
    if getattr(args, "alpha", None) is not None:
        args._config["si.alpha"] = str(args.alpha)
    if getattr(args, "p", None) is not None:
        args._config["si.p"] = str(args.p)
    if getattr(args, "lr", None) is not None:
        args._config["si.lr"] = str(args.lr)
    if getattr(args, "epochs", None) is not None:
        args._config["si.epochs"] = str(args.epochs)
    try:
        return args.func(args)
    except SiPruneError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
