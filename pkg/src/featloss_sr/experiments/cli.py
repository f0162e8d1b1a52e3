"""``featloss-sr`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""
import argparse
import json
import os
import sys

from ..errors import ConfigError, DataError, DivergenceError, ShapeError
from ..tensor import backend
from . import report as rep

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def _plan(args):
    from .plans import ExperimentPlan

    d = _read_json(args.config)
    if getattr(args, "kind", None):
        d["kind"] = args.kind
    if args.seed is not None:
        d["seed"] = args.seed
    if args.mode is not None:
        d["mode"] = args.mode
    try:
        return ExperimentPlan.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_phantom(args):
    from ..data.phantom import PhantomSpec
    from .runner import cmd_phantom as run

    spec = PhantomSpec.from_dict(_read_json(args.config)) if args.config else PhantomSpec()
    names = run(spec, args.out, n_cases=args.cases, seed=args.seed or 0)
    print(f"wrote {len(names)} phantom case(s) to {args.out}")
    return EXIT_OK


def cmd_degrade(args):
    from .runner import cmd_degrade as run

    shape = run(args.input, args.factor, args.output)
    print(f"wrote {args.output} with shape {shape}")
    return EXIT_OK


def cmd_run(args):
    from .runner import any_diverged, cmd_run as run

    plan = _plan(args)

    def progress(r):
        if args.verbose:
            print(f"  epoch {r.epoch} {r.stage}: train L={r.train['L']:.6g} val PSNR={r.val_psnr:.3f}", flush=True)

    result = run(plan, args.out, progress=progress)
    for m in result.report["models"]:
        print(f"{m['slug']}: {m['status']}")
    print(f"config hash {result.report['config_hash']}")
    return EXIT_DIVERGED if any_diverged(result) else EXIT_OK


def cmd_eval(args):
    from ..model import load_checkpoint
    from .runner import NetworkModel, build_corpus, cmd_eval as run, pairs_for
    from .plans import tap_label

    plan = _plan(args)
    net, side = load_checkpoint(args.checkpoint)
    factor = args.factor or plan.data.factor
    if net.config.scale != factor:
        raise ConfigError(f"checkpoint scale {net.config.scale} does not match factor {factor}")
    corpus = build_corpus(plan.data)
    pairs = pairs_for(corpus, corpus.split.test, factor)
    taps = (side.get("loss") or {}).get("active_taps", [])
    label = os.path.basename(args.checkpoint)
    with backend.compute_mode(plan.mode):
        ev = run({label: (NetworkModel(net), tap_label(taps))}, pairs, factor)
    os.makedirs(args.out, exist_ok=True)
    rep.write_text(os.path.join(args.out, "metrics.csv"), rep.csv_text(ev["rows"], rep.METRIC_COLUMNS))
    rep.write_text(os.path.join(args.out, "spectrum.csv"), rep.csv_text(ev["spectrum"], rep.SPECTRUM_COLUMNS))
    rep.write_text(os.path.join(args.out, "report.json"),
                   rep.json_text({"checkpoint": side, "metrics": ev["aggregates"], "spectrum": ev["spectrum"]}))
    for a in ev["aggregates"]:
        print(f"{a['model']} b={a['b_value']:g}: PSNR {a['psnr']:.3f} SSIM {a['ssim']:.4f} (n={a['n']})")
    return EXIT_OK


def cmd_qc(args):
    from .runner import cmd_qc as run, load_case

    sets = {"dataset": load_case(args.dwi, args.bvals, args.bvecs, args.mask)}
    if args.compare:
        sets["compare"] = load_case(args.compare, args.bvals, args.bvecs, args.mask)
    out = run(sets, antipodal=not args.no_antipodal)
    os.makedirs(args.out, exist_ok=True)
    rep.write_text(os.path.join(args.out, "qc.json"), rep.json_text(out))
    for name, s in out["datasets"].items():
        print(f"{name}: neighbor correlation {s['neighbor_correlation']:.6f}, "
              f"diffusion contrast {s['diffusion_contrast']:.6f}")
    return EXIT_OK


def cmd_spectrum(args):
    from ..data import nifti
    from .runner import IMAGE_SPECTRUM_COLUMNS, spectrum_table
    from .spectrum import gradient_probe

    strides = [int(s) for s in args.strides.split(",")]
    os.makedirs(args.out, exist_ok=True)
    if args.probe:
        rows = []
        with backend.compute_mode(args.mode or "fast"):
            for seed in range(args.seed or 0, (args.seed or 0) + args.probe):
                for s in strides:
                    for tap, r in gradient_probe(seed, taps=(1, 4), stride=s).items():
                        rows.append({"source": f"probe-tap{tap}", "slice": seed, "volume": 0, "stride": s, "ratio": r})
    else:
        if not args.input:
            raise ConfigError("spectrum needs --input or --probe")
        rows = spectrum_table(nifti.load(args.input).data, strides, source=os.path.basename(args.input))
    rep.write_text(os.path.join(args.out, "spectrum.csv"), rep.csv_text(rows, IMAGE_SPECTRUM_COLUMNS))
    print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'spectrum.csv')}")
    return EXIT_OK


def cmd_stats(args):
    from .stats import stat_tests

    rows = rep.read_metrics_csv(args.csv)

    def series(model):
        return {(r["case"], r["volume"], r["slice"], r["factor"]): r[args.metric] for r in rows if r["model"] == model}

    a, b = series(args.a), series(args.b)
    keys = sorted(set(a) & set(b))
    if not keys:
        raise DataError(f"no paired rows for models {args.a!r} and {args.b!r}")
    results = stat_tests([a[k] for k in keys], [b[k] for k in keys], m=args.m)
    out = {"a": args.a, "b": args.b, "metric": args.metric, "n": len(keys), "tests": [r.to_dict() for r in results]}
    os.makedirs(args.out, exist_ok=True)
    rep.write_text(os.path.join(args.out, "stats.json"), rep.json_text(out))
    for r in results:
        print(f"{r.test}: statistic {r.statistic:.6g}, p {r.p_raw:.6g}, corrected {r.p_corrected:.6g} (m={r.m})")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--mode", choices=("reference", "fast"), default=None)

    p = argparse.ArgumentParser(prog="featloss-sr", description="Feature-loss super-resolution experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write synthetic phantom cases")
    s.add_argument("--cases", type=int, default=1)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("degrade", parents=[common], help="bicubic-degrade a NIfTI volume")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--factor", type=int, default=2)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("run", parents=[common], help="train the models of an experiment plan")
    s.add_argument("--kind", choices=("ablation", "isolation", "baseline", "resolution"))
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out cases")
    s.add_argument("--checkpoint", required=True, help="checkpoint path without extension")
    s.add_argument("--factor", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("qc", parents=[common], help="diffusion QC scores")
    s.add_argument("--dwi", required=True)
    s.add_argument("--bvals", required=True)
    s.add_argument("--bvecs", required=True)
    s.add_argument("--mask")
    s.add_argument("--compare", help="second DWI NIfTI (e.g. an SR result) scored side by side")
    s.add_argument("--no-antipodal", action="store_true", help="strict neighbor matching without +/-g symmetry")
    s.set_defaults(func=cmd_qc)

    s = sub.add_parser("spectrum", parents=[common], help="grid-artifact band ratios")
    s.add_argument("--input", help="NIfTI volume; every axial slice is analysed")
    s.add_argument("--probe", type=int, default=0, help="number of seeds for the feature-gradient probe")
    s.add_argument("--strides", default="2,4,8,16")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("stats", parents=[common], help="paired tests between two models in a metrics.csv")
    s.add_argument("--csv", required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--metric", default="psnr", choices=("mae", "mse", "psnr", "ssim"))
    s.add_argument("--m", type=int, default=1, help="number of comparisons for Bonferroni")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
