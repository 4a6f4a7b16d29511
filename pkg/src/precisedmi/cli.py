"""Command-line surface.

Heavy imports happen inside the command handlers so that --deterministic
can pin the BLAS thread pools via environment variables before numpy is
loaded. Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical
failure.

A JSON config file passed with --config supplies defaults per command
(top-level key = command name, plus an optional "common" block); explicit
flags always win. The output directory may also come from the
PRECISEDMI_OUTDIR environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _usage_exit(message)


def _usage_exit(message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(1)


def _parse_floats(text):
    return tuple(float(v) for v in text.split(",") if v)


def build_parser():
    parser = _Parser(prog="precisedmi", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory "
                       "(default: $PRECISEDMI_OUTDIR or ./out-<command>)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file with per-command defaults")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded math; byte-identical reruns")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker processes for repeated-trial commands")

    p = sub.add_parser("train", help="train the single-voxel network")
    common(p)
    p.add_argument("--iterations", type=int, default=5000,
                   help="training iterations (desk default 5000; 25000 for full scale)")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--a-max", type=float, default=2.0)
    p.add_argument("--lr-schedule", choices=("cosine", "constant"), default="cosine")

    p = sub.add_parser("phantom", help="build the simulation phantom dataset")
    common(p)
    p.add_argument("--snr", type=float, default=12.1, help="target water SNR")
    p.add_argument("--tumor-size", type=int, default=2, choices=(1, 2, 4))
    p.add_argument("--with-b0", action="store_true", help="add the smooth B0 map")
    p.add_argument("--with-b1", action="store_true", help="add the B1 scale map")
    p.add_argument("--phantom-config", help="JSON file overriding the phantom layout")

    p = sub.add_parser("estimate", help="single-voxel maps, or the full "
                       "edge-regularized pipeline when lambda > 0")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--omega-max", type=float, default=100.0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--calibrate", action="store_true",
                   help="rescale amplitudes so the median water estimate "
                        "lands at a quarter of the trained range")
    p.add_argument("--a-max", type=float, default=2.0)

    p = sub.add_parser("baseline", help="comparison estimators")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", required=True, choices=("fourier", "fit", "aniso"))
    p.add_argument("--windows-factor", type=float, default=3.0)
    p.add_argument("--threshold-pct", type=float, default=10.0)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--source", choices=("fourier", "fit"), default="fourier",
                   help="maps the diffusion method smooths")

    p = sub.add_parser("montecarlo", help="per-voxel SNR sweep")
    common(p)
    p.add_argument("--weights")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--snr-levels", type=_parse_floats,
                   help="comma-separated; default 14 levels spanning 5..35")
    p.add_argument("--estimators", default="fourier,sve,precise")
    p.add_argument("--metabolite", default="glx")
    p.add_argument("--distortions", choices=("fixed", "resample"), default="fixed")
    p.add_argument("--precise-lambda", type=float, default=0.01)
    p.add_argument("--patch", type=int, default=9,
                   help="patch side carried by the precise estimator")
    p.add_argument("--tumor-size", type=int, default=2, choices=(1, 2, 4))

    p = sub.add_parser("crlb", help="closed-form vs numeric amplitude bounds")
    common(p)
    p.add_argument("--snr-levels", type=_parse_floats)
    p.add_argument("--amplitudes", type=_parse_floats,
                   default=(1.0, 0.28, 0.40, 0.10))

    p = sub.add_parser("errormap", help="repeated-noise bias/SD maps")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--omega-max", type=float, default=100.0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--mode", choices=("ground-truth", "estimated"),
                   default="estimated")
    return parser


def _apply_config_file(parser, argv):
    """Config file values become parser defaults; flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    try:
        config = json.loads(Path(known.config).read_text())
    except (OSError, ValueError) as exc:
        _usage_exit(f"cannot read config file {known.config}: {exc}")
    command = next((a for a in argv if not a.startswith("-")), None)
    merged = {}
    merged.update(config.get("common", {}))
    if command:
        merged.update(config.get(command, {}))
    for action in parser._subparsers._group_actions[0].choices.values():
        valid = {a.dest for a in action._actions}
        action.set_defaults(**{k: v for k, v in merged.items() if k in valid})


def _outdir(args):
    out = args.out or os.environ.get("PRECISEDMI_OUTDIR")
    if not out:
        out = f"out-{args.command}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolved_config(args):
    skip = {"command", "config", "out"}
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(vars(args).items()) if k not in skip}


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------

def cmd_train(args, out):
    from . import fileio, neuralnet as nn
    from .signal_model import SpectralGrid, default_priors
    from .synth import TrainingSampleSpec

    priors = default_priors()
    grid = SpectralGrid()
    spec = TrainingSampleSpec.default(priors, grid, a_max=args.a_max)
    config = nn.TrainConfig(batch_size=args.batch_size,
                            iterations=args.iterations,
                            learning_rate=args.learning_rate,
                            lr_schedule=args.lr_schedule,
                            seed=args.seed)
    params, history = nn.train_sve(
        spec, priors, grid, nn.ArchitectureSpec(), config,
        progress=lambda it, loss: print(f"iter {it}: loss {loss:.5f}"))
    fileio.save_weights(params, out / "weights.bin")
    fileio.write_csv(out / "loss_log.csv",
                     [{"iteration": i, "loss": l} for i, l in history],
                     ["iteration", "loss"])
    print(f"wrote {out / 'weights.bin'}")


def cmd_phantom(args, out):
    from . import fileio
    from .synth import B0Config, B1Config, PhantomConfig, build_phantom, phantom_to_dmi

    if args.phantom_config:
        cfg = PhantomConfig.from_dict(json.loads(Path(args.phantom_config).read_text()))
    else:
        cfg = PhantomConfig(tumor_size=args.tumor_size,
                            b0=B0Config() if args.with_b0 else None,
                            b1=B1Config() if args.with_b1 else None)
    phantom = build_phantom(cfg)
    dataset = phantom_to_dmi(phantom, args.snr, seed=args.seed)
    fileio.save_dataset(dataset, out)
    print(f"wrote dataset to {out} (noise sd {dataset.noise_sd:.5g})")


def _load_net_and_data(args):
    from . import fileio

    dataset = fileio.load_dataset(args.dataset)
    net = fileio.load_weights(args.weights)
    return dataset, net


def _write_maps(out, maps, prefix=""):
    from . import fileio
    from .signal_model import ratio_to_concentration

    for met, grid in maps.get("amplitude", {}).items():
        fileio.write_map(out, f"{prefix}amp_{met}", grid)
    for met, grid in maps.get("ratio", {}).items():
        fileio.write_map(out, f"{prefix}ratio_{met}", grid)
        fileio.write_map(out, f"{prefix}conc_{met}",
                         ratio_to_concentration(1.0) * grid)


def cmd_estimate(args, out):
    import numpy as np

    from . import fileio, neuralnet as nn
    from .edge_finetune import FinetuneConfig, finetune, precise_dmi, spatial_prior_for

    dataset, net = _load_net_and_data(args)
    if args.calibrate:
        dataset, factor = _calibrate(dataset, net, args.a_max)
        print(f"calibration factor {factor:.6g}")
    if args.lam > 0:
        prior = spatial_prior_for(dataset, args.omega_max)
        net2 = finetune(dataset, net, prior,
                        FinetuneConfig(lam=args.lam, epochs=args.epochs,
                                       seed=args.seed))
        fileio.save_weights(net2, out / "weights_finetuned.bin")
    else:
        net2 = net
    maps = precise_dmi(dataset, net2)
    _write_maps(out, {"amplitude": maps.amplitude, "ratio": maps.ratio})
    fileio.write_container(out / "unreliable.bin", "map",
                           maps.unreliable.astype(np.float32))
    print(f"wrote maps to {out}")


def _calibrate(dataset, net, a_max):
    import dataclasses

    import numpy as np

    from . import neuralnet as nn

    fids = dataset.fids.reshape(dataset.n_voxels, -1)[dataset.mask.ravel()]
    water = nn.predict_amplitudes(net, fids)[:, 0]
    median = float(np.median(water))
    if median <= 0:
        raise ValueError("cannot calibrate: median water estimate is zero")
    factor = (a_max / 4.0) / median
    scaled = dataclasses.replace(
        dataset,
        fids=(dataset.fids * factor).astype(dataset.fids.dtype),
        clean_fids=None, truth=None, noise_sd=None,
        calibration=dataset.calibration * factor)
    return scaled, factor


def cmd_baseline(args, out):
    from . import fileio
    from .baselines import DiffusionConfig, anisotropic_diffusion
    from .metrics import MapEstimator

    dataset = fileio.load_dataset(args.dataset)
    if args.method in ("fourier", "fit"):
        maps = MapEstimator(kind=args.method,
                            windows_factor=args.windows_factor).run(dataset)
        _write_maps(out, maps)
    else:
        source = MapEstimator(kind=args.source,
                              windows_factor=args.windows_factor).run(dataset)
        cfg = DiffusionConfig(threshold_pct=args.threshold_pct,
                              iterations=args.iterations)
        smoothed = {kind: {met: anisotropic_diffusion(grid, cfg)
                           for met, grid in source[kind].items()}
                    for kind in source}
        _write_maps(out, smoothed, prefix="aniso_")
    print(f"wrote maps to {out}")


def cmd_montecarlo(args, out):
    from . import fileio
    from .metrics import McConfig, default_snr_levels, monte_carlo, phantom_mc_context
    from .synth import PhantomConfig, build_phantom

    estimators = tuple(e for e in args.estimators.split(",") if e)
    net = None
    if any(e in ("sve", "precise") for e in estimators):
        if not args.weights:
            _usage_exit("--weights is required for the sve/precise estimators")
        net = fileio.load_weights(args.weights)
    mc = McConfig(trials=args.trials,
                  snr_levels=args.snr_levels or default_snr_levels(),
                  metabolite=args.metabolite,
                  estimators=estimators,
                  seed=args.seed,
                  distortions=args.distortions,
                  precise_lambda=args.precise_lambda,
                  patch=args.patch)
    phantom = build_phantom(PhantomConfig(tumor_size=args.tumor_size))
    ctx = phantom_mc_context(phantom, patch=mc.patch)
    result = monte_carlo(ctx, mc, net=net)
    columns = ["snr", "estimator", "trials", "sigma", "ratio_mean_err_pct",
               "ratio_sd_pct", "amp_mean_err_pct", "amp_sd_pct",
               "amp_sd_abs", "crlb_amp_abs", "failures"]
    fileio.write_csv(out / "montecarlo.csv", result.rows, columns)
    print(f"wrote {out / 'montecarlo.csv'} ({len(result.rows)} rows)")


def cmd_crlb(args, out):
    import math

    from . import fileio
    from .metrics import crlb_amplitude, default_snr_levels, fisher_crlb_numeric
    from .signal_model import FidParams, SpectralGrid, default_priors
    from .synth import nominal_water_peak

    priors = default_priors()
    grid = SpectralGrid()
    amps = args.amplitudes
    if len(amps) != len(priors):
        _usage_exit(f"--amplitudes needs {len(priors)} values")
    levels = args.snr_levels or default_snr_levels()
    peak = nominal_water_peak(priors, grid, amplitude=amps[0])
    rows = []
    for snr in levels:
        sigma = peak / (snr * math.sqrt(grid.n_points))
        numeric = fisher_crlb_numeric(
            priors, grid, FidParams(amplitudes=amps, noise_sd=sigma))
        nuis = fisher_crlb_numeric(
            priors, grid, FidParams(amplitudes=amps, noise_sd=sigma),
            include_nuisance=True)
        row = {"snr": float(snr), "sigma": float(sigma)}
        for i, p in enumerate(priors):
            row[f"formula_{p.name}"] = crlb_amplitude(
                p.t2star_s, grid.dwell_time_s, sigma, amps, index=i)
            row[f"numeric_{p.name}"] = float(numeric[i])
            row[f"nuisance_{p.name}"] = float(nuis[i])
        rows.append(row)
    columns = list(rows[0])
    fileio.write_csv(out / "crlb.csv", rows, columns)
    print(f"wrote {out / 'crlb.csv'}")


def cmd_errormap(args, out):
    from . import fileio
    from .metrics import (MapEstimator, bias_sd_maps, estimate_invivo_errors,
                          repeated_error_stacks, truth_ratio_maps)

    dataset, net = _load_net_and_data(args)
    if args.mode == "estimated":
        results = estimate_invivo_errors(dataset, net, args.lam, args.trials,
                                         seed=args.seed,
                                         omega_max=args.omega_max,
                                         n_jobs=args.jobs)
    else:
        if dataset.truth is None:
            _usage_exit("ground-truth mode requires a dataset with truth maps")
        est = {"precise": MapEstimator(kind="precise", net=net, lam=args.lam,
                                       omega_max=args.omega_max)}
        stacks = repeated_error_stacks(dataset, est, args.trials, args.seed,
                                       n_jobs=args.jobs)
        truth = {"ratio": truth_ratio_maps(dataset), "amplitude": dataset.truth}
        results = {kind: bias_sd_maps(stacks["precise"][kind], truth[kind])
                   for kind in ("ratio", "amplitude")}
    for kind, err in results.items():
        for met, grid in err.bias.items():
            fileio.write_map(out, f"bias_{kind}_{met}", grid)
        for met, grid in err.sd.items():
            fileio.write_map(out, f"sd_{kind}_{met}", grid)
    print(f"wrote error maps to {out} (mode {args.mode})")


HANDLERS = {
    "train": cmd_train,
    "phantom": cmd_phantom,
    "estimate": cmd_estimate,
    "baseline": cmd_baseline,
    "montecarlo": cmd_montecarlo,
    "crlb": cmd_crlb,
    "errormap": cmd_errormap,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    _apply_config_file(parser, argv)
    args = parser.parse_args(argv)

    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = "1"

    from .errors import DataError, NumericalError

    out = _outdir(args)
    try:
        HANDLERS[args.command](args, out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3

    from . import fileio

    inputs = {}
    for name in ("dataset", "weights", "phantom_config"):
        path = getattr(args, name, None)
        if path:
            target = Path(path)
            if target.is_dir():
                target = target / "dataset.json"
            inputs[name] = target
    fileio.write_manifest(out, args.command, _resolved_config(args), args.seed,
                          args.deterministic, inputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
