"""Command-line interface.

Exit codes: 0 success, 2 configuration/parameter error, 3 numerical error,
4 I/O error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from artifact.errors import (
    ArtifactError,
    ArtifactIOError,
    ConfigError,
    DegenerateScaleError,
    FormatError,
    NotFoundError,
    NumericalError,
    StageError,
)

log = logging.getLogger("artifact")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def exit_code_for(exc):
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, (ArtifactIOError, FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (NumericalError, NotFoundError, DegenerateScaleError)):
        return EXIT_NUMERICAL
    return EXIT_CONFIG


# -- helpers -------------------------------------------------------------------

def _config(args):
    from artifact.pipeline import load_config, resolve_config

    user = load_config(args.config) if args.config else {}
    if args.seed is not None:
        user["seed"] = args.seed
    return resolve_config(user)


def _record_for_file(out, command, config):
    from artifact.pipeline import RunRecorder

    out = Path(out)
    return RunRecorder(out.parent, command, config, record_name=f"{out.stem}.run.json")


def _parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _args_dict(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _dump(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- subcommands ---------------------------------------------------------------

def cmd_phantom_gen(args):
    from artifact.dataset import DatasetConfig, gen_dataset
    from artifact.pipeline import RunRecorder

    cfg = _config(args)
    dcfg = dict(cfg["dataset"])
    for key in ("n_train", "n_val", "n_flats"):
        if getattr(args, key) is not None:
            dcfg[key] = getattr(args, key)
    if args.shape:
        dcfg["shape"] = [int(v) for v in args.shape.split("x")]
    dcfg["seed"] = cfg["seed"]
    dataset_cfg = DatasetConfig.from_dict(dcfg)
    out = Path(args.out)
    manifest = gen_dataset(dataset_cfg, out)
    rec = RunRecorder(out, "phantom-gen", {"dataset": dataset_cfg.to_dict(), "args": _args_dict(args)})
    rec.output(out / "manifest.json")
    for rel in manifest["files"]:
        rec.output(out / rel)
    rec.write()
    print(f"wrote {len(manifest['files'])} arrays to {out}")


def _train_overrides(cfg, args):
    u = cfg["unet"]
    for attr, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("alpha", "alpha"),
                      ("paste_prob", "paste_probability"), ("base_channels", "base_channels")):
        if getattr(args, attr, None) is not None:
            u[key] = getattr(args, attr)
    return cfg


def _bank(ws, args):
    from artifact.features import PatchBank

    if args.bank:
        ws.rec.input(args.bank)
        return PatchBank.load(args.bank)
    return ws.filament_bank()


def cmd_train(args):
    from artifact.neural.serialize import save_model
    from artifact.neural.train import train
    from artifact.pipeline import Workspace

    cfg = _train_overrides(_config(args), args)
    cfg["dataset_dir"] = args.data
    _parent(args.out)
    rec = _record_for_file(args.out, "train", {**cfg, "args": _args_dict(args)})
    ws = Workspace(cfg, Path(args.out).parent, rec)
    bank = _bank(ws, args)
    log_path = Path(args.out).with_suffix(".log.jsonl")
    model, history = train(ws.training_set(), seed=cfg["seed"], log_path=log_path,
                           **ws.train_kwargs(bank))
    save_model(model, args.out)
    rec.output(args.out)
    rec.output(log_path, volatile=True)
    rec.write()
    if history:
        print(f"final train loss {history[-1]['train_loss']:.6f}, val loss {history[-1]['val_loss']}")


def cmd_ensemble_train(args):
    from artifact.ensemble import train_ensemble
    from artifact.pipeline import RunRecorder, Workspace

    cfg = _train_overrides(_config(args), args)
    cfg["dataset_dir"] = args.data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecorder(out, "ensemble-train", {**cfg, "args": _args_dict(args)})
    ws = Workspace(cfg, out, rec)
    bank = _bank(ws, args)
    ens, histories = train_ensemble(ws.training_set(), cfg["seed"], args.members, **ws.train_kwargs(bank))
    ens.save(out)
    rec.output(out / "ensemble.json")
    for i in range(ens.size):
        rec.output(out / f"member_{i:02d}.bin")
    rec.write()
    print(f"trained {ens.size} members into {out}")


def cmd_infer(args):
    from artifact.imaging import load_npy, save_npy
    from artifact.neural.serialize import load_model
    from artifact.neural.train import corrected_transmission

    model = load_model(args.model)
    T = corrected_transmission(model, load_npy(args.shot), load_npy(args.flat), args.floor,
                               percentile=args.percentile)
    _parent(args.out)
    save_npy(T, args.out)
    rec = _record_for_file(args.out, "infer", _args_dict(args))
    for p in (args.model, args.shot, args.flat):
        rec.input(p)
    rec.output(args.out)
    rec.write()


def cmd_fourier(args):
    from artifact.fourier import FourierFilterConfig, filter_and_reconstruct
    from artifact.imaging import load_npy, save_npy

    cfg = FourierFilterConfig(args.radius, args.percentile, not args.include_dc_region,
                              not args.threshold_before_mask)
    T = filter_and_reconstruct(load_npy(args.shot), load_npy(args.flat), cfg, args.floor)
    _parent(args.out)
    save_npy(T, args.out)
    rec = _record_for_file(args.out, "fourier", _args_dict(args))
    rec.input(args.shot)
    rec.input(args.flat)
    rec.output(args.out)
    rec.write()


def cmd_dffn(args):
    from artifact.dffn import TvFitConfig, build_eff_model, dffn_reconstruct, fit_weights
    from artifact.imaging import as_mask, load_npy, save_npy

    flat_files = sorted(Path(args.flats).glob("*.npy"))
    if len(flat_files) < 2:
        raise ArtifactIOError(f"need at least 2 flat NPY files in {args.flats}")
    model = build_eff_model([load_npy(f) for f in flat_files], args.S, args.pa_percentile, args.seed or 0)
    shot = load_npy(args.shot)
    mask = as_mask(load_npy(args.mask), shot.shape) if args.mask else None
    cfg = TvFitConfig(args.tolerance, args.max_iterations, mask, floor=args.floor)
    fit = fit_weights(shot, model, cfg)
    T = dffn_reconstruct(shot, model, cfg, fit.weights)
    _parent(args.out)
    save_npy(T, args.out)
    rec = _record_for_file(args.out, "dffn", _args_dict(args))
    for f in flat_files:
        rec.input(f)
    rec.input(args.shot)
    if args.mask:
        rec.input(args.mask)
    rec.output(args.out)
    if args.report:
        from artifact.pipeline import write_json

        _parent(args.report)
        write_json(args.report, {**model.to_dict(), **fit.to_dict()})
        rec.output(args.report)
    rec.write()
    print(f"K = {model.K}, weights = {fit.weights.tolist()}")


def _print_table(report):
    for case, c in report["cases"].items():
        for method, row in c["methods"].items():
            cells = " ".join(f"{k}={row[k]:.4g}" for k in ("mssim", "psnr", "mse", "sigma_t_outside", "rmspe")
                             if isinstance(row.get(k), float))
            print(f"{case:>8} {method:>16} {cells}")


def cmd_inject_test(args):
    from artifact.pipeline import run_injection_test

    _print_table(run_injection_test(_config(args), args.out))


def cmd_compare(args):
    from artifact.pipeline import run_compare

    _print_table(run_compare(_config(args), args.out, args.case))


def cmd_shock_test(args):
    from artifact.pipeline import run_shock_generalization

    _print_table(run_shock_generalization(_config(args), args.out))


def cmd_eval(args):
    from artifact.imaging import Roi, load_npy, stat_outside_roi
    from artifact.metrics import EvalReport, FilamentSpec, measure_filament_length, mse, mssim, psnr, rmspe
    from artifact.pipeline import write_csv, write_json

    truth, test = load_npy(args.truth), load_npy(args.test)
    roi = Roi.parse(args.roi).check_inside(truth.shape)
    report = EvalReport(
        mssim=mssim(test, truth, roi, data_range=args.data_range),
        psnr=psnr(test, truth, roi, peak=args.data_range),
        mse=mse(test, truth, roi),
        sigma_t_outside=stat_outside_roi(test, roi)[1],
    )
    rows = []
    if args.filaments:
        try:
            specs = json.loads(Path(args.filaments).read_text())
        except OSError as exc:
            raise ArtifactIOError(f"cannot read {args.filaments}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.filaments} is not valid JSON: {exc}") from exc
        background = args.background
        if background is None:
            background = float(np.median(test[~roi.mask(test.shape)]))
        truths = []
        for d in specs:
            spec = FilamentSpec.from_dict(d)
            length = measure_filament_length(test, spec, background, mode=args.length_mode)
            report.filament_lengths.append((spec.id, length))
            rows.append([spec.id, length, d.get("true_length")])
            truths.append(d.get("true_length"))
        if truths and all(t is not None for t in truths):
            report.rmspe = rmspe([v for _, v in report.filament_lengths], truths)
    _parent(args.out)
    write_json(args.out, report.to_dict())
    rec = _record_for_file(args.out, "eval", _args_dict(args))
    rec.input(args.truth)
    rec.input(args.test)
    rec.output(args.out)
    if rows:
        csv_path = Path(args.out).with_name(Path(args.out).stem + "_lengths.csv")
        write_csv(csv_path, ["id", "length_px", "true_length_px"], rows)
        rec.output(csv_path)
    rec.write()
    _dump(report.to_dict())


def cmd_ensemble_entropy(args):
    from artifact.ensemble import EnsembleModel, EntropyConfig, ensemble_transmission, entropy_map, ood_flag
    from artifact.imaging import as_mask, load_npy, save_npy, save_png
    from artifact.pipeline import write_json

    ens = EnsembleModel.load(args.models)
    shot, flat = load_npy(args.shot), load_npy(args.flat)
    _, var = ensemble_transmission(ens, shot, flat, args.floor)
    h = entropy_map(var, EntropyConfig(args.variance_floor))
    _parent(args.out_entropy)
    save_npy(h, args.out_entropy)
    rec = _record_for_file(args.out_entropy, "ensemble-entropy", _args_dict(args))
    rec.input(args.models)
    rec.input(args.shot)
    rec.input(args.flat)
    rec.output(args.out_entropy)
    if args.out_png:
        _parent(args.out_png)
        save_png(h, args.out_png)  # entropy is already a log-variance scale
        rec.output(args.out_png)
    report = {"members": ens.size, "mean_entropy": float(h.mean()), "max_entropy": float(h.max())}
    if args.mask:
        report.update(ood_flag(h, as_mask(load_npy(args.mask), h.shape)))
        rec.input(args.mask)
    if args.report:
        _parent(args.report)
        write_json(args.report, report)
        rec.output(args.report)
    rec.write()
    _dump(report)


def cmd_extract_patches(args):
    from artifact.features import crop_and_normalize, phase_correlate, residual
    from artifact.imaging import Roi, load_npy, to_log
    from artifact.pipeline import RunRecorder

    shot, cold_mean = load_npy(args.shot), load_npy(args.cold_mean)
    region = Roi.parse(args.region)
    try:
        rects = [Roi(*r) for r in json.loads(Path(args.rects).read_text())]
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {args.rects}: {exc}") from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{args.rects} must be a JSON list of [x0, y0, w, h]: {exc}") from exc
    shift = phase_correlate(to_log(cold_mean), to_log(shot), region)
    bank = crop_and_normalize(residual(shot, cold_mean, shift), rects, source=str(args.shot))
    bank.save(args.out)
    rec = RunRecorder(args.out, "extract-patches", {**_args_dict(args), "shift": list(shift)})
    for p in (args.shot, args.cold_mean, args.rects):
        rec.input(p)
    rec.output(args.out)
    rec.write()
    print(f"shift (dx, dy) = {shift}; wrote {len(bank)} patches to {args.out}")


def cmd_ensemble_ood(args):
    from artifact.pipeline import run_ensemble_ood

    cfg = _config(args)
    if args.members is not None:
        cfg["ensemble"]["members"] = args.members
    report = run_ensemble_ood(cfg, args.out)
    for name, r in report["cases"].items():
        print(f"{name:>8} ratio={r['ratio']:.4g} flag={r['flag']}")


# -- parser ----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("phantom-gen", cmd_phantom_gen, "generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-flats", type=int)
    p.add_argument("--shape", help="HxW, e.g. 128x128")

    def train_opts(p):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--bank", help="patch bank directory (default: extracted from the dataset)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--paste-prob", type=float)
        p.add_argument("--base-channels", type=int)
        p.add_argument("--out", required=True)

    train_opts(add("train", cmd_train, "train one network"))
    p = add("ensemble-train", cmd_ensemble_train, "train an ensemble")
    train_opts(p)
    p.add_argument("--members", type=int, default=10)

    p = add("infer", cmd_infer, "corrected transmission with a trained network")
    p.add_argument("--model", required=True)
    p.add_argument("--shot", required=True)
    p.add_argument("--flat", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--floor", type=float, default=1e-6)
    p.add_argument("--percentile", type=float, default=90.0)

    p = add("fourier", cmd_fourier, "Fourier-filtered transmission")
    p.add_argument("--shot", required=True)
    p.add_argument("--flat", required=True)
    p.add_argument("--radius", type=int, default=20)
    p.add_argument("--percentile", type=float, default=99.5)
    p.add_argument("--include-dc-region", action="store_true",
                   help="include the masked region in the magnitude percentile")
    p.add_argument("--threshold-before-mask", action="store_true")
    p.add_argument("--floor", type=float, default=1e-6)
    p.add_argument("--out", required=True)

    p = add("dffn", cmd_dffn, "dynamic flat-field normalization")
    p.add_argument("--flats", required=True, help="directory of flat-field NPY files")
    p.add_argument("--shot", required=True)
    p.add_argument("--mask", help="NPY mask of pixels excluded from the TV objective")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--S", type=int, default=100)
    p.add_argument("--pa-percentile", type=float, default=95.0)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--max-iterations", type=int, default=400)
    p.add_argument("--floor", type=float, default=1e-6)

    for name, func, text in (("inject-test", cmd_inject_test, "injection test on all filament cases"),
                             ("compare", cmd_compare, "method comparison on one case"),
                             ("shock-test", cmd_shock_test, "shock generalization test"),
                             ("ensemble-ood", cmd_ensemble_ood, "ensemble entropy maps for every case")):
        p = add(name, func, text)
        p.add_argument("--out", required=True)
        if name == "compare":
            p.add_argument("--case")
        if name == "ensemble-ood":
            p.add_argument("--members", type=int)

    p = add("eval", cmd_eval, "metrics of a test image against ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--roi", required=True, help="x0,y0,width,height")
    p.add_argument("--filaments", help="JSON list of filament specs (optional true_length)")
    p.add_argument("--background", type=float)
    p.add_argument("--length-mode", default="half-peak", choices=["half-peak", "extremum"])
    p.add_argument("--data-range", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("ensemble-entropy", cmd_ensemble_entropy, "entropy map of an ensemble")
    p.add_argument("--models", required=True)
    p.add_argument("--shot", required=True)
    p.add_argument("--flat", required=True)
    p.add_argument("--mask", help="signal mask for the OOD report")
    p.add_argument("--out-entropy", required=True)
    p.add_argument("--out-png")
    p.add_argument("--report")
    p.add_argument("--variance-floor", type=float, default=1e-12)
    p.add_argument("--floor", type=float, default=1e-6)

    p = add("extract-patches", cmd_extract_patches, "log-residual patch bank")
    p.add_argument("--shot", required=True)
    p.add_argument("--cold-mean", required=True)
    p.add_argument("--region", required=True, help="registration region x0,y0,width,height")
    p.add_argument("--rects", required=True, help="JSON list of [x0, y0, w, h]")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                args.func(args)
        else:
            args.func(args)
    except (ArtifactError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        diagnostics = getattr(exc, "diagnostics", None) or getattr(getattr(exc, "cause", None), "diagnostics", None)
        if diagnostics:
            print(f"diagnostics: {json.dumps(diagnostics, default=str)}", file=sys.stderr)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
