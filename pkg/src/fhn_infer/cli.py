"""``fhn-infer`` command line.

Exit codes: 0 on success, 1 on configuration errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as dsmod
from . import experiments as ex
from .config import ExperimentConfig, load_config, validate
from .errors import ConfigError, FHNError
from .fhn import ThetaPair, TimeSeries, integrate, write_grid_csv, write_series_csv
from .stochastic import NoiseParams, RngStream, ar1_path, substream_id

log = logging.getLogger("fhn_infer")


def _out_dir(cfg: ExperimentConfig, experiment: str, explicit: str | None = None) -> Path:
    path = Path(explicit) if explicit else Path(cfg.output_dir) / experiment / cfg.config_hash()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(path: Path, cfg: ExperimentConfig, command: str, files: list[str], **extra) -> None:
    doc = {"command": command, "config_hash": cfg.config_hash(), "config": cfg.to_dict(),
           "files": sorted(files), **extra}
    with open(path / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=list)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Fold the generic command-line overrides into the configuration."""
    mapping = {
        "t_end": ("sim", "t_end"), "dt_out": ("sim", "dt_out"), "gamma": ("sim", "gamma"),
        "zeta": ("sim", "zeta"), "n_train": ("data", "n_train"), "n_valid": ("data", "n_valid"),
        "n_test": ("data", "n_test"), "family": ("network", "family"),
        "epochs": ("train", "epochs_clean"), "epochs_noisy": ("train", "epochs_noisy"),
        "seed_init": ("seeds", "init"), "seed_train": ("seeds", "train"),
        "seed_test": ("seeds", "test"), "resolution": ("study", "grid_resolution"),
    }
    for attr, (section, key) in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            try:
                cfg = cfg.override(section, **{key: val})
            except ValueError as exc:
                raise ConfigError(f"--{attr.replace('_', '-')}: {exc}") from exc
    if getattr(args, "output", None):
        cfg = ExperimentConfig(**{**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
                                  "output_dir": args.output})
    validate(cfg)
    return cfg


# -- commands -------------------------------------------------------------------------

def cmd_simulate(cfg, args):
    theta = ThetaPair(*args.theta)
    series = integrate(theta, cfg.sim.constants(), cfg.sim.rtol, cfg.sim.atol)
    extra = None
    if args.with_noise:
        params = NoiseParams(args.sigma, args.rho)
        noise = ar1_path(RngStream(args.noise_seed, substream_id(0, tag=5)), params,
                         cfg.sim.dt_out, len(series))
        extra = {"d": series.values + noise}
    out = Path(args.out) if args.out else _out_dir(cfg, "simulate") / "series.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_series_csv(out, series, extra)
    print(out)


def cmd_gen_data(cfg, args):
    ws = ex.Workspace(cfg)
    ds = ws.dataset(args.role, args.n, noisy=args.noisy, joint=args.joint)
    ds = dsmod.convert_features(ds, dsmod.FeatureKind.parse(args.features or cfg.data.feature_kind))
    out = Path(args.out) if args.out else _out_dir(cfg, "gen-data") / f"{args.role}.fhnds"
    out.parent.mkdir(parents=True, exist_ok=True)
    dsmod.save_dataset(out, ds)
    if args.csv:
        dsmod.export_csv(out.with_suffix(".csv"), ds)
    print(out)


def _load_or_build(cfg, path, role, noisy=False):
    if path:
        return dsmod.load_dataset(path)
    return ex.Workspace(cfg).dataset(role, noisy=noisy)


def cmd_train(cfg, args):
    train_ds = _load_or_build(cfg, args.train_data, "train", args.noisy)
    valid_ds = _load_or_build(cfg, args.valid_data, "valid", args.noisy)
    epochs = cfg.train.epochs_noisy if args.noisy and args.epochs is None else cfg.train.epochs_clean
    model = ex.fit_model(cfg, cfg.network.family, train_ds, valid_ds, epochs)
    out = _out_dir(cfg, "train", args.out)
    model.save(out / "model.fhnnn")
    model.history.write_csv(out / "history.csv")
    _manifest(out, cfg, "train", ["model.fhnnn", "model.fhnnn.scaler.json", "history.csv"],
              family=cfg.network.family, epochs=epochs, noisy=args.noisy)
    print(out / "model.fhnnn")


def cmd_evaluate(cfg, args):
    model = ex.Model.load(args.model)
    test = _load_or_build(cfg, args.test_data, "test", args.noisy)
    report = ex.evaluate_model(model, test, {"model": str(args.model), "config_hash": cfg.config_hash()})
    out = _out_dir(cfg, "evaluate", args.out)
    (out / "report.json").write_text(report.to_json())
    report.write_csv(out / "report.csv")
    _manifest(out, cfg, "evaluate", ["report.json", "report.csv"])
    print(report.to_json())


def _finish_table(cfg, name, rows, extra_files=None, **meta):
    out = _out_dir(cfg, name)
    ex.write_table(out / f"{name}.csv", rows)
    _manifest(out, cfg, name, [f"{name}.csv", *(extra_files or [])], **meta)
    print(out / f"{name}.csv")
    return out


def cmd_sweep(cfg, args):
    rows = ex.run_sweep(ex.Workspace(cfg), args.family or cfg.network.family)
    _finish_table(cfg, "sweep", rows)


def cmd_noise_study(cfg, args):
    family = args.family or cfg.network.family
    rows, scatter = ex.run_noise_study(ex.Workspace(cfg), family, args.n_values)
    out = _out_dir(cfg, "noise-study")
    files = []
    for (n, scen), (truth, pred) in sorted(scatter.items()):
        name = f"scatter_n{n}_{scen.replace('/', '-')}.csv"
        ex.write_table(out / name, ex.scatter_rows(truth, pred))
        files.append(name)
    _finish_table(cfg, "noise-study", rows, files, family=family)


def cmd_window_study(cfg, args):
    family = args.family or cfg.network.family
    _finish_table(cfg, "window-study", ex.run_window_study(ex.Workspace(cfg), family), family=family)


def cmd_joint(cfg, args):
    _finish_table(cfg, "joint", ex.run_joint(ex.Workspace(cfg), args.n_values, args.features))


def cmd_resimulate(cfg, args):
    ws = ex.Workspace(cfg)
    test = _load_or_build(cfg, args.test_data, "test", args.noisy)
    if args.model:
        pred = ex.Model.load(args.model).predict(test)
    else:
        raise ConfigError("resimulate needs --model")
    results = ex.run_resimulate(ws, test, pred)
    out = _out_dir(cfg, "resimulate", args.out)
    rows, files = [], []
    dt = cfg.sim.dt_out
    for r in results:
        name = f"series_p{r.percentile:g}.csv"
        sim = r.simulated if r.simulated is not None else np.full_like(r.data, np.nan)
        write_series_csv(out / name, TimeSeries(dt, r.data), {"simulated": sim})
        files.append(name)
        rows.append({"percentile": r.percentile, "index": r.index, "param_mse": r.param_mse,
                     "theta0": r.truth[0], "theta1": r.truth[1], "theta0_hat": r.predicted[0],
                     "theta1_hat": r.predicted[1], "squared_bias": r.squared_bias, "c_mse": r.c_mse,
                     "error": r.error, "config_hash": cfg.config_hash(), "seed": cfg.seeds.test})
    ex.write_table(out / "resimulate.csv", rows)
    _manifest(out, cfg, "resimulate", ["resimulate.csv", *files])
    print(out / "resimulate.csv")


def cmd_crossval(cfg, args):
    family = args.family or cfg.network.family
    rows = ex.run_crossval(ex.Workspace(cfg), family, args.seeds, args.k)
    _finish_table(cfg, "crossval", rows, family=family)


def cmd_spike_grid(cfg, args):
    ax0, ax1, cells = ex.run_spike_grid(ex.Workspace(cfg), threshold=args.threshold)
    out = _out_dir(cfg, "spike-grid")
    write_grid_csv(out / "spike-grid.csv", ax0, ax1, cells)
    _manifest(out, cfg, "spike-grid", ["spike-grid.csv"])
    print(out / "spike-grid.csv")


def cmd_loss_grid(cfg, args):
    ws = ex.Workspace(cfg)
    st = cfg.study
    if args.data:
        data = np.loadtxt(args.data, delimiter=",", skiprows=1, usecols=args.column, ndmin=1)
    else:
        noise = None if args.no_noise else NoiseParams(st.loss_noise_sigma, st.loss_noise_rho)
        data = ex.loss_grid_data(ws, ThetaPair(st.loss_theta0, st.loss_theta1), noise)
    if len(data) != cfg.sim.constants().n_t:
        raise ConfigError(f"data has {len(data)} points, expected {cfg.sim.constants().n_t}")
    ax0, ax1, loss = ex.run_loss_grid(ws, data, args.resolution, args.noise_sd,
                                      use_misfit=not args.no_misfit, use_prior=not args.no_prior)
    rows = [{"theta0": float(a), "theta1": float(b), "loss": float(loss[i, j])}
            for i, a in enumerate(ax0) for j, b in enumerate(ax1)]
    _finish_table(cfg, "loss-grid", rows)


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fhn-infer", description="Simulate, train and evaluate "
                                "parameter reconstruction maps for the FitzHugh-Nagumo model.")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--output", help="output root (overrides [output] dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def family(sp):
        sp.add_argument("--family", choices=("dense", "cnn"))

    def n_values(sp):
        sp.add_argument("--n-values", type=int, nargs="+")

    s = add("simulate", cmd_simulate, "integrate the ODE and write a t,u CSV")
    s.add_argument("--theta", type=float, nargs=2, default=(0.7, 0.8), metavar=("T0", "T1"))
    s.add_argument("--t-end", type=float)
    s.add_argument("--dt-out", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--zeta", type=float)
    s.add_argument("--with-noise", action="store_true")
    s.add_argument("--sigma", type=float, default=0.07)
    s.add_argument("--rho", type=float, default=0.8)
    s.add_argument("--noise-seed", type=int, default=0)
    s.add_argument("--out")

    s = add("gen-data", cmd_gen_data, "build and save a dataset")
    s.add_argument("--role", choices=("train", "valid", "test"), default="train")
    s.add_argument("--n", type=int)
    s.add_argument("--noisy", action="store_true")
    s.add_argument("--joint", action="store_true", help="targets include (sigma, rho)")
    s.add_argument("--features", help="time, fourier or time_and_fourier")
    s.add_argument("--csv", action="store_true", help="also export a CSV copy")
    s.add_argument("--out")

    s = add("train", cmd_train, "train one network")
    family(s)
    s.add_argument("--train-data")
    s.add_argument("--valid-data")
    s.add_argument("--noisy", action="store_true")
    s.add_argument("--n-train", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed-init", type=int)
    s.add_argument("--out", help="output directory")

    s = add("evaluate", cmd_evaluate, "evaluate a saved model on the test set")
    s.add_argument("--model", required=True)
    s.add_argument("--test-data")
    s.add_argument("--noisy", action="store_true")
    s.add_argument("--out", help="output directory")

    s = add("sweep", cmd_sweep, "architecture sweep")
    family(s)
    s.add_argument("--epochs", type=int)

    s = add("noise-study", cmd_noise_study, "clean/noisy train-test scenarios")
    family(s)
    n_values(s)

    s = add("window-study", cmd_window_study, "partial-observation study")
    family(s)

    s = add("joint", cmd_joint, "joint ODE and noise parameter estimation")
    n_values(s)
    s.add_argument("--features", nargs="+")

    s = add("resimulate", cmd_resimulate, "re-integrate at predicted parameters")
    s.add_argument("--model")
    s.add_argument("--test-data")
    s.add_argument("--noisy", action="store_true")
    s.add_argument("--out", help="output directory")

    s = add("crossval", cmd_crossval, "k-fold cross-validation over init seeds")
    family(s)
    s.add_argument("--k", type=int)
    s.add_argument("--seeds", type=int, nargs="+")

    s = add("spike-grid", cmd_spike_grid, "spike rate and duration raster")
    s.add_argument("--resolution", type=int)
    s.add_argument("--threshold", type=float)

    s = add("loss-grid", cmd_loss_grid, "negative log-posterior on a theta grid")
    s.add_argument("--data", help="CSV series to fit (default: synthetic data)")
    s.add_argument("--column", type=int, default=1, help="data column in --data")
    s.add_argument("--loss-resolution", dest="resolution", type=int)
    s.add_argument("--noise-sd", type=float)
    s.add_argument("--no-noise", action="store_true", help="synthetic data without noise")
    s.add_argument("--no-prior", action="store_true")
    s.add_argument("--no-misfit", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else load_config()
        # loss-grid's own resolution flag is separate from the spike raster's
        if args.command == "loss-grid":
            ns = argparse.Namespace(**{k: v for k, v in vars(args).items() if k != "resolution"})
            cfg = _apply_overrides(cfg, ns)
        else:
            cfg = _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (FHNError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
