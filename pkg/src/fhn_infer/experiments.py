"""Experiment drivers: architecture sweeps, noise, window and joint studies,
re-simulation, cross-validation and the spike / loss landscapes.

Drivers return plain rows (lists of dicts) so tests can inspect them; the CLI
layer writes them out with :func:`write_table`.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import dataset as dsmod
from .config import ExperimentConfig
from .dataset import Dataset, DatasetSeeds, FeatureKind, Scaler
from .errors import FHNError, NonFiniteState, StepSizeUnderflow
from .fhn import ThetaPair, integrate, spike_grid
from .metrics import EvalReport, evaluate, fold_summary, kfold, mse_decompose
from .nn import History, Network, NetworkSpec, TrainConfig, cnn_spec, dense_spec, init_weights, train
from .stochastic import NoiseParams, RngStream, ar1_path, substream_id

log = logging.getLogger(__name__)

SCENARIOS = ("clean/clean", "clean/noisy", "noisy/noisy")
METRIC_KEYS = ("squared_bias", "c_mse", "median_ape", "r2")


class Workspace:
    """Builds and memoizes the datasets one configuration needs.

    The test set is generated once from ``seeds.test`` and shared by every
    experiment; noisy variants reuse the clean simulations.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._cache: dict = {}

    def seeds_for(self, role: str) -> DatasetSeeds:
        seed = {"train": self.cfg.seeds.train, "valid": self.cfg.seeds.valid,
                "test": self.cfg.seeds.test}[role]
        return DatasetSeeds(seed, self.cfg.seeds.noise_pool, self.cfg.noise.pool_size)

    def default_n(self, role: str) -> int:
        return {"train": self.cfg.data.n_train, "valid": self.cfg.data.n_valid,
                "test": self.cfg.data.n_test}[role]

    def dataset(self, role: str, n: int | None = None, noisy: bool = False,
                joint: bool = False) -> Dataset:
        """Unscaled time-series dataset for ``role`` in {train, valid, test}."""
        n = self.default_n(role) if n is None else n
        key = (role, n, noisy, joint)
        if key not in self._cache:
            if noisy:
                clean = self.dataset(role, n)
                ds = dsmod.add_noise(clean, self.seeds_for(role), self.cfg.noise.prior(),
                                     self.cfg.sim.dt_out, joint)
            else:
                ds = dsmod.build_dataset(n, seeds=self.seeds_for(role), prior=self.cfg.prior,
                                         noise_prior=self.cfg.noise.prior(),
                                         consts=self.cfg.sim.constants(),
                                         rtol=self.cfg.sim.rtol, atol=self.cfg.sim.atol)
            self._cache[key] = ds
        return self._cache[key]


@dataclass
class Model:
    """A trained network together with the scaler it was trained under."""
    net: Network
    scaler: Scaler
    history: History

    def predict(self, ds: Dataset) -> np.ndarray:
        if ds.scaler is not None:
            raise ValueError("pass the unscaled dataset; the model applies its own scaler")
        return self.scaler.invert_targets(self.net.predict(self.scaler.apply_features(ds.features)))

    def save(self, path) -> None:
        self.net.save(path)
        sc = {k: getattr(self.scaler, k).tolist()
              for k in ("feature_mean", "feature_sd", "target_mean", "target_sd")}
        with open(f"{path}.scaler.json", "w") as fh:
            json.dump(sc, fh)

    @classmethod
    def load(cls, path) -> "Model":
        net = Network.load(path)
        with open(f"{path}.scaler.json") as fh:
            sc = json.load(fh)
        scaler = Scaler(*(np.asarray(sc[k], dtype=np.float64)
                          for k in ("feature_mean", "feature_sd", "target_mean", "target_sd")))
        return cls(net, scaler, History())


def network_spec(cfg: ExperimentConfig, family: str, input_len: int, output_len: int,
                 **arch) -> NetworkSpec:
    nc = cfg.network
    if family == "dense":
        return dense_spec(input_len, arch.get("layers", nc.dense_layers),
                          arch.get("units", nc.dense_units), output_len)
    if family == "cnn":
        return cnn_spec(input_len, arch.get("filters", nc.cnn_filters),
                        arch.get("multipliers", nc.cnn_multipliers), output_len,
                        nc.head_units, nc.kernel, nc.stride)
    raise ValueError(f"unknown network family {family!r}")


def fit_model(cfg: ExperimentConfig, family: str, train_ds: Dataset, valid_ds: Dataset | None,
              epochs: int, init_seed: int | None = None, shuffle_seed: int | None = None,
              pooled: bool | None = None, **arch) -> Model:
    """Fit a scaler on ``train_ds`` only, then train a fresh network."""
    pooled = cfg.train.pooled_scaling if pooled is None else pooled
    scaler = dsmod.fit_scaler(train_ds, pooled_features=pooled)
    tr = dsmod.apply_scaler(scaler, train_ds)
    spec = network_spec(cfg, family, train_ds.feature_len, train_ds.target_len, **arch)
    net = init_weights(spec, cfg.seeds.init if init_seed is None else init_seed)
    tcfg = TrainConfig(epochs, cfg.train.batch_size, cfg.train.lr,
                       cfg.seeds.shuffle if shuffle_seed is None else shuffle_seed)
    xv = yv = None
    if valid_ds is not None:
        va = dsmod.apply_scaler(scaler, valid_ds)
        xv, yv = va.features, va.targets
    net, hist = train(net, tr.features, tr.targets, tcfg, xv, yv, log=log.debug)
    return Model(net, scaler, hist)


def evaluate_model(model: Model, test_ds: Dataset, provenance: dict | None = None) -> EvalReport:
    return evaluate(test_ds.targets, model.predict(test_ds), provenance)


def _row(cfg, seed, report: EvalReport | None = None, **keys) -> dict:
    row = dict(keys)
    for k in METRIC_KEYS:
        row[k] = getattr(report, k) if report is not None else float("nan")
    row["status"] = "ok" if report is not None else "failed"
    row["config_hash"] = cfg.config_hash()
    row["seed"] = seed
    return row


# -- architecture sweep ----------------------------------------------------------

def sweep_cells(cfg: ExperimentConfig, family: str):
    st = cfg.study
    if family == "dense":
        return [{"layers": l, "units": u} for u in st.sweep_dense_units for l in st.sweep_dense_layers]
    return [{"filters": f, "multipliers": tuple(2**b for b in range(nb))}
            for f in st.sweep_cnn_filters for nb in st.sweep_cnn_blocks]


def run_sweep(ws: Workspace, family: str, cells=None) -> list[dict]:
    cfg = ws.cfg
    train_ds = ws.dataset("train")
    valid_ds = ws.dataset("valid")
    test_ds = ws.dataset("test")
    rows = []
    for arch in cells if cells is not None else sweep_cells(cfg, family):
        label = {k: (list(v) if isinstance(v, tuple) else v) for k, v in arch.items()}
        try:
            model = fit_model(cfg, family, train_ds, valid_ds, cfg.train.epochs_clean, **arch)
            report = evaluate_model(model, test_ds)
        except FHNError as exc:
            log.warning("sweep cell %s failed: %s", label, exc)
            report = None
        rows.append(_row(cfg, cfg.seeds.init, report, family=family,
                         arch=json.dumps(label, sort_keys=True)))
    return rows


# -- noise study -------------------------------------------------------------------

def run_noise_study(ws: Workspace, family: str, n_values=None):
    """Rows keyed by (N, scenario) plus per-sample scatter data per cell."""
    cfg = ws.cfg
    n_values = cfg.study.n_values if n_values is None else n_values
    test_clean = ws.dataset("test")
    test_noisy = ws.dataset("test", noisy=True)
    rows, scatter = [], {}
    for n in n_values:
        train_clean = ws.dataset("train", n)
        train_noisy = ws.dataset("train", n, noisy=True)
        clean_model = fit_model(cfg, family, train_clean, ws.dataset("valid"), cfg.train.epochs_clean)
        noisy_model = fit_model(cfg, family, train_noisy, ws.dataset("valid", noisy=True),
                                cfg.train.epochs_noisy)
        for scen, model, test in [("clean/clean", clean_model, test_clean),
                                  ("clean/noisy", clean_model, test_noisy),
                                  ("noisy/noisy", noisy_model, test_noisy)]:
            pred = model.predict(test)
            report = evaluate(test.targets, pred)
            rows.append(_row(cfg, cfg.seeds.init, report, family=family, n_train=n, scenario=scen))
            scatter[(n, scen)] = (test.targets.copy(), pred)
    return rows, scatter


def scatter_rows(truth, pred) -> list[dict]:
    return [{"coordinate": c, "truth": float(t), "prediction": float(p)}
            for c in range(truth.shape[1]) for t, p in zip(truth[:, c], pred[:, c])]


# -- partial observations -------------------------------------------------------

def run_window_study(ws: Workspace, family: str, kinds=("time", "fourier", "time_and_fourier"),
                     windows=None) -> list[dict]:
    """Train on series halves, test on overlapping windows of the test series."""
    cfg = ws.cfg
    windows = cfg.study.windows if windows is None else windows
    train_h = dsmod.split_halves(ws.dataset("train"))
    valid_h = dsmod.split_halves(ws.dataset("valid"))
    test_w = dsmod.extract_windows(ws.dataset("test"), windows)
    rows = []
    for name in kinds:
        kind = FeatureKind.parse(name)
        tr, va, te = (dsmod.convert_features(d, kind) for d in (train_h, valid_h, test_w))
        model = fit_model(cfg, family, tr, va, cfg.train.epochs_clean,
                          pooled=cfg.study.window_pooled_scaling)
        rows.append(_row(cfg, cfg.seeds.init, evaluate_model(model, te), family=family,
                         data_type=kind.name.lower(), n_train=len(tr), n_test=len(te)))
    return rows


# -- joint ODE + noise estimation -----------------------------------------------

JOINT_PARAMS = ("theta0", "theta1", "sigma", "rho")


def run_joint(ws: Workspace, n_values=None, kinds=None, family: str = "cnn") -> list[dict]:
    cfg = ws.cfg
    n_values = cfg.study.n_values if n_values is None else n_values
    kinds = cfg.study.joint_feature_kinds if kinds is None else kinds
    test = ws.dataset("test", noisy=True, joint=True)
    valid = ws.dataset("valid", noisy=True, joint=True)
    rows = []
    for n in n_values:
        train_ds = ws.dataset("train", n, noisy=True, joint=True)
        for name in kinds:
            kind = FeatureKind.parse(name)
            tr, va, te = (dsmod.convert_features(d, kind) for d in (train_ds, valid, test))
            model = fit_model(cfg, family, tr, va, cfg.train.epochs_noisy)
            report = evaluate_model(model, te)
            for j, pname in enumerate(JOINT_PARAMS):
                pc = report.per_coordinate[j]
                rows.append({"n_train": n, "data_type": kind.name.lower(), "parameter": pname,
                             "median_ape": pc.median_ape, "r2": pc.r2, "squared_bias": pc.squared_bias,
                             "c_mse": pc.c_mse, "config_hash": cfg.config_hash(),
                             "seed": cfg.seeds.init})
    return rows


# -- re-simulation from predicted parameters --------------------------------------

@dataclass
class Resimulation:
    percentile: float
    index: int
    param_mse: float
    truth: ThetaPair
    predicted: ThetaPair
    data: np.ndarray
    simulated: np.ndarray | None
    squared_bias: float
    c_mse: float
    error: str = ""


def percentile_indices(values, percentiles) -> list[int]:
    """Sample index at each percentile of ``values`` (nearest rank on the sorted order)."""
    values = np.asarray(values)
    order = np.argsort(values, kind="stable")
    m = len(values)
    return [int(order[int(round(p / 100.0 * (m - 1)))]) for p in percentiles]


def run_resimulate(ws: Workspace, test_ds: Dataset, predictions, percentiles=None) -> list[Resimulation]:
    """Re-integrate the ODE at predicted parameters for percentile-selected samples.

    ``test_ds`` must be a time-series dataset; its features are the data the
    predictions were made from.
    """
    cfg = ws.cfg
    percentiles = cfg.study.percentiles if percentiles is None else percentiles
    pred = np.asarray(predictions)[:, :2]
    truth = test_ds.thetas
    param_mse = np.mean((truth - pred) ** 2, axis=1)
    out = []
    for p, i in zip(percentiles, percentile_indices(param_mse, percentiles)):
        data = test_ds.features[i]
        th_hat = ThetaPair(float(pred[i, 0]), float(pred[i, 1]))
        try:
            sim = integrate(th_hat, cfg.sim.constants(), cfg.sim.rtol, cfg.sim.atol).values
            _, bias, cmse = mse_decompose(data, sim)
            out.append(Resimulation(p, i, float(param_mse[i]), ThetaPair(*truth[i]), th_hat, data,
                                    sim, float(bias[0]), float(cmse[0])))
        except (StepSizeUnderflow, NonFiniteState) as exc:
            out.append(Resimulation(p, i, float(param_mse[i]), ThetaPair(*truth[i]), th_hat, data,
                                    None, float("nan"), float("nan"), str(exc)))
    return out


# -- cross-validation ------------------------------------------------------------

def run_crossval(ws: Workspace, family: str, seeds=None, k: int | None = None) -> list[dict]:
    """k-fold CV on the noise-free training set, one row per weight-init seed."""
    cfg = ws.cfg
    seeds = cfg.study.cv_seeds if seeds is None else seeds
    k = cfg.study.cv_k if k is None else k
    data = ws.dataset("train")
    plan = kfold(len(data), k, cfg.seeds.folds)
    rows = []
    for seed in seeds:
        per_fold = {m: [] for m in METRIC_KEYS}
        for fold in range(k):
            tr_idx, te_idx = plan.split(fold)
            model = fit_model(cfg, family, data.subset(tr_idx), None, cfg.train.epochs_clean,
                              init_seed=seed)
            rep = evaluate_model(model, data.subset(te_idx))
            for m in METRIC_KEYS:
                per_fold[m].append(getattr(rep, m))
        row = {"family": family, "k": k}
        for m in METRIC_KEYS:
            row[f"{m}_mean"], row[f"{m}_std"] = fold_summary(per_fold[m])
        row["config_hash"] = cfg.config_hash()
        row["seed"] = seed
        rows.append(row)
    return rows


# -- landscapes --------------------------------------------------------------------

def run_spike_grid(ws: Workspace, resolution: int | None = None, threshold: float | None = None):
    cfg = ws.cfg
    res = cfg.study.grid_resolution if resolution is None else resolution
    thr = cfg.sim.spike_threshold if threshold is None else threshold
    p = cfg.prior
    return spike_grid((p.lo0, p.hi0), (p.lo1, p.hi1), res, cfg.sim.constants(), thr,
                      cfg.sim.rtol, cfg.sim.atol)


def loss_grid_data(ws: Workspace, theta_star, noise: NoiseParams | None, seed: int = 0) -> np.ndarray:
    """Synthetic data at ``theta_star`` with an optional AR(1) path added."""
    cfg = ws.cfg
    u = integrate(theta_star, cfg.sim.constants(), cfg.sim.rtol, cfg.sim.atol).values
    if noise is None:
        return u
    return u + ar1_path(RngStream(seed, substream_id(0, tag=5)), noise, cfg.sim.dt_out, len(u))


def run_loss_grid(ws: Workspace, data, resolution: int | None = None, noise_sd: float | None = None,
                  use_misfit: bool = True, use_prior: bool = True):
    """Negative log-posterior on a theta grid over the prior bounds.

    The misfit is ``0.5 * dt * sum(((d - u_theta) / noise_sd)**2)``; the
    prior term is ``0.5 * sum(((theta - mean) / sd)**2)``. Grid solves use
    the looser ``study.loss_rtol`` / ``study.loss_atol``. Returns
    ``(theta0_axis, theta1_axis, loss)`` with NaN where integration failed.
    """
    cfg = ws.cfg
    res = cfg.study.loss_resolution if resolution is None else resolution
    if noise_sd is None:
        noise_sd = cfg.study.loss_noise_sigma / cfg.sim.dt_out
    p = cfg.prior
    ax0 = np.linspace(p.lo0, p.hi0, res)
    ax1 = np.linspace(p.lo1, p.hi1, res)
    data = np.asarray(data, dtype=np.float64)
    dt = cfg.sim.dt_out
    consts = cfg.sim.constants()
    loss = np.zeros((res, res))
    for i, a in enumerate(ax0):
        for j, b in enumerate(ax1):
            val = 0.0
            if use_misfit:
                try:
                    u = integrate((a, b), consts, cfg.study.loss_rtol, cfg.study.loss_atol).values
                except (StepSizeUnderflow, NonFiniteState):
                    loss[i, j] = np.nan
                    continue
                r = (data - u) / noise_sd
                val += 0.5 * dt * float(r @ r)
            if use_prior:
                val += 0.5 * (((a - p.mean0) / p.sd0) ** 2 + ((b - p.mean1) / p.sd1) ** 2)
            loss[i, j] = val
    return ax0, ax1, loss


# -- tables --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    names = list(rows[0])
    for r in rows[1:]:
        names += [k for k in r if k not in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in names])


def read_table(path) -> list[dict]:
    """Parse a table written by :func:`write_table`; numeric cells become numbers."""
    def conv(s):
        for kind in (int, float):
            try:
                return kind(s)
            except ValueError:
                pass
        return s
    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in r.items()} for r in csv.DictReader(fh)]
