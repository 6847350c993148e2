"""Training/testing datasets built from the prior, the simulator and the noise model."""
from __future__ import annotations

import csv
import enum
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import (FHNError, FormatVersionMismatch, IndexOutOfRange, LengthMismatch,
                     NonFiniteState, StepSizeUnderflow)
from .fhn import DEFAULT_ATOL, DEFAULT_RTOL, SimConstants, ThetaPair, integrate
from .stochastic import (NoiseParams, NoisePrior, PriorSpec, RngStream, ar1_path, noise_pool,
                         sample_theta, substream_id)

DATASET_MAGIC = b"FHNDS1"
DEFAULT_WINDOWS = ((30, 530), (146, 646), (174, 674), (362, 862), (370, 870))
MAX_SAMPLE_RETRIES = 100


class FeatureKind(enum.IntEnum):
    TIME = 0
    FOURIER = 1
    TIME_AND_FOURIER = 2

    @classmethod
    def parse(cls, text: str) -> "FeatureKind":
        key = text.strip().lower().replace("&", "_and_").replace("-", "_").replace(" ", "")
        key = key.replace("__", "_")
        aliases = {"time": cls.TIME, "fourier": cls.FOURIER, "time_and_fourier": cls.TIME_AND_FOURIER,
                   "timefourier": cls.TIME_AND_FOURIER, "both": cls.TIME_AND_FOURIER}
        if key not in aliases:
            raise ValueError(f"unknown feature kind {text!r}")
        return aliases[key]

    def feature_len(self, n_t: int) -> int:
        return {0: n_t, 1: n_t // 2 + 1, 2: n_t + n_t // 2 + 1}[int(self)]


class Sample(NamedTuple):
    features: np.ndarray
    target: np.ndarray
    theta: ThetaPair
    noise: NoiseParams | None
    stream_id: int


@dataclass(frozen=True)
class Scaler:
    feature_mean: np.ndarray
    feature_sd: np.ndarray
    target_mean: np.ndarray
    target_sd: np.ndarray

    def apply_features(self, x):
        return (np.asarray(x) - self.feature_mean) / self.feature_sd

    def apply_targets(self, y):
        return (np.asarray(y) - self.target_mean) / self.target_sd

    def invert_features(self, x):
        return np.asarray(x) * self.feature_sd + self.feature_mean

    def invert_targets(self, y):
        return np.asarray(y) * self.target_sd + self.target_mean


@dataclass
class Dataset:
    """Samples stored column-wise.

    ``meta`` rows are ``(theta0, theta1, sigma, rho)`` with NaN for absent
    noise parameters. When ``scaler`` is set, ``features`` and ``targets``
    are in scaled units.
    """
    features: np.ndarray
    targets: np.ndarray
    meta: np.ndarray
    stream_ids: np.ndarray
    feature_kind: FeatureKind = FeatureKind.TIME
    noise_applied: bool = False
    scaler: Scaler | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, i) -> Sample:
        m = self.meta[i]
        noise = None if np.isnan(m[2]) else NoiseParams(float(m[2]), float(m[3]))
        return Sample(self.features[i], self.targets[i], ThetaPair(float(m[0]), float(m[1])),
                      noise, int(self.stream_ids[i]))

    @property
    def feature_len(self) -> int:
        return self.features.shape[1]

    @property
    def target_len(self) -> int:
        return self.targets.shape[1]

    @property
    def thetas(self) -> np.ndarray:
        return self.meta[:, :2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], targets=self.targets[idx],
                       meta=self.meta[idx], stream_ids=self.stream_ids[idx])

    def equals(self, other: "Dataset") -> bool:
        same = (self.feature_kind == other.feature_kind and self.noise_applied == other.noise_applied
                and self.provenance == other.provenance)
        for a, b in [(self.features, other.features), (self.targets, other.targets),
                     (self.meta, other.meta), (self.stream_ids, other.stream_ids)]:
            same = same and a.shape == b.shape and a.tobytes() == b.tobytes()
        if (self.scaler is None) != (other.scaler is None):
            return False
        if self.scaler is not None:
            same = same and all(np.array_equal(getattr(self.scaler, f), getattr(other.scaler, f))
                                for f in ("feature_mean", "feature_sd", "target_mean", "target_sd"))
        return bool(same)


@dataclass(frozen=True)
class DatasetSeeds:
    seed: int
    noise_pool_seed: int = 7
    noise_pool_size: int = 100


def fourier_features(series) -> np.ndarray:
    """One-sided DFT magnitudes, ``|sum_j x_j exp(-2 pi i j k / N)|``."""
    x = np.asarray(getattr(series, "values", series), dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("need at least two points")
    return np.abs(np.fft.rfft(x, axis=-1))


def make_features(series_batch: np.ndarray, kind: FeatureKind) -> np.ndarray:
    x = np.atleast_2d(series_batch)
    if kind == FeatureKind.TIME:
        return x.copy()
    if kind == FeatureKind.FOURIER:
        return fourier_features(x)
    return np.concatenate([x, fourier_features(x)], axis=1)


def _simulate_sample(seed, index, prior, consts, rtol, atol, theta=None):
    last = None
    for attempt in range(MAX_SAMPLE_RETRIES):
        sid = substream_id(index, attempt)
        rng = RngStream(seed, sid)
        th = sample_theta(rng, prior) if theta is None else ThetaPair(*theta)
        try:
            return sid, th, integrate(th, consts, rtol, atol).values
        except (StepSizeUnderflow, NonFiniteState) as exc:
            if theta is not None:
                raise
            last = exc
    raise FHNError(f"sample {index}: {MAX_SAMPLE_RETRIES} failed simulations") from last


def build_dataset(n: int, feature_kind: FeatureKind = FeatureKind.TIME, with_noise: bool = False,
                  joint_targets: bool = False, seeds: DatasetSeeds = DatasetSeeds(0),
                  prior: PriorSpec = PriorSpec(), noise_prior: NoisePrior = NoisePrior(),
                  consts: SimConstants = SimConstants(), rtol: float = DEFAULT_RTOL,
                  atol: float = DEFAULT_ATOL, thetas=None) -> Dataset:
    """Draw ``n`` parameter sets, simulate them and assemble features/targets.

    Sample ``i`` uses the substream ``(seeds.seed, i)``; a failed simulation
    is redrawn from the next attempt's substream. ``thetas`` pins the
    parameters instead of sampling them.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if joint_targets and not with_noise:
        raise ValueError("joint targets require noisy data")
    if thetas is not None and len(thetas) != n:
        raise ValueError("thetas must have length n")
    series = np.empty((n, consts.n_t))
    meta = np.full((n, 4), np.nan)
    sids = np.empty(n, dtype=np.uint64)
    for i in range(n):
        try:
            sid, th, u = _simulate_sample(seeds.seed, i, prior, consts, rtol, atol,
                                          None if thetas is None else thetas[i])
        except FHNError as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc
        series[i] = u
        meta[i, :2] = th
        sids[i] = sid
    provenance = {
        "seed": seeds.seed, "noise_pool_seed": seeds.noise_pool_seed,
        "noise_pool_size": seeds.noise_pool_size, "n": n, "prior": asdict(prior),
        "noise_prior": asdict(noise_prior), "consts": asdict(consts), "rtol": rtol, "atol": atol,
        "pinned_thetas": None if thetas is None else [[float(a), float(b)] for a, b in thetas],
    }
    ds = Dataset(series, meta[:, :2].copy(), meta, sids, FeatureKind.TIME, False, None, provenance)
    if with_noise:
        ds = add_noise(ds, seeds, noise_prior, consts.dt_out, joint_targets)
    return convert_features(ds, feature_kind)


def add_noise(clean: Dataset, seeds: DatasetSeeds, noise_prior: NoisePrior = NoisePrior(),
              dt: float = 0.2, joint_targets: bool = False) -> Dataset:
    """Add one AR(1) path per sample; (sigma, rho) cycle through the shared pool.

    The path is drawn from the sample's own substream right after its theta
    draws, so ``add_noise(build_dataset(..., with_noise=False))`` equals
    ``build_dataset(..., with_noise=True)``.
    """
    if clean.feature_kind != FeatureKind.TIME or clean.noise_applied or clean.scaler is not None:
        raise ValueError("add_noise needs an unscaled, noise-free time-series dataset")
    prior = PriorSpec(**clean.provenance["prior"]) if "prior" in clean.provenance else PriorSpec()
    pool = noise_pool(seeds.noise_pool_seed, noise_prior, seeds.noise_pool_size)
    feats = clean.features.copy()
    meta = clean.meta.copy()
    n_t = feats.shape[1]
    for i in range(len(clean)):
        rng = RngStream(clean.provenance.get("seed", seeds.seed), int(clean.stream_ids[i]))
        if not clean.provenance.get("pinned_thetas"):
            sample_theta(rng, prior)
        params = pool[i % len(pool)]
        feats[i] += ar1_path(rng, params, dt, n_t)
        meta[i, 2:] = params
    targets = meta.copy() if joint_targets else meta[:, :2].copy()
    prov = dict(clean.provenance, noise_applied=True, joint_targets=joint_targets)
    return replace(clean, features=feats, targets=targets, meta=meta, noise_applied=True,
                   provenance=prov)


def convert_features(ds: Dataset, kind: FeatureKind) -> Dataset:
    """Turn an unscaled time-series dataset into the requested feature kind."""
    if kind == ds.feature_kind:
        return ds
    if ds.feature_kind != FeatureKind.TIME or ds.scaler is not None:
        raise ValueError("feature conversion needs an unscaled time-series dataset")
    return replace(ds, features=make_features(ds.features, kind), feature_kind=kind,
                   provenance=dict(ds.provenance, feature_kind=kind.name))


def split_halves(ds: Dataset) -> Dataset:
    """Split every series into its two halves; sample count doubles.

    Output order is ``[first halves..., second halves...]``.
    """
    if ds.feature_kind != FeatureKind.TIME:
        raise ValueError("split_halves needs time-series features")
    n_t = ds.feature_len
    if n_t % 2:
        raise LengthMismatch(f"odd series length {n_t}")
    h = n_t // 2
    return extract_windows(ds, [(0, h), (h, n_t)])


def extract_windows(ds: Dataset, windows=DEFAULT_WINDOWS) -> Dataset:
    """Emit each half-open window of each sample as a new sample.

    Output is grouped by window: all samples for window 0, then window 1, ...
    """
    if ds.feature_kind != FeatureKind.TIME:
        raise ValueError("windowing needs time-series features")
    windows = [(int(a), int(b)) for a, b in windows]
    if not windows:
        raise ValueError("no windows given")
    n_t = ds.feature_len
    lengths = {b - a for a, b in windows}
    if len(lengths) != 1:
        raise LengthMismatch(f"windows have different lengths {sorted(lengths)}")
    for a, b in windows:
        if not (0 <= a < b <= n_t):
            raise IndexOutOfRange(f"window [{a}, {b}) outside [0, {n_t})")
    k = len(windows)
    return replace(
        ds,
        features=np.concatenate([ds.features[:, a:b] for a, b in windows]),
        targets=np.tile(ds.targets, (k, 1)),
        meta=np.tile(ds.meta, (k, 1)),
        stream_ids=np.tile(ds.stream_ids, k),
        provenance=dict(ds.provenance, windows=[[a, b] for a, b in windows]),
    )


def _block_slices(kind: FeatureKind, length: int):
    if kind != FeatureKind.TIME_AND_FOURIER:
        return [slice(0, length)]
    # solve n + n // 2 + 1 = length for the series length n
    n = next(m for m in range(length) if m + m // 2 + 1 == length)
    return [slice(0, n), slice(n, length)]


def fit_scaler(ds: Dataset, pooled_features: bool = False) -> Scaler:
    """Per-coordinate standardization statistics (population sd, 0 -> 1).

    With ``pooled_features`` every coordinate of a feature block (the time
    series block, the spectrum block) shares one mean and sd, which keeps
    the transform shift-invariant for windowed inputs.
    """
    if ds.scaler is not None:
        raise ValueError("dataset is already scaled")
    x = ds.features
    if pooled_features:
        fm = np.empty(x.shape[1])
        fs = np.empty(x.shape[1])
        for sl in _block_slices(ds.feature_kind, x.shape[1]):
            fm[sl] = x[:, sl].mean()
            fs[sl] = x[:, sl].std()
    else:
        fm = x.mean(axis=0)
        fs = x.std(axis=0)
    tm = ds.targets.mean(axis=0)
    ts = ds.targets.std(axis=0)
    fs = np.where(fs > 0, fs, 1.0)
    ts = np.where(ts > 0, ts, 1.0)
    return Scaler(fm, fs, tm, ts)


def apply_scaler(scaler: Scaler, ds):
    """Scale a dataset (features and targets) or a bare target array."""
    if not isinstance(ds, Dataset):
        return scaler.apply_targets(ds)
    if ds.scaler is not None:
        raise ValueError("dataset is already scaled")
    if len(scaler.feature_mean) != ds.feature_len:
        raise LengthMismatch("scaler and dataset feature lengths differ")
    return replace(ds, features=scaler.apply_features(ds.features),
                   targets=scaler.apply_targets(ds.targets), scaler=scaler)


def invert_scaler(scaler: Scaler, ds):
    if not isinstance(ds, Dataset):
        return scaler.invert_targets(ds)
    return replace(ds, features=scaler.invert_features(ds.features),
                   targets=scaler.invert_targets(ds.targets), scaler=None)


# -- persistence ---------------------------------------------------------------

_HEADER = struct.Struct("<BBIIQQ")


def save_dataset(path, ds: Dataset) -> None:
    """Write the binary container atomically (temp file + rename)."""
    n, fl, tl = len(ds), ds.feature_len, ds.target_len
    rec = np.empty((n, 1 + tl + 4 + fl), dtype="<f8")
    rec[:, 1:1 + tl] = ds.targets
    rec[:, 1 + tl:5 + tl] = ds.meta
    rec[:, 5 + tl:] = ds.features
    raw = rec.tobytes()
    # stream ids are u64, not f64: splice them into each record's first slot
    buf = bytearray(raw)
    width = rec.shape[1] * 8
    for i, sid in enumerate(ds.stream_ids):
        buf[i * width:i * width + 8] = struct.pack("<Q", int(sid))
    seed = int(ds.provenance.get("seed", 0)) & ((1 << 64) - 1)
    trailer = {"provenance": ds.provenance}
    if ds.scaler is not None:
        trailer["scaler"] = {k: getattr(ds.scaler, k).astype("<f8").tobytes().hex()
                             for k in ("feature_mean", "feature_sd", "target_mean", "target_sd")}
    tbytes = json.dumps(trailer, sort_keys=True).encode()
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".fhnds-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(_HEADER.pack(int(ds.feature_kind), int(ds.noise_applied), tl, fl, n, seed))
            fh.write(bytes(buf))
            fh.write(struct.pack("<Q", len(tbytes)))
            fh.write(tbytes)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != DATASET_MAGIC:
        raise FormatVersionMismatch(f"{path}: missing {DATASET_MAGIC!r} magic")
    try:
        kind, noisy, tl, fl, n, _seed = _HEADER.unpack_from(data, 6)
        off = 6 + _HEADER.size
        width = 1 + tl + 4 + fl
        body = data[off:off + n * width * 8]
        if len(body) != n * width * 8:
            raise FormatVersionMismatch(f"{path}: truncated sample records")
        rec = np.frombuffer(body, dtype="<f8").reshape(n, width)
        sids = np.frombuffer(body, dtype="<u8").reshape(n, width)[:, 0].astype(np.uint64)
        off += len(body)
        (tlen,) = struct.unpack_from("<Q", data, off)
        tbytes = data[off + 8:off + 8 + tlen]
        if len(tbytes) != tlen or off + 8 + tlen != len(data):
            raise FormatVersionMismatch(f"{path}: truncated trailer")
        trailer = json.loads(tbytes)
    except (struct.error, ValueError) as exc:
        raise FormatVersionMismatch(f"{path}: corrupt dataset file") from exc
    scaler = None
    if "scaler" in trailer:
        s = trailer["scaler"]
        scaler = Scaler(*(np.frombuffer(bytes.fromhex(s[k]), dtype="<f8").astype(np.float64)
                          for k in ("feature_mean", "feature_sd", "target_mean", "target_sd")))
    return Dataset(
        features=rec[:, 5 + tl:].astype(np.float64),
        targets=rec[:, 1:1 + tl].astype(np.float64),
        meta=rec[:, 1 + tl:5 + tl].astype(np.float64),
        stream_ids=sids,
        feature_kind=FeatureKind(kind),
        noise_applied=bool(noisy),
        scaler=scaler,
        provenance=trailer["provenance"],
    )


def export_csv(path, ds: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"target_{k}" for k in range(ds.target_len)]
                   + [f"f_{m}" for m in range(ds.feature_len)])
        for t, f in zip(ds.targets, ds.features):
            w.writerow([repr(float(v)) for v in t] + [repr(float(v)) for v in f])
