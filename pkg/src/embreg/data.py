"""Collections of related time series: CSV ingest, synthetic generators, windowing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import (BadProfile, NonMonotonicTimestamps, ParseError, ShapeMismatch,
                     TooShort, UnknownSeriesInAdjacency)

PROFILES = ("local_offsets", "local_frequencies", "graph_diffusion")


@dataclass(frozen=True, eq=False)
class SeriesCollection:
    """N aligned series: observations (T, N, d_x), covariates (T, N, d_u), mask (T, N)."""

    X: np.ndarray
    U: np.ndarray
    M: np.ndarray
    timestamps: tuple
    sampling_period: timedelta
    series_ids: tuple
    channels: tuple = ("ch0",)
    covariate_names: tuple = ()
    A: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        T, N = self.X.shape[:2]
        if self.X.ndim != 3 or self.U.ndim != 3:
            raise ShapeMismatch("X and U must be (T, N, channels)")
        if self.U.shape[:2] != (T, N) or self.M.shape != (T, N):
            raise ShapeMismatch(f"X {self.X.shape}, U {self.U.shape}, M {self.M.shape} disagree")
        if len(self.timestamps) != T or len(self.series_ids) != N:
            raise ShapeMismatch("timestamps / series_ids length mismatch")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise NonMonotonicTimestamps("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("masked-out entries must hold finite placeholders")
        if self.A is not None:
            if self.A.shape != (N, N):
                raise ShapeMismatch(f"adjacency must be ({N}, {N}), got {self.A.shape}")
            if np.any(self.A < 0):
                raise ValueError("adjacency weights must be non-negative")
        for arr in (self.X, self.U, self.M) + ((self.A,) if self.A is not None else ()):
            arr.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.X.shape[0]

    @property
    def n_series(self) -> int:
        return self.X.shape[1]

    @property
    def d_x(self) -> int:
        return self.X.shape[2]

    @property
    def d_u(self) -> int:
        return self.U.shape[2]

    @property
    def has_missing(self) -> bool:
        return bool(np.any(self.M == 0))

    @property
    def input_channels(self) -> int:
        """Observation channels fed to the encoder (mask flag appended when data is missing)."""
        return self.d_x + int(self.has_missing)

    def inputs(self) -> np.ndarray:
        if not self.has_missing:
            return self.X
        return np.concatenate([self.X, self.M[..., None].astype(np.float64)], axis=-1)

    def with_covariates(self, U: np.ndarray, names=()) -> "SeriesCollection":
        return replace(self, U=np.asarray(U, dtype=np.float64), covariate_names=tuple(names))


# ---------------------------------------------------------------- CSV

def _parse_time(text: str, line: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise ParseError(f"line {line}: bad timestamp {text!r}") from exc


def _read_wide(path) -> tuple[list[datetime], list[tuple[str, str]], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2:
        raise ParseError(f"{path}: need a timestamp column and at least one series column")
    cols = []
    for name in header[1:]:
        if ":" not in name:
            raise ParseError(f"{path}: column {name!r} is not of the form series_id:channel")
        sid, ch = name.rsplit(":", 1)
        cols.append((sid, ch))
    times, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
        times.append(_parse_time(row[0], lineno))
        vals = []
        for cell in row[1:]:
            cell = cell.strip()
            if cell == "":
                vals.append(np.nan)
                continue
            try:
                vals.append(float(cell))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: bad number {cell!r}") from exc
        values.append(vals)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NonMonotonicTimestamps(f"{path}: timestamps are not strictly increasing")
    return times, cols, np.array(values, dtype=np.float64).reshape(len(times), len(cols))


def _to_cube(cols, values, path):
    series, channels = [], []
    for sid, ch in cols:
        if sid not in series:
            series.append(sid)
        if ch not in channels:
            channels.append(ch)
    pos = {c: i for i, c in enumerate(cols)}
    if len(pos) != len(cols):
        raise ParseError(f"{path}: duplicate columns")
    cube = np.full((values.shape[0], len(series), len(channels)), np.nan)
    for i, sid in enumerate(series):
        for k, ch in enumerate(channels):
            if (sid, ch) not in pos:
                raise ParseError(f"{path}: series {sid!r} lacks channel {ch!r}")
            cube[:, i, k] = values[:, pos[(sid, ch)]]
    return series, channels, cube


def carry_forward(cube: np.ndarray) -> np.ndarray:
    """Replace NaNs with the last observed value along time (zero before the first)."""
    out = cube.copy()
    last = np.zeros(cube.shape[1:])
    for t in range(cube.shape[0]):
        row = out[t]
        missing = np.isnan(row)
        row[missing] = last[missing]
        last = row
    return out


def ingest_csv(observations_path, covariates_path=None, adjacency_path=None,
               sampling_period: timedelta | None = None) -> SeriesCollection:
    times, cols, values = _read_wide(observations_path)
    series, channels, cube = _to_cube(cols, values, observations_path)
    # a step is observed only when every channel is present
    M = (~np.isnan(cube).any(axis=2)).astype(np.float64)
    X = carry_forward(cube)

    U = np.zeros((len(times), len(series), 0))
    cov_names: list[str] = []
    if covariates_path is not None:
        ctimes, ccols, cvalues = _read_wide(covariates_path)
        if ctimes != times:
            raise ParseError(f"{covariates_path}: timestamps differ from observations")
        cseries, cov_names, ccube = _to_cube(ccols, cvalues, covariates_path)
        if cseries != series:
            raise ParseError(f"{covariates_path}: series differ from observations")
        U = carry_forward(ccube)

    A = None
    if adjacency_path is not None:
        index = {s: i for i, s in enumerate(series)}
        A = np.zeros((len(series), len(series)))
        with open(adjacency_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"src", "dst", "weight"} <= set(reader.fieldnames):
                raise ParseError(f"{adjacency_path}: header must be src,dst,weight")
            for lineno, row in enumerate(reader, start=2):
                for key in ("src", "dst"):
                    if row[key] not in index:
                        raise UnknownSeriesInAdjacency(
                            f"{adjacency_path}: line {lineno}: series {row[key]!r} not in observations")
                try:
                    w = float(row["weight"])
                except ValueError as exc:
                    raise ParseError(f"{adjacency_path}: line {lineno}: bad weight") from exc
                A[index[row["src"]], index[row["dst"]]] = w

    if sampling_period is None:
        sampling_period = _infer_period(times)
    return SeriesCollection(X=X, U=U, M=M, timestamps=tuple(times),
                            sampling_period=sampling_period, series_ids=tuple(series),
                            channels=tuple(channels), covariate_names=tuple(cov_names), A=A)


def _infer_period(times) -> timedelta:
    if len(times) < 2:
        return timedelta(hours=1)
    diffs = sorted(b - a for a, b in zip(times, times[1:]))
    return diffs[len(diffs) // 2]


def _write_wide(path, times, series, channels, cube, mask=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + [f"{s}:{c}" for s in series for c in channels])
        for t, ts in enumerate(times):
            cells = []
            for i in range(len(series)):
                for k in range(len(channels)):
                    missing = mask is not None and mask[t, i] == 0
                    cells.append("" if missing else repr(float(cube[t, i, k])))
            w.writerow([ts.isoformat()] + cells)


def write_csv(collection: SeriesCollection, directory) -> dict[str, Path]:
    """Write observations (and covariates / adjacency when present) in the ingest format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    c = collection
    paths = {"observations": directory / "observations.csv"}
    _write_wide(paths["observations"], c.timestamps, c.series_ids, c.channels, c.X, c.M)
    if c.d_u:
        names = c.covariate_names or tuple(f"u{k}" for k in range(c.d_u))
        paths["covariates"] = directory / "covariates.csv"
        _write_wide(paths["covariates"], c.timestamps, c.series_ids, names, c.U)
    if c.A is not None:
        paths["adjacency"] = directory / "adjacency.csv"
        with open(paths["adjacency"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "weight"])
            for j, i in zip(*np.nonzero(c.A)):
                w.writerow([c.series_ids[j], c.series_ids[i], repr(float(c.A[j, i]))])
    return paths


# ---------------------------------------------------------------- covariates

def temporal_encodings(timestamps, sampling_period=None) -> np.ndarray:
    """Per step ``[sin(2 pi tau), cos(2 pi tau), weekday one-hot (Mon..Sun)]``, tau = day fraction."""
    out = np.zeros((len(timestamps), 9))
    for t, ts in enumerate(timestamps):
        midnight = ts.replace(hour=0, minute=0, second=0, microsecond=0)
        tau = (ts - midnight).total_seconds() / 86400.0
        out[t, 0] = math.sin(2 * math.pi * tau)
        out[t, 1] = math.cos(2 * math.pi * tau)
        out[t, 2 + ts.weekday()] = 1.0
    return out


ENCODING_NAMES = ("day_sin", "day_cos") + tuple(f"weekday_{d}" for d in range(7))


def add_temporal_encodings(collection: SeriesCollection) -> SeriesCollection:
    enc = temporal_encodings(collection.timestamps, collection.sampling_period)
    enc = np.broadcast_to(enc[:, None, :], (collection.n_steps, collection.n_series, enc.shape[1]))
    U = np.concatenate([collection.U, enc], axis=-1)
    return collection.with_covariates(U, collection.covariate_names + ENCODING_NAMES)


# ---------------------------------------------------------------- synthetic

def random_sparse_adjacency(n: int, rng: np.random.Generator, degree: int = 3) -> np.ndarray:
    A = np.zeros((n, n))
    for i in range(n):
        others = np.delete(np.arange(n), i)
        src = rng.choice(others, size=min(degree, n - 1), replace=False)
        A[src, i] = rng.uniform(0.5, 1.0, size=src.size)
    return A


def generate_synthetic_collection(n_series: int, n_steps: int, seed: int,
                                  profile: str = "local_offsets", noise: float = 0.3,
                                  ar: float = 0.5, diffusion: float = 0.4,
                                  steps_per_day: int = 24, adjacency: np.ndarray | None = None,
                                  start: datetime = datetime(2024, 1, 1)) -> SeriesCollection:
    """Daily sinusoid plus a hidden per-series signature plus AR(1) Gaussian noise.

    ``local_offsets`` draws an offset per series, ``local_frequencies`` an amplitude
    and phase.  ``graph_diffusion`` uses offsets and lets the noise process of each
    series leak into its out-neighbours through a random sparse adjacency.  The
    signatures go into ``metadata`` only; they are never covariates.
    """
    if profile not in PROFILES:
        raise BadProfile(f"unknown profile {profile!r}; expected one of {PROFILES}")
    if n_series < 2:
        raise ValueError("need at least two series")
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-2.0, 2.0, size=n_series)
    amplitudes = rng.uniform(0.5, 2.0, size=n_series)
    phases = rng.uniform(0.0, 2 * math.pi, size=n_series)
    eps = rng.standard_normal((n_steps, n_series)) * noise
    graph_rng = np.random.default_rng([seed, 1])

    t = np.arange(n_steps)[:, None]
    angle = 2 * math.pi * t / steps_per_day
    if profile == "local_frequencies":
        signal = amplitudes * np.sin(angle + phases)
        meta = {"amplitudes": amplitudes, "phases": phases}
    else:
        signal = np.sin(angle) + offsets
        meta = {"offsets": offsets}

    A = None
    mix = np.zeros((n_series, n_series))
    if profile == "graph_diffusion":
        A = random_sparse_adjacency(n_series, graph_rng) if adjacency is None else np.asarray(adjacency, float)
        col = A.sum(axis=0, keepdims=True)
        mix = np.divide(A, col, out=np.zeros_like(A), where=col > 0)
    z = np.zeros((n_steps, n_series))
    prev = np.zeros(n_series)
    for k in range(n_steps):
        # series i receives from in-neighbours j (edge j -> i)
        prev = ar * prev + diffusion * (prev @ mix) + eps[k] if profile == "graph_diffusion" \
            else ar * prev + eps[k]
        z[k] = prev
    X = (signal + z)[:, :, None]
    times = tuple(start + timedelta(hours=24 / steps_per_day * k) for k in range(n_steps))
    meta["profile"] = profile
    return SeriesCollection(
        X=X, U=np.zeros((n_steps, n_series, 0)), M=np.ones((n_steps, n_series)),
        timestamps=times, sampling_period=timedelta(hours=24 / steps_per_day),
        series_ids=tuple(f"s{i}" for i in range(n_series)), A=A, metadata=meta)


# ---------------------------------------------------------------- splits and windows

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not 0 < f < 1 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ValueError(f"split fractions must lie in (0, 1) and sum to 1, got {fr}")

    def boundaries(self, T: int) -> tuple[int, int, int]:
        train_end = int(math.floor(T * self.train_fraction + 1e-9))
        val_end = int(math.floor(T * (self.train_fraction + self.val_fraction) + 1e-9))
        return train_end, val_end, T


@dataclass(frozen=True)
class WindowSample:
    """A window of ``W`` steps followed immediately by ``H`` horizon steps."""

    collection: SeriesCollection
    start: int
    W: int
    H: int
    series: np.ndarray | None = None

    @property
    def series_index(self) -> np.ndarray:
        return np.arange(self.collection.n_series) if self.series is None else self.series

    def _take(self, arr, lo, hi):
        s = arr[lo:hi]
        return s if self.series is None else s[:, self.series]

    @property
    def inputs(self):
        return self._take(self.collection.inputs(), self.start, self.start + self.W)

    @property
    def input_covariates(self):
        return self._take(self.collection.U, self.start, self.start + self.W)

    @property
    def target(self):
        return self._take(self.collection.X, self.start + self.W, self.start + self.W + self.H)

    @property
    def horizon_covariates(self):
        return self._take(self.collection.U, self.start + self.W, self.start + self.W + self.H)

    @property
    def target_mask(self):
        return self._take(self.collection.M, self.start + self.W, self.start + self.W + self.H)


def window_starts(lo: int, hi: int, W: int, H: int) -> np.ndarray:
    """Start indices of every stride-1 window whose [window + horizon] lies in [lo, hi)."""
    return np.arange(lo, max(lo, hi - W - H + 1))


def make_windows(collection: SeriesCollection, W: int, H: int, split: SplitSpec = SplitSpec()):
    if W < 1 or H < 1:
        raise TooShort(f"window and horizon must be >= 1 (W={W}, H={H})")
    T = collection.n_steps
    if T < W + H:
        raise TooShort(f"T={T} is shorter than W+H={W + H}")
    train_end, val_end, _ = split.boundaries(T)
    ranges = [(0, train_end), (train_end, val_end), (val_end, T)]
    out = [[WindowSample(collection, int(s), W, H) for s in window_starts(lo, hi, W, H)]
           for lo, hi in ranges]
    if not out[0]:
        raise TooShort(f"train split [0, {train_end}) cannot hold a window of {W + H} steps")
    return tuple(out)


# ---------------------------------------------------------------- scaling

@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X):
        return (X - self.mean) / self.std

    def inverse(self, X):
        return X * self.std + self.mean


def standardize(collection: SeriesCollection, train_range: tuple[int, int], floor: float = 1e-8):
    lo, hi = train_range
    if hi <= lo:
        raise ValueError("train range is empty")
    X = collection.X[lo:hi]
    m = collection.M[lo:hi][..., None]
    count = np.maximum(m.sum(axis=(0, 1)), 1.0)
    mu = (X * m).sum(axis=(0, 1)) / count
    var = (((X - mu) ** 2) * m).sum(axis=(0, 1)) / count
    sigma = np.maximum(np.sqrt(var), floor)
    scaler = Scaler(mu, sigma)
    return replace(collection, X=scaler.transform(collection.X)), scaler


# ---------------------------------------------------------------- prepared datasets

@dataclass
class Batch:
    x: np.ndarray       # (B, W, N, d_in)
    u: np.ndarray       # (B, W, N, d_u)
    u_future: np.ndarray  # (B, H, N, d_u)
    y: np.ndarray       # (B, H, N, d_x)
    mask: np.ndarray    # (B, H, N)
    series: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass
class PreparedData:
    """A standardized collection with its split windows, ready for training."""

    collection: SeriesCollection
    scaler: Scaler
    W: int
    H: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    name: str = "dataset"

    @property
    def adjacency(self):
        return self.collection.A

    def batch(self, starts, series=None) -> Batch:
        c = self.collection
        starts = np.asarray(starts, dtype=np.int64)
        inputs = c.inputs()
        ix = starts[:, None] + np.arange(self.W)[None, :]
        iy = starts[:, None] + self.W + np.arange(self.H)[None, :]
        cols = slice(None) if series is None else np.asarray(series)
        return Batch(x=inputs[ix][:, :, cols], u=c.U[ix][:, :, cols], u_future=c.U[iy][:, :, cols],
                     y=c.X[iy][:, :, cols], mask=c.M[iy][:, :, cols],
                     series=np.arange(c.n_series) if series is None else np.asarray(series))

    def head(self, n_steps: int) -> np.ndarray:
        """Train windows that fit entirely inside the first ``n_steps`` steps."""
        return self.train[self.train + self.W + self.H <= n_steps]


def prepare(collection: SeriesCollection, W: int, H: int, split: SplitSpec = SplitSpec(),
            encodings: bool = True, name: str = "dataset") -> PreparedData:
    if encodings:
        collection = add_temporal_encodings(collection)
    train, val, test = make_windows(collection, W, H, split)
    train_end, _, _ = split.boundaries(collection.n_steps)
    scaled, scaler = standardize(collection, (0, train_end))
    as_idx = lambda ws: np.array([w.start for w in ws], dtype=np.int64)
    return PreparedData(scaled, scaler, W, H, as_idx(train), as_idx(val), as_idx(test), name)
