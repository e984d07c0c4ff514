"""Synthetic sequence datasets, CSV ingestion, normalization and windowing.

All sequences are cut into non-overlapping windows of length ``L``.  A
:class:`SequenceDataset` keeps one split label per window; normalization
statistics always come from the ``train`` windows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal


class GenerationError(RuntimeError):
    pass


class DataError(ValueError):
    pass


@dataclass
class NormalizationRecord:
    x_min: np.ndarray
    x_max: np.ndarray
    y_min: float
    y_max: float
    y_mean: float                       # mean of the [0,1]-scaled train targets
    constant_channels: list[int] = field(default_factory=list)

    def _x_span(self):
        span = self.x_max - self.x_min
        return np.where(span > 0, span, 1.0)

    def _y_span(self):
        span = self.y_max - self.y_min
        return span if span > 0 else 1.0

    def apply_inputs(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = (x - self.x_min) / self._x_span()
        if self.constant_channels:
            z[..., self.constant_channels] = 0.5
        return z

    def apply_targets(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_min) / self._y_span() - self.y_mean

    def invert_inputs(self, z):
        z = np.asarray(z, dtype=np.float64)
        x = z * self._x_span() + self.x_min
        if self.constant_channels:
            x[..., self.constant_channels] = self.x_min[self.constant_channels]
        return x

    def invert_targets(self, v):
        return (np.asarray(v, dtype=np.float64) + self.y_mean) * self._y_span() + self.y_min

    def invert_scale(self, s):
        """Map a standard deviation (or band half-width) back to raw units."""
        return np.asarray(s, dtype=np.float64) * self._y_span()


@dataclass
class SequenceDataset:
    inputs: np.ndarray            # (n_seq, L, input_dim)
    targets: np.ndarray           # (n_seq, L)
    split: np.ndarray             # (n_seq,) of "train" / "test" / "oos"
    record: NormalizationRecord | None = None
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.split = np.asarray(self.split, dtype=object)
        if self.inputs.ndim != 3:
            raise DataError(f"inputs must be (n_seq, L, input_dim), got {self.inputs.shape}")
        if self.targets.shape != self.inputs.shape[:2]:
            raise DataError(f"targets {self.targets.shape} not aligned with inputs {self.inputs.shape}")
        if self.split.shape != (self.inputs.shape[0],):
            raise DataError("one split label per sequence required")

    @property
    def n_seq(self) -> int:
        return self.inputs.shape[0]

    @property
    def L(self) -> int:
        return self.inputs.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[2]

    def subset(self, split: str) -> "SequenceDataset":
        m = self.split == split
        return replace(self, inputs=self.inputs[m], targets=self.targets[m], split=self.split[m])

    @property
    def train(self) -> "SequenceDataset":
        return self.subset("train")

    @property
    def test(self) -> "SequenceDataset":
        return self.subset("test")


def windows(series: np.ndarray, L: int) -> np.ndarray:
    """Non-overlapping windows along axis 0; a trailing remainder is dropped."""
    n = series.shape[0] // L
    return series[: n * L].reshape((n, L) + series.shape[1:])


def chronological_split(n_windows: int, train_frac: float = 0.8) -> np.ndarray:
    n_train = max(1, int(np.floor(train_frac * n_windows + 0.5)))
    return np.array(["train"] * n_train + ["test"] * (n_windows - n_train), dtype=object)


# -- generators --------------------------------------------------------------


SIN_OMEGA = 2.0   # sin(pi * omega * x): two periods over [-1, 1]


def gen_sin(n_points: int = 256, noise_sd: float = 0.05, seed: int = 0, L: int = 8,
            test_frac: float = 0.2, n_oos: int | None = None) -> SequenceDataset:
    """Noisy sin(2 pi x) windows.

    ``n_points`` x values are drawn uniformly on [-1, 1], sorted and cut into
    windows; a seeded ``test_frac`` of the windows is held out as ``test``.
    The ``oos`` windows cover (1, 1.5] at the same point density.
    """
    if n_points < 10:
        raise ValueError("gen_sin needs n_points >= 10")
    rng = np.random.default_rng(seed)
    n_oos = n_points // 4 if n_oos is None else n_oos

    def curve(x):
        return np.sin(np.pi * SIN_OMEGA * x) + noise_sd * rng.standard_normal(x.shape)

    x_in = np.sort(rng.uniform(-1.0, 1.0, size=n_points))
    xw = windows(x_in[:, None], L)
    yw = windows(curve(x_in), L)
    labels = np.array(["train"] * len(xw), dtype=object)
    n_test = int(np.floor(test_frac * len(xw) + 0.5))
    if n_test and len(xw) > 1:
        labels[rng.choice(len(xw), size=min(n_test, len(xw) - 1), replace=False)] = "test"
    if n_oos >= L:
        x_out = np.sort(rng.uniform(1.0, 1.5, size=n_oos))
        x_out = np.where(x_out <= 1.0, np.nextafter(1.0, 2.0), x_out)
        xo, yo = windows(x_out[:, None], L), windows(curve(x_out), L)
        xw, yw = np.concatenate([xw, xo]), np.concatenate([yw, yo])
        labels = np.concatenate([labels, np.array(["oos"] * len(xo), dtype=object)])
    return SequenceDataset(xw, yw, labels, name="sin")


@dataclass(frozen=True)
class SuspensionParams:
    zeta: float = 0.05
    omega: float = 2.0 * np.pi
    alpha: float = 100.0
    dt: float = 0.01
    cutoff_hz: float = 1.5
    input_sd: float = 8.0
    subsample: int = 5


def simulate_suspension(u: np.ndarray, dt: float, zeta: float, omega: float, alpha: float,
                        x0: float = 0.0, v0: float = 0.0) -> np.ndarray:
    """RK4 for x'' + 2 zeta omega x' + omega^2 x = u - alpha x^3, with u held per step."""
    u = np.asarray(u, dtype=np.float64)
    x = np.empty(len(u))
    s = np.array([x0, v0], dtype=np.float64)

    def rhs(state, ui):
        p, v = state
        return np.array([v, ui - 2.0 * zeta * omega * v - omega**2 * p - alpha * p**3])

    for i, ui in enumerate(u):
        x[i] = s[0]
        k1 = rhs(s, ui)
        k2 = rhs(s + 0.5 * dt * k1, ui)
        k3 = rhs(s + 0.5 * dt * k2, ui)
        k4 = rhs(s + dt * k3, ui)
        s = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if abs(s[0]) > 1e3 or not np.all(np.isfinite(s)):
            raise GenerationError(f"suspension state diverged at step {i}; try a smaller alpha")
    return x


def band_limited_noise(n: int, dt: float, cutoff_hz: float, sd: float,
                       rng: np.random.Generator) -> np.ndarray:
    b, a = signal.butter(4, cutoff_hz, fs=1.0 / dt)
    w = signal.filtfilt(b, a, rng.standard_normal(n + 200))[100:-100]
    return sd * w / w.std()


def gen_suspension(n_steps: int = 2048, noise_sd: float = 0.01, seed: int = 0, L: int = 16,
                   params: SuspensionParams = SuspensionParams()) -> SequenceDataset:
    """Duffing-type suspension driven by low-pass noise.

    ``n_steps`` counts samples after subsampling; the simulator runs at
    ``params.dt`` and keeps every ``params.subsample``-th state.
    """
    if n_steps < L:
        raise ValueError("gen_suspension needs n_steps >= L")
    rng = np.random.default_rng(seed)
    n_fine = n_steps * params.subsample
    u = band_limited_noise(n_fine, params.dt, params.cutoff_hz, params.input_sd, rng)
    x = simulate_suspension(u, params.dt, params.zeta, params.omega, params.alpha)
    u, x = u[:: params.subsample], x[:: params.subsample]
    y = x + noise_sd * rng.standard_normal(len(x))
    xw, yw = windows(u[:, None], L), windows(y, L)
    return SequenceDataset(xw, yw, chronological_split(len(xw)), name="suspension")


def gen_load(n_steps: int = 24 * 120, seed: int = 0, L: int = 24, n_cities: int = 11,
             daily_amp: float = 6.0, seasonal_amp: float = 10.0, noise_sd: float = 1.5,
             profile_amp: float = 0.3, load_noise_sd: float = 0.02) -> SequenceDataset:
    """Hourly temperatures for ``n_cities`` channels and a grid-load target.

    Temperatures are city offsets plus daily and seasonal sinusoids plus AR(1)
    noise.  The load is a convex function of the weighted mean temperature
    (heating and cooling both raise demand) plus an hour-of-day profile.
    """
    if n_steps < L:
        raise ValueError("gen_load needs n_steps >= L")
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)
    offsets = rng.normal(0.0, 3.0, size=n_cities)
    phases = rng.normal(0.0, 0.3, size=n_cities)
    weights = rng.dirichlet(np.ones(n_cities))
    daily = daily_amp * np.sin(2 * np.pi * (t[:, None] - 15) / 24.0 + phases)
    seasonal = seasonal_amp * np.sin(2 * np.pi * t[:, None] / (24.0 * 365.0) - np.pi / 2)
    ar = np.zeros((n_steps, n_cities))
    eps = noise_sd * rng.standard_normal((n_steps, n_cities))
    for i in range(1, n_steps):
        ar[i] = 0.95 * ar[i - 1] + eps[i]
    temps = 15.0 + offsets + daily + seasonal + ar
    tbar = temps @ weights
    hour = t % 24
    profile = profile_amp * (np.exp(-0.5 * ((hour - 9) / 2.5) ** 2)
                             + np.exp(-0.5 * ((hour - 19) / 2.0) ** 2))
    load = 1.0 + 0.004 * (tbar - 18.0) ** 2 + profile
    load = load + load_noise_sd * rng.standard_normal(n_steps)
    xw, yw = windows(temps, L), windows(load, L)
    return SequenceDataset(xw, yw, chronological_split(len(xw)), name="load")


# -- CSV ---------------------------------------------------------------------


def load_csv(path, input_cols: list[str], target_col: str, L: int) -> SequenceDataset:
    """Read a headered CSV into non-overlapping windows with an 80/20 time split."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in list(input_cols) + [target_col] if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        cols = [header.index(c) for c in input_cols]
        tcol = header.index(target_col)
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                xs.append([float(row[c]) for c in cols])
                ys.append(float(row[tcol]))
            except (ValueError, IndexError):
                raise DataError(f"{path}: non-numeric or missing cell on row {lineno}") from None
    if len(ys) < L:
        raise DataError(f"{path}: {len(ys)} rows, need at least L={L}")
    xw = windows(np.array(xs), L)
    yw = windows(np.array(ys), L)
    return SequenceDataset(xw, yw, chronological_split(len(xw)), name=path.stem)


def save_csv(ds: SequenceDataset, path, input_cols: list[str] | None = None,
             target_col: str = "y") -> None:
    """Write windows back-to-back in time order, full float precision."""
    input_cols = input_cols or [f"x{i}" for i in range(ds.input_dim)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(input_cols) + [target_col])
        for xs, ys in zip(ds.inputs.reshape(-1, ds.input_dim), ds.targets.ravel()):
            w.writerow([repr(float(v)) for v in xs] + [repr(float(ys))])


# -- normalization -----------------------------------------------------------


def fit_normalization(ds: SequenceDataset) -> NormalizationRecord:
    tr = ds.train
    if tr.n_seq == 0:
        raise DataError("normalization needs at least one train window")
    x = tr.inputs.reshape(-1, ds.input_dim)
    x_min, x_max = x.min(axis=0), x.max(axis=0)
    constant = [int(i) for i in np.flatnonzero(x_max == x_min)]
    y_min, y_max = float(tr.targets.min()), float(tr.targets.max())
    span = y_max - y_min if y_max > y_min else 1.0
    y_mean = float(((tr.targets - y_min) / span).mean())
    return NormalizationRecord(x_min, x_max, y_min, y_max, y_mean, constant)


def normalize(ds: SequenceDataset, record: NormalizationRecord | None = None
              ) -> tuple[SequenceDataset, NormalizationRecord]:
    """Min-max every input channel and the target to [0, 1] on train statistics.

    Targets are additionally centered by the train mean so the GP can use a
    zero prior mean.  Test values outside the train range are not clipped.
    """
    record = record or fit_normalization(ds)
    out = replace(ds, inputs=record.apply_inputs(ds.inputs),
                  targets=record.apply_targets(ds.targets), record=record)
    return out, record


def denormalize(record: NormalizationRecord, values, kind: str = "targets") -> np.ndarray:
    if kind == "targets":
        return record.invert_targets(values)
    if kind == "inputs":
        return record.invert_inputs(values)
    raise ValueError(f"unknown kind {kind!r}")
