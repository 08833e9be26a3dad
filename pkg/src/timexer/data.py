"""CSV ingestion, chronological splits, standardisation, windowing and masking."""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import parse_key_values, parse_value

logger = logging.getLogger(__name__)

TIMESTAMP_NAMES = ("date", "datetime", "time", "timestamp")
STD_FLOOR = 1e-8


@dataclass
class SeriesTable:
    columns: list
    values: np.ndarray  # [T, K], one column per series
    timestamps: list = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise DataError(f"values {self.values.shape} do not match {len(self.columns)} columns")

    def __len__(self):
        return self.values.shape[0]

    def column(self, name):
        return self.values[:, self.index(name)]

    def index(self, name):
        try:
            return self.columns.index(name)
        except ValueError:
            raise DataError(f"column {name!r} not found; available: {', '.join(self.columns)}") from None

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            head = (["date"] if self.timestamps is not None else []) + list(self.columns)
            writer.writerow(head)
            for i, row in enumerate(self.values):
                stamp = [self.timestamps[i]] if self.timestamps is not None else []
                writer.writerow(stamp + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class Roles:
    endo: str
    exo: tuple


def _resolve_column(columns, ref):
    if isinstance(ref, int) or (isinstance(ref, str) and ref.isdigit() and ref not in columns):
        idx = int(ref)
        if not 0 <= idx < len(columns):
            raise DataError(f"column index {idx} out of range; available: {', '.join(columns)}")
        return columns[idx]
    if ref not in columns:
        raise DataError(f"column {ref!r} not found; available: {', '.join(columns)}")
    return ref


def load_csv(path, endo_column, exo_columns="all_others", timestamp_column=None):
    """Read a headered comma-separated file.

    Returns ``(table, roles)``. A column named date/datetime/time/timestamp (or
    ``timestamp_column``) is kept as text and not modelled. ``exo_columns`` is a
    list of names/indices or ``"all_others"``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    stamp_idx = None
    for i, name in enumerate(header):
        if name == timestamp_column or (timestamp_column is None and name.lower() in TIMESTAMP_NAMES):
            stamp_idx = i
            break
    value_cols = [h for i, h in enumerate(header) if i != stamp_idx]

    values, stamps = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        parsed = []
        for i, cell in enumerate(row):
            if i == stamp_idx:
                stamps.append(cell)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {header[i]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite value in column {header[i]!r}")
            parsed.append(v)
        values.append(parsed)

    table = SeriesTable(
        value_cols,
        np.array(values, dtype=np.float64).reshape(-1, len(value_cols)),
        stamps if stamp_idx is not None else None,
    )
    return table, assign_roles(table, endo_column, exo_columns)


def assign_roles(table, endo_column, exo_columns="all_others"):
    endo = _resolve_column(table.columns, endo_column)
    if exo_columns in (None, "all_others"):
        exo = [c for c in table.columns if c != endo]
    else:
        if isinstance(exo_columns, str):
            exo_columns = [c.strip() for c in exo_columns.split(",") if c.strip()]
        exo = [_resolve_column(table.columns, c) for c in exo_columns]
        if endo in exo:
            raise DataError(f"column {endo!r} cannot be both endogenous and exogenous")
    if not exo:
        raise DataError(">=1 exogenous column required")
    return Roles(endo, tuple(exo))


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/val/test sizes, as row counts (ints) or fractions (floats)."""

    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def sizes(self, total):
        parts = (self.train, self.val, self.test)
        if any(p < 0 for p in parts):
            raise ConfigError("split sizes must be non-negative")
        if all(isinstance(p, int) for p in parts):
            sizes = parts
        elif all(p <= 1.0 for p in parts):
            n_train, n_test = int(round(total * self.train)), int(round(total * self.test))
            sizes = (n_train, total - n_train - n_test if self.val else 0, n_test)
        else:
            raise ConfigError("split sizes must be all counts or all fractions")
        if sum(sizes) > total:
            raise ConfigError(f"split sizes {sizes} exceed series length {total}")
        if sizes[0] < 1:
            raise ConfigError("train split is empty")
        return sizes

    def bounds(self, total):
        """``{"train": (start, stop), ...}`` row ranges, in order."""
        n_train, n_val, n_test = self.sizes(total)
        return {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n_train + n_val + n_test),
        }

    @classmethod
    def parse(cls, text):
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) != 3:
            raise ConfigError(f"split needs three comma-separated sizes, got {text!r}")
        kind = int if all(p.isdigit() for p in parts) else float
        return cls(*(kind(p) for p in parts))


@dataclass
class Standardizer:
    """Per-column (mean, std) fitted on the training rows."""

    columns: list
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean

    def column_stats(self, name):
        i = self.columns.index(name)
        return float(self.mean[i]), float(self.std[i])


def standardize(table, split):
    """z-score every column with statistics from the train split only.

    Returns ``(standardized_table, standardizer)``. Standard deviations are
    floored at 1e-8; constant columns log a warning.
    """
    start, stop = split.bounds(len(table))["train"]
    train = table.values[start:stop]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    for name, s in zip(table.columns, std):
        if s < STD_FLOOR:
            logger.warning("column %r is constant on the train split; std floored at %g", name, STD_FLOOR)
    std = np.maximum(std, STD_FLOOR)
    scaler = Standardizer(list(table.columns), mean, std)
    return replace(table, values=scaler.transform(table.values)), scaler


@dataclass
class WindowSample:
    endo_in: np.ndarray  # [L]
    exo_in: np.ndarray  # [C, L']
    target: np.ndarray  # [S]
    origin_index: int


@dataclass
class WindowSet:
    """Stacked windows of one split; iterating yields :class:`WindowSample`."""

    endo: np.ndarray  # [n, L]
    exo: np.ndarray  # [n, C, L']
    target: np.ndarray  # [n, S]
    origin: np.ndarray  # [n]
    exo_names: tuple = ()

    def __len__(self):
        return self.endo.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return WindowSample(self.endo[i], self.exo[i], self.target[i], int(self.origin[i]))
        return WindowSet(self.endo[i], self.exo[i], self.target[i], self.origin[i], self.exo_names)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def concat(cls, sets):
        return cls(
            np.concatenate([s.endo for s in sets]),
            np.concatenate([s.exo for s in sets]),
            np.concatenate([s.target for s in sets]),
            np.concatenate([s.origin for s in sets]),
            sets[0].exo_names if sets else (),
        )


def window_count(length, lookback, exo_lookback, horizon, stride=1):
    """Closed-form number of windows that fit in ``length`` rows."""
    span = max(lookback, exo_lookback) + horizon
    return 0 if length < span else (length - span) // stride + 1


def _windows_in(endo, exo, start, stop, lookback, exo_lookback, horizon, stride, name, exo_names):
    length = stop - start
    context = max(lookback, exo_lookback)
    if length < context + horizon:
        raise DataError(
            f"{name} split has {length} rows; need at least {context + horizon} "
            f"(max(L={lookback}, L'={exo_lookback}) + S={horizon})"
        )
    origins = np.arange(start + context, stop - horizon + 1, stride)
    e_idx = origins[:, None] + np.arange(-lookback, 0)
    x_idx = origins[:, None] + np.arange(-exo_lookback, 0)
    t_idx = origins[:, None] + np.arange(horizon)
    return WindowSet(
        endo[e_idx],
        np.transpose(exo[x_idx], (0, 2, 1)).copy(),
        endo[t_idx],
        origins,
        tuple(exo_names),
    )


def make_windows(table, roles, lookback, exo_lookback, horizon, split, stride=1, splits=("train", "val", "test")):
    """Sliding windows per split; windows never cross a split boundary.

    Inputs end at ``origin - 1`` for both endogenous and exogenous series
    (right-aligned), and the target covers ``origin .. origin + S - 1``.
    Empty splits (size 0) are skipped.
    """
    if min(lookback, exo_lookback, horizon, stride) < 1:
        raise ConfigError("lookback, exo_lookback, horizon and stride must be positive")
    endo = table.column(roles.endo)
    exo = np.stack([table.column(c) for c in roles.exo], axis=1)
    out = {}
    for name, (start, stop) in split.bounds(len(table)).items():
        if name not in splits or stop == start:
            continue
        out[name] = _windows_in(endo, exo, start, stop, lookback, exo_lookback, horizon, stride, name, roles.exo)
    return out


def mask_exogenous(windows, ratio, seed):
    """Replace each exogenous value by 0 (the standardised mean) with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    mask = rng.random(windows.exo.shape) < ratio
    return replace(windows, exo=np.where(mask, 0.0, windows.exo))


def multivariate_windows(table, lookback, horizon, split, stride=1, columns=None):
    """Windows with every column in turn as the endogenous series.

    Returns ``{split: WindowSet}`` whose samples cycle through roles: sample
    ``k * V + v`` has column ``v`` as endogenous and the others as exogenous.
    """
    columns = list(columns or table.columns)
    if len(columns) < 2:
        raise ConfigError("multivariate forecasting needs at least 2 variables")
    per_role = []
    for v, col in enumerate(columns):
        roles = Roles(col, tuple(c for c in columns if c != col))
        per_role.append(make_windows(table, roles, lookback, lookback, horizon, split, stride))
    out = {}
    for name in per_role[0]:
        sets = [r[name] for r in per_role]
        n = len(sets[0])
        order = np.arange(n * len(columns)).reshape(len(columns), n).T.ravel()
        merged = WindowSet.concat(sets)
        out[name] = replace(merged[order], exo_names=())
    return out


def synth_causal_dataset(T, C, lag, noise, seed, weights=None, seasonal=0.5, period=24, phi=0.95, harmonics=1):
    """Synthetic table where the endogenous series is driven by lagged exogenous series.

    Exogenous column ``c`` (``exo_1`` .. ``exo_C``)::

        a_c(t) = phi * a_c(t-1) + sqrt(1 - phi^2) * e_c(t),   e_c ~ N(0, 1)
        z_c(t) = a_c(t) + 0.5 * sin(2 pi t / p_c + u_c),   p_c = period * (c + 1.5),  u_c ~ U(0, 2 pi)

    Endogenous column ``target``::

        x(t) = sum_c w_c * z_c(t - lag) + seasonal * s(t) + noise * n(t),  n ~ N(0, 1)
        s(t) = sum_{k=1..K} sin(2 pi k t / period + v_k) / k,  v_1 = 0,  v_k ~ U(0, 2 pi)

    with ``K = harmonics`` (``K = 1`` is a plain sine).

    Default weights are ``w_c = 1 / C``. The exogenous tokens carry no series
    identity, so a model can only exploit drivers whose weights are symmetric
    across series; pass ``weights`` explicitly for other mixtures.
    The exogenous series are simulated ``lag`` steps earlier so ``z_c(t - lag)``
    exists for every row.
    """
    if T <= lag + 200:
        raise ConfigError(f"T must exceed lag + 200 = {lag + 200}")
    if C < 1 or lag < 0 or noise < 0:
        raise ConfigError("C must be >= 1; lag and noise must be non-negative")
    rng = np.random.default_rng(seed)
    weights = np.full(C, 1.0 / C) if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != (C,):
        raise ConfigError(f"expected {C} weights, got {weights.shape}")
    total = T + lag
    t_full = np.arange(total) - lag
    shocks = rng.normal(size=(total, C))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=C)
    ar = np.empty((total, C))
    ar[0] = shocks[0]
    scale = math.sqrt(1.0 - phi * phi)
    for t in range(1, total):
        ar[t] = phi * ar[t - 1] + scale * shocks[t]
    periods = period * (np.arange(C) + 1.5)
    exo = ar + 0.5 * np.sin(2.0 * np.pi * t_full[:, None] / periods + phases)
    t = np.arange(T)
    shifts = np.concatenate([[0.0], rng.uniform(0.0, 2.0 * np.pi, size=max(harmonics - 1, 0))])
    profile = sum(np.sin(2.0 * np.pi * k * t / period + shifts[k - 1]) / k for k in range(1, harmonics + 1))
    endo = exo[:T] @ weights + seasonal * profile + noise * rng.normal(size=T)
    values = np.column_stack([endo, exo[lag:]])
    return SeriesTable(["target"] + [f"exo_{c + 1}" for c in range(C)], values)


@dataclass
class DataManifest:
    """Key-value dataset description (path, roles, split, default lengths)."""

    path: str
    endo: str
    exo: str = "all_others"
    split: SplitSpec = field(default_factory=SplitSpec)
    lookback: int = 0
    exo_lookback: int = 0
    horizon: int = 0

    @classmethod
    def read(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        values = parse_key_values(path.read_text(encoding="utf-8"))
        if "path" not in values or "endo" not in values:
            raise ConfigError(f"{path}: manifest needs 'path' and 'endo' keys")
        data_path = Path(values["path"])
        if not data_path.is_absolute():
            data_path = path.parent / data_path
        kwargs = {"path": str(data_path), "endo": values["endo"], "exo": values.get("exo", "all_others")}
        if "split" in values:
            kwargs["split"] = SplitSpec.parse(values["split"])
        for key in ("lookback", "exo_lookback", "horizon"):
            if key in values:
                kwargs[key] = parse_value(int, values[key], key)
        unknown = set(values) - {"path", "endo", "exo", "split", "lookback", "exo_lookback", "horizon"}
        if unknown:
            raise ConfigError(f"{path}: unknown manifest keys {sorted(unknown)}")
        return cls(**kwargs)

    def write(self, path):
        s = self.split
        lines = [f"path={self.path}", f"endo={self.endo}", f"exo={self.exo}", f"split={s.train},{s.val},{s.test}"]
        lines += [f"{k}={getattr(self, k)}" for k in ("lookback", "exo_lookback", "horizon") if getattr(self, k)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class PreparedData:
    """A standardised table with roles and split, ready for windowing."""

    table: SeriesTable
    roles: Roles
    split: SplitSpec
    scaler: Standardizer
    raw: SeriesTable = None

    @classmethod
    def from_table(cls, table, roles, split):
        std_table, scaler = standardize(table, split)
        return cls(std_table, roles, split, scaler, table)

    @classmethod
    def from_manifest(cls, manifest):
        if not isinstance(manifest, DataManifest):
            manifest = DataManifest.read(manifest)
        table, roles = load_csv(manifest.path, manifest.endo, manifest.exo)
        return cls.from_table(table, roles, manifest.split)

    @property
    def n_exo(self):
        return len(self.roles.exo)

    @property
    def endo_stats(self):
        return self.scaler.column_stats(self.roles.endo)

    def windows(self, lookback, exo_lookback, horizon, stride=1, splits=("train", "val", "test")):
        return make_windows(self.table, self.roles, lookback, exo_lookback, horizon, self.split, stride, splits)

    def windows_for(self, config, splits=("train", "val", "test")):
        return self.windows(config.lookback, config.exo_len, config.horizon, config.stride, splits)
