"""Representation similarity, attention export and experiment harnesses."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import mask_exogenous
from .errors import ConfigError, ContractError, DataError
from .model import VARIANTS, forward, init_params
from .training import evaluate, train

logger = logging.getLogger(__name__)

DEFAULT_MASK_RATIOS = (0.0, 0.25, 0.5, 0.75, 0.99)
DEFAULT_EXO_LOOKBACKS = (96, 192, 336, 512, 720)
DEFAULT_PATCH_LENGTHS = (4, 6, 8, 12, 16, 24)


# --------------------------------------------------------------------------
# CKA


@dataclass
class RepresentationMatrix:
    values: np.ndarray  # [samples, features]
    layer: int
    tokens: str = "all"


def _matrix(x):
    return np.asarray(x.values if isinstance(x, RepresentationMatrix) else x, dtype=np.float64)


def linear_cka(x, y):
    """Linear centred kernel alignment between two sample-aligned matrices.

    With column-centred ``X`` and ``Y``:
    ``||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F)``, clipped to [0, 1].
    """
    x, y = _matrix(x), _matrix(y)
    if x.ndim != 2 or y.ndim != 2:
        raise DataError("CKA inputs must be 2-D [samples, features]")
    if x.shape[0] != y.shape[0]:
        raise DataError(f"CKA inputs have {x.shape[0]} and {y.shape[0]} rows")
    if x.shape[0] < 2:
        raise DataError("CKA needs at least 2 samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx < 1e-12 or yy < 1e-12:
        raise DataError("CKA input has zero variance")
    value = np.linalg.norm(y.T @ x) ** 2 / max(xx * yy, 1e-12)
    return float(min(max(value, 0.0), 1.0))


def collect_representations(params, config, windows, n_samples=256, tokens="all"):
    """Token states after the embedding (layer 0) and after every block.

    ``tokens="all"`` flattens every endogenous token; ``"variate"`` keeps the
    last row only (the variate token, or the last patch for ``wo_V``).
    """
    if tokens not in ("all", "variate"):
        raise ConfigError(f"tokens must be 'all' or 'variate', got {tokens!r}")
    n = min(n_samples, len(windows))
    if n < 2:
        raise DataError("need at least 2 windows for representation analysis")
    states = forward(windows.endo[:n], windows.exo[:n], params, config).states
    out = []
    for layer, s in enumerate(states):
        values = s.reshape(n, -1) if tokens == "all" else s[:, -1, :]
        out.append(RepresentationMatrix(values, layer, tokens))
    return out


def cka_matrix(representations):
    k = len(representations)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = linear_cka(representations[i], representations[j])
    return out


def first_last_similarity(matrix):
    """CKA between the first and last block outputs (embedding vs block 1 when M = 1)."""
    k = matrix.shape[0]
    return float(matrix[1, k - 1]) if k > 2 else float(matrix[0, k - 1])


# --------------------------------------------------------------------------
# attention


@dataclass
class AttentionExport:
    cross: np.ndarray  # [M, C] head-averaged weights over exogenous tokens
    cross_heads: np.ndarray  # [M, H, C]
    self_maps: np.ndarray  # [M, H, T, T]
    names: list  # one label per exogenous token

    def summary(self):
        rows = []
        for layer, w in enumerate(self.cross):
            hi, lo = int(np.argmax(w)), int(np.argmin(w))
            rows.append({
                "layer": layer,
                "weights": {n: float(v) for n, v in zip(self.names, w)},
                "argmax": self.names[hi],
                "argmax_weight": float(w[hi]),
                "argmin": self.names[lo],
                "argmin_weight": float(w[lo]),
            })
        return rows

    def arrays(self):
        return {"cross": self.cross, "cross_heads": self.cross_heads, "self": self.self_maps}


def export_attention(result, exo_names):
    """Attention weights from a single-sample forward run with ``capture=True``."""
    if not result.cross_attention:
        raise ContractError("attention capture was disabled for this forward pass")
    cross_heads = np.stack([w[..., 0, :] for w in result.cross_attention])
    if cross_heads.ndim != 3:
        raise ContractError("export_attention expects an unbatched forward result")
    n_keys = cross_heads.shape[-1]
    names = list(exo_names)
    if len(names) != n_keys:
        # one token per exogenous patch ("replace" variant)
        per = n_keys // max(len(names), 1)
        names = [f"{n}[{i}]" for n in names for i in range(per)] if per * len(names) == n_keys else [
            f"token_{i}" for i in range(n_keys)
        ]
    return AttentionExport(
        cross=cross_heads.mean(axis=1),
        cross_heads=cross_heads,
        self_maps=np.stack(result.self_attention),
        names=names,
    )


def attention_for_sample(params, config, sample, exo_names):
    result = forward(sample.endo_in, sample.exo_in, params, config, capture=True)
    return export_attention(result, exo_names)


# --------------------------------------------------------------------------
# experiment harnesses


def fit(data, config):
    """Train a fresh model on ``data``; returns ``(params, report, windows)``."""
    if config.per_series_exo and config.n_exo != data.n_exo:
        config = config.replace(n_exo=data.n_exo)
    windows = data.windows_for(config)
    if "val" not in windows:
        raise DataError("training needs a non-empty validation split")
    params, report = train(init_params(config), config, windows["train"], windows["val"])
    return params, report, windows


def fit_and_test(data, config):
    params, report, windows = fit(data, config)
    scores = evaluate(params, config, windows["test"])
    return {"mse": scores["mse"], "mae": scores["mae"], "best_epoch": report.best_epoch}


def _run_points(data, configs, jobs):
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fit_and_test, [data] * len(configs), configs))
    return [fit_and_test(data, c) for c in configs]


def _config_diff(a, b):
    da, db = a.to_dict(), b.to_dict()
    return {k for k in da if da[k] != db[k]}


def _horizon_average(rows, key):
    out = []
    for value in dict.fromkeys(r[key] for r in rows):
        sel = [r for r in rows if r[key] == value]
        out.append({
            key: value,
            "horizon": "avg",
            "mse": float(np.mean([r["mse"] for r in sel])),
            "mae": float(np.mean([r["mae"] for r in sel])),
        })
    return out


def run_ablation(data, base_config, variants=VARIANTS, horizons=None, jobs=1):
    """Train one model per (variant, horizon) with identical seeds.

    Returns rows ``{variant, horizon, mse, mae, best_epoch}`` followed by one
    horizon-averaged row per variant.
    """
    if not variants:
        raise ConfigError("run_ablation needs at least one variant")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
    horizons = list(horizons or [base_config.horizon])
    points, configs = [], []
    for h in horizons:
        reference = base_config.replace(horizon=h)
        for v in variants:
            cfg = reference.replace(variant=v)
            changed = _config_diff(reference, cfg)
            if not changed <= {"variant"}:
                raise ContractError(f"ablation rows differ in more than the variant: {sorted(changed)}")
            points.append((v, h))
            configs.append(cfg)
    results = _run_points(data, configs, jobs)
    rows = [{"variant": v, "horizon": h, **r} for (v, h), r in zip(points, results)]
    return rows + _horizon_average(rows, "variant")


def mask_sweep(data, config, ratios=DEFAULT_MASK_RATIOS, params=None):
    """Train once on clean data, then evaluate the test split with masked exogenous inputs.

    Returns ``{ratio: {"mse", "mae"}}``. The mask generator is seeded from
    ``config.seed``.
    """
    for r in ratios:
        if not 0.0 <= r <= 0.99:
            raise ConfigError(f"mask ratios must lie in [0, 0.99], got {r}")
    windows = data.windows_for(config)
    if params is None:
        params, _, windows = fit(data, config)
    test = windows["test"]
    return {float(r): evaluate(params, config, mask_exogenous(test, r, config.seed)) for r in ratios}


def lookback_sweep(data, config, exo_lengths=DEFAULT_EXO_LOOKBACKS, horizons=None, jobs=1):
    """Vary the exogenous lookback with the endogenous lookback held at ``config.lookback``."""
    horizons = list(horizons or [config.horizon])
    points = [(le, h) for le in exo_lengths for h in horizons]
    configs = [config.replace(exo_lookback=le, horizon=h) for le, h in points]
    for c in configs:
        data.windows_for(c)  # raises early if the data is too short
    results = _run_points(data, configs, jobs)
    return [{"exo_lookback": le, "horizon": h, **r} for (le, h), r in zip(points, results)]


def patch_length_sweep(data, config, patch_lengths=DEFAULT_PATCH_LENGTHS, horizons=None, jobs=1):
    """Retrain per patch length; returns per-horizon rows, one averaged row per
    patch length, and the max/min ratio of the averaged MSE."""
    for p in patch_lengths:
        if p > config.lookback:
            raise ConfigError(f"patch length {p} exceeds lookback {config.lookback}")
    horizons = list(horizons or [config.horizon])
    points = [(p, h) for p in patch_lengths for h in horizons]
    results = _run_points(data, [config.replace(patch=p, horizon=h) for p, h in points], jobs)
    rows = [{"patch": p, "horizon": h, **r} for (p, h), r in zip(points, results)]
    averaged = _horizon_average(rows, "patch")
    mses = [r["mse"] for r in averaged]
    spread = max(mses) / min(mses) if min(mses) > 0 else float("inf")
    return rows, averaged, spread
