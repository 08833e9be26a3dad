"""End-to-end TimeXer forecaster: configuration, parameters, forward pass and loss."""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import timexer_block
from .embedding import PatchSpec, assemble_endogenous_tokens, embed_patches, embed_variate, patchify
from .errors import ConfigError, ShapeError

VARIANTS = ("ours_TV_V", "replace_TV_T", "wo_V", "wo_T")
HEAD_MODES = ("flatten_all", "variate_only")
INIT_STD = 0.02


@dataclass(frozen=True)
class TimeXerConfig:
    """Hyperparameters. ``exo_lookback=0`` means "same as lookback" and
    ``ffn_dim=0`` means ``4 * model_dim``; :meth:`resolved` materialises both."""

    lookback: int = 96
    exo_lookback: int = 0
    horizon: int = 24
    patch: int = 16
    model_dim: int = 128
    heads: int = 8
    blocks: int = 1
    ffn_dim: int = 0
    dropout: float = 0.1
    lr: float = 1e-4
    max_epochs: int = 10
    patience: int = 3
    batch_size: int = 32
    seed: int = 2024
    head_mode: str = "variate_only"
    variant: str = "ours_TV_V"
    use_ffn: bool = True
    per_series_exo: bool = False
    n_exo: int = 0
    clip_norm: float = 0.0
    stride: int = 1

    def __post_init__(self):
        for name in ("lookback", "horizon", "patch", "model_dim", "heads", "blocks",
                     "max_epochs", "patience", "batch_size", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.exo_lookback < 0 or self.ffn_dim < 0 or self.n_exo < 0:
            raise ConfigError("exo_lookback, ffn_dim and n_exo must be non-negative")
        if self.lookback < self.patch:
            raise ConfigError(f"lookback {self.lookback} is shorter than patch length {self.patch}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "replace_TV_T" and self.exo_len < self.patch:
            raise ConfigError("replace_TV_T needs exo_lookback >= patch")
        if self.per_series_exo and self.n_exo < 1:
            raise ConfigError("per_series_exo requires n_exo (number of exogenous series)")

    @property
    def exo_len(self):
        return self.exo_lookback or self.lookback

    @property
    def ffn_width(self):
        return self.ffn_dim or 4 * self.model_dim

    @property
    def num_patches(self):
        return PatchSpec(self.lookback, self.patch).num_patches

    @property
    def num_tokens(self):
        """Endogenous sequence length seen by the blocks."""
        return {"wo_T": 1, "wo_V": self.num_patches}.get(self.variant, self.num_patches + 1)

    def resolved(self):
        return dataclasses.replace(self, exo_lookback=self.exo_len, ffn_dim=self.ffn_width)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values):
        kinds = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: parse_value(kinds[k], v, k) for k, v in values.items()})

    @classmethod
    def from_text(cls, text):
        return cls.from_dict(parse_key_values(text))


def parse_value(kind, raw, name="value"):
    if not isinstance(raw, str):
        return kind(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r} as {kind.__name__}") from None
    return raw


def parse_key_values(text):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def param_shapes(config, n_exo=None):
    """Ordered ``(name, shape)`` pairs; this order is the canonical checkpoint order."""
    c = config
    d, n = c.model_dim, c.num_patches
    shapes = []
    if c.variant != "wo_T":
        shapes += [("embed.patch.weight", (c.patch, d)), ("embed.patch.bias", (d,)),
                   ("embed.patch.pos", (n, d))]
    if c.variant != "wo_V":
        shapes += [("embed.en_var.weight", (c.lookback, d)), ("embed.en_var.bias", (d,))]
    if c.variant == "replace_TV_T":
        n_ex = PatchSpec(c.exo_len, c.patch).num_patches
        shapes += [("embed.ex_patch.weight", (c.patch, d)), ("embed.ex_patch.bias", (d,)),
                   ("embed.ex_patch.pos", (n_ex, d))]
    else:
        ex_shape = (c.n_exo, c.exo_len, d) if c.per_series_exo else (c.exo_len, d)
        shapes += [("embed.ex_var.weight", ex_shape), ("embed.ex_var.bias", (d,))]
    for layer in range(c.blocks):
        pre = f"blocks.{layer}"
        for attn in ("self_attn", "cross_attn"):
            shapes += [(f"{pre}.{attn}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]
        if c.use_ffn:
            shapes += [(f"{pre}.ffn.w1", (d, c.ffn_width)), (f"{pre}.ffn.b1", (c.ffn_width,)),
                       (f"{pre}.ffn.w2", (c.ffn_width, d)), (f"{pre}.ffn.b2", (d,))]
        for ln in ("ln1", "ln2", "ln3") if c.use_ffn else ("ln1", "ln2"):
            shapes += [(f"{pre}.{ln}.gamma", (d,)), (f"{pre}.{ln}.beta", (d,))]
    head_in = d if c.head_mode == "variate_only" else c.num_tokens * d
    shapes += [("head.weight", (head_in, c.horizon)), ("head.bias", (c.horizon,))]
    return shapes


def param_count(config):
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


def init_params(config, seed=None):
    """Fresh float32 parameters: weights and position tables ~ N(0, 0.02),
    biases 0, LayerNorm gamma 1 / beta 0."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("bias", "beta") or leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = arr.astype(np.float32)
    return params


@dataclass
class ForwardResult:
    prediction: ad.Tensor
    states: list = field(default_factory=list)
    self_attention: list = field(default_factory=list)
    cross_attention: list = field(default_factory=list)
    block_captures: list = field(default_factory=list)


def _as_params(params):
    return {k: v if isinstance(v, ad.Tensor) else ad.parameter(v, k) for k, v in params.items()}


def forward(endo, exo, params, config, rng=None, capture=False):
    """Predict the next ``horizon`` endogenous values.

    ``endo`` is ``[L]`` or ``[B, L]``; ``exo`` is ``[C, L']`` or ``[B, C, L']``.
    Dropout is applied only when ``rng`` is given. ``states`` always holds the
    endogenous token states after the embedding and after every block
    (``[..., T, D]`` numpy arrays); with ``capture`` the per-block attention
    weights are kept as well.
    """
    c = config
    endo = np.asarray(endo, dtype=np.float64)
    exo = np.asarray(exo, dtype=np.float64)
    single = endo.ndim == 1
    if single:
        endo, exo = endo[None], exo[None]
    if endo.ndim != 2 or exo.ndim != 3:
        raise ConfigError(f"expected endo [B, L] and exo [B, C, L'], got {endo.shape} and {exo.shape}")
    if endo.shape[-1] != c.lookback:
        raise ConfigError(f"endogenous input has length {endo.shape[-1]}, config lookback is {c.lookback}")
    if exo.shape[-1] != c.exo_len:
        raise ConfigError(f"exogenous input has length {exo.shape[-1]}, config exo_lookback is {c.exo_len}")
    if exo.shape[1] < 1:
        raise ConfigError("forecasting with exogenous variables requires >=1 exogenous series")
    if exo.shape[0] != endo.shape[0]:
        raise ConfigError(f"batch sizes differ: endo {endo.shape[0]}, exo {exo.shape[0]}")

    p = _as_params(params)
    if c.variant == "wo_T":
        var = embed_variate(endo, "endogenous", p)
        tokens = ad.reshape(var, (var.shape[0], 1, var.shape[1]))
    else:
        patches = embed_patches(patchify(endo, c.patch), p)
        if c.variant == "wo_V":
            tokens = patches
        else:
            tokens = assemble_endogenous_tokens(patches, embed_variate(endo, "endogenous", p))

    if c.variant == "replace_TV_T":
        ex = embed_patches(patchify(exo, c.patch), p, prefix="embed.ex_patch")
        b, nc, ne, d = ex.shape
        exo_tokens = ad.reshape(ex, (b, nc * ne, d))
    else:
        exo_tokens = embed_variate(exo, "exogenous", p)

    result = ForwardResult(prediction=None, states=[tokens.data])
    for layer in range(c.blocks):
        cap = {} if capture else None
        tokens = timexer_block(
            tokens, exo_tokens, p, f"blocks.{layer}", c.heads,
            dropout=c.dropout if rng is not None else 0.0, rng=rng,
            use_ffn=c.use_ffn, variate_token=c.variant != "wo_V", capture=cap,
        )
        result.states.append(tokens.data)
        if capture:
            result.self_attention.append(cap["self"])
            result.cross_attention.append(cap["cross"])
            result.block_captures.append(cap)

    pred = project_head(tokens, p, c)
    if single:
        pred = ad.reshape(pred, (c.horizon,))
        result.states = [s[0] for s in result.states]
        result.self_attention = [w[0] for w in result.self_attention]
        result.cross_attention = [w[0] for w in result.cross_attention]
    result.prediction = pred
    return result


def project_head(final_tokens, params, config):
    """Linear map from the final token states to ``horizon`` values.

    ``flatten_all`` flattens every endogenous token; ``variate_only`` reads
    just the last (variate) row, or the mean token for the ``wo_V`` variant,
    which has no variate row.
    """
    final_tokens = ad._as_tensor(final_tokens)
    weight, bias = params["head.weight"], params["head.bias"]
    if config.head_mode == "variate_only" and config.variant == "wo_V":
        x = ad.mean(final_tokens, axis=-2)
    elif config.head_mode == "variate_only":
        x = final_tokens[..., -1, :]
    else:
        lead = final_tokens.shape[:-2]
        x = ad.reshape(final_tokens, lead + (final_tokens.shape[-2] * final_tokens.shape[-1],))
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"head expects input width {weight.shape[0]}, got {x.shape[-1]}")
    if x.ndim == 1:
        return ad.reshape(ad.reshape(x, (1, x.shape[0])) @ weight, (weight.shape[1],)) + bias
    return x @ weight + bias


def l2_loss(pred, target):
    """Sum of squared errors over the horizon, averaged over the batch."""
    pred = ad._as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {list(pred.shape)} != target shape {list(target.shape)}")
    diff = pred - target
    sq = diff * diff
    if sq.ndim == 1:
        return ad.sum(sq)
    return ad.mean(ad.sum(sq, axis=-1))


def role_indices(n_vars):
    """For each variable v, the indices of all other variables (its exogenous set)."""
    return np.array([[u for u in range(n_vars) if u != v] for v in range(n_vars)])


def multivariate_forecast(window, params, config):
    """Forecast every variable of ``window [V, L]`` (or ``[B, V, L]``).

    Each variable in turn is endogenous with the remaining ``V - 1`` as
    exogenous series. ``params`` is one shared parameter set, or a list of
    ``V`` sets for per-variable models. Returns ``[V, S]`` (``[B, V, S]``).
    """
    window = np.asarray(window, dtype=np.float64)
    single = window.ndim == 2
    if single:
        window = window[None]
    n_vars = window.shape[1]
    if n_vars < 2:
        raise ConfigError("multivariate forecasting needs at least 2 variables")
    if config.exo_len != config.lookback:
        raise ConfigError("multivariate mode requires exo_lookback == lookback")
    others = role_indices(n_vars)
    out = np.empty((window.shape[0], n_vars, config.horizon))
    per_variable = isinstance(params, (list, tuple))
    if per_variable and len(params) != n_vars:
        raise ConfigError(f"got {len(params)} parameter sets for {n_vars} variables")
    if per_variable:
        for v in range(n_vars):
            res = forward(window[:, v], window[:, others[v]], params[v], config)
            out[:, v] = res.prediction.data
    else:
        b = window.shape[0]
        endo = window.reshape(b * n_vars, -1)
        exo = window[:, others].reshape(b * n_vars, n_vars - 1, -1)
        out[:] = forward(endo, exo, params, config).prediction.data.reshape(b, n_vars, -1)
    return out[0] if single else out
