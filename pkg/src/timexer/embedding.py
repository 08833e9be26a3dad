"""Patch and variate tokenisation of the input series.

Parameters are read from a flat mapping of named tensors (see
``model.param_shapes`` for the full layout):

``<prefix>.weight [P, D]``, ``<prefix>.bias [D]``, ``<prefix>.pos [N, D]``
    patch projection and learnable positional table (prefix ``embed.patch``
    for the endogenous series, ``embed.ex_patch`` for the "replace" ablation).
``embed.en_var.weight [L, D]``, ``embed.en_var.bias [D]``
    endogenous variate projector.
``embed.ex_var.weight [L', D]`` (or ``[C, L', D]`` per series), ``embed.ex_var.bias [D]``
    exogenous variate projector, shared across series by default.

Token sequences are laid out with the patch tokens first, in temporal order,
and the endogenous variate token as the final row.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class PatchSpec:
    lookback: int
    patch_len: int

    def __post_init__(self):
        if self.patch_len < 1 or self.lookback < 1:
            raise ConfigError("lookback and patch length must be positive")
        if self.lookback < self.patch_len:
            raise ConfigError(
                f"lookback {self.lookback} is shorter than patch length {self.patch_len}"
            )

    @property
    def num_patches(self):
        return self.lookback // self.patch_len

    @property
    def start(self):
        """Index of the first point covered; earlier points are dropped."""
        return self.lookback - self.num_patches * self.patch_len


def patchify(series, patch_len):
    """Split the last ``N * P`` points of ``series`` into ``N = L // P`` patches.

    Works on the last axis, so ``[..., L] -> [..., N, P]``. The oldest
    ``L mod P`` points are discarded.
    """
    series = np.asarray(series, dtype=np.float64)
    spec = PatchSpec(series.shape[-1], patch_len)
    covered = series[..., spec.start:]
    return covered.reshape(*series.shape[:-1], spec.num_patches, patch_len)


def embed_patches(patches, params, prefix="embed.patch"):
    """``patches[..., N, P] -> [..., N, D]``: linear projection plus position table."""
    patches = ad._as_tensor(patches)
    weight, bias, pos = params[f"{prefix}.weight"], params[f"{prefix}.bias"], params[f"{prefix}.pos"]
    if patches.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"patch length {patches.shape[-1]} does not match projection rows {weight.shape[0]}"
        )
    if patches.shape[-2] != pos.shape[0]:
        raise ShapeError(
            f"got {patches.shape[-2]} patches but the position table has {pos.shape[0]} rows"
        )
    return patches @ weight + bias + pos


def embed_variate(series, projector, params):
    """Project whole series to variate tokens.

    ``projector`` is ``"endogenous"`` (``[..., L] -> [..., D]``) or
    ``"exogenous"`` (``[..., C, L'] -> [..., C, D]``, one token per series).
    """
    if projector == "endogenous":
        key, expected = "embed.en_var", "L"
    elif projector == "exogenous":
        key, expected = "embed.ex_var", "L'"
    else:
        raise ConfigError(f"unknown projector {projector!r}")
    series = ad._as_tensor(series)
    weight, bias = params[f"{key}.weight"], params[f"{key}.bias"]
    width = weight.shape[-2]
    if series.shape[-1] != width:
        raise ShapeError(
            f"{projector} series has length {series.shape[-1]}, expected {expected}={width}"
        )
    if weight.ndim == 3:
        # per-series projectors: [..., C, 1, L'] @ [C, L', D] -> [..., C, 1, D]
        if series.ndim < 2 or series.shape[-2] != weight.shape[0]:
            raise ShapeError(
                f"per-series projector expects {weight.shape[0]} exogenous series, got {list(series.shape)}"
            )
        lifted = ad.reshape(series, series.shape[:-1] + (1, width))
        out = lifted @ weight
        return ad.reshape(out, out.shape[:-2] + (out.shape[-1],)) + bias
    if series.ndim == 1:
        return ad.reshape(ad.reshape(series, (1, width)) @ weight, (weight.shape[1],)) + bias
    return series @ weight + bias


def assemble_endogenous_tokens(patch_tokens, variate_token):
    """Append the variate token after the patch tokens: ``[..., N+1, D]``."""
    patch_tokens, variate_token = ad._as_tensor(patch_tokens), ad._as_tensor(variate_token)
    if patch_tokens.shape[-1] != variate_token.shape[-1]:
        raise ShapeError(
            f"token widths differ: patches {list(patch_tokens.shape)}, variate {list(variate_token.shape)}"
        )
    lifted = ad.reshape(variate_token, variate_token.shape[:-1] + (1, variate_token.shape[-1]))
    return ad.concat([patch_tokens, lifted], axis=-2)
