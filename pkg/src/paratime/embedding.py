"""Instance normalization, patching and the dual patch embedding.

A univariate lookback of length L is instance-normalized (statistics saved
for inversion on the forecast), cut into non-overlapping patches of
``patch_len`` samples, and each patch is embedded by the sum of a linear map
over its samples and a small convolution mean-pooled over its positions.
A learned absolute positional table is added per patch index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import trunc_normal
from .tensor import Tensor

__all__ = [
    "RevinState",
    "PatchGrid",
    "EmbedParams",
    "revin_normalize",
    "revin_denormalize",
    "patchify",
    "embed",
]

log = logging.getLogger(__name__)


@dataclass
class RevinState:
    """Saved per-instance statistics; constants with respect to gradients."""

    mean: np.ndarray  # [.., 1]
    std: np.ndarray  # [.., 1], floored away from zero by eps


def revin_normalize(
    x: Tensor,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-5,
) -> tuple[Tensor, RevinState]:
    """Zero-mean unit-variance per instance (last axis), optional affine."""
    mean = x.data.mean(axis=-1, keepdims=True)
    std = np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    state = RevinState(mean=mean, std=std)
    out = T.mul(T.sub(x, Tensor(mean)), Tensor(1.0 / std))
    if gain is not None:
        out = T.mul(out, gain)
    if bias is not None:
        out = T.add(out, bias)
    return out, state


def revin_denormalize(
    y: Tensor,
    state: RevinState,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Invert the affine, then restore the saved scale and mean."""
    if bias is not None:
        y = T.sub(y, bias)
    if gain is not None:
        y = T.div(y, T.add(gain, Tensor(np.asarray(eps * eps, dtype=gain.dtype))))
    return T.add(T.mul(y, Tensor(state.std)), Tensor(state.mean))


@dataclass
class PatchGrid:
    """Non-overlapping patch layout; stride equals patch length."""

    patch_len: int
    length: int

    @property
    def pad(self) -> int:
        return self.n_patches * self.patch_len - self.length

    @property
    def n_patches(self) -> int:
        return math.ceil(self.length / self.patch_len)


def patchify(x: Tensor, grid: PatchGrid) -> Tensor:
    """Reshape ``[.., L]`` into ``[.., P, patch_len]`` rows.

    A length not divisible by the patch length is left-padded with the first
    value (logged); targets are never touched.
    """
    if x.shape[-1] != grid.length:
        raise ShapeError(f"patchify: input length {x.shape[-1]} != grid length {grid.length}")
    if grid.pad:
        log.info("patchify: left-padding %d samples to fit patch_len=%d", grid.pad, grid.patch_len)
        x = T.pad_left(x, grid.pad, mode="edge")
    return T.reshape(x, x.shape[:-1] + (grid.n_patches, grid.patch_len))


class EmbedParams:
    """Dual patch embedding: linear over samples + conv over positions + position table."""

    def __init__(
        self,
        patch_len: int,
        dim: int,
        n_patches: int,
        k_embed: int = 3,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = rng or np.random.default_rng(0)
        self.patch_len = patch_len
        self.dim = dim
        self.k_embed = k_embed
        self.w_linear = Tensor(trunc_normal(rng, (patch_len, dim), dtype=dtype), requires_grad=True)
        self.conv_kernels = Tensor(trunc_normal(rng, (dim, 1, k_embed), dtype=dtype), requires_grad=True)
        self.pos_table = Tensor(rng.normal(0.0, 0.02, size=(n_patches, dim)).astype(dtype), requires_grad=True)

    def named_parameters(self, prefix: str = "embed"):
        yield f"{prefix}.w_linear", self.w_linear
        yield f"{prefix}.conv_kernels", self.conv_kernels
        yield f"{prefix}.pos_table", self.pos_table


def embed(patches: Tensor, params: EmbedParams) -> Tensor:
    """Map ``[.., P, patch_len]`` patches to ``[.., P, dim]`` tokens.

    The linear path mixes all samples of a patch; the conv path slides a
    width-``k_embed`` kernel (same padding) over the patch and mean-pools
    its positions. Both are summed, then the positional row for each patch
    index is added. Token p never sees any other patch.
    """
    linear_path = T.matmul(patches, params.w_linear)
    lead = patches.shape[:-1]
    as_channels = T.reshape(patches, lead + (1, params.patch_len))
    conv = T.conv1d(as_channels, params.conv_kernels, padding="same")
    conv_path = T.tmean(conv, axis=-1)
    return T.add(T.add(linear_path, conv_path), params.pos_table)
