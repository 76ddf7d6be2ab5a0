"""Per-patch gating of the attention and SSM branch outputs.

Each branch output row is RMS-normalized, compressed to ``ceil(sqrt(dim))``
features through its own map, concatenated with the other branch, lifted to
a wider hidden layer with ReLU and projected to two logits. Sigmoid (not
softmax: the two weights are deliberately unconstrained as a pair) yields
``(w_att, w_mamba)`` in (0, 1) per patch, and the fused output is the weighted
sum of the original, un-normalized branch outputs. The ``mean`` and ``sum``
strategies (which operate on normalized branches) are kept as ablation
baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import Linear, RmsNorm
from .tensor import Tensor

__all__ = ["WeighterParams", "BranchOutputs", "WeightPair", "compute_weights", "fuse", "FUSION_STRATEGIES"]

FUSION_STRATEGIES = ("paralleltime", "mean", "sum")


@dataclass
class BranchOutputs:
    x_att: Tensor  # [.., P, dim]
    x_mamba: Tensor  # [.., P, dim]


@dataclass
class WeightPair:
    w_att: np.ndarray  # [.., P], in (0, 1)
    w_mamba: np.ndarray  # [.., P], in (0, 1)


class WeighterParams:
    def __init__(
        self,
        dim: int,
        dim_hidden: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.compressed = math.ceil(math.sqrt(dim))
        self.dim_hidden = dim_hidden if dim_hidden is not None else 4 * self.compressed
        if self.dim_hidden <= 2 * self.compressed:
            raise ConfigError(
                f"dim_hidden={self.dim_hidden} must exceed the concatenated width {2 * self.compressed}"
            )
        self.norm_att = RmsNorm(dim, dtype=dtype)
        self.norm_mamba = RmsNorm(dim, dtype=dtype)
        self.compress_att = Linear(dim, self.compressed, rng, dtype, bias=False)
        self.compress_mamba = Linear(dim, self.compressed, rng, dtype, bias=False)
        self.w1 = Linear(2 * self.compressed, self.dim_hidden, rng, dtype)
        # Zero logits at init: both weights start at 0.5, the averaging fixed point.
        self.w2 = Linear(self.dim_hidden, 2, rng, dtype)
        self.w2.weight.data[:] = 0.0

    def named_parameters(self, prefix: str = "weighter"):
        yield from self.norm_att.named_parameters(f"{prefix}.norm_att")
        yield from self.norm_mamba.named_parameters(f"{prefix}.norm_mamba")
        yield from self.compress_att.named_parameters(f"{prefix}.compress_att")
        yield from self.compress_mamba.named_parameters(f"{prefix}.compress_mamba")
        yield from self.w1.named_parameters(f"{prefix}.w1")
        yield from self.w2.named_parameters(f"{prefix}.w2")


def _weight_tensors(b: BranchOutputs, params: WeighterParams, use_softmax: bool = False) -> tuple[Tensor, Tensor]:
    att_c = params.compress_att(params.norm_att(b.x_att))
    ssm_c = params.compress_mamba(params.norm_mamba(b.x_mamba))
    logits = params.w2(T.relu(params.w1(T.concat([att_c, ssm_c], axis=-1))))  # [.., P, 2]
    if use_softmax:
        weights = T.softmax(logits)
    else:
        weights = T.sigmoid(logits)
    return T.narrow(weights, -1, 0, 1), T.narrow(weights, -1, 1, 1)


def compute_weights(b: BranchOutputs, params: WeighterParams, use_softmax: bool = False) -> WeightPair:
    """Per-patch branch weights; row p depends only on row p of each branch.

    ``use_softmax`` is a harness-only variant that constrains the pair to
    sum to 1 (kept for comparison; the production path is sigmoid).
    """
    w_att, w_mamba = _weight_tensors(b, params, use_softmax=use_softmax)
    return WeightPair(w_att=w_att.data[..., 0].copy(), w_mamba=w_mamba.data[..., 0].copy())


def fuse(
    b: BranchOutputs,
    params: WeighterParams,
    strategy: str = "paralleltime",
    use_softmax: bool = False,
    capture: list | None = None,
) -> Tensor:
    """Combine the two branches into one token stream.

    ``paralleltime`` weights the raw branch outputs by the learned pair;
    ``mean``/``sum`` average or add the RMS-normalized branches (their
    differing scales are normalized away first). ``capture``, when given,
    receives a :class:`WeightPair` for analysis exports.
    """
    if b.x_att.shape != b.x_mamba.shape:
        raise ConfigError(f"branch shapes differ: {b.x_att.shape} vs {b.x_mamba.shape}")
    if strategy == "paralleltime":
        w_att, w_mamba = _weight_tensors(b, params, use_softmax=use_softmax)
        if capture is not None:
            capture.append(WeightPair(w_att=w_att.data[..., 0].copy(), w_mamba=w_mamba.data[..., 0].copy()))
        return T.add(T.mul(b.x_att, w_att), T.mul(b.x_mamba, w_mamba))
    if strategy == "mean":
        half = T.add(params.norm_att(b.x_att), params.norm_mamba(b.x_mamba))
        return T.mul(half, Tensor(np.asarray(0.5, dtype=half.dtype)))
    if strategy == "sum":
        return T.add(params.norm_att(b.x_att), params.norm_mamba(b.x_mamba))
    raise ConfigError(f"unknown fusion strategy {strategy!r}; expected one of {FUSION_STRATEGIES}")
