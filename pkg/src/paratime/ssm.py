"""Long-range branch: a selective state-space block over patch tokens.

The recurrence ``h_t = abar_t * h_{t-1} + (delta_t * B_t) u_t``,
``y_t = C_t . h_t + D * u_t`` runs per channel with input-dependent
``B_t, C_t`` and step size ``delta_t`` (softplus-positive). The transition
is discretized as ``abar_t = exp(delta_t * A)`` with ``A = -exp(A_log) < 0``,
so every transition magnitude lies in (0, 1) and the state cannot blow up.
The block wraps the scan with an input projection, a short causal
depthwise convolution, and a SiLU gate.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import Linear, trunc_normal
from .tensor import Tensor

__all__ = ["SsmParams", "selective_scan", "mamba_block"]


class SsmParams:
    def __init__(
        self,
        dim: int,
        d_state: int = 16,
        d_conv: int = 2,
        expand: int = 2,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.d_state = d_state
        self.d_conv = d_conv
        self.d_inner = expand * dim
        self.dt_rank = math.ceil(dim / 16)

        self.in_proj = Linear(dim, 2 * self.d_inner, rng, dtype, bias=False)
        self.conv_kernels = Tensor(trunc_normal(rng, (self.d_inner, d_conv), dtype=dtype), requires_grad=True)
        self.conv_bias = Tensor(np.zeros(self.d_inner, dtype=dtype), requires_grad=True)
        self.x_proj = Linear(self.d_inner, self.dt_rank + 2 * d_state, rng, dtype, bias=False)
        self.dt_proj = Linear(self.dt_rank, self.d_inner, rng, dtype, bias=True)
        # Step sizes start small so the transition stays near 1 (long memory);
        # the bias is the softplus-inverse of a log-uniform draw in [dt_min, dt_max].
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=self.d_inner))
        self.dt_proj.bias.data[:] = np.log(np.expm1(dt)).astype(dtype)
        # Real diagonal state matrix, log-parameterized: A = -exp(a_log), rows 1..d_state.
        a_row = np.log(np.arange(1, d_state + 1, dtype=np.float64))
        self.a_log = Tensor(np.tile(a_row, (self.d_inner, 1)).astype(dtype), requires_grad=True)
        self.d_skip = Tensor(np.ones(self.d_inner, dtype=dtype), requires_grad=True)
        self.out_proj = Linear(self.d_inner, dim, rng, dtype, bias=False)

    def named_parameters(self, prefix: str = "ssm"):
        yield from self.in_proj.named_parameters(f"{prefix}.in_proj")
        yield f"{prefix}.conv_kernels", self.conv_kernels
        yield f"{prefix}.conv_bias", self.conv_bias
        yield from self.x_proj.named_parameters(f"{prefix}.x_proj")
        yield from self.dt_proj.named_parameters(f"{prefix}.dt_proj")
        yield f"{prefix}.a_log", self.a_log
        yield f"{prefix}.d_skip", self.d_skip
        yield from self.out_proj.named_parameters(f"{prefix}.out_proj")


def selective_scan(u: Tensor, params: SsmParams) -> Tensor:
    """Input-dependent scan over ``u [.., P, d_inner]``; strictly causal.

    The discretized coefficients are built here; the sequential recurrence
    itself is :func:`paratime.tensor.ssm_scan`, which tests also drive
    directly with hand-picked transition/input/output coefficients.
    """
    s = params.d_state
    x_dbl = params.x_proj(u)
    dt_low = T.narrow(x_dbl, -1, 0, params.dt_rank)
    b_seq = T.narrow(x_dbl, -1, params.dt_rank, s)
    c_seq = T.narrow(x_dbl, -1, params.dt_rank + s, s)
    delta = T.softplus(params.dt_proj(dt_low))  # [.., P, d_inner], > 0

    a_neg = T.neg(T.exp(params.a_log))  # [d_inner, d_state], < 0
    delta_col = T.reshape(delta, delta.shape + (1,))
    abar = T.exp(T.mul(delta_col, a_neg))  # in (0, 1)
    b_row = T.reshape(b_seq, b_seq.shape[:-1] + (1, s))
    u_col = T.reshape(u, u.shape + (1,))
    bx = T.mul(T.mul(delta_col, b_row), u_col)
    return T.ssm_scan(abar, bx, c_seq, u, params.d_skip)


def mamba_block(x: Tensor, params: SsmParams) -> Tensor:
    """Full gated block: project in, causal conv, SiLU, scan, gate, project out."""
    xz = params.in_proj(x)
    u = T.narrow(xz, -1, 0, params.d_inner)
    gate = T.narrow(xz, -1, params.d_inner, params.d_inner)
    u_ch = T.swap_axes(u, -1, -2)  # [.., d_inner, P]
    u_ch = T.depthwise_conv1d(u_ch, params.conv_kernels, padding="causal", bias=params.conv_bias)
    u_act = T.silu(T.swap_axes(u_ch, -1, -2))
    y = selective_scan(u_act, params)
    gated = T.mul(y, T.silu(gate))
    return params.out_proj(gated)
