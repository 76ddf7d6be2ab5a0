"""Short-range branch: causal multi-head attention over a sliding window,
with learnable register tokens prepended as an always-visible global prefix.

Patch query i attends to all R registers plus patches [i-S+1, i]. Register
rows exist in the mask contract (causal among themselves, blind to patches,
so they stay input-independent within a layer) but their outputs are never
routed onward, so the kernel does not compute them: keys/values are built
for registers once per call, queries only for patch rows, and the window
keys are gathered with a causal unfold. This is also what keeps the cost
accounting close to the number of visible key pairs.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import Linear, trunc_normal
from .tensor import Tensor

__all__ = ["AttnParams", "ratio_window", "build_mask", "windowed_attention"]


def ratio_window(n_patches: int, ratio: int = 9) -> int:
    """Window length at a 1:ratio share of the patch count, at least 1."""
    return max(1, math.ceil(n_patches / ratio))


class AttnParams:
    def __init__(
        self,
        dim: int,
        heads: int = 4,
        window: int | None = None,
        n_registers: int = 32,
        n_patches: int | None = None,
        attn_dropout: float = 0.1,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if dim % heads != 0:
            raise ConfigError(f"dim={dim} not divisible by heads={heads}")
        if window is None:
            if n_patches is None:
                raise ConfigError("window not set and n_patches unknown; cannot apply the 1:9 ratio")
            window = ratio_window(n_patches)
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.window = window
        self.n_registers = n_registers
        self.attn_dropout = attn_dropout
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        self.registers = Tensor(trunc_normal(rng, (n_registers, dim), dtype=dtype), requires_grad=True)

    def named_parameters(self, prefix: str = "attn"):
        yield from self.wq.named_parameters(f"{prefix}.wq")
        yield from self.wk.named_parameters(f"{prefix}.wk")
        yield from self.wv.named_parameters(f"{prefix}.wv")
        yield from self.wo.named_parameters(f"{prefix}.wo")
        if self.n_registers > 0:
            yield f"{prefix}.registers", self.registers


def build_mask(n_patches: int, n_registers: int, window: int) -> np.ndarray:
    """Boolean visibility matrix over the register-prefixed sequence.

    Row/column order is [registers..., patches...]. Register row r sees
    registers 0..r; patch row i sees every register and patches
    [max(0, i-window+1), i]. No row sees the future.
    """
    if n_patches < 1 or window < 1:
        raise ConfigError(f"build_mask needs n_patches, window >= 1, got {n_patches}, {window}")
    total = n_registers + n_patches
    mask = np.zeros((total, total), dtype=bool)
    for r in range(n_registers):
        mask[r, : r + 1] = True
    for i in range(n_patches):
        row = n_registers + i
        mask[row, :n_registers] = True
        start = n_registers + max(0, i - window + 1)
        mask[row, start : n_registers + i + 1] = True
    return mask


def _split_heads(t: Tensor, heads: int, head_dim: int) -> Tensor:
    # [.., T, dim] -> [.., heads, T, head_dim]
    t = T.reshape(t, t.shape[:-1] + (heads, head_dim))
    return T.swap_axes(t, -2, -3)


def _merge_heads(t: Tensor, dim: int) -> Tensor:
    # [.., heads, T, head_dim] -> [.., T, dim]
    t = T.swap_axes(t, -2, -3)
    return T.reshape(t, t.shape[:-2] + (dim,))


def windowed_attention(
    x: Tensor,
    params: AttnParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    disable_registers: bool = False,
) -> Tensor:
    """Attend over registers plus a causal window; returns the patch rows.

    ``disable_registers`` forces register scores to -inf (a diagnostic used
    to confirm registers can be ablated without touching the window path).
    """
    n_patches = x.shape[-2]
    heads, head_dim, window = params.heads, params.head_dim, params.window
    n_reg = params.n_registers
    scale = 1.0 / math.sqrt(head_dim)
    neg_inf = -np.inf

    q = _split_heads(params.wq(x), heads, head_dim)  # [.., h, P, hd]
    k_pat = _split_heads(params.wk(x), heads, head_dim)
    v_pat = _split_heads(params.wv(x), heads, head_dim)

    # Window part: causal gather of the last `window` patch keys per query.
    k_win = T.unfold_causal(k_pat, window, axis=-2)  # [.., h, P, S, hd]
    v_win = T.unfold_causal(v_pat, window, axis=-2)
    q_row = T.reshape(q, q.shape[:-1] + (1, head_dim))
    scores_win = T.matmul(q_row, T.swap_axes(k_win, -1, -2))  # [.., h, P, 1, S]
    scores_win = T.reshape(scores_win, scores_win.shape[:-2] + (window,))
    scores_win = T.mul(scores_win, Tensor(np.asarray(scale, dtype=x.dtype)))
    # slot s of row p is patch p - S + 1 + s; negative positions are padding
    win_bias = np.where(
        np.arange(window)[None, :] >= (window - 1 - np.arange(n_patches))[:, None],
        0.0,
        neg_inf,
    ).astype(x.dtype)
    scores_win = T.add(scores_win, Tensor(win_bias))

    if n_reg > 0:
        k_reg = _split_heads(params.wk(params.registers), heads, head_dim)  # [h, R, hd]
        v_reg = _split_heads(params.wv(params.registers), heads, head_dim)
        scores_reg = T.matmul(q, T.swap_axes(k_reg, -1, -2))  # [.., h, P, R]
        scores_reg = T.mul(scores_reg, Tensor(np.asarray(scale, dtype=x.dtype)))
        if disable_registers:
            scores_reg = T.add(scores_reg, Tensor(np.full((1, 1), neg_inf, dtype=x.dtype)))
        scores = T.concat([scores_reg, scores_win], axis=-1)  # [.., h, P, R+S]
    else:
        scores = scores_win

    probs = T.softmax(scores)
    if training and params.attn_dropout > 0.0:
        if rng is None:
            raise ConfigError("training-mode attention requires an rng for dropout")
        probs = T.dropout(probs, params.attn_dropout, rng)

    if n_reg > 0:
        probs_reg = T.narrow(probs, -1, 0, n_reg)
        probs_win = T.narrow(probs, -1, n_reg, window)
        out = T.matmul(probs_reg, v_reg)  # [.., h, P, hd]
    else:
        probs_win = probs
        out = None
    pw_row = T.reshape(probs_win, probs_win.shape[:-1] + (1, window))
    out_win = T.matmul(pw_row, v_win)  # [.., h, P, 1, hd]
    out_win = T.reshape(out_win, out_win.shape[:-2] + (head_dim,))
    out = out_win if out is None else T.add(out, out_win)

    return params.wo(_merge_heads(out, params.dim))
