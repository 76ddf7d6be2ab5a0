"""Decoder stack and forecast heads.

A forward pass instance-normalizes the raw lookback, embeds its patches,
runs ``n_layers`` pre-norm blocks (parallel attention + SSM branches fused
by the learned weighter, then a SiLU feed-forward, both residual), applies a
final LayerNorm and projects to the horizon through either the
expand-compress-project head or a plain flatten-project head, then inverts
the instance normalization.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttnParams, ratio_window, windowed_attention
from .embedding import EmbedParams, PatchGrid, embed, patchify, revin_denormalize, revin_normalize
from .errors import ConfigError, DataError
from .layers import LayerNorm, Linear
from .ssm import SsmParams, mamba_block
from .tensor import Tensor
from .weighter import FUSION_STRATEGIES, BranchOutputs, WeighterParams, fuse

__all__ = ["ModelConfig", "Block", "EcpHead", "StandardHead", "ParallelTime", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"PTCKPT1\n"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    dim: int = 16
    n_layers: int = 2
    patch_len: int = 16
    lookback: int = 512
    horizon: int = 96
    heads: int = 4
    window: int | None = None  # None: 1:9 ratio of the patch count
    n_registers: int = 32
    d_state: int = 16
    d_conv: int = 2
    expand: int = 2
    ffn_mult: int = 2
    k_embed: int = 3
    ecp_expand: float = 2.0
    ecp_compress_div: float = 10.0
    head: str = "ecp"  # or "standard"
    fusion_strategy: str = "paralleltime"
    attn_dropout: float = 0.1
    proj_dropout: float = 0.05
    revin_affine: bool = True
    revin_eps: float = 1e-5
    dtype: str = "float32"
    seed: int = 2023

    def __post_init__(self):
        positive = {
            "dim": self.dim,
            "n_layers": self.n_layers,
            "patch_len": self.patch_len,
            "lookback": self.lookback,
            "horizon": self.horizon,
            "heads": self.heads,
            "d_state": self.d_state,
            "d_conv": self.d_conv,
            "expand": self.expand,
            "ffn_mult": self.ffn_mult,
            "k_embed": self.k_embed,
        }
        for key, val in positive.items():
            if val < 1:
                raise ConfigError(f"{key} must be positive, got {val}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.head not in ("ecp", "standard"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.fusion_strategy!r}")
        if self.ecp_expand < 1.0 or self.ecp_compress_div < 1.0:
            raise ConfigError("ecp_expand and ecp_compress_div must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def n_patches(self) -> int:
        return PatchGrid(self.patch_len, self.lookback).n_patches

    @property
    def resolved_window(self) -> int:
        return self.window if self.window is not None else ratio_window(self.n_patches)

    @property
    def d_inner(self) -> int:
        return self.expand * self.dim

    @property
    def ecp_expand_width(self) -> int:
        return max(1, int(round(self.dim * self.ecp_expand)))

    @property
    def ecp_compress_width(self) -> int:
        return max(1, int(round(self.dim / self.ecp_compress_div)))

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Block:
    """One decoder layer: parallel branches + weighter, then a feed-forward."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        dim = cfg.dim
        self.ln_mix = LayerNorm(dim, dtype=dtype)
        self.ln_ffn = LayerNorm(dim, dtype=dtype)
        self.attn = AttnParams(
            dim,
            heads=cfg.heads,
            window=cfg.resolved_window,
            n_registers=cfg.n_registers,
            attn_dropout=cfg.attn_dropout,
            rng=rng,
            dtype=dtype,
        )
        self.ssm = SsmParams(dim, d_state=cfg.d_state, d_conv=cfg.d_conv, expand=cfg.expand, rng=rng, dtype=dtype)
        self.weighter = WeighterParams(dim, rng=rng, dtype=dtype)
        self.ffn_in = Linear(dim, cfg.ffn_mult * dim, rng, dtype)
        self.ffn_out = Linear(cfg.ffn_mult * dim, dim, rng, dtype)

    def __call__(
        self,
        x: Tensor,
        strategy: str = "paralleltime",
        training: bool = False,
        rng: np.random.Generator | None = None,
        capture: list | None = None,
    ) -> Tensor:
        nx = self.ln_mix(x)
        att = windowed_attention(nx, self.attn, training=training, rng=rng)
        mamba_out = mamba_block(nx, self.ssm)
        fused = fuse(BranchOutputs(x_att=att, x_mamba=mamba_out), self.weighter, strategy=strategy, capture=capture)
        u = T.add(x, fused)
        h = self.ffn_out(T.silu(self.ffn_in(self.ln_ffn(u))))
        return T.add(u, h)

    def named_parameters(self, prefix: str):
        yield from self.ln_mix.named_parameters(f"{prefix}.ln_mix")
        yield from self.attn.named_parameters(f"{prefix}.attn")
        yield from self.ssm.named_parameters(f"{prefix}.ssm")
        yield from self.weighter.named_parameters(f"{prefix}.weighter")
        yield from self.ln_ffn.named_parameters(f"{prefix}.ln_ffn")
        yield from self.ffn_in.named_parameters(f"{prefix}.ffn_in")
        yield from self.ffn_out.named_parameters(f"{prefix}.ffn_out")


class EcpHead:
    """Expand with SiLU, compress to a narrow width, flatten, project to H.

    The narrow per-token width keeps the flattened projection small, which
    is where a flatten-project head spends almost all of its parameters.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.expand = Linear(cfg.dim, cfg.ecp_expand_width, rng, dtype)
        self.compress = Linear(cfg.ecp_expand_width, cfg.ecp_compress_width, rng, dtype)
        self.project = Linear(cfg.n_patches * cfg.ecp_compress_width, cfg.horizon, rng, dtype)
        self.proj_dropout = cfg.proj_dropout
        self._flat = cfg.n_patches * cfg.ecp_compress_width

    def __call__(self, tokens: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = self.compress(T.silu(self.expand(tokens)))
        flat = T.reshape(h, tokens.shape[:-2] + (self._flat,))
        if training and self.proj_dropout > 0.0:
            flat = T.dropout(flat, self.proj_dropout, rng)
        return self.project(flat)

    def named_parameters(self, prefix: str = "head"):
        yield from self.expand.named_parameters(f"{prefix}.expand")
        yield from self.compress.named_parameters(f"{prefix}.compress")
        yield from self.project.named_parameters(f"{prefix}.project")


class StandardHead:
    """Plain flatten-project baseline head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.project = Linear(cfg.n_patches * cfg.dim, cfg.horizon, rng, dtype)
        self.proj_dropout = cfg.proj_dropout
        self._flat = cfg.n_patches * cfg.dim

    def __call__(self, tokens: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        flat = T.reshape(tokens, tokens.shape[:-2] + (self._flat,))
        if training and self.proj_dropout > 0.0:
            flat = T.dropout(flat, self.proj_dropout, rng)
        return self.project(flat)

    def named_parameters(self, prefix: str = "head"):
        yield from self.project.named_parameters(f"{prefix}.project")


class ParallelTime:
    """End-to-end forecaster over one univariate lookback (batched or not)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        self.grid = PatchGrid(cfg.patch_len, cfg.lookback)
        if cfg.revin_affine:
            self.revin_gain = Tensor(np.ones(1, dtype=dtype), requires_grad=True)
            self.revin_bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        else:
            self.revin_gain = None
            self.revin_bias = None
        self.embed_params = EmbedParams(
            cfg.patch_len, cfg.dim, self.grid.n_patches, k_embed=cfg.k_embed, rng=rng, dtype=dtype
        )
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.dim, dtype=dtype)
        self.head = EcpHead(cfg, rng) if cfg.head == "ecp" else StandardHead(cfg, rng)

    def named_parameters(self):
        if self.revin_gain is not None:
            yield "revin.gain", self.revin_gain
            yield "revin.bias", self.revin_bias
        yield from self.embed_params.named_parameters("embed")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"block{i}")
        yield from self.final_norm.named_parameters("final_norm")
        yield from self.head.named_parameters("head")

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def encode(
        self,
        x_norm: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
        capture: list | None = None,
    ) -> Tensor:
        """Instance-normalized lookback ``[.., L]`` to final tokens ``[.., P, dim]``."""
        tokens = embed(patchify(x_norm, self.grid), self.embed_params)
        for block in self.blocks:
            tokens = block(tokens, strategy=self.cfg.fusion_strategy, training=training, rng=rng, capture=capture)
        return self.final_norm(tokens)

    def forward(
        self,
        lookback,
        training: bool = False,
        rng: np.random.Generator | None = None,
        capture_weights: list | None = None,
    ) -> Tensor:
        """Forecast ``[.., H]`` from raw lookback ``[.., L]`` (1-d inputs allowed)."""
        x = lookback if isinstance(lookback, Tensor) else Tensor(np.asarray(lookback, dtype=self.cfg.np_dtype))
        if x.dtype != self.cfg.np_dtype:
            x = Tensor(x.data.astype(self.cfg.np_dtype), requires_grad=x.requires_grad)
        squeeze_out = False
        if x.ndim == 1:
            squeeze_out = True
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[-1] != self.cfg.lookback:
            raise ConfigError(f"lookback length {x.shape[-1]} != configured {self.cfg.lookback}")
        xn, state = revin_normalize(x, self.revin_gain, self.revin_bias, eps=self.cfg.revin_eps)
        tokens = self.encode(xn, training=training, rng=rng, capture=capture_weights)
        y = self.head(tokens, training=training, rng=rng)
        out = revin_denormalize(y, state, self.revin_gain, self.revin_bias, eps=self.cfg.revin_eps)
        if squeeze_out:
            out = T.reshape(out, out.shape[1:])
        return out

    __call__ = forward


# ---------------------------------------------------------------------------
# Checkpoint format: magic, length-prefixed JSON manifest, raw LE tensor data
# ---------------------------------------------------------------------------

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: ParallelTime, path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        code = _DTYPE_CODES["float64" if p.dtype == np.float64 else "float32"]
        raw = np.ascontiguousarray(p.data, dtype=code).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(), "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> ParallelTime:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        data = fh.read()
    model = ParallelTime(ModelConfig.from_dict(header["config"]))
    params = dict(model.named_parameters())
    stored = {e["name"]: e for e in header["tensors"]}
    if set(params) != set(stored):
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        raise DataError(f"{path}: tensor name mismatch (missing {missing}, unexpected {extra})")
    for name, entry in stored.items():
        arr = np.frombuffer(
            data, dtype=entry["dtype"], count=int(np.prod(entry["shape"], dtype=np.int64)), offset=entry["offset"]
        ).reshape(entry["shape"])
        p = params[name]
        if tuple(arr.shape) != p.shape:
            raise DataError(f"{path}: shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data[:] = arr.astype(p.dtype)
    return model
