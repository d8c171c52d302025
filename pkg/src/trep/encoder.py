"""The representation function: linear projection, timestamp masking,
time-embedding concatenation, and a dilated-convolution residual stack.

The pipeline for a (B, L, C) view is

    project -> (training: random timestamp masking) -> concat simplex
    time embeddings -> ``depth`` residual blocks -> 1x1 projection to F

Each residual block runs two dilated convolutions with GeLU activations
at dilation 2**i, with an identity skip (a 1x1 convolution when the
channel widths differ). Padding is centered ("same"), so the stack is
NOT causal: a perturbation at time t spreads symmetrically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import time_embedding as te
from .errors import ConfigError, ShapeError

MASKED_VALUE = 0.0


@dataclass
class EncoderConfig:
    in_channels: int = 1
    repr_dim: int = 128      # F
    te_dim: int = 16         # K
    depth: int = 10          # residual blocks; block i uses dilation 2**i
    kernel: int = 3
    width: int | None = None  # hidden conv channels, None -> repr_dim
    mask_prob: float = 0.5
    te_hidden: int = 32      # hidden width of the mlp time-embedding kind

    @property
    def hidden_width(self) -> int:
        return self.repr_dim if self.width is None else self.width

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.te_dim < 2:
            raise ConfigError(f"te_dim must be >= 2, got {self.te_dim}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1 for centered padding, got {self.kernel}")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must be in [0, 1), got {self.mask_prob}")
        if self.hidden_width < 1:
            raise ConfigError("hidden width must be >= 1")


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def parameters(self) -> dict:
        return self.tensors


def _uniform(rng, shape, fan_in):
    scale = 1.0 / math.sqrt(fan_in)
    return (rng.random(shape) * 2.0 - 1.0) * scale


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    cfg.validate()
    p = EncoderParams(cfg=cfg)
    t = p.tensors
    C, F, K, H, k = cfg.in_channels, cfg.repr_dim, cfg.te_dim, cfg.hidden_width, cfg.kernel
    t["proj.w"] = T.Tensor(_uniform(rng, (C, F), C), requires_grad=True)
    t["proj.b"] = T.Tensor(np.zeros(F), requires_grad=True)
    cin = F + K
    for i in range(cfg.depth):
        t[f"block{i}.c1w"] = T.Tensor(_uniform(rng, (H, cin, k), cin * k), requires_grad=True)
        t[f"block{i}.c1b"] = T.Tensor(np.zeros(H), requires_grad=True)
        t[f"block{i}.c2w"] = T.Tensor(_uniform(rng, (H, H, k), H * k), requires_grad=True)
        t[f"block{i}.c2b"] = T.Tensor(np.zeros(H), requires_grad=True)
        if cin != H:
            t[f"block{i}.skipw"] = T.Tensor(_uniform(rng, (H, cin, 1), cin), requires_grad=True)
        cin = H
    t["final.w"] = T.Tensor(_uniform(rng, (F, H, 1), H), requires_grad=True)
    t["final.b"] = T.Tensor(np.zeros(F), requires_grad=True)
    return p


def project(enc: EncoderParams, x: T.Tensor) -> T.Tensor:
    """Shared per-timestep affine map (B, L, C) -> (B, L, F)."""
    B, L, C = x.shape
    if C != enc.cfg.in_channels:
        raise ShapeError(f"input has {C} channels but encoder expects {enc.cfg.in_channels}")
    flat = T.linear(T.reshape(x, (B * L, C)), enc.tensors["proj.w"], enc.tensors["proj.b"])
    return T.reshape(flat, (B, L, enc.cfg.repr_dim))


def draw_timestamp_mask(shape_bl: tuple[int, int], mask_prob: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(mask_prob) draw per (instance, timestep)."""
    return rng.random(shape_bl) < mask_prob


def apply_timestamp_mask(u: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Zero the full feature vector at every masked (instance, timestep)."""
    B, L, F = u.shape
    if mask.shape != (B, L):
        raise ShapeError(f"mask shape {mask.shape} does not match ({B}, {L})")
    keep = T.Tensor((~mask).astype(np.float64)[:, :, None])
    return T.mul(u, T.broadcast_to(keep, (B, L, F)))


def mask_timestamps(u: T.Tensor, mask_prob: float, rng: np.random.Generator) -> T.Tensor:
    """Training-time random masking of post-projection vectors."""
    if not 0.0 <= mask_prob < 1.0:
        raise ConfigError(f"mask_prob must be in [0, 1), got {mask_prob}")
    if mask_prob == 0.0:
        return u
    return apply_timestamp_mask(u, draw_timestamp_mask(u.shape[:2], mask_prob, rng))


def encode(enc: EncoderParams, tep: te.TimeEmbeddingParams, x,
           training: bool = False, rng: np.random.Generator | None = None,
           mask: np.ndarray | None = None,
           t_offset: int = 0, t_total: int | None = None) -> T.Tensor:
    """Encode a (B, L, C) view to (B, L, F) representations.

    ``t_offset`` is the absolute index of the view's first timestep and
    ``t_total`` the length of the full series, so crops keep their
    absolute time embeddings. An explicit ``mask`` (B, L) zeroes those
    positions regardless of mode; otherwise training mode draws one from
    ``rng``. Evaluation without a mask is deterministic.
    """
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"encode expects (B, L, C), got {x.shape}")
    cfg = enc.cfg
    B, L, _ = x.shape
    if t_total is None:
        t_total = L

    u = project(enc, x)
    if mask is not None:
        u = apply_timestamp_mask(u, np.asarray(mask, dtype=bool))
    elif training and cfg.mask_prob > 0.0:
        if rng is None:
            raise ConfigError("training-mode encode needs an rng for timestamp masking")
        u = mask_timestamps(u, cfg.mask_prob, rng)

    # The time embedding stays visible at masked positions: it depends only
    # on the index, which is known even when the observation is not.
    tau = te.embed_timesteps(tep, t_offset + np.arange(L), t_total)
    tau_b = T.broadcast_to(T.reshape(tau, (1, L, cfg.te_dim)), (B, L, cfg.te_dim))
    h = T.transpose(T.concat([u, tau_b], axis=2), (0, 2, 1))  # (B, F+K, L)

    H = cfg.hidden_width
    for i in range(cfg.depth):
        d = 2 ** i
        pad = d * (cfg.kernel - 1) // 2
        y = T.gelu(T.conv1d(h, enc.tensors[f"block{i}.c1w"], enc.tensors[f"block{i}.c1b"],
                            dilation=d, padding=pad))
        y = T.gelu(T.conv1d(y, enc.tensors[f"block{i}.c2w"], enc.tensors[f"block{i}.c2b"],
                            dilation=d, padding=pad))
        skip_w = enc.tensors.get(f"block{i}.skipw")
        h = T.add(y, T.conv1d(h, skip_w) if skip_w is not None else h)

    out = T.conv1d(h, enc.tensors["final.w"], enc.tensors["final.b"])
    return T.transpose(out, (0, 2, 1))


def receptive_field(cfg: EncoderConfig) -> int:
    """Total receptive field of the stack: 1 + (k-1) * sum(2 * 2**i)."""
    return 1 + (cfg.kernel - 1) * sum(2 * 2 ** i for i in range(cfg.depth))
