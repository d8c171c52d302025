"""Learnable embeddings of the timestep index onto the probability simplex.

Three interchangeable architectures map a scalar time (the integer index
scaled to [0, 1]) to a K-dimensional raw feature vector:

* ``time2vec``  -- one linear component plus K-1 sinusoids, good at trend
  and periodicity;
* ``mlp``       -- a two-layer ReLU network, flexible but less structured;
* ``rbf``       -- K radial basis bumps over the time axis.

The raw vector is squashed through a sigmoid and renormalized so each
embedding is a point on the simplex, which lets embeddings at two times
be compared with the Jensen-Shannon divergence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError

TE_KINDS = ("time2vec", "mlp", "rbf")

SIMPLEX_LOG_EPS = 1e-12  # floor for log arguments inside the divergence


@dataclass
class TimeEmbeddingParams:
    """Architecture tag plus the named parameter tensors behind it."""

    kind: str
    dim: int
    hidden: int = 0  # mlp only
    tensors: dict = field(default_factory=dict)

    def parameters(self) -> dict:
        return self.tensors


def _uniform(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return (rng.random(shape) * 2.0 - 1.0) * scale


def init_time_embedding(kind: str, dim: int, rng: np.random.Generator,
                        hidden: int = 32) -> TimeEmbeddingParams:
    if kind not in TE_KINDS:
        raise ConfigError(f"unknown time-embedding kind {kind!r}, expected one of {TE_KINDS}")
    if dim < 2:
        raise ConfigError(f"time-embedding dim must be >= 2, got {dim}")
    p = TimeEmbeddingParams(kind=kind, dim=dim, hidden=hidden if kind == "mlp" else 0)
    t = p.tensors
    if kind == "time2vec":
        # Frequencies spread over [0, 2*pi*K] so several periods fit in [0, 1].
        t["omega"] = T.Tensor(rng.random(dim) * 2.0 * math.pi * dim, requires_grad=True)
        t["phi"] = T.Tensor(rng.random(dim) * 2.0 * math.pi, requires_grad=True)
    elif kind == "mlp":
        if hidden < 1:
            raise ConfigError("mlp time-embedding needs hidden >= 1")
        t["w1"] = T.Tensor(_uniform(rng, (1, hidden), 1.0), requires_grad=True)
        t["b1"] = T.Tensor(_uniform(rng, hidden, 0.1), requires_grad=True)
        t["w2"] = T.Tensor(_uniform(rng, (hidden, dim), 1.0 / math.sqrt(hidden)), requires_grad=True)
        t["b2"] = T.Tensor(_uniform(rng, dim, 0.1), requires_grad=True)
    else:  # rbf
        t["centers"] = T.Tensor(np.sort(rng.random(dim)), requires_grad=True)
        # Stored on the log scale so the bandwidths stay strictly positive.
        t["log_bandwidths"] = T.Tensor(
            np.full(dim, math.log(2.0 * dim * dim)) + _uniform(rng, dim, 0.1),
            requires_grad=True,
        )
    return p


def embed_raw(params: TimeEmbeddingParams, t_scaled: np.ndarray) -> T.Tensor:
    """Raw (pre-normalization) embeddings for an array of scaled times.

    Returns a (L, K) tensor differentiable w.r.t. the embedding parameters.
    """
    t_scaled = np.asarray(t_scaled, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(t_scaled)):
        raise ContractError("time inputs must be finite")
    L, K = t_scaled.size, params.dim
    col = T.Tensor(t_scaled[:, None])
    p = params.tensors
    if params.kind == "time2vec":
        theta = T.add(T.matmul(col, T.reshape(p["omega"], (1, K))),
                      T.broadcast_to(T.reshape(p["phi"], (1, K)), (L, K)))
        linear_part = T.narrow(theta, 1, 0, 1)
        periodic = T.sin(T.narrow(theta, 1, 1, K - 1))
        return T.concat([linear_part, periodic], axis=1)
    if params.kind == "mlp":
        h = T.relu(T.linear(col, p["w1"], p["b1"]))
        return T.linear(h, p["w2"], p["b2"])
    # rbf
    tc = T.broadcast_to(col, (L, K))
    cc = T.broadcast_to(T.reshape(p["centers"], (1, K)), (L, K))
    gam = T.broadcast_to(T.reshape(T.exp(p["log_bandwidths"]), (1, K)), (L, K))
    d = T.sub(tc, cc)
    return T.exp(T.scalar_mul(T.mul(gam, T.mul(d, d)), -1.0))


def raw_embed(params: TimeEmbeddingParams, t: float) -> T.Tensor:
    """Raw K-vector for a single scaled timestep."""
    return T.reshape(embed_raw(params, np.array([t])), (params.dim,))


def normalize_simplex(v: T.Tensor) -> T.Tensor:
    """Sigmoid each component, then divide by the row sum.

    Output rows lie strictly inside the simplex: components in (0, 1)
    summing to 1. The sigmoid output is pinched to [1e-15, 1 - 1e-15] so
    the open interval survives float64 rounding even for extreme inputs.
    """
    s = T.clip(T.sigmoid(v), 1e-15, 1.0 - 1e-15)
    tot = T.tsum(s, axis=-1, keepdims=True)
    return T.mul(s, T.broadcast_to(T.reciprocal(tot), s.shape))


def renorm_simplex(v: T.Tensor) -> T.Tensor:
    """Divide already-positive rows by their sum (used after pooling)."""
    tot = T.tsum(v, axis=-1, keepdims=True)
    return T.mul(v, T.broadcast_to(T.reciprocal(tot), v.shape))


def embed_timesteps(params: TimeEmbeddingParams, indices: np.ndarray,
                    t_total: int) -> T.Tensor:
    """Simplex embeddings for integer timestep indices of a length-T series."""
    if t_total < 1:
        raise ContractError(f"t_total must be >= 1, got {t_total}")
    t_scaled = np.asarray(indices, dtype=np.float64) / float(t_total)
    return normalize_simplex(embed_raw(params, t_scaled))


def _check_simplex_rows(x: np.ndarray, name: str) -> None:
    if np.any(x < -1e-12):
        raise ContractError(f"{name} has negative components")
    sums = x.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ContractError(f"{name} rows do not sum to 1 (max deviation {np.abs(sums - 1).max():.3g})")


def jsd_pairs(p: T.Tensor, q: T.Tensor) -> T.Tensor:
    """Row-wise Jensen-Shannon divergence between two (M, K) simplex tensors.

    Natural-log convention, so values lie in [0, ln 2]. Log arguments are
    floored at 1e-12; sigmoid outputs never reach zero, but pooled and
    averaged embeddings must stay safe.
    """
    if p.shape != q.shape:
        raise ContractError(f"jsd operands differ in shape: {p.shape} vs {q.shape}")
    _check_simplex_rows(p.data, "p")
    _check_simplex_rows(q.data, "q")
    m = T.scalar_mul(T.add(p, q), 0.5)
    lm = T.log(T.clamp_min(m, SIMPLEX_LOG_EPS))
    lp = T.log(T.clamp_min(p, SIMPLEX_LOG_EPS))
    lq = T.log(T.clamp_min(q, SIMPLEX_LOG_EPS))
    kl_pm = T.tsum(T.mul(p, T.sub(lp, lm)), axis=-1)
    kl_qm = T.tsum(T.mul(q, T.sub(lq, lm)), axis=-1)
    return T.scalar_mul(T.add(kl_pm, kl_qm), 0.5)


def jsd(p, q) -> float:
    """Scalar Jensen-Shannon divergence between two simplex vectors."""
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    with T.no_grad():
        return float(jsd_pairs(T.Tensor(p), T.Tensor(q)).data[0])
