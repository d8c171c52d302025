"""The four pretext losses, their weighted combination, and the
multi-scale hierarchical wrapper.

All four losses consume a pair of overlap-aligned representation tensors
``z`` (context one) and ``zp`` (context two), both (B, L, F), together
with the simplex time embeddings ``tau`` (L, K) of the same L timesteps:

* instance contrast   -- softmax over other batch instances at the same t;
* temporal contrast   -- softmax over other timesteps of the same instance;
* divergence fit      -- a small head regresses the Jensen-Shannon
  divergence between two time embeddings from the representation gap;
* conditioned forecast -- a second head predicts a nearby representation
  from the current one plus the target's time embedding.

The hierarchical wrapper evaluates all four at the raw timestep scale,
then repeatedly halves time (maxpool for z, average-pool + renormalize
for tau) and re-evaluates, averaging the combined loss over the levels.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import time_embedding as te
from .errors import ConfigError

WEIGHT_SUM_TOL = 1e-9
TASK_NAMES = ("inst", "temp", "div", "pred")


@dataclass
class TaskConfig:
    """Pretext-task weights and sampling sizes.

    ``weights`` orders as (instance, temporal, divergence, forecast) and
    must sum to one. Sample counts left as ``None`` scale with the batch:
    divergence uses B*min(L, 64) pairs, the forecast head B instances and
    min(L, 32) timesteps at each hierarchy level.
    """

    weights: tuple = (0.25, 0.25, 0.25, 0.25)
    delta_max: int = 10
    m_div: int | None = None
    m_pred: int | None = None
    t_pred: int | None = None
    head_hidden: int | None = None        # None -> repr_dim
    detach_forecast_target: bool = True   # stop gradients through the target branch

    def validate(self) -> None:
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ConfigError(f"need 4 non-negative task weights, got {self.weights}")
        if abs(sum(self.weights) - 1.0) > WEIGHT_SUM_TOL:
            raise ConfigError(f"task weights must sum to 1, got sum {sum(self.weights)!r}")
        if not 1 <= self.delta_max <= 20:
            raise ConfigError(f"delta_max must be in [1, 20], got {self.delta_max}")
        for name in ("m_div", "m_pred", "t_pred"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1 when given, got {v}")


@dataclass
class TaskHeads:
    """Two small MLP heads: divergence regressor (F -> 1) and
    conditioned forecaster (F+K -> F), each two layers with ReLU."""

    repr_dim: int
    te_dim: int
    hidden: int
    tensors: dict = field(default_factory=dict)

    def parameters(self) -> dict:
        return self.tensors


def init_task_heads(repr_dim: int, te_dim: int, rng: np.random.Generator,
                    hidden: int | None = None) -> TaskHeads:
    hidden = repr_dim if hidden is None else hidden
    if hidden < 1:
        raise ConfigError(f"head hidden width must be >= 1, got {hidden}")
    heads = TaskHeads(repr_dim=repr_dim, te_dim=te_dim, hidden=hidden)
    t = heads.tensors

    def u(shape, fan):
        return T.Tensor((rng.random(shape) * 2.0 - 1.0) / math.sqrt(fan), requires_grad=True)

    t["g1.w1"] = u((repr_dim, hidden), repr_dim)
    t["g1.b1"] = T.Tensor(np.zeros(hidden), requires_grad=True)
    t["g1.w2"] = u((hidden, 1), hidden)
    t["g1.b2"] = T.Tensor(np.zeros(1), requires_grad=True)
    t["g2.w1"] = u((repr_dim + te_dim, hidden), repr_dim + te_dim)
    t["g2.b1"] = T.Tensor(np.zeros(hidden), requires_grad=True)
    t["g2.w2"] = u((hidden, repr_dim), hidden)
    t["g2.b2"] = T.Tensor(np.zeros(repr_dim), requires_grad=True)
    return heads


def divergence_head(heads: TaskHeads, x: T.Tensor) -> T.Tensor:
    """(M, F) representation gaps -> (M,) predicted divergences."""
    t = heads.tensors
    h = T.relu(T.linear(x, t["g1.w1"], t["g1.b1"]))
    return T.reshape(T.linear(h, t["g1.w2"], t["g1.b2"]), (x.shape[0],))


def forecast_head(heads: TaskHeads, x: T.Tensor) -> T.Tensor:
    """(M, F+K) inputs -> (M, F) predicted representations."""
    t = heads.tensors
    h = T.relu(T.linear(x, t["g2.w1"], t["g2.b1"]))
    return T.linear(h, t["g2.w2"], t["g2.b2"])


def _zero() -> T.Tensor:
    return T.Tensor(np.zeros(()))


def _contrastive(logits_cross: T.Tensor, logits_self: T.Tensor,
                 num: T.Tensor, eye: np.ndarray) -> T.Tensor:
    """Shared softmax machinery for the two contrastive losses.

    ``logits_cross`` and ``logits_self`` are (rows, n, n) similarity
    stacks, ``num`` (rows, n) the positive-pair logits, and ``eye`` the
    (n, n) diagonal excluded from the self term. Stabilized by shifting
    each row by its maximum denominator logit (held constant, which is
    exact for log-sum-exp).
    """
    masked_self = np.where(eye, -np.inf, logits_self.data)
    row_max = np.maximum(logits_cross.data.max(axis=2), masked_self.max(axis=2))
    shift = T.Tensor(row_max[:, :, None])
    shift_b = T.broadcast_to(shift, logits_cross.shape)
    neg_inf_diag = T.Tensor(np.where(eye, -np.inf, 0.0))
    e_cross = T.exp(T.sub(logits_cross, shift_b))
    e_self = T.exp(T.add(T.sub(logits_self, shift_b),
                         T.broadcast_to(T.reshape(neg_inf_diag, (1,) + eye.shape), logits_self.shape)))
    den = T.add(T.tsum(e_cross, axis=2), T.tsum(e_self, axis=2))
    per = T.sub(T.add(T.log(den), T.Tensor(row_max)), num)
    return T.tmean(T.reshape(per, (-1,)))


def loss_instance(z: T.Tensor, zp: T.Tensor) -> T.Tensor:
    """Instance-wise contrast over the batch at each overlap timestep.

    With a single instance the denominator equals the numerator and the
    loss is exactly zero.
    """
    B, L, _ = z.shape
    if B == 0 or L == 0:
        warnings.warn("instance contrast skipped: empty batch or overlap")
        return _zero()
    zt = T.transpose(z, (1, 0, 2))    # (L, B, F)
    zpt = T.transpose(zp, (1, 0, 2))
    s_cross = T.matmul(zt, T.transpose(zpt, (0, 2, 1)))   # (L, B, B)
    s_self = T.matmul(zt, T.transpose(zt, (0, 2, 1)))
    num = T.tsum(T.mul(zt, zpt), axis=2)                  # (L, B)
    return _contrastive(s_cross, s_self, num, np.eye(B, dtype=bool))


def loss_temporal(z: T.Tensor, zp: T.Tensor) -> T.Tensor:
    """Temporal contrast across the overlap timesteps of each instance.

    A single-step overlap gives exactly zero.
    """
    B, L, _ = z.shape
    if B == 0 or L == 0:
        warnings.warn("temporal contrast skipped: empty batch or overlap")
        return _zero()
    s_cross = T.matmul(z, T.transpose(zp, (0, 2, 1)))     # (B, L, L)
    s_self = T.matmul(z, T.transpose(z, (0, 2, 1)))
    num = T.tsum(T.mul(z, zp), axis=2)                    # (B, L)
    return _contrastive(s_cross, s_self, num, np.eye(L, dtype=bool))


def loss_divergence(z: T.Tensor, zp: T.Tensor, tau: T.Tensor,
                    heads: TaskHeads, m_div: int,
                    rng: np.random.Generator) -> T.Tensor:
    """Regress the time-embedding divergence from representation gaps.

    Samples ``m_div`` tuples (i, j, t, t') with t != t'; the head sees
    z[i, t] - zp[j, t'] and the target is JSD(tau[t] || tau[t']).
    """
    B, L, _ = z.shape
    if L < 2:
        warnings.warn("divergence task skipped: needs at least two timesteps")
        return _zero()
    bi = rng.integers(0, B, m_div)
    bj = rng.integers(0, B, m_div)
    ti = rng.integers(0, L, m_div)
    tj = rng.integers(0, L - 1, m_div)
    tj = tj + (tj >= ti)
    pred = divergence_head(heads, T.sub(T.gather_bt(z, bi, ti), T.gather_bt(zp, bj, tj)))
    target = te.jsd_pairs(T.gather_rows(tau, ti), T.gather_rows(tau, tj))
    d = T.sub(pred, target)
    return T.tmean(T.mul(d, d))


def loss_te_forecast(z: T.Tensor, zp: T.Tensor, tau: T.Tensor,
                     heads: TaskHeads, delta_max: int, m_pred: int,
                     t_pred: int, rng: np.random.Generator,
                     detach_target: bool = True) -> T.Tensor:
    """Predict a nearby representation conditioned on its time embedding.

    Input and target contexts are each drawn uniformly from the two
    views. One offset in [-delta_max, delta_max] is drawn per sampled
    instance; target indices clip to the valid range. The target branch
    is treated as a constant unless ``detach_target`` is off.
    """
    B, L, F = z.shape
    if L < 2:
        warnings.warn("forecast task skipped: needs at least two timesteps")
        return _zero()
    src = z if rng.integers(0, 2) == 0 else zp
    dst = z if rng.integers(0, 2) == 0 else zp
    inst = rng.integers(0, B, m_pred)
    deltas = rng.integers(-delta_max, delta_max + 1, m_pred)
    steps = rng.integers(0, L, t_pred)

    bi = np.repeat(inst, t_pred)
    ti = np.tile(steps, m_pred)
    tt = np.clip(ti + np.repeat(deltas, t_pred), 0, L - 1)

    z_in = T.gather_bt(src, bi, ti)
    tau_t = T.gather_rows(tau, tt)
    target = T.gather_bt(dst, bi, tt)
    if detach_target:
        target = target.detach()
    pred = forecast_head(heads, T.concat([z_in, tau_t], axis=1))
    d = T.sub(pred, target)
    return T.tmean(T.mul(d, d))


def combine(values, weights):
    """Weighted sum of per-task losses; weights must sum to one."""
    if abs(sum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise ConfigError(f"task weights must sum to 1, got sum {sum(weights)!r}")
    if all(isinstance(v, (int, float)) for v in values):
        return float(sum(w * v for w, v in zip(weights, values)))
    out = None
    for w, v in zip(weights, values):
        term = T.scalar_mul(v, w)
        out = term if out is None else T.add(out, term)
    return out


@dataclass
class LossReport:
    """Per-task and per-level loss values for one training step."""

    level_lengths: list
    level_values: list          # one dict per level: inst/temp/div/pred/combined
    task_values: dict           # per-task mean over levels
    combined_value: float       # mean of per-level combined losses
    combined: T.Tensor          # same value, differentiable

    @property
    def level_count(self) -> int:
        return len(self.level_lengths)


def pool_representations(z: T.Tensor, k: int = 2) -> T.Tensor:
    """Halve the time axis of a (B, L, F) tensor by maxpooling."""
    return T.transpose(T.maxpool1d(T.transpose(z, (0, 2, 1)), k), (0, 2, 1))


def pool_time_embeddings(tau: T.Tensor, k: int = 2) -> T.Tensor:
    """Average-pool (L, K) simplex embeddings over time, then renormalize.

    Averaging keeps rows convex; the renormalization pins the sums back
    to one exactly so divergence targets stay well defined.
    """
    L, K = tau.shape
    pooled = T.transpose(T.reshape(
        T.avgpool1d(T.reshape(T.transpose(tau, (1, 0)), (1, K, L)), k),
        (K, -1)), (1, 0))
    return te.renorm_simplex(pooled)


def hierarchical_loss(z: T.Tensor, zp: T.Tensor, tau: T.Tensor,
                      heads: TaskHeads, cfg: TaskConfig,
                      rng: np.random.Generator) -> LossReport:
    """All four losses at every time scale, averaged across scales.

    Level zero is the raw overlap; each next level halves time until one
    step remains, giving ceil(log2(L)) + 1 levels. Degenerate tasks at
    coarse scales contribute zero rather than erroring.
    """
    cfg.validate()
    B = z.shape[0]
    level_lengths: list[int] = []
    level_values: list[dict] = []
    level_combined: list[T.Tensor] = []

    while True:
        L = z.shape[1]
        li = loss_instance(z, zp)
        lt = loss_temporal(z, zp)
        m_div = cfg.m_div if cfg.m_div is not None else B * min(L, 64)
        ld = loss_divergence(z, zp, tau, heads, m_div, rng)
        m_pred = cfg.m_pred if cfg.m_pred is not None else B
        t_pred = cfg.t_pred if cfg.t_pred is not None else min(L, 32)
        lp = loss_te_forecast(z, zp, tau, heads, cfg.delta_max, m_pred, t_pred,
                              rng, cfg.detach_forecast_target)
        comb = combine((li, lt, ld, lp), cfg.weights)
        level_lengths.append(L)
        level_values.append({
            "inst": li.item(), "temp": lt.item(), "div": ld.item(),
            "pred": lp.item(), "combined": comb.item(),
        })
        level_combined.append(comb)
        if L <= 1:
            break
        z = pool_representations(z)
        zp = pool_representations(zp)
        tau = pool_time_embeddings(tau)

    n = len(level_combined)
    total = level_combined[0]
    for extra in level_combined[1:]:
        total = T.add(total, extra)
    total = T.scalar_mul(total, 1.0 / n)
    task_values = {
        name: float(np.mean([lv[name] for lv in level_values])) for name in TASK_NAMES
    }
    return LossReport(
        level_lengths=level_lengths,
        level_values=level_values,
        task_values=task_values,
        combined_value=total.item(),
        combined=total,
    )
