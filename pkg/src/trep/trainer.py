"""Training loop, checkpoint container, and dataset encoding.

One epoch is one shuffled pass over instances; the final short batch is
used rather than dropped. Each step crops two overlapping views, encodes
them with independent timestamp masks, evaluates the hierarchical loss
on the overlap, and takes one Adam step. Everything is driven by a
single seeded generator, so a run is bitwise reproducible.
"""
from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc_mod
from . import losses as loss_mod
from . import tensor as T
from . import time_embedding as te_mod
from .data import TimeSeriesDataset
from .errors import ConfigError, DataError, NumericError
from .sampling import sample_crops

HISTORY_FIELDS = ("step", "epoch", "level_count", "l_inst", "l_temp", "l_div", "l_pred", "combined")

_CKPT_MAGIC = b"TREPCK01"
_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.001
    max_epochs: int = 200
    seed: int = 0
    te_kind: str = "time2vec"
    encoder: enc_mod.EncoderConfig = field(default_factory=enc_mod.EncoderConfig)
    tasks: loss_mod.TaskConfig = field(default_factory=loss_mod.TaskConfig)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.te_kind not in te_mod.TE_KINDS:
            raise ConfigError(f"unknown te_kind {self.te_kind!r}")
        self.encoder.validate()
        self.tasks.validate()


@dataclass
class Model:
    """Encoder, time-embedding, and task-head parameters as one unit."""

    encoder: enc_mod.EncoderParams
    te: te_mod.TimeEmbeddingParams
    heads: loss_mod.TaskHeads

    def parameters(self) -> dict:
        out = {}
        for prefix, group in (("enc", self.encoder.parameters()),
                              ("te", self.te.parameters()),
                              ("heads", self.heads.parameters())):
            for name, tensor in group.items():
                out[f"{prefix}.{name}"] = tensor
        return out

    def arch(self) -> dict:
        return {
            "encoder": asdict(self.encoder.cfg),
            "te_kind": self.te.kind,
            "te_dim": self.te.dim,
            "te_hidden": self.te.hidden,
            "head_hidden": self.heads.hidden,
        }


def init_model(cfg: TrainConfig, rng: np.random.Generator) -> Model:
    encoder = enc_mod.init_encoder(cfg.encoder, rng)
    te = te_mod.init_time_embedding(cfg.te_kind, cfg.encoder.te_dim, rng,
                                    hidden=cfg.encoder.te_hidden)
    heads = loss_mod.init_task_heads(cfg.encoder.repr_dim, cfg.encoder.te_dim, rng,
                                     hidden=cfg.tasks.head_hidden)
    return Model(encoder=encoder, te=te, heads=heads)


def train(dataset: TimeSeriesDataset, cfg: TrainConfig) -> tuple[Model, list[dict]]:
    """Run the full loop; returns the trained model and per-step history.

    The model snapshot with the lowest combined loss is kept alongside
    the final parameters (see :func:`best_snapshot`). A non-finite loss
    aborts with step diagnostics.
    """
    cfg.validate()
    n, t_len = dataset.n_instances, dataset.t_len
    if n < 1:
        raise DataError("dataset needs at least one instance")
    if t_len < 2:
        raise DataError(f"series length {t_len} < 2")
    if cfg.encoder.in_channels != dataset.n_channels:
        raise ConfigError(
            f"encoder expects {cfg.encoder.in_channels} channels but dataset has {dataset.n_channels}")

    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, rng)
    params = model.parameters()
    state = T.AdamState(lr=cfg.lr)

    history: list[dict] = []
    best_value = np.inf
    best: dict[str, np.ndarray] = {name: p.data.copy() for name, p in params.items()}
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = dataset.values[order[lo:lo + cfg.batch_size]]
            a1, a2, b1, b2 = sample_crops(t_len, rng)
            z1 = enc_mod.encode(model.encoder, model.te, batch[:, a1:b1],
                                training=True, rng=rng, t_offset=a1, t_total=t_len)
            z2 = enc_mod.encode(model.encoder, model.te, batch[:, a2:b2],
                                training=True, rng=rng, t_offset=a2, t_total=t_len)
            z1o = T.narrow(z1, 1, a2 - a1, b1 - a2)
            z2o = T.narrow(z2, 1, 0, b1 - a2)
            tau = te_mod.embed_timesteps(model.te, np.arange(a2, b1), t_len)
            report = loss_mod.hierarchical_loss(z1o, z2o, tau, model.heads, cfg.tasks, rng)
            if not np.isfinite(report.combined_value):
                raise NumericError(
                    f"non-finite loss at step {step} (epoch {epoch}): "
                    f"tasks={report.task_values}, crop=({a1},{a2},{b1},{b2})")
            T.zero_grad(params)
            T.backward(report.combined)
            T.adam_step(params, state)
            history.append({
                "step": step, "epoch": epoch, "level_count": report.level_count,
                "l_inst": report.task_values["inst"], "l_temp": report.task_values["temp"],
                "l_div": report.task_values["div"], "l_pred": report.task_values["pred"],
                "combined": report.combined_value,
            })
            if report.combined_value < best_value:
                best_value = report.combined_value
                best = {name: p.data.copy() for name, p in params.items()}
            step += 1
    model_best = clone_with_values(model, best)
    model.best = model_best  # type: ignore[attr-defined]
    return model, history


def clone_with_values(model: Model, values: dict) -> Model:
    """A structurally identical model with parameter arrays replaced."""
    rebuilt = _build_from_arch(model.arch())
    params = rebuilt.parameters()
    for name, arr in values.items():
        params[name].data = arr.copy()
    return rebuilt


def save_history(history: list[dict], path) -> None:
    """Per-step loss log as CSV with full-precision floats."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(HISTORY_FIELDS) + "\n")
        for row in history:
            cells = []
            for name in HISTORY_FIELDS:
                v = row[name]
                cells.append(str(v) if isinstance(v, int) else repr(float(v)))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blobs in one file


def save_checkpoint(model: Model, path, config_echo: dict | None = None) -> None:
    params = model.parameters()
    names = sorted(params)
    blobs = io.BytesIO()
    entries = []
    offset = 0
    for name in names:
        raw = params[name].data.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(params[name].shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.write(raw)
        offset += len(raw)
    manifest = {
        "format_version": _CKPT_VERSION,
        "arch": model.arch(),
        "config": config_echo or {},
        "params": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        fh.write(blobs.getvalue())


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot open checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:8] != _CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack("<I", blob[8:12])
    try:
        manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: corrupted checkpoint manifest: {exc}") from exc
    if manifest.get("format_version") != _CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    model = _build_from_arch(manifest["arch"])
    params = model.parameters()
    base = 12 + mlen
    seen = set()
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in params:
            raise ConfigError(f"{path}: unknown parameter {name!r} in checkpoint")
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise ConfigError(f"{path}: truncated checkpoint (parameter {name!r})")
        arr = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape, dtype=int)):
            raise ConfigError(f"{path}: size mismatch for parameter {name!r}")
        params[name].data = arr.reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ConfigError(f"{path}: checkpoint is missing parameters {sorted(missing)}")
    return model


def _build_from_arch(arch: dict) -> Model:
    try:
        enc_cfg = enc_mod.EncoderConfig(**arch["encoder"])
        rng = np.random.default_rng(0)  # placeholder values, overwritten by the caller
        encoder = enc_mod.init_encoder(enc_cfg, rng)
        te = te_mod.init_time_embedding(arch["te_kind"], arch["te_dim"], rng,
                                        hidden=arch["te_hidden"] or 32)
        heads = loss_mod.init_task_heads(enc_cfg.repr_dim, enc_cfg.te_dim, rng,
                                         hidden=arch["head_hidden"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"corrupted checkpoint architecture: {exc}") from exc
    return Model(encoder=encoder, te=te, heads=heads)


# ---------------------------------------------------------------------------
# dataset encoding


@dataclass
class Representation:
    """Encoded dataset at one of three granularities.

    ``pooled`` keeps a short temporal axis (kernel = stride = floor(T/W)),
    ``instance`` is the max over all time, ``timestep`` is the raw (N, T, F).
    """

    values: np.ndarray
    granularity: str
    pool_k: int = 1

    @property
    def flattened(self) -> np.ndarray:
        n = self.values.shape[0]
        return self.values.reshape(n, -1)


def encode_dataset(model: Model, dataset: TimeSeriesDataset,
                   granularity: str = "timestep", w: int = 10,
                   batch: int = 64) -> Representation:
    """Evaluation-mode encoding of a whole dataset.

    Pooled granularity maxpools time with kernel and stride floor(T/w)
    (trailing remainder dropped); if w exceeds T it falls back to
    timestep granularity with a warning.
    """
    if granularity not in ("timestep", "pooled", "instance"):
        raise ConfigError(f"unknown granularity {granularity!r}")
    n, t_len = dataset.n_instances, dataset.t_len
    outs = []
    with T.no_grad():
        for lo in range(0, n, batch):
            z = enc_mod.encode(model.encoder, model.te, dataset.values[lo:lo + batch],
                               training=False, t_total=t_len)
            outs.append(z.data)
    values = np.concatenate(outs, axis=0)

    if granularity == "instance":
        return Representation(values=values.max(axis=1, keepdims=True),
                              granularity="instance", pool_k=t_len)
    if granularity == "pooled":
        if w > t_len:
            warnings.warn(f"pooled granularity with w={w} > T={t_len}; using timestep instead")
            return Representation(values=values, granularity="timestep")
        k = t_len // w
        t_keep = (t_len // k) * k
        pooled = values[:, :t_keep].reshape(n, t_keep // k, k, -1).max(axis=2)
        return Representation(values=pooled, granularity="pooled", pool_k=k)
    return Representation(values=values, granularity="timestep")
