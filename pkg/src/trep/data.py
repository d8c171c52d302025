"""Dataset container, CSV ingestion, normalization, and the synthetic
generators the experiments run on.

Datasets are dense (N, T, C) float arrays. Missing observations hold 0.0
in ``values`` and True in the per-(instance, timestep) ``missing_mask``;
channel statistics always exclude masked entries.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class TimeSeriesDataset:
    values: np.ndarray                       # (N, T, C) float64
    instance_labels: np.ndarray | None = None   # (N,) ints
    timestep_labels: np.ndarray | None = None   # (N, T) bools
    missing_mask: np.ndarray = field(default=None)  # (N, T) bools
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"values must be (N, T, C), got shape {self.values.shape}")
        n, t, _ = self.values.shape
        if self.missing_mask is None:
            self.missing_mask = np.zeros((n, t), dtype=bool)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.missing_mask.shape != (n, t):
            raise DataError(f"missing_mask shape {self.missing_mask.shape} != ({n}, {t})")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels)
            if self.instance_labels.shape != (n,):
                raise DataError("instance_labels must have one entry per instance")
        if self.timestep_labels is not None:
            self.timestep_labels = np.asarray(self.timestep_labels, dtype=bool)
            if self.timestep_labels.shape != (n, t):
                raise DataError("timestep_labels must be (N, T)")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def t_len(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def subset(self, idx) -> "TimeSeriesDataset":
        idx = np.asarray(idx)
        return TimeSeriesDataset(
            values=self.values[idx],
            instance_labels=None if self.instance_labels is None else self.instance_labels[idx],
            timestep_labels=None if self.timestep_labels is None else self.timestep_labels[idx],
            missing_mask=self.missing_mask[idx],
            channel_mean=self.channel_mean,
            channel_std=self.channel_std,
        )


def load_csv(path, label_kind: str = "auto") -> TimeSeriesDataset:
    """Load the dense long-format schema: instance_id, t, c0..c{C-1}[, label].

    Every instance must cover the same contiguous range of t. NaN cells
    become missing entries (value 0, mask set). ``label_kind`` is one of
    auto, none, instance, timestep.
    """
    if label_kind not in ("auto", "none", "instance", "timestep"):
        raise ConfigError(f"unknown label_kind {label_kind!r}")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header required") from None
        if header[:2] != ["instance_id", "t"]:
            raise DataError(f"{path}: header must start with instance_id,t")
        has_label = header[-1] == "label"
        chan_cols = header[2:-1] if has_label else header[2:]
        expected = [f"c{i}" for i in range(len(chan_cols))]
        if chan_cols != expected or not chan_cols:
            raise DataError(f"{path}: channel columns must be c0..c{{C-1}}, got {chan_cols}")
        c = len(chan_cols)

        rows: dict[str, list] = {}
        labels: dict[str, list] = {}
        for line in reader:
            if not line:
                continue
            inst, t = line[0], int(line[1])
            vals = [float(v) if v != "" else float("nan") for v in line[2:2 + c]]
            rows.setdefault(inst, []).append((t, vals))
            if has_label:
                labels.setdefault(inst, []).append((t, line[2 + c]))

    if not rows:
        raise DataError(f"{path}: no data rows")
    ids = sorted(rows)
    lengths = {len(rows[i]) for i in ids}
    if len(lengths) != 1:
        bad = min(ids, key=lambda i: len(rows[i]))
        raise DataError(f"{path}: ragged instances (instance {bad!r} has {len(rows[bad])} rows)")
    t_len = lengths.pop()

    values = np.empty((len(ids), t_len, c))
    for n, inst in enumerate(ids):
        entries = sorted(rows[inst])
        ts = [t for t, _ in entries]
        if ts != list(range(t_len)):
            raise DataError(f"{path}: instance {inst!r} has non-contiguous t (expected 0..{t_len - 1})")
        values[n] = [v for _, v in entries]

    nan_cells = np.isnan(values)
    mask = nan_cells.any(axis=2)
    values[nan_cells] = 0.0

    instance_labels = timestep_labels = None
    if has_label and label_kind != "none":
        lab = np.empty((len(ids), t_len), dtype=object)
        for n, inst in enumerate(ids):
            for t, v in sorted(labels[inst]):
                lab[n, t] = v
        per_instance = all(len(set(lab[n])) == 1 for n in range(len(ids)))
        if label_kind == "instance" or (label_kind == "auto" and per_instance):
            instance_labels = np.array([int(float(lab[n, 0])) for n in range(len(ids))])
        else:
            timestep_labels = np.array(
                [[bool(int(float(v))) for v in lab[n]] for n in range(len(ids))])

    return TimeSeriesDataset(values=values, instance_labels=instance_labels,
                             timestep_labels=timestep_labels, missing_mask=mask)


def save_csv(ds: TimeSeriesDataset, path) -> None:
    """Inverse of :func:`load_csv`; missing timesteps round-trip as NaN."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["instance_id", "t"] + [f"c{i}" for i in range(ds.n_channels)]
        labelled = ds.instance_labels is not None or ds.timestep_labels is not None
        if labelled:
            header.append("label")
        writer.writerow(header)
        for n in range(ds.n_instances):
            for t in range(ds.t_len):
                if ds.missing_mask[n, t]:
                    cells = ["nan"] * ds.n_channels
                else:
                    cells = [repr(float(v)) for v in ds.values[n, t]]
                row = [str(n), str(t)] + cells
                if ds.instance_labels is not None:
                    row.append(str(int(ds.instance_labels[n])))
                elif ds.timestep_labels is not None:
                    row.append(str(int(ds.timestep_labels[n, t])))
                writer.writerow(row)


def zscore(ds: TimeSeriesDataset) -> TimeSeriesDataset:
    """Normalize each channel to zero mean, unit population std.

    Statistics exclude missing entries; near-constant channels are zeroed
    with a warning. Missing positions stay 0, which after normalization
    is the channel mean.
    """
    values = ds.values.copy()
    present = ~ds.missing_mask[:, :, None] & np.ones_like(values, dtype=bool)
    mean = np.empty(ds.n_channels)
    std = np.empty(ds.n_channels)
    for c in range(ds.n_channels):
        obs = values[:, :, c][present[:, :, c]]
        mean[c] = obs.mean() if obs.size else 0.0
        std[c] = obs.std() if obs.size else 0.0
        if std[c] < 1e-12:
            warnings.warn(f"channel {c} is constant; normalized to all zeros")
            values[:, :, c] = 0.0
        else:
            values[:, :, c] = (values[:, :, c] - mean[c]) / std[c]
    values[ds.missing_mask] = 0.0
    return replace(ds, values=values, channel_mean=mean, channel_std=std,
                   missing_mask=ds.missing_mask.copy())


def mask_fraction(ds: TimeSeriesDataset, fraction: float, seed: int) -> TimeSeriesDataset:
    """Mark a uniform random fraction of (instance, timestep) cells missing."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    extra = rng.random((ds.n_instances, ds.t_len)) < fraction
    mask = ds.missing_mask | extra
    values = ds.values.copy()
    values[mask] = 0.0
    return replace(ds, values=values, missing_mask=mask)


SYNTH_KINDS = ("multiclass_sines", "spike_anomalies", "regime_shift", "ar1")


def synth(kind: str, params: dict | None = None, seed: int = 0) -> TimeSeriesDataset:
    """Seeded synthetic datasets for the experiment protocols.

    multiclass_sines: class c is a sine at frequency f_c in {1, 2, 4}
        cycles (random phase) plus noise; per-instance class labels.
    spike_anomalies: one long sine with additive spikes of ``spike_sigma``
        standard deviations, one spike per equal segment of the series so
        every prefix of reasonable length contains some; per-timestep labels.
    regime_shift: frequency/variance change at a changepoint; timesteps
        after the changepoint are labelled positive.
    ar1: x[t+1] = rho * x[t] + noise.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}, expected one of {SYNTH_KINDS}")
    p = dict(params or {})
    rng = np.random.default_rng(seed)

    def take(name, default):
        return p.pop(name, default)

    if kind == "multiclass_sines":
        n, t, noise = int(take("n", 150)), int(take("t", 128)), float(take("noise", 0.2))
        freqs = list(take("freqs", (1.0, 2.0, 4.0)))
        _reject_extras(p, kind)
        if n < len(freqs):
            raise ConfigError(f"need at least {len(freqs)} instances for {len(freqs)} classes")
        labels = np.arange(n) % len(freqs)
        grid = np.arange(t) / t
        values = np.empty((n, t, 1))
        for i in range(n):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            clean = np.sin(2.0 * np.pi * freqs[labels[i]] * grid + phase)
            values[i, :, 0] = clean + noise * rng.standard_normal(t)
        return TimeSeriesDataset(values=values, instance_labels=labels)

    if kind == "spike_anomalies":
        t, n_spikes = int(take("t", 2000)), int(take("n_spikes", 5))
        spike_sigma, noise = float(take("spike_sigma", 8.0)), float(take("noise", 0.1))
        cycles, margin = float(take("cycles", 8.0)), int(take("margin", 64))
        _reject_extras(p, kind)
        base = np.sin(2.0 * np.pi * cycles * np.arange(t) / t) + noise * rng.standard_normal(t)
        sigma = base.std()
        seg = t // n_spikes
        if seg <= 2 * margin:
            raise ConfigError("series too short for the requested spikes and margin")
        labels = np.zeros(t, dtype=bool)
        for s in range(n_spikes):
            pos = int(rng.integers(s * seg + margin, (s + 1) * seg - margin))
            base[pos] += spike_sigma * sigma * (1 if rng.integers(0, 2) else -1)
            labels[pos] = True
        return TimeSeriesDataset(values=base[None, :, None],
                                 timestep_labels=labels[None, :])

    if kind == "regime_shift":
        n, t = int(take("n", 30)), int(take("t", 200))
        cp_frac = float(take("changepoint_frac", 0.7))
        f1, f2 = float(take("freq_before", 2.0)), float(take("freq_after", 8.0))
        s1, s2 = float(take("scale_before", 1.0)), float(take("scale_after", 2.5))
        noise = float(take("noise", 0.1))
        _reject_extras(p, kind)
        cp = int(t * cp_frac)
        if not 1 <= cp < t:
            raise ConfigError(f"changepoint {cp} outside (0, {t})")
        grid = np.arange(t) / t
        values = np.empty((n, t, 1))
        labels = np.zeros((n, t), dtype=bool)
        labels[:, cp:] = True
        for i in range(n):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            x = s1 * np.sin(2.0 * np.pi * f1 * grid + phase)
            x[cp:] = s2 * np.sin(2.0 * np.pi * f2 * grid[cp:] + phase)
            values[i, :, 0] = x + noise * rng.standard_normal(t)
        return TimeSeriesDataset(values=values, timestep_labels=labels)

    # ar1
    n, t = int(take("n", 8)), int(take("t", 500))
    rho, sigma = float(take("rho", 0.9)), float(take("sigma", 1.0))
    _reject_extras(p, kind)
    if not -1.0 < rho < 1.0:
        raise ConfigError(f"ar1 needs |rho| < 1, got {rho}")
    values = np.empty((n, t, 1))
    stationary = sigma / np.sqrt(1.0 - rho * rho)
    for i in range(n):
        x = np.empty(t)
        x[0] = stationary * rng.standard_normal()
        eps = sigma * rng.standard_normal(t - 1)
        for k in range(1, t):
            x[k] = rho * x[k - 1] + eps[k - 1]
        values[i, :, 0] = x
    return TimeSeriesDataset(values=values)


def _reject_extras(p: dict, kind: str) -> None:
    if p:
        raise ConfigError(f"unknown parameters for synthetic kind {kind!r}: {sorted(p)}")
