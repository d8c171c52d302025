"""End-to-end experiment pipelines on the synthetic generators.

These glue together the generator, trainer, and evaluation protocols at
desk scale. The training hyperparameters (batch 16, lr 1e-3, uniform
task weights) follow the package defaults; the encoder is kept small so
a five-seed experiment finishes in minutes on a laptop CPU.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import downstream as ds_mod
from .encoder import EncoderConfig
from .losses import TaskConfig
from .trainer import Model, TrainConfig, encode_dataset, train

SMALL_ENCODER = dict(repr_dim=32, te_dim=8, depth=3, kernel=3, width=32, mask_prob=0.5)


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int):
    """Per-class shuffled indices split into train and test."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        n_test = max(1, int(round(members.size * test_fraction)))
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    return np.sort(train_idx), np.sort(test_idx)


def classification_trial(seed: int, *, mask_fraction: float = 0.0,
                         epochs: int = 20, n: int = 150, t: int = 128,
                         noise: float = 0.2, w: int = 10,
                         test_fraction: float = 1 / 3) -> dict:
    """Train on sine classes, encode pooled windows, classify, score.

    ``mask_fraction`` hides that share of cells at encode time only, so
    the same trained encoder is evaluated on degraded inputs.
    """
    ds = data_mod.zscore(data_mod.synth("multiclass_sines",
                                        {"n": n, "t": t, "noise": noise}, seed=seed))
    train_idx, test_idx = stratified_split(ds.instance_labels, test_fraction, seed)
    cfg = TrainConfig(
        max_epochs=epochs, seed=seed, te_kind="mlp",
        encoder=EncoderConfig(in_channels=1, **SMALL_ENCODER),
        tasks=TaskConfig(),
    )
    model, history = train(ds.subset(train_idx), cfg)

    enc_ds = ds if mask_fraction == 0.0 else data_mod.mask_fraction(ds, mask_fraction, seed + 10_000)
    rep_train = encode_dataset(model, enc_ds.subset(train_idx), granularity="pooled", w=w)
    rep_test = encode_dataset(model, enc_ds.subset(test_idx), granularity="pooled", w=w)
    acc, _ = ds_mod.timedim_classify(rep_train, ds.instance_labels[train_idx],
                                     rep_test, ds.instance_labels[test_idx], seed=seed)
    return {"accuracy": acc, "model": model, "history": history,
            "dataset": ds, "train_idx": train_idx, "test_idx": test_idx}


def anomaly_trial(seed: int, *, t: int = 2000, n_spikes: int = 5,
                  spike_sigma: float = 8.0, epochs: int = 40,
                  segments: int = 16,
                  betas=(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0),
                  prefix_fraction: float = 0.4) -> dict:
    """Spike stream: train on the series cut into segments, then score it.

    Beta is tuned by delay-credited F1 on the leading prefix; the
    reported F1 is measured on the held-out remainder.
    """
    raw = data_mod.synth("spike_anomalies",
                         {"t": t, "n_spikes": n_spikes, "spike_sigma": spike_sigma},
                         seed=seed)
    ds = data_mod.zscore(raw)
    series = ds.values[0]
    truth = ds.timestep_labels[0]

    seg_len = t // segments
    train_ds = data_mod.TimeSeriesDataset(
        values=series[:segments * seg_len].reshape(segments, seg_len, 1))
    cfg = TrainConfig(
        max_epochs=epochs, seed=seed, te_kind="time2vec",
        encoder=EncoderConfig(in_channels=1, **SMALL_ENCODER),
        tasks=TaskConfig(),
    )
    model, _ = train(train_ds, cfg)

    acfg = ds_mod.AnomalyConfig(normalize=False)  # already z-scored
    result = ds_mod.anomaly_score_stream(model, series, acfg)
    beta = ds_mod.tune_beta(result, truth, acfg.delay, betas, prefix_fraction)
    cut = int(t * prefix_fraction)
    flags = result.flags_for_beta(beta)
    holdout = ds_mod.f1_with_delay(flags[cut:], truth[cut:], acfg.delay)
    return {"f1": holdout.f1, "precision": holdout.precision, "recall": holdout.recall,
            "beta": beta, "result": result, "model": model, "truth": truth}


def forecasting_trial(seed: int, *, n: int = 12, t: int = 384, rho: float = 0.9,
                      epochs: int = 30, horizons=(1, 5), lookback: int = 16) -> dict:
    """Autoregressive series: ridge on representations vs persistence."""
    ds = data_mod.synth("ar1", {"n": n, "t": t, "rho": rho}, seed=seed)
    cfg = TrainConfig(
        max_epochs=epochs, seed=seed, te_kind="time2vec",
        encoder=EncoderConfig(in_channels=1, **SMALL_ENCODER),
        tasks=TaskConfig(),
    )
    model, _ = train(ds, cfg)
    ridge = ds_mod.forecast_eval(model, ds, horizons, lookback=lookback)
    persist = ds_mod.persistence_eval(ds, horizons, lookback=lookback)
    return {"ridge": ridge.horizons, "persistence": persist, "model": model}


def small_train_config(seed: int, epochs: int, in_channels: int = 1,
                       te_kind: str = "time2vec", **encoder_overrides) -> TrainConfig:
    """Convenience for tests and scripts that need a quick-to-train model."""
    enc = dict(SMALL_ENCODER)
    enc.update(encoder_overrides)
    return TrainConfig(max_epochs=epochs, seed=seed, te_kind=te_kind,
                       encoder=EncoderConfig(in_channels=in_channels, **enc),
                       tasks=TaskConfig())
