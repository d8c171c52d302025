"""Evaluation protocols that operate purely on learned representations:
ridge forecasting, pooled-window kernel classification, streaming
masked-point anomaly scoring, and windowed segment anomaly classification.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc_mod
from . import tensor as T
from .data import TimeSeriesDataset
from .errors import ConfigError, DataError
from .trainer import Model, encode_dataset

RIDGE_ALPHA_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 500.0, 1000.0)
SVM_C_GRID = tuple(10.0 ** k for k in range(-4, 5))
ANOMALY_DELAY = 7


# ---------------------------------------------------------------------------
# ridge regression


@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: np.ndarray
    alpha: float
    residual_inf: float  # max |(X'X + aI) w - X'y| of the solved system

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.intercept


def ridge_solve(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Solve the plain normal equations (X'X + alpha*I) w = X'y."""
    if alpha <= 0:
        raise ConfigError(f"ridge alpha must be > 0, got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a = x.T @ x + alpha * np.eye(x.shape[1])
    return np.linalg.solve(a, x.T @ y)


def _fit_centered(x, y, alpha):
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    w = ridge_solve(x - xm, y - ym, alpha)
    xc = x - xm
    residual = np.abs((xc.T @ xc + alpha * np.eye(x.shape[1])) @ w - xc.T @ (y - ym)).max()
    return RidgeModel(weights=w, intercept=ym - xm @ w, alpha=alpha, residual_inf=float(residual))


def ridge_fit(x: np.ndarray, y: np.ndarray,
              alpha_grid=RIDGE_ALPHA_GRID, val_fraction: float = 0.25) -> RidgeModel:
    """Grid-search alpha on a trailing validation split, refit on all rows.

    The model is fit on mean-centered data with the intercept recovered
    afterwards, so only the weights are shrunk.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise DataError(f"ridge_fit: {x.shape[0]} feature rows vs {y.shape[0]} targets")
    if not alpha_grid:
        raise ConfigError("ridge_fit: empty alpha grid")
    n_val = max(1, int(round(x.shape[0] * val_fraction)))
    if n_val >= x.shape[0]:
        raise DataError("ridge_fit: not enough rows to hold out a validation split")
    xt, yt = x[:-n_val], y[:-n_val]
    xv, yv = x[-n_val:], y[-n_val:]
    best_alpha, best_mse = None, np.inf
    for alpha in alpha_grid:
        model = _fit_centered(xt, yt, alpha)
        mse = float(np.mean((model.predict(xv) - yv) ** 2))
        if mse < best_mse:
            best_alpha, best_mse = alpha, mse
    return _fit_centered(x, y, best_alpha)


# ---------------------------------------------------------------------------
# forecasting protocol


@dataclass
class ForecastReport:
    horizons: dict            # horizon -> {"mse": float, "mae": float, "alpha": float}
    lookback: int
    n_train: int
    n_test: int


def _sliding_windows(values: np.ndarray, lookback: int, horizon: int):
    """All (window, target) pairs across instances, tagged by end time."""
    n, t_len, c = values.shape
    ends = np.arange(lookback - 1, t_len - horizon)
    if ends.size == 0:
        return None
    wins = np.stack([values[i, e - lookback + 1:e + 1] for i in range(n) for e in ends])
    targets = np.stack([values[i, e + 1:e + 1 + horizon].reshape(-1)
                        for i in range(n) for e in ends])
    end_times = np.tile(ends, n)
    return wins, targets, end_times


def _encode_last(model: Model, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    """Representation of the final timestep of each lookback window."""
    feats = []
    with T.no_grad():
        for lo in range(0, windows.shape[0], batch):
            z = enc_mod.encode(model.encoder, model.te, windows[lo:lo + batch], training=False)
            feats.append(z.data[:, -1, :])
    return np.concatenate(feats, axis=0)


def forecast_eval(model: Model, dataset: TimeSeriesDataset, horizons,
                  lookback: int = 16, alpha_grid=RIDGE_ALPHA_GRID,
                  splits=(0.6, 0.2, 0.2)) -> ForecastReport:
    """Ridge regression from the last-step representation to the next
    ``h`` observations, per horizon.

    Channels are z-scored with statistics from the training time range.
    Window end times split 60/20/20 into train/validation/test along the
    time axis; validation picks alpha, train+validation refits, and the
    report averages squared and absolute errors over every test target
    element. Horizons that do not fit in the series are skipped with a
    warning.
    """
    values = dataset.values
    t_len = values.shape[1]
    train_end = int(t_len * splits[0])
    mu = values[:, :train_end].mean(axis=(0, 1))
    sd = values[:, :train_end].std(axis=(0, 1))
    sd[sd < 1e-12] = 1.0
    norm = (values - mu) / sd

    report = ForecastReport(horizons={}, lookback=lookback, n_train=0, n_test=0)
    for h in horizons:
        h = int(h)
        made = _sliding_windows(norm, lookback, h)
        if made is None:
            warnings.warn(f"horizon {h} does not fit in series of length {t_len}; skipped")
            continue
        wins, targets, end_times = made
        feats = _encode_last(model, wins)
        t_train = int(t_len * splits[0])
        t_val = int(t_len * (splits[0] + splits[1]))
        tr = end_times < t_train
        va = (end_times >= t_train) & (end_times < t_val)
        ts = end_times >= t_val
        if tr.sum() < 2 or va.sum() < 1 or ts.sum() < 1:
            warnings.warn(f"horizon {h}: not enough windows to split; skipped")
            continue
        best_alpha, best_mse = None, np.inf
        for alpha in alpha_grid:
            m = _fit_centered(feats[tr], targets[tr], alpha)
            mse = float(np.mean((m.predict(feats[va]) - targets[va]) ** 2))
            if mse < best_mse:
                best_alpha, best_mse = alpha, mse
        fit_idx = tr | va
        m = _fit_centered(feats[fit_idx], targets[fit_idx], best_alpha)
        err = m.predict(feats[ts]) - targets[ts]
        report.horizons[h] = {
            "mse": float(np.mean(err ** 2)),
            "mae": float(np.mean(np.abs(err))),
            "alpha": float(best_alpha),
        }
        report.n_train = int(fit_idx.sum())
        report.n_test = int(ts.sum())
    return report


def persistence_eval(dataset: TimeSeriesDataset, horizons, lookback: int = 16,
                     splits=(0.6, 0.2, 0.2)) -> dict:
    """Last-value-carried-forward baseline on the same splits as
    :func:`forecast_eval`."""
    values = dataset.values
    t_len = values.shape[1]
    train_end = int(t_len * splits[0])
    mu = values[:, :train_end].mean(axis=(0, 1))
    sd = values[:, :train_end].std(axis=(0, 1))
    sd[sd < 1e-12] = 1.0
    norm = (values - mu) / sd
    out = {}
    for h in horizons:
        h = int(h)
        made = _sliding_windows(norm, lookback, h)
        if made is None:
            continue
        wins, targets, end_times = made
        ts = end_times >= int(t_len * (splits[0] + splits[1]))
        last = wins[ts][:, -1, :]
        pred = np.tile(last, (1, h))
        err = pred - targets[ts]
        out[h] = {"mse": float(np.mean(err ** 2)), "mae": float(np.mean(np.abs(err)))}
    return out


# ---------------------------------------------------------------------------
# kernel classifier (dual SMO, RBF kernel)


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def scale_gamma(x: np.ndarray) -> float:
    """1 / (n_features * variance of the training features)."""
    var = float(x.var())
    d = x.shape[1]
    return 1.0 / (d * var) if var > 1e-12 else 1.0 / d


def _smo_fit(k: np.ndarray, y: np.ndarray, c: float,
             tol: float = 1e-3, max_iter: int = 10_000) -> tuple[np.ndarray, float]:
    """Pairwise dual ascent on a precomputed kernel (SMO with
    maximal-violating-pair selection).

    Works on the signed duals beta_i = y_i * alpha_i bounded to
    [min(0, y_i C), max(0, y_i C)]: each step moves mass between the
    largest- and smallest-gradient coordinates that can still move,
    which keeps sum(beta) = 0 and the iterate dual-feasible throughout.
    Stops at gradient gap <= tol or the iteration cap. Deterministic
    (ties resolve to the first index). Returns the signed dual
    coefficients and the bias.
    """
    n = y.size
    beta = np.zeros(n)
    lo = np.minimum(0.0, y * c)
    hi = np.maximum(0.0, y * c)
    g = y.astype(np.float64).copy()  # gradient of the dual: y - k @ beta
    for _ in range(max_iter):
        gi = np.where(beta < hi - 1e-15, g, -np.inf)
        gj = np.where(beta > lo + 1e-15, g, np.inf)
        i, j = int(np.argmax(gi)), int(np.argmin(gj))
        if not np.isfinite(gi[i]) or not np.isfinite(gj[j]) or gi[i] <= gj[j] + tol:
            break
        eta = max(k[i, i] + k[j, j] - 2.0 * k[i, j], 1e-15)
        lam = min((g[i] - g[j]) / eta, hi[i] - beta[i], beta[j] - lo[j])
        beta[i] += lam
        beta[j] -= lam
        g -= lam * (k[:, i] - k[:, j])
    free = (beta > lo + 1e-9 * c) & (beta < hi - 1e-9 * c)
    if free.any():
        b = float(g[free].mean())
    else:
        up = np.where(beta < hi - 1e-15, g, -np.inf)
        dn = np.where(beta > lo + 1e-15, g, np.inf)
        b = 0.5 * (float(np.max(up)) + float(np.min(dn)))
        if not np.isfinite(b):
            b = 0.0
    return beta, b


@dataclass
class KernelClassifier:
    """One-vs-rest RBF-kernel classifier solved in the dual.

    Keeps the training matrix and per-class dual coefficients; the
    decision rule is a plain kernel product, so predictions are bitwise
    reproducible from the stored arrays.
    """

    gamma: float
    c: float
    classes: np.ndarray = field(default=None)
    x_train: np.ndarray = field(default=None)
    dual_coef: np.ndarray = field(default=None)  # (n_classes_or_1, n_train)
    bias: np.ndarray = field(default=None)
    constant_label: object = None  # set when training data has one class

    def fit(self, x: np.ndarray, y: np.ndarray, seed: int = 0) -> "KernelClassifier":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        self.classes = np.unique(y)
        if self.classes.size < 2:
            warnings.warn("single-class training set: falling back to a constant classifier")
            self.constant_label = self.classes[0]
            return self
        self.x_train = x
        k = rbf_kernel(x, x, self.gamma)
        k = 0.5 * (k + k.T)
        if self.classes.size == 2:
            signs = np.where(y == self.classes[1], 1.0, -1.0)
            coef, b = _smo_fit(k, signs, self.c)
            self.dual_coef = coef[None, :]
            self.bias = np.array([b])
        else:
            coefs, biases = [], []
            for cls in self.classes:
                signs = np.where(y == cls, 1.0, -1.0)
                coef, b = _smo_fit(k, signs, self.c)
                coefs.append(coef)
                biases.append(b)
            self.dual_coef = np.stack(coefs)
            self.bias = np.asarray(biases)
        return self

    def decision_values(self, x: np.ndarray) -> np.ndarray:
        k = rbf_kernel(np.asarray(x, dtype=np.float64), self.x_train, self.gamma)
        return k @ self.dual_coef.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.constant_label is not None:
            return np.full(len(x), self.constant_label)
        d = self.decision_values(x)
        if self.classes.size == 2:
            return np.where(d[:, 0] > 0, self.classes[1], self.classes[0])
        return self.classes[np.argmax(d, axis=1)]


def fit_svm_cv(x: np.ndarray, y: np.ndarray, c_grid=SVM_C_GRID,
               n_folds: int = 5, seed: int = 0) -> KernelClassifier:
    """Pick the penalty by k-fold cross-validation, then refit on all rows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    gamma = scale_gamma(x)
    if np.unique(y).size < 2:
        return KernelClassifier(gamma=gamma, c=float(c_grid[0])).fit(x, y, seed=seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    folds = np.array_split(order, min(n_folds, len(y)))
    best_c, best_acc = None, -1.0
    for c in c_grid:
        correct = total = 0
        for f, holdout in enumerate(folds):
            train_idx = np.concatenate([fold for g, fold in enumerate(folds) if g != f])
            if np.unique(y[train_idx]).size < 2:
                continue
            clf = KernelClassifier(gamma=gamma, c=float(c)).fit(x[train_idx], y[train_idx],
                                                                seed=seed + f)
            correct += int((clf.predict(x[holdout]) == y[holdout]).sum())
            total += holdout.size
        acc = correct / total if total else 0.0
        if acc > best_acc:
            best_c, best_acc = float(c), acc
    return KernelClassifier(gamma=gamma, c=best_c).fit(x, y, seed=seed)


def timedim_classify(train_repr, train_labels, test_repr, test_labels,
                     c_grid=SVM_C_GRID, seed: int = 0) -> tuple[float, KernelClassifier]:
    """Accuracy of the kernel classifier on flattened pooled representations."""
    xtr = train_repr.flattened if hasattr(train_repr, "flattened") else np.asarray(train_repr)
    xte = test_repr.flattened if hasattr(test_repr, "flattened") else np.asarray(test_repr)
    clf = fit_svm_cv(xtr, np.asarray(train_labels), c_grid=c_grid, seed=seed)
    acc = float((clf.predict(xte) == np.asarray(test_labels)).mean())
    return acc, clf


# ---------------------------------------------------------------------------
# streaming anomaly detection


@dataclass
class AnomalyConfig:
    trailing_window: int = 21   # Z: scores averaged over this many preceding steps
    beta: float = 4.0           # threshold multiplier on historical score std
    delay: int = ANOMALY_DELAY  # detection credit window after a true anomaly
    diff_order: int = 0         # how many times to difference the series first
    encode_window: int = 64     # lookback segment fed to the encoder per step
    normalize: bool = True

    def validate(self) -> None:
        if self.trailing_window < 1:
            raise ConfigError(f"trailing_window must be >= 1, got {self.trailing_window}")
        if self.delay < 0:
            raise ConfigError(f"delay must be >= 0, got {self.delay}")
        if self.diff_order < 0:
            raise ConfigError(f"diff_order must be >= 0, got {self.diff_order}")
        if self.encode_window < 2:
            raise ConfigError(f"encode_window must be >= 2, got {self.encode_window}")


@dataclass
class AnomalyStreamResult:
    scores: np.ndarray        # alpha_t on the original timeline (0 before diff warm-up)
    adjusted: np.ndarray
    flags: np.ndarray
    valid_from: int           # first index with a defined score
    adj_mean: np.ndarray      # expanding stats used for the threshold
    adj_std: np.ndarray

    def flags_for_beta(self, beta: float) -> np.ndarray:
        out = np.zeros_like(self.flags)
        ok = self.adj_std >= 0
        out[ok] = self.adjusted[ok] > self.adj_mean[ok] + beta * self.adj_std[ok]
        out[:self.valid_from] = False
        return out


def anomaly_score_stream(model: Model, series: np.ndarray,
                         cfg: AnomalyConfig) -> AnomalyStreamResult:
    """Masked-vs-unmasked representation gap per step, with streaming
    threshold flags.

    For each t the trailing segment is encoded twice, once as observed
    and once with position t masked; the score is the L1 gap between the
    two final-step representations. Scores are adjusted by the trailing-Z
    average and flagged when the adjusted score exceeds the expanding
    historical mean + beta * std. The first ``trailing_window`` scored
    steps are warm-up: recorded but never flagged.
    """
    cfg.validate()
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    t_orig = series.shape[0]
    if cfg.normalize:
        mu, sd = series.mean(axis=0), series.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        series = (series - mu) / sd
    x = series
    for _ in range(cfg.diff_order):
        x = np.diff(x, axis=0)
    t_len = x.shape[0]
    if t_len < 2:
        raise DataError("series too short for streaming anomaly scoring")

    w = min(cfg.encode_window, t_len)
    scores = np.zeros(t_len)
    with T.no_grad():
        # full-length trailing windows, batched
        starts = np.arange(0, t_len - w + 1)
        wins = np.stack([x[s:s + w] for s in starts])
        mask = np.zeros((len(starts), w), dtype=bool)
        mask[:, -1] = True
        for lo in range(0, len(starts), 256):
            seg = wins[lo:lo + 256]
            mseg = mask[lo:lo + 256]
            ru = enc_mod.encode(model.encoder, model.te, seg, training=False).data[:, -1, :]
            rm = enc_mod.encode(model.encoder, model.te, seg, training=False,
                                mask=mseg).data[:, -1, :]
            scores[w - 1 + lo:w - 1 + lo + seg.shape[0]] = np.abs(ru - rm).sum(axis=1)
        # shorter prefixes, one by one
        for t in range(1, w - 1):
            seg = x[None, :t + 1]
            m = np.zeros((1, t + 1), dtype=bool)
            m[0, -1] = True
            ru = enc_mod.encode(model.encoder, model.te, seg, training=False).data[0, -1]
            rm = enc_mod.encode(model.encoder, model.te, seg, training=False, mask=m).data[0, -1]
            scores[t] = np.abs(ru - rm).sum()

    z = cfg.trailing_window
    csum = np.concatenate([[0.0], np.cumsum(scores)])
    adjusted = np.zeros(t_len)
    for t in range(t_len):
        lo = max(0, t - z)
        count = t - lo
        trailing = (csum[t] - csum[lo]) / count if count else 0.0
        adjusted[t] = (scores[t] - trailing) / max(trailing, 1e-12)

    # expanding historical mean/std of the adjusted score (prior steps only)
    acs = np.concatenate([[0.0], np.cumsum(adjusted)])
    acs2 = np.concatenate([[0.0], np.cumsum(adjusted ** 2)])
    counts = np.arange(t_len, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, acs[:-1] / np.maximum(counts, 1), 0.0)
        var = np.where(counts > 0, acs2[:-1] / np.maximum(counts, 1) - means ** 2, 0.0)
    stds = np.sqrt(np.maximum(var, 0.0))
    flags = adjusted > means + cfg.beta * stds
    flags[:z] = False  # warm-up

    pad = cfg.diff_order

    def widen(arr, fill=0.0):
        out = np.full(t_orig, fill, dtype=arr.dtype)
        out[pad:] = arr
        return out

    return AnomalyStreamResult(
        scores=widen(scores), adjusted=widen(adjusted),
        flags=widen(flags, fill=False), valid_from=pad + z,
        adj_mean=widen(means), adj_std=widen(stds, fill=-1.0),
    )


def tune_beta(result: AnomalyStreamResult, truth: np.ndarray, delay: int,
              betas, prefix_fraction: float = 0.4) -> float:
    """Pick beta by delay-credited F1 on a leading validation prefix."""
    truth = np.asarray(truth, dtype=bool)
    cut = int(len(truth) * prefix_fraction)
    best_beta, best_f1 = float(betas[0]), -1.0
    for beta in betas:
        flags = result.flags_for_beta(float(beta))[:cut]
        f1 = f1_with_delay(flags, truth[:cut], delay).f1
        if f1 > best_f1 or (f1 == best_f1 and beta > best_beta):
            best_beta, best_f1 = float(beta), f1
    return best_beta


# ---------------------------------------------------------------------------
# windowed segment anomaly classification


@dataclass
class F1Result:
    f1: float
    precision: float
    recall: float
    degenerate: bool = False  # no positives predicted and none present


def f1_with_delay(pred: np.ndarray, truth: np.ndarray, delay: int) -> F1Result:
    """F1 where a flag within [t, t+delay] of a true anomaly at t counts.

    Matching is greedy and one-to-one: each truth claims the earliest
    unclaimed flag in its window; unclaimed flags are false positives.
    At delay 0 this reduces to the textbook score.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DataError(f"f1_with_delay: prediction shape {pred.shape} != truth {truth.shape}")
    pred_idx = list(np.flatnonzero(pred))
    claimed = np.zeros(len(pred_idx), dtype=bool)
    tp = 0
    for t in np.flatnonzero(truth):
        for k, p in enumerate(pred_idx):
            if claimed[k] or p < t:
                continue
            if p > t + delay:
                break
            claimed[k] = True
            tp += 1
            break
    fp = len(pred_idx) - tp
    fn = int(truth.sum()) - tp
    if tp == 0 and fp == 0 and fn == 0:
        return F1Result(f1=0.0, precision=0.0, recall=0.0, degenerate=True)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Result(f1=f1, precision=precision, recall=recall)


@dataclass
class WindowedAnomalyReport:
    f1: float
    precision: float
    recall: float
    accuracy: float
    degenerate: bool


def windowed_anomaly_classify(model: Model, train_ds: TimeSeriesDataset,
                              test_ds: TimeSeriesDataset, window: int = 6,
                              c_grid=SVM_C_GRID, seed: int = 0) -> WindowedAnomalyReport:
    """Classify each sliding window's final timestep from the flattened
    window representation.

    Labels are per-timestep booleans. Training folds without a single
    positive label abort, since the classifier would be vacuous.
    """
    if train_ds.timestep_labels is None or test_ds.timestep_labels is None:
        raise DataError("windowed anomaly classification needs per-timestep labels")

    def featurize(ds):
        rep = encode_dataset(model, ds, granularity="timestep")
        feats, labels = [], []
        for i in range(ds.n_instances):
            for t in range(window - 1, ds.t_len):
                feats.append(rep.values[i, t - window + 1:t + 1].reshape(-1))
                labels.append(ds.timestep_labels[i, t])
        return np.asarray(feats), np.asarray(labels, dtype=bool)

    xtr, ytr = featurize(train_ds)
    if not ytr.any():
        raise DataError("no positive labels in the training windows")
    xte, yte = featurize(test_ds)
    clf = fit_svm_cv(xtr, ytr.astype(int), c_grid=c_grid, seed=seed)
    pred = clf.predict(xte).astype(bool)
    score = f1_with_delay(pred, yte, delay=0)
    accuracy = float((pred == yte).mean())
    return WindowedAnomalyReport(f1=score.f1, precision=score.precision,
                                 recall=score.recall, accuracy=accuracy,
                                 degenerate=score.degenerate)
