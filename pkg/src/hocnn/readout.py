"""Linear decoding of homography parameters from frozen network features."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation, DataError
from .network import NetworkState, run_layers
from .stimulus import PARAM_NAMES

DEFAULT_LAMBDAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4)


def conv_block_taps(state: NetworkState) -> list[int]:
    """Layer indices whose output counts as a conv-block output (before flatten)."""
    taps = []
    for i, layer in enumerate(state.layers):
        if layer.kind == "flatten":
            break
        taps.append(i)
    return taps


def default_tap(state: NetworkState) -> int:
    """Last layer of the second convolutional block (its relu when present)."""
    conv = [i for i, l in enumerate(state.layers) if l.kind in ("conv3d", "hoconv3d")]
    if len(conv) < 2:
        raise ConfigurationError("network has fewer than two convolutional blocks")
    taps = conv_block_taps(state)
    following = [i for i in taps if i >= conv[1]]
    return following[-1] if len(conv) == 2 else max(i for i in following if i < conv[2])


def extract_features(state: NetworkState, video, tap: int, per_frame: bool = False) -> np.ndarray:
    """Eval-mode activations at layer ``tap``.

    ``video`` is ``(T, H, W, C)`` or a batch of them.  Returns the flattened
    activation of the last output frame (``(F,)`` or ``(B, F)``); with
    ``per_frame`` every output frame is kept (``(..., T_out, F)``).
    """
    if tap not in conv_block_taps(state):
        raise ConfigurationError(f"tap {tap} is not a conv-block output of this network")
    x = np.asarray(video, dtype=np.float64)
    single = x.ndim == 4
    x5 = x[None] if single else x
    if x5.ndim != 5 or x5.shape[2:] != tuple(state.input_shape[1:]):
        raise ConfigurationError(f"video shape {x.shape} does not match {state.input_shape}")
    if not per_frame:
        # the last output frame only sees the final ``history`` input frames
        x5 = x5[:, -state.history :]
    before = state.checksum()
    out, _, _ = run_layers(state, x5, train=False, stop=tap + 1)
    if state.checksum() != before:
        raise ContractViolation("feature extraction modified the network parameters")
    out = out.reshape(out.shape[0], out.shape[1], -1)
    if not per_frame:
        out = out[:, -1]
    return out[0] if single else out


@dataclass
class FeatureMatrix:
    """Feature rows with their 8-parameter labels and provenance."""

    features: np.ndarray
    labels: np.ndarray
    sequence_ids: np.ndarray
    frame_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DataError("features and labels must be 2D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if not np.isfinite(self.features).all():
            raise DataError("feature matrix contains non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def take(self, rows) -> FeatureMatrix:
        return FeatureMatrix(self.features[rows], self.labels[rows], self.sequence_ids[rows], self.frame_ids[rows])


def build_feature_matrix(state: NetworkState, videos, labels, tap: int, per_frame: bool = False, batch_size: int = 8) -> FeatureMatrix:
    """Features for a stack of sequences ``(S, T, H, W[, C])`` with labels ``(S, T, 8)``.

    Output frame ``k`` sees input frames up to ``k + history - 1``; that
    frame's label goes with the row.  Default mode keeps only the last frame.
    """
    videos = np.asarray(videos)
    if videos.ndim == 4:
        videos = videos[..., None]
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[:2] != videos.shape[:2]:
        raise DataError(f"labels {labels.shape} do not align with videos {videos.shape}")
    rows = []
    for start in range(0, len(videos), batch_size):
        rows.append(extract_features(state, videos[start : start + batch_size].astype(np.float64), tap, per_frame))
    feats = np.concatenate(rows, axis=0)
    s, t = videos.shape[:2]
    if per_frame:
        t_out = feats.shape[1]
        frames = np.arange(t - t_out, t)
        feats = feats.reshape(s * t_out, -1)
        lab = labels[:, frames].reshape(s * t_out, -1)
        seq = np.repeat(np.arange(s), t_out)
        fid = np.tile(frames, s)
    else:
        lab = labels[:, -1]
        seq = np.arange(s)
        fid = np.full(s, t - 1)
    return FeatureMatrix(feats, lab, seq, fid)


@dataclass
class LinearReadout:
    """Ridge regressor on standardized features.

    ``weights`` act on the standardized kept columns; ``coef`` maps raw
    features directly.
    """

    weights: np.ndarray
    intercept: np.ndarray
    lam: float
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray
    dropped: np.ndarray
    n_features: int

    @property
    def coef(self) -> np.ndarray:
        full = np.zeros((self.n_features, self.weights.shape[1]))
        full[self.kept] = self.weights / self.std[:, None]
        return full

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ContractViolation(f"expected {self.n_features} feature columns, got {x.shape}")
        z = (x[:, self.kept] - self.mean) / self.std
        return z @ self.weights + self.intercept


def fit_readout(train: FeatureMatrix, lam: float = 1e-3) -> LinearReadout:
    """Closed-form ridge fit; the intercept is the label mean.

    Constant columns are dropped (with a warning) before standardizing.
    The dual form is used when columns outnumber rows; ``lam = 0`` falls back
    to the minimum-norm least-squares solution.
    """
    if lam < 0 or not math.isfinite(lam):
        raise ConfigurationError(f"ridge penalty must be a finite value >= 0, got {lam}")
    x, y = train.features, train.labels
    if train.n_rows < 2:
        raise DataError("need at least 2 rows to fit a readout")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    kept = np.flatnonzero(std > 0)
    dropped = np.flatnonzero(std == 0)
    if dropped.size:
        warnings.warn(f"dropped {dropped.size} constant feature columns", RuntimeWarning, stacklevel=2)
    z = (x[:, kept] - mean[kept]) / std[kept]
    y_mean = y.mean(axis=0)
    yc = y - y_mean
    n, f = z.shape
    if f == 0:
        weights = np.zeros((0, y.shape[1]))
    elif lam == 0.0:
        weights = np.linalg.lstsq(z, yc, rcond=None)[0]
    elif n >= f:
        weights = np.linalg.solve(z.T @ z + lam * np.eye(f), z.T @ yc)
    else:
        weights = z.T @ np.linalg.solve(z @ z.T + lam * np.eye(n), yc)
    return LinearReadout(weights, y_mean, float(lam), mean[kept], std[kept], kept, dropped, x.shape[1])


def _pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    va, vb = (a * a).sum(axis=0), (b * b).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (a * b).sum(axis=0) / np.sqrt(va * vb)
    return np.where((va > 0) & (vb > 0), np.clip(rho, -1.0, 1.0), np.nan)


@dataclass
class ReadoutEvaluation:
    rho: np.ndarray
    predicted: np.ndarray
    true: np.ndarray
    sequence_ids: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.rho)

    def rho_of(self, name: str) -> float:
        return float(self.rho[PARAM_NAMES.index(name)])


def evaluate_readout(readout: LinearReadout, test: FeatureMatrix) -> ReadoutEvaluation:
    """Per-parameter Pearson r between prediction and truth (NaN when undefined)."""
    if test.n_rows == 0:
        raise DataError("empty test feature matrix")
    pred = readout.predict(test.features)
    return ReadoutEvaluation(_pearson_columns(pred, test.labels), pred, test.labels, test.sequence_ids)


def select_lambda(train: FeatureMatrix, lambdas=DEFAULT_LAMBDAS, holdout: float = 0.2, params=("H11", "H22")) -> tuple[float, dict]:
    """Pick the ridge penalty by held-out correlation on the tail of the training rows."""
    n_hold = max(2, int(round(train.n_rows * holdout)))
    if train.n_rows - n_hold < 2:
        raise DataError("too few rows to hold some out for the penalty sweep")
    fit_rows = np.arange(train.n_rows - n_hold)
    hold_rows = np.arange(train.n_rows - n_hold, train.n_rows)
    cols = [PARAM_NAMES.index(p) for p in params]
    scores = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for lam in lambdas:
            ev = evaluate_readout(fit_readout(train.take(fit_rows), lam), train.take(hold_rows))
            vals = ev.rho[cols]
            scores[lam] = float(np.nanmean(vals)) if np.isfinite(vals).any() else -math.inf
    best = max(lambdas, key=lambda l: (scores[l], l))
    return best, scores


def write_scatter_csv(ev: ReadoutEvaluation, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("sequence_id", "parameter", "true", "predicted"))
        for row in range(ev.true.shape[0]):
            for k, name in enumerate(PARAM_NAMES):
                writer.writerow((int(ev.sequence_ids[row]), name, repr(float(ev.true[row, k])), repr(float(ev.predicted[row, k]))))


def write_summary_csv(rows, path) -> None:
    """``rows`` are ``(model, subset, parameter, rho)`` tuples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("model", "subset", "parameter", "rho"))
        for model, subset, param, rho in rows:
            writer.writerow((model, subset, param, "nan" if not math.isfinite(rho) else repr(float(rho))))
