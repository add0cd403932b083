"""Glue between stimuli, model cells and networks, shared by the CLI and the benchmark."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .network import NetworkState, TrainData, correlation_to_mean, predict
from .retina import ResponseSet, sample_spikes, simulate_rates
from .stimulus import StimulusDataset


def network_input(videos) -> np.ndarray:
    """Luminance in [0, 1] -> contrast in [-1, 1] with a trailing channel axis."""
    v = np.asarray(videos, dtype=np.float32)
    return (2.0 * v - 1.0)[..., None]


def split_rates(ds: StimulusDataset, cells, split: str) -> np.ndarray:
    """Per-frame rates of every cell for every sequence -> ``(S, cells, T)``."""
    n = getattr(ds, f"{split}_videos").shape[0]
    t = getattr(ds, f"{split}_videos").shape[1]
    out = np.empty((n, len(cells), t))
    for i in range(n):
        out[i] = simulate_rates(cells, ds.video(split, i))
    return out


def simulate_split(ds: StimulusDataset, cells, split: str, n_trials: int, seed: int, bins_per_frame: int = 2) -> ResponseSet:
    """Poisson responses to one split; bins are concatenated sequence by sequence."""
    rates = split_rates(ds, cells, split)
    s, c, t = rates.shape
    per_bin = np.repeat(rates, bins_per_frame, axis=2).transpose(1, 0, 2).reshape(c, s * t * bins_per_frame)
    return sample_spikes(
        per_bin, n_trials, seed,
        cell_ids=[cell.cell_id for cell in cells],
        kinds=[cell.kind for cell in cells],
        groups=[cell.group for cell in cells],
        bins_per_sequence=t * bins_per_frame,
        bin_width=1.0 / (ds.frame_rate * bins_per_frame),
    )


def frame_counts(responses: ResponseSet, n_sequences: int, bins_per_frame: int = 2) -> np.ndarray:
    """Counts summed into frames and reshaped to ``(trial, sequence, frame, cell)``."""
    per_frame = responses.per_frame_counts(bins_per_frame)
    n_trials, n_cells, n_frames = per_frame.shape
    if n_frames % max(n_sequences, 1) or n_sequences == 0:
        raise DataError(f"{n_frames} frames of responses do not split into {n_sequences} sequences")
    t = n_frames // n_sequences
    return per_frame.reshape(n_trials, n_cells, n_sequences, t).transpose(0, 2, 3, 1)


def make_train_data(ds: StimulusDataset, responses: ResponseSet, history: int, cells=None, trial: int = 0, bins_per_frame: int = 2) -> TrainData:
    """Training clips and per-frame targets for frames ``history-1 ...``."""
    counts = frame_counts(responses, ds.train_videos.shape[0], bins_per_frame)[trial]
    if cells is not None:
        counts = counts[..., list(cells)]
    if counts.shape[1] != ds.train_videos.shape[1]:
        raise DataError("responses and stimulus disagree on frames per sequence")
    return TrainData(network_input(ds.train_videos), counts[:, history - 1 :])


def test_trial_mean(ds: StimulusDataset, responses: ResponseSet, history: int, cells=None, bins_per_frame: int = 2) -> np.ndarray:
    """Trial-averaged test counts ``(cells, frames)`` over the predicted frames."""
    counts = frame_counts(responses, ds.test_videos.shape[0], bins_per_frame).mean(axis=0)
    if cells is not None:
        counts = counts[..., list(cells)]
    counts = counts[:, history - 1 :]
    return counts.transpose(2, 0, 1).reshape(counts.shape[2], -1)


def evaluate_model(state: NetworkState, ds: StimulusDataset, responses: ResponseSet, cells=None, bins_per_frame: int = 2):
    """Correlation to mean on the test split; returns (summary, predictions, trial mean)."""
    if ds.test_videos.shape[0] == 0:
        raise DataError("the dataset has no test sequences")
    pred = predict(state, network_input(ds.test_videos))
    pred = pred.transpose(2, 0, 1).reshape(pred.shape[2], -1)
    target = test_trial_mean(ds, responses, state.history, cells, bins_per_frame)
    return correlation_to_mean(pred, target), pred, target

