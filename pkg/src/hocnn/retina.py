"""Synthetic retinal ganglion cells, Poisson spiking and split-half reliability.

Cells see stimulus *contrast* ``2 * luminance - 1`` (mid-gray is 0).  Time
runs in stimulus frames; before frame 0 the first frame is assumed to have
been on screen, so every frame gets a rate.  Three response families:

* ``linear_LNP``: separable spatial difference-of-Gaussians times a biphasic
  temporal kernel, then softplus.
* ``multiplicative``: one product of two transient subunits, spatially
  offset along the cell's direction and one frame apart.
* ``expansion``: opponent correlators on pixel pairs oriented away from the
  frame centre, summed over a small patch and rectified.  Under expansion
  about the centre, local motion points outward everywhere.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, TruncatedFileError
from .stimulus import read_container, write_container

KINDS = ("linear_LNP", "multiplicative", "expansion")
HORX_MAGIC = b"HORX"
HORX_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def gamma_bump(lags: np.ndarray, peak: float, shape: float = 3.0) -> np.ndarray:
    ratio = np.maximum(lags, 0.0) / peak
    return ratio**shape * np.exp(-shape * (ratio - 1.0))


def biphasic_kernel(length=8, peak=3.0, trough=6.0, trough_weight=0.9) -> np.ndarray:
    """Difference of two gamma-like bumps, indexed by lag in frames (lag 0 = current frame).

    The trough bump is weighted so the lobes nearly cancel; unit L2 norm.
    """
    lags = np.arange(length, dtype=np.float64)
    fast = gamma_bump(lags, peak)
    slow = gamma_bump(lags, trough)
    k = fast - trough_weight * slow * fast.sum() / slow.sum()
    return k / np.linalg.norm(k)


@dataclass
class ModelCell:
    """One synthetic ganglion cell.

    ``center`` is (row, col) in pixels; ``direction`` (radians, x right, y
    down) orients correlator pairs; ``radius`` bounds the spatial support.
    """

    cell_id: str
    kind: str
    center: tuple[float, float]
    group: str = ""
    radius: int = 5
    sigma_center: float = 1.5
    sigma_surround: float = 3.0
    surround_weight: float = 0.6
    temporal: tuple[float, float, int] = (3.0, 6.0, 8)
    direction: float = 0.0
    pair_offset: float = 2.0
    gain: float = 1.0
    offset: float = -1.0
    base_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown cell kind {self.kind!r}")
        self.center = (float(self.center[0]), float(self.center[1]))
        self.temporal = (float(self.temporal[0]), float(self.temporal[1]), int(self.temporal[2]))
        if not self.group:
            self.group = self.kind

    @property
    def filter_length(self) -> int:
        return self.temporal[2] if self.kind == "linear_LNP" else 3

    def temporal_kernel(self) -> np.ndarray:
        peak, trough, length = self.temporal
        return biphasic_kernel(length, peak, trough)

    def spatial_filter(self) -> np.ndarray:
        """Difference-of-Gaussians on the (2R+1)^2 support, unit L2 norm."""
        r = self.radius
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
        d2 = yy**2 + xx**2
        center = np.exp(-d2 / (2 * self.sigma_center**2)) / (2 * math.pi * self.sigma_center**2)
        surround = np.exp(-d2 / (2 * self.sigma_surround**2)) / (2 * math.pi * self.sigma_surround**2)
        s = center - self.surround_weight * surround
        return s / np.linalg.norm(s)

    def linear_filter(self, frame_shape, n_lags=None) -> np.ndarray:
        """Full ``(lags, H, W)`` space-time filter of a ``linear_LNP`` cell (lag 0 first)."""
        if self.kind != "linear_LNP":
            raise ConfigurationError("only linear_LNP cells have a linear filter")
        k = self.temporal_kernel()
        n_lags = len(k) if n_lags is None else n_lags
        full = np.zeros((n_lags,) + tuple(frame_shape))
        r0, c0 = self._pixel_center()
        s = self.spatial_filter()
        r = self.radius
        kk = np.zeros(n_lags)
        kk[: min(n_lags, len(k))] = k[:n_lags]
        full[:, r0 - r : r0 + r + 1, c0 - r : c0 + r + 1] = kk[:, None, None] * s[None]
        return full

    def _pixel_center(self) -> tuple[int, int]:
        return int(round(self.center[0])), int(round(self.center[1]))

    def correlator_pairs(self, frame_shape) -> tuple[np.ndarray, np.ndarray]:
        """Start and end points (row, col) of every subunit pair, each ``(n_pairs, 2)``."""
        h, w = frame_shape
        r0, c0 = self.center
        if self.kind == "expansion":
            theta = math.atan2(r0 - (h - 1) / 2.0, c0 - (w - 1) / 2.0)
        else:
            theta = self.direction
        u = np.array([math.sin(theta), math.cos(theta)])  # (d_row, d_col)
        perp = np.array([u[1], -u[0]])
        if self.kind == "multiplicative":
            starts = np.array([[r0, c0]])
        else:
            span = np.arange(-self.radius + 1, self.radius, 2, dtype=np.float64)
            grid = [(a, b) for a in span for b in span if a * a + b * b <= self.radius**2]
            starts = np.array([[r0 + a * perp[0] + b * u[0], c0 + a * perp[1] + b * u[1]] for a, b in grid])
        ends = starts + self.pair_offset * u
        return starts, ends

    def validate(self, frame_shape) -> None:
        h, w = frame_shape
        r0, c0 = self.center
        reach = self.radius + (self.pair_offset if self.kind != "linear_LNP" else 0) + 1
        if r0 - reach < 0 or c0 - reach < 0 or r0 + reach > h - 1 or c0 + reach > w - 1:
            raise ConfigurationError(f"cell {self.cell_id} extends beyond the {h}x{w} frame")


def _contrast(stimulus) -> np.ndarray:
    s = np.asarray(stimulus, dtype=np.float64)
    if s.ndim == 4:
        if s.shape[-1] != 1:
            raise ConfigurationError("synthetic cells read single-channel stimuli")
        s = s[..., 0]
    if s.ndim != 3:
        raise ConfigurationError(f"expected a (T, H, W[, 1]) stimulus, got shape {s.shape}")
    return 2.0 * s - 1.0


def _sample(frames: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear samples of every frame at ``points`` -> (T, n_points)."""
    rows, cols = points[:, 0], points[:, 1]
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr, fc = rows - r0, cols - c0
    r1 = np.minimum(r0 + 1, frames.shape[1] - 1)
    c1 = np.minimum(c0 + 1, frames.shape[2] - 1)
    return (
        frames[:, r0, c0] * (1 - fr) * (1 - fc)
        + frames[:, r0, c1] * (1 - fr) * fc
        + frames[:, r1, c0] * fr * (1 - fc)
        + frames[:, r1, c1] * fr * fc
    )


def cell_drive(cell: ModelCell, contrast: np.ndarray) -> np.ndarray:
    """Pre-nonlinearity drive (before gain/offset) for every frame."""
    t = contrast.shape[0]
    if cell.kind == "linear_LNP":
        k = cell.temporal_kernel()
        r0, c0 = cell._pixel_center()
        r = cell.radius
        patch = contrast[:, r0 - r : r0 + r + 1, c0 - r : c0 + r + 1]
        spatial = np.tensordot(patch, cell.spatial_filter(), axes=([1, 2], [0, 1]))
        padded = np.concatenate([np.full(len(k) - 1, spatial[0]), spatial])
        return np.array([padded[i : i + len(k)][::-1] @ k for i in range(t)])

    starts, ends = cell.correlator_pairs(contrast.shape[1:])
    a = _sample(contrast, starts)
    b = _sample(contrast, ends)
    # transient subunits: frame-to-frame change, zero during the static pre-period
    da = np.diff(a, axis=0, prepend=a[:1])
    db = np.diff(b, axis=0, prepend=b[:1])
    da_prev = np.vstack([np.zeros_like(da[:1]), da[:-1]])
    db_prev = np.vstack([np.zeros_like(db[:1]), db[:-1]])
    if cell.kind == "multiplicative":
        return (da_prev * db).sum(axis=1)
    return (da_prev * db - da * db_prev).sum(axis=1)


def simulate_rates(cells, stimulus) -> np.ndarray:
    """Per-frame firing rates (spikes per bin), shape ``(n_cells, T)``."""
    contrast = _contrast(stimulus)
    longest = max(c.filter_length for c in cells)
    if contrast.shape[0] <= longest:
        raise ConfigurationError(f"stimulus has {contrast.shape[0]} frames; filters need more than {longest}")
    rates = np.empty((len(cells), contrast.shape[0]))
    for i, cell in enumerate(cells):
        cell.validate(contrast.shape[1:])
        rates[i] = cell.base_rate * softplus(cell.gain * cell_drive(cell, contrast) + cell.offset)
    return rates


@dataclass
class ResponseSet:
    """Spike counts ``(trial, cell, bin)`` with optional diagnostic rates ``(cell, bin)``.

    Bins are concatenated sequence by sequence; ``bins_per_sequence`` records
    the stride.
    """

    cell_ids: list
    kinds: list
    counts: np.ndarray
    bin_width: float = 0.01
    bins_per_sequence: int = 0
    rates: np.ndarray | None = None
    groups: list = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 3 or self.counts.shape[1] != len(self.cell_ids):
            raise DataError(f"counts shape {self.counts.shape} does not match {len(self.cell_ids)} cells")
        if self.counts.size and (self.counts.min() < 0 or not np.issubdtype(self.counts.dtype, np.integer)):
            raise DataError("spike counts must be nonnegative integers")
        if not self.groups:
            self.groups = list(self.kinds)
        if not self.bins_per_sequence:
            self.bins_per_sequence = self.counts.shape[2]

    @property
    def n_trials(self) -> int:
        return self.counts.shape[0]

    @property
    def n_sequences(self) -> int:
        return self.counts.shape[2] // self.bins_per_sequence

    def trial_mean(self) -> np.ndarray:
        return self.counts.mean(axis=0)

    def subset(self, indices) -> ResponseSet:
        idx = list(indices)
        return ResponseSet(
            [self.cell_ids[i] for i in idx],
            [self.kinds[i] for i in idx],
            self.counts[:, idx],
            self.bin_width,
            self.bins_per_sequence,
            None if self.rates is None else self.rates[idx],
            [self.groups[i] for i in idx],
        )

    def per_frame_counts(self, bins_per_frame: int) -> np.ndarray:
        """Sum adjacent bins into frames -> ``(trial, cell, frames)``."""
        t, c, b = self.counts.shape
        if b % bins_per_frame:
            raise DataError(f"{b} bins do not divide into frames of {bins_per_frame} bins")
        return self.counts.reshape(t, c, b // bins_per_frame, bins_per_frame).sum(axis=3)


def sample_spikes(rates, n_trials, seed, **meta) -> ResponseSet:
    """Independent Poisson counts per (trial, cell, bin)."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.ndim != 2 or (rates < 0).any() or not np.isfinite(rates).all():
        raise DataError("rates must be a finite, nonnegative (cells, bins) array")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(np.broadcast_to(rates, (n_trials,) + rates.shape)).astype(np.int64)
    ids = meta.pop("cell_ids", [f"c{i:03d}" for i in range(rates.shape[0])])
    kinds = meta.pop("kinds", ["linear_LNP"] * rates.shape[0])
    return ResponseSet(ids, kinds, counts, rates=rates, **meta)


def _pearson_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r along the last axis; also returns a mask of defined entries."""
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    va = (a * a).sum(axis=-1)
    vb = (b * b).sum(axis=-1)
    ok = (va > 0) & (vb > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (a * b).sum(axis=-1) / np.sqrt(va * vb)
    return np.clip(np.where(ok, r, np.nan), -1.0, 1.0), ok


@dataclass
class Reliability:
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    defined: np.ndarray
    skipped: np.ndarray


def bootstrap_reliability(responses: ResponseSet, n_boot: int = 10_000, seed: int = 0, chunk: int = 250) -> Reliability:
    """Random split-half reliability per cell.

    Each iteration splits the trials into two equal halves (one random trial
    dropped when the count is odd), averages each half and correlates the
    two mean responses.  Iteration ``i`` draws from its own stream
    ``seed ^ i``.  Iterations where a half has zero variance are skipped; a
    cell with more than half skipped is undefined (NaN).
    """
    counts = responses.counts.astype(np.float64)
    n_trials, n_cells, n_bins = counts.shape
    if n_trials < 2:
        raise DataError(f"bootstrap reliability needs >= 2 trials, got {n_trials}")
    half = n_trials // 2
    flat = counts.reshape(n_trials, -1)
    values = np.full((n_boot, n_cells), np.nan)
    for start in range(0, n_boot, chunk):
        stop = min(n_boot, start + chunk)
        first = np.zeros((stop - start, n_trials))
        second = np.zeros((stop - start, n_trials))
        for row, i in enumerate(range(start, stop)):
            perm = np.random.default_rng(seed ^ i).permutation(n_trials)
            first[row, perm[:half]] = 1.0
            second[row, perm[half : 2 * half]] = 1.0
        mean_a = (first @ flat).reshape(-1, n_cells, n_bins) / half
        mean_b = (second @ flat).reshape(-1, n_cells, n_bins) / half
        values[start:stop], _ = _pearson_rows(mean_a, mean_b)
    skipped = np.isnan(values).sum(axis=0)
    defined = skipped <= n_boot / 2
    with np.errstate(invalid="ignore"):
        mean = np.where(defined, np.nanmean(np.where(defined, values, 0.0), axis=0), np.nan)
        lo = np.where(defined, np.nanpercentile(np.where(defined, values, 0.0), 2.5, axis=0), np.nan)
        hi = np.where(defined, np.nanpercentile(np.where(defined, values, 0.0), 97.5, axis=0), np.nan)
    return Reliability(mean, lo, hi, defined, skipped)


def split_half_correlation(counts_a, counts_b) -> float:
    r, _ = _pearson_rows(np.asarray(counts_a, float), np.asarray(counts_b, float))
    return float(r)


def select_reliable_cells(reliabilities, cell_ids, k: int) -> list:
    """Top-``k`` cell ids by reliability; ties by id, undefined (NaN) last."""
    rel = np.asarray(reliabilities, dtype=np.float64)
    if k > len(cell_ids):
        raise ConfigurationError(f"k={k} exceeds {len(cell_ids)} cells")
    order = sorted(
        range(len(cell_ids)),
        key=lambda i: (np.isnan(rel[i]), -rel[i] if not np.isnan(rel[i]) else 0.0, cell_ids[i]),
    )
    return [cell_ids[i] for i in order[:k]]


@dataclass
class CellBankConfig:
    n_linear: int = 12
    n_multiplicative: int = 10
    n_expansion: int = 11
    n_distractor: int = 7
    linear_gain: float = 1.2
    linear_offset: float = -0.2
    linear_rate: float = 0.18
    motion_gain: float = 40.0
    motion_offset: float = -0.5
    motion_rate: float = 0.18
    motion_directions: int = 0
    expansion_gain: float = 8.0
    expansion_offset: float = -0.5
    expansion_rate: float = 0.18
    distractor_rate: float = 0.012
    bins_per_frame: int = 2
    margin: int = 9


def make_cell_bank(config: CellBankConfig, frame_shape, seed: int) -> list[ModelCell]:
    """Default bank: linear, multiplicative, expansion and low-rate distractor cells."""
    rng = np.random.default_rng(seed)
    h, w = frame_shape
    m = config.margin
    if min(h, w) - 1 - 2 * m < 0:
        raise ConfigurationError(f"a {m}-pixel cell margin does not fit a {h}x{w} frame")

    def position():
        return (rng.uniform(m, h - 1 - m), rng.uniform(m, w - 1 - m))

    def motion_direction():
        if config.motion_directions <= 0:
            return rng.uniform(0, 2 * math.pi)
        return 2 * math.pi * int(rng.integers(config.motion_directions)) / config.motion_directions

    def expansion_position():
        # keep off the exact centre so the outward direction is well defined
        for _ in range(1000):
            r, c = position()
            if math.hypot(r - (h - 1) / 2, c - (w - 1) / 2) > 4.0:
                return r, c
        raise ConfigurationError("no room for expansion cells away from the frame centre")

    cells = []
    for i in range(config.n_linear):
        sign = 1.0 if i % 2 == 0 else -1.0
        cells.append(
            ModelCell(
                f"lin{i:02d}", "linear_LNP", position(), group="linear",
                gain=sign * config.linear_gain, offset=config.linear_offset, base_rate=config.linear_rate,
            )
        )
    for i in range(config.n_multiplicative):
        cells.append(
            ModelCell(
                f"mul{i:02d}", "multiplicative", position(), group="multiplicative",
                radius=1, direction=motion_direction(), pair_offset=1.0,
                gain=config.motion_gain, offset=config.motion_offset, base_rate=config.motion_rate,
            )
        )
    for i in range(config.n_expansion):
        cells.append(
            ModelCell(
                f"exp{i:02d}", "expansion", expansion_position(), group="expansion",
                radius=3, pair_offset=1.0,
                gain=config.expansion_gain, offset=config.expansion_offset, base_rate=config.expansion_rate,
            )
        )
    for i in range(config.n_distractor):
        cells.append(
            ModelCell(
                f"dis{i:02d}", "linear_LNP", position(), group="distractor",
                gain=config.linear_gain, offset=config.linear_offset, base_rate=config.distractor_rate,
            )
        )
    return cells


def write_responses(responses: ResponseSet, path) -> None:
    """``HORX`` layout: magic, u16 version, u32 metadata length, JSON, u16 counts."""
    if responses.counts.size and responses.counts.max() > np.iinfo(np.uint16).max:
        raise DataError("spike counts exceed the u16 range of the HORX format")
    t, c, b = responses.counts.shape
    meta = {
        "cells": [
            {"id": i, "kind": k, "group": g}
            for i, k, g in zip(responses.cell_ids, responses.kinds, responses.groups)
        ],
        "bins": b,
        "trials": t,
        "bin_width": responses.bin_width,
        "bins_per_sequence": responses.bins_per_sequence,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    write_container(path, HORX_MAGIC, HORX_VERSION, blob, [responses.counts.astype("<u2").tobytes()])


def read_responses(path) -> ResponseSet:
    meta, raw, offset = read_container(path, HORX_MAGIC, HORX_VERSION)
    try:
        cells = meta["cells"]
        t, b = int(meta["trials"]), int(meta["bins"])
        bin_width, per_seq = meta["bin_width"], int(meta["bins_per_sequence"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: metadata missing required fields") from exc
    size = t * len(cells) * b
    if offset + 2 * size > len(raw):
        raise TruncatedFileError(f"{path}: payload truncated")
    if offset + 2 * size != len(raw):
        raise FormatError(f"{path}: trailing bytes after payload")
    counts = np.frombuffer(raw, dtype="<u2", count=size, offset=offset).reshape(t, len(cells), b).astype(np.int64)
    return ResponseSet(
        [c["id"] for c in cells], [c["kind"] for c in cells], counts, bin_width, per_seq,
        groups=[c.get("group", c["kind"]) for c in cells],
    )


def write_reliability_csv(responses: ResponseSet, rel: Reliability, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("cell_id", "reliability", "ci_low", "ci_high", "kind"))
        for i, cid in enumerate(responses.cell_ids):
            writer.writerow(
                (cid, _fmt(rel.mean[i]), _fmt(rel.ci_low[i]), _fmt(rel.ci_high[i]), responses.groups[i])
            )


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def cell_to_dict(cell: ModelCell) -> dict:
    return asdict(cell)
