"""Spike-triggered averages and their rank-1 space-time decomposition."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, TruncatedFileError, UndefinedResultError, VersionError

N_LAGS = 40
NOISE_RATE_HZ = 40.0
STA_MAGIC = b"HSTA"
STA_VERSION = 1


@dataclass
class STAVolume:
    """``values[lag, row, col]``; lag 0 is the spike's own bin."""

    values: np.ndarray
    n_spikes: float
    frame_rate: float = NOISE_RATE_HZ

    @property
    def n_lags(self) -> int:
        return self.values.shape[0]


def binary_noise(n_frames: int, height: int, width: int, seed: int) -> np.ndarray:
    """Random ±1 checkerboard frames, one pixel per check."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(n_frames, height, width)).astype(np.float64) * 2.0 - 1.0


def compute_sta(stimulus, spikes, n_lags: int = N_LAGS, frame_rate: float = NOISE_RATE_HZ) -> STAVolume:
    """Count-weighted average of the mean-subtracted stimulus preceding spikes.

    ``stimulus`` is ``(T, H, W)`` and ``spikes`` holds one count per frame.
    Spikes in the first ``n_lags - 1`` bins lack a full history and are
    not used.
    """
    s = np.asarray(stimulus, dtype=np.float64)
    if s.ndim == 4 and s.shape[-1] == 1:
        s = s[..., 0]
    y = np.asarray(spikes)
    if s.ndim != 3 or y.shape != (s.shape[0],):
        raise DataError(f"spikes {y.shape} do not align with stimulus frames {s.shape}")
    if (y < 0).any():
        raise DataError("negative spike count")
    s = s - s.mean(axis=0)
    weights = y[n_lags - 1 :].astype(np.float64)
    total = weights.sum()
    if total <= 0:
        raise UndefinedResultError("no spikes with a full stimulus history; the STA is undefined")
    # gather spike histories lag by lag so each sum sees the same operands in
    # the same order; shifting every spike by one bin then moves the STA by
    # exactly one lag
    times = np.flatnonzero(weights) + n_lags - 1
    w = weights[times - (n_lags - 1)][:, None, None]
    values = np.empty((n_lags,) + s.shape[1:])
    for lag in range(n_lags):
        values[lag] = (w * s[times - lag]).sum(axis=0) / total
    return STAVolume(values, float(total), frame_rate)


@dataclass
class SeparableRF:
    spatial: np.ndarray
    temporal: np.ndarray
    sigma1: float
    separability: float

    def reconstruction(self) -> np.ndarray:
        return self.sigma1 * self.temporal[:, None, None] * self.spatial[None]


def svd_decompose(sta) -> SeparableRF:
    """Best rank-1 ``temporal x spatial`` factorisation of an STA.

    Both factors have unit norm and the temporal kernel's largest-magnitude
    sample is positive.  Separability is ``sigma1^2 / ||STA||_F^2``.
    """
    values = sta.values if isinstance(sta, STAVolume) else np.asarray(sta, dtype=np.float64)
    if not np.isfinite(values).all():
        raise DataError("STA contains non-finite values")
    n_lags, h, w = values.shape
    a = values.reshape(n_lags, h * w)
    energy = float((a * a).sum())
    if energy == 0.0:
        raise UndefinedResultError("all-zero STA has no decomposition")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    temporal, spatial = u[:, 0].copy(), vt[0].copy()
    if temporal[np.argmax(np.abs(temporal))] < 0:
        temporal, spatial = -temporal, -spatial
    return SeparableRF(spatial.reshape(h, w), temporal, float(s[0]), float(s[0] ** 2 / energy))


def write_sta_file(path, stas: list, cell_ids: list) -> None:
    """Stack of STAs in a ``HSTA`` container: header, JSON metadata, f8 values."""
    if not stas:
        raise DataError("no STAs to write")
    shape = stas[0].values.shape
    meta = {
        "cell_ids": list(cell_ids),
        "n_lags": shape[0],
        "height": shape[1],
        "width": shape[2],
        "frame_rate": stas[0].frame_rate,
        "n_spikes": [v.n_spikes for v in stas],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(STA_MAGIC + struct.pack("<HI", STA_VERSION, len(blob)) + blob)
        for v in stas:
            fh.write(v.values.astype("<f8").tobytes())


def read_sta_file(path) -> tuple[list, list]:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != STA_MAGIC:
        raise FormatError(f"{path}: not an STA file")
    version, mlen = struct.unpack_from("<HI", raw, 4)
    if version != STA_VERSION:
        raise VersionError(f"{path}: STA version {version}")
    try:
        meta = json.loads(raw[10 : 10 + mlen])
        shape = (meta["n_lags"], meta["height"], meta["width"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed STA metadata") from exc
    size = int(np.prod(shape))
    offset = 10 + mlen
    stas = []
    for n in meta["n_spikes"]:
        if offset + 8 * size > len(raw):
            raise TruncatedFileError(f"{path}: STA payload truncated")
        vals = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        stas.append(STAVolume(vals, float(n), float(meta["frame_rate"])))
        offset += 8 * size
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after STA payload")
    return stas, meta["cell_ids"]


def write_temporal_csv(path, rf: SeparableRF, frame_rate: float = NOISE_RATE_HZ) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("lag", "seconds", "value"))
        for lag, v in enumerate(rf.temporal):
            writer.writerow((lag, repr(lag / frame_rate), repr(float(v))))


def write_spatial_pgm(path, rf: SeparableRF) -> None:
    """Plain-text greyscale map (P2), zero mapped to mid-grey."""
    m = rf.spatial
    peak = float(np.abs(m).max()) or 1.0
    grey = np.rint(127.5 + 127.5 * m / peak).astype(int)
    h, w = m.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in grey]
    Path(path).write_text("\n".join(lines) + "\n")
