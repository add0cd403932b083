"""Checkerboard videos under sampled homographies, plus the ``HOCV`` dataset format.

Pixel coordinates for warping are centred: ``x = col - (W - 1)/2`` and
``y = row - (H - 1)/2``, so scaling entries expand about the frame centre.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    PointAtInfinityError,
    TruncatedFileError,
    VersionError,
)

PARAM_NAMES = ("H11", "H12", "H13", "H21", "H22", "H23", "H31", "H32")
GRAY = 0.5

HOCV_MAGIC = b"HOCV"
HOCV_VERSION = 1


def normalize(h) -> np.ndarray:
    """Scale a homography so that H33 = 1."""
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if h[2, 2] == 0.0:
        raise ConfigurationError("cannot normalise a homography with H33 = 0")
    return h / h[2, 2]


def to_params(h) -> np.ndarray:
    """The eight free parameters (H11, H12, H13, H21, H22, H23, H31, H32)."""
    return normalize(h).ravel()[:8].copy()


def from_params(params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (8,):
        raise ConfigurationError(f"expected 8 homography parameters, got shape {params.shape}")
    return np.append(params, 1.0).reshape(3, 3)


def apply_homography_point(h, p) -> tuple[float, float]:
    """Map ``(x, y)`` through ``h`` with the projective division."""
    h = np.asarray(h, dtype=np.float64)
    x, y = float(p[0]), float(p[1])
    d = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if abs(d) < 1e-12:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    return (
        (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / d,
        (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / d,
    )


def make_checkerboard(height: int, width: int, check_size: int, phase=(0, 0)) -> np.ndarray:
    """Binary checkerboard in {0, 1}; the check containing (0, 0) is white at zero phase."""
    if check_size < 1:
        raise ConfigurationError("check_size must be >= 1")
    rows = (np.arange(height) + phase[0]) // check_size
    cols = (np.arange(width) + phase[1]) // check_size
    return ((rows[:, None] + cols[None, :]) % 2 == 0).astype(np.float64)


def bilinear_sample(frame: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill: float = GRAY) -> np.ndarray:
    """Sample ``frame`` at fractional coordinates; points outside the pixel grid get ``fill``."""
    h, w = frame.shape
    inside = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.intp), h - 2 if h > 1 else 0)
    c0 = np.minimum(np.floor(c).astype(np.intp), w - 2 if w > 1 else 0)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = frame[r0, c0] * (1 - fc) + frame[r0, c1] * fc
    bottom = frame[r1, c0] * (1 - fc) + frame[r1, c1] * fc
    out = top * (1 - fr) + bottom * fr
    return np.where(inside, out, fill)


def warp_frame(frame, h, fill: float = GRAY) -> np.ndarray:
    """Inverse-warp ``frame`` so that source content at q lands at H q."""
    frame = np.asarray(frame, dtype=np.float64)
    try:
        h_inv = np.linalg.inv(np.asarray(h, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("homography is singular") from exc
    height, width = frame.shape
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    xs -= cx
    ys -= cy
    d = h_inv[2, 0] * xs + h_inv[2, 1] * ys + h_inv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        src_x = (h_inv[0, 0] * xs + h_inv[0, 1] * ys + h_inv[0, 2]) / d
        src_y = (h_inv[1, 0] * xs + h_inv[1, 1] * ys + h_inv[1, 2]) / d
    bad = ~np.isfinite(src_x) | ~np.isfinite(src_y) | (d <= 0)
    src_x = np.where(bad, -1e9, src_x)
    src_y = np.where(bad, -1e9, src_y)
    return bilinear_sample(frame, src_y + cy, src_x + cx, fill)


@dataclass
class TransformSampler:
    """Uniform ranges for the free homography parameters.

    Translation ranges are fractions of the image width; perspective
    ranges are per pixel.
    """

    scale: tuple[float, float] = (0.7, 1.4)
    shear: tuple[float, float] = (-0.2, 0.2)
    translation: tuple[float, float] = (-0.15, 0.15)
    perspective: tuple[float, float] = (-0.0015, 0.0015)
    width: int = 50
    seed: int = 0
    max_tries: int = 100

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        for _ in range(self.max_tries):
            h11, h22 = rng.uniform(*self.scale, size=2)
            h12, h21 = rng.uniform(*self.shear, size=2)
            h13, h23 = rng.uniform(*self.translation, size=2) * self.width
            h31, h32 = rng.uniform(*self.perspective, size=2)
            h = np.array([[h11, h12, h13], [h21, h22, h23], [h31, h32, 1.0]])
            if abs(np.linalg.det(h)) >= 1e-6:
                return h
        raise ConfigurationError(f"sampler ranges produced {self.max_tries} singular homographies in a row")


def interpolate_trajectory(target, n_frames: int, static: bool = False) -> np.ndarray:
    """Per-frame homographies, (n_frames, 3, 3), moving linearly from identity to ``target``."""
    if n_frames < 2:
        raise ConfigurationError("a sequence needs at least 2 frames")
    target = normalize(target)
    if static:
        return np.repeat(target[None], n_frames, axis=0)
    alpha = np.linspace(0.0, 1.0, n_frames)[:, None, None]
    return np.eye(3)[None] + alpha * (target - np.eye(3))[None]


def generate_sequence(sampler, base_frame, n_frames, seed, static=False, target=None):
    """Warp ``base_frame`` along an interpolated homography trajectory.

    Returns ``(video, trajectory)`` with video ``(n_frames, H, W, 1)`` and
    trajectory ``(n_frames, 3, 3)``.  ``target`` overrides the sampled one.
    """
    if n_frames < 2:
        raise ConfigurationError("a sequence needs at least 2 frames")
    if target is None:
        target = sampler.sample(np.random.default_rng(seed))
    trajectory = interpolate_trajectory(target, n_frames, static)
    base = np.asarray(base_frame, dtype=np.float64)
    video = np.stack([warp_frame(base, h) for h in trajectory])[..., None]
    return video, trajectory


@dataclass
class StimulusDataset:
    """Train sequences (unique) and test sequences (replayed ``n_repeats`` times).

    Videos are stored as float32 ``(S, T, H, W)``; labels are the per-frame
    free parameters, float64 ``(S, T, 8)``.
    """

    train_videos: np.ndarray
    train_labels: np.ndarray
    test_videos: np.ndarray
    test_labels: np.ndarray
    frame_rate: float = 50.0
    n_repeats: int = 60
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_videos = np.asarray(self.train_videos, dtype=np.float32)
        self.test_videos = np.asarray(self.test_videos, dtype=np.float32)
        self.train_labels = np.asarray(self.train_labels, dtype=np.float64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.float64)
        for split in ("train", "test"):
            v, lab = getattr(self, f"{split}_videos"), getattr(self, f"{split}_labels")
            if v.ndim != 4 or lab.shape != v.shape[:2] + (8,):
                raise DataError(f"{split}: videos {v.shape} and labels {lab.shape} do not align")

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        v = self.train_videos if len(self.train_videos) else self.test_videos
        return v.shape[1:]

    def video(self, split: str, index: int) -> np.ndarray:
        """One sequence as a float64 ``(T, H, W, 1)`` video."""
        return getattr(self, f"{split}_videos")[index].astype(np.float64)[..., None]

    def equals(self, other: StimulusDataset) -> bool:
        return (
            self.frame_rate == other.frame_rate
            and self.n_repeats == other.n_repeats
            and self.metadata == other.metadata
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                and getattr(self, k).shape == getattr(other, k).shape
                for k in ("train_videos", "train_labels", "test_videos", "test_labels")
            )
        )


@dataclass
class StimulusConfig:
    height: int = 50
    width: int = 50
    check_size: int = 5
    n_frames: int = 20
    n_train: int = 400
    n_test: int = 20
    n_repeats: int = 60
    frame_rate: float = 50.0
    static: bool = False
    scale: tuple[float, float] = (0.7, 1.4)
    shear: tuple[float, float] = (-0.2, 0.2)
    translation: tuple[float, float] = (-0.15, 0.15)
    perspective: tuple[float, float] = (-0.0015, 0.0015)


def sequence_seed(master_seed: int, index: int) -> int:
    return int(master_seed) ^ int(index)


def generate_dataset(config: StimulusConfig, seed: int) -> StimulusDataset:
    """Build train and test splits; sequence ``i`` of a split uses its own derived seed."""
    if config.n_train < 1 and config.n_test < 1:
        raise DataError("stimulus config asks for zero sequences")
    sampler = TransformSampler(
        scale=tuple(config.scale),
        shear=tuple(config.shear),
        translation=tuple(config.translation),
        perspective=tuple(config.perspective),
        width=config.width,
        seed=seed,
    )
    splits = {}
    for split, count, offset in (("train", config.n_train, 0), ("test", config.n_test, 1 << 20)):
        videos = np.empty((count, config.n_frames, config.height, config.width), dtype=np.float32)
        labels = np.empty((count, config.n_frames, 8))
        for i in range(count):
            rng = np.random.default_rng(sequence_seed(seed, offset + i))
            phase = tuple(int(v) for v in rng.integers(0, 2 * config.check_size, size=2))
            base = make_checkerboard(config.height, config.width, config.check_size, phase)
            target = sampler.sample(rng)
            video, traj = generate_sequence(sampler, base, config.n_frames, None, config.static, target)
            videos[i] = video[..., 0]
            labels[i] = traj.reshape(config.n_frames, 9)[:, :8]
        splits[split] = (videos, labels)
    return StimulusDataset(
        *splits["train"],
        *splits["test"],
        frame_rate=config.frame_rate,
        n_repeats=config.n_repeats,
        metadata={"seed": int(seed), "check_size": config.check_size, "static": bool(config.static)},
    )


def _metadata_block(ds: StimulusDataset) -> bytes:
    meta = {
        "frame_rate": ds.frame_rate,
        "n_repeats": ds.n_repeats,
        "frame_shape": list(ds.train_videos.shape[2:] if ds.train_videos.size else ds.test_videos.shape[2:]),
        "shapes": {
            "train": list(ds.train_videos.shape),
            "test": list(ds.test_videos.shape),
        },
        "extra": ds.metadata,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, version: int, meta: bytes, payload: list[bytes]) -> None:
    header = magic + struct.pack("<HI", version, len(meta)) + meta
    Path(path).write_bytes(header + b"".join(payload))


def read_container(path, magic: bytes, version: int) -> tuple[dict, bytes, int]:
    """Validate magic/version and return (metadata, raw bytes, payload offset)."""
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    file_version, meta_len = struct.unpack_from("<HI", raw, 4)
    if file_version != version:
        raise VersionError(f"{path}: version {file_version}, expected {version}")
    if 10 + meta_len > len(raw):
        raise TruncatedFileError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(raw[10 : 10 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed metadata block") from exc
    return meta, raw, 10 + meta_len


def write_dataset(ds: StimulusDataset, path) -> None:
    """``HOCV`` layout: magic, u16 version, u32 metadata length, JSON metadata,
    float32 frames (train then test), float64 labels (train then test)."""
    payload = [
        np.ascontiguousarray(ds.train_videos, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.test_videos, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.train_labels, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.test_labels, dtype="<f8").tobytes(),
    ]
    write_container(path, HOCV_MAGIC, HOCV_VERSION, _metadata_block(ds), payload)


def dataset_file_size(ds: StimulusDataset) -> int:
    frames = ds.train_videos.size + ds.test_videos.size
    labels = ds.train_labels.size + ds.test_labels.size
    return 4 + 2 + 4 + len(_metadata_block(ds)) + 4 * frames + 8 * labels


def read_dataset(path) -> StimulusDataset:
    meta, raw, offset = read_container(path, HOCV_MAGIC, HOCV_VERSION)
    try:
        shapes = {k: tuple(int(v) for v in meta["shapes"][k]) for k in ("train", "test")}
        frame_rate, n_repeats, extra = meta["frame_rate"], meta["n_repeats"], meta["extra"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: metadata missing required fields") from exc

    def take(dtype, shape):
        nonlocal offset
        size = int(np.prod(shape)) if shape else 0
        end = offset + np.dtype(dtype).itemsize * size
        if end > len(raw):
            raise TruncatedFileError(f"{path}: payload truncated")
        arr = np.frombuffer(raw, dtype=dtype, count=size, offset=offset).reshape(shape)
        offset = end
        return arr.copy()

    train_v = take("<f4", shapes["train"])
    test_v = take("<f4", shapes["test"])
    train_l = take("<f8", shapes["train"][:2] + (8,))
    test_l = take("<f8", shapes["test"][:2] + (8,))
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return StimulusDataset(train_v, train_l, test_v, test_l, frame_rate, n_repeats, extra)


def write_labels_csv(ds: StimulusDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("split", "sequence_id", "frame") + PARAM_NAMES)
        for split in ("train", "test"):
            labels = getattr(ds, f"{split}_labels")
            for s in range(labels.shape[0]):
                for f in range(labels.shape[1]):
                    writer.writerow((split, s, f) + tuple(repr(float(v)) for v in labels[s, f]))
