"""Standard and higher-order (Volterra) 3D convolution on videos.

Videos are ``float64`` arrays laid out ``(T, H, W, C)``; every operator also
accepts a leading batch axis ``(B, T, H, W, C)``.  Convolution is valid-mode
with stride 1.  A window patch is flattened in ``(dt, dy, dx, c)`` order, so
a kernel bank over ``m = n_t * n_s**2 * C`` variables computes, per output
channel ``c``::

    y = b[c] + sum_i w1[c, i] x_i + scale2 * sum_{i <= j} w2[c, k(i, j)] x_i x_j

with ``w2`` packed in ``numpy.triu_indices(m)`` order.  ``scale2`` is derived
from the window on every access, never stored.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractViolation, NumericOverflowError, TruncatedFileError

INT64_MAX = 2**63 - 1
MAX_ORDER = 3
# Patch rows processed per block; bounds peak memory of the order-2 path.
CHUNK_ROWS = 1 << 15


def count_monomials(n: int, p: int) -> int:
    """Number of monomials of degree <= ``p`` in ``n`` variables, C(n + p, p)."""
    if n < 1 or p < 0:
        raise ContractViolation(f"count_monomials needs n >= 1, p >= 0 (got n={n}, p={p})")
    count = math.comb(n + p, p)
    if count > INT64_MAX:
        raise NumericOverflowError(f"C({n}+{p}, {p}) does not fit a 64-bit integer")
    return count


def scale_factor(n: int, p: int) -> float:
    """1/sqrt(count_monomials(n, p)); only defined for orders >= 2."""
    if p < 2:
        raise ContractViolation(f"order-{p} kernels are never scaled")
    return 1.0 / math.sqrt(count_monomials(n, p))


@dataclass(frozen=True)
class WindowSpec:
    n_t: int
    n_s: int

    def __post_init__(self):
        if int(self.n_t) < 1 or int(self.n_s) < 1:
            raise ConfigurationError(f"window extents must be >= 1, got {self}")

    @property
    def volume(self) -> int:
        return self.n_t * self.n_s * self.n_s

    def output_shape(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        if t < self.n_t or h < self.n_s or w < self.n_s:
            raise ConfigurationError(
                f"input (T={t}, H={h}, W={w}) smaller than window ({self.n_t}, {self.n_s}, {self.n_s})"
            )
        return t - self.n_t + 1, h - self.n_s + 1, w - self.n_s + 1


@lru_cache(maxsize=64)
def _triu(m: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(m)


@lru_cache(maxsize=16)
def _cubic_index(m: int) -> np.ndarray:
    return np.array(list(combinations_with_replacement(range(m), 3)), dtype=np.intp).reshape(-1, 3)


def n_pairs(m: int) -> int:
    return m * (m + 1) // 2


def n_triples(m: int) -> int:
    return math.comb(m + 2, 3)


@dataclass(frozen=True, eq=False)
class HoKernelBank:
    """Per-output-channel bias, linear, pairwise (and optional cubic) weights.

    ``w1`` has shape ``(out_channels, m)``, ``w2`` ``(out_channels, m(m+1)/2)``
    and ``w3`` ``(out_channels, C(m+2, 3))``.  The same class carries
    gradients returned by :func:`hoconv3d_backward`.
    """

    window: WindowSpec
    in_channels: int
    bias: np.ndarray
    w1: np.ndarray
    w2: np.ndarray | None = None
    w3: np.ndarray | None = None

    def __post_init__(self):
        for name in ("bias", "w1", "w2", "w3"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, np.asarray(value, dtype=np.float64))
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        m = self.n_vars
        if self.w1.ndim != 2 or self.w1.shape[1] != m:
            raise ConfigurationError(
                f"w1 has shape {self.w1.shape}; window volume x channels requires (*, {m})"
            )
        c_out = self.w1.shape[0]
        if self.bias.shape != (c_out,):
            raise ConfigurationError(f"bias shape {self.bias.shape} != ({c_out},)")
        if self.w2 is not None and self.w2.shape != (c_out, n_pairs(m)):
            raise ConfigurationError(f"w2 shape {self.w2.shape} != ({c_out}, {n_pairs(m)})")
        if self.w3 is not None:
            if self.w2 is None:
                raise ConfigurationError("an order-3 bank also needs w2")
            if self.w3.shape != (c_out, n_triples(m)):
                raise ConfigurationError(f"w3 shape {self.w3.shape} != ({c_out}, {n_triples(m)})")

    @property
    def order(self) -> int:
        if self.w3 is not None:
            return 3
        return 2 if self.w2 is not None else 1

    @property
    def out_channels(self) -> int:
        return self.w1.shape[0]

    @property
    def n_vars(self) -> int:
        return self.window.volume * self.in_channels

    @property
    def scale2(self) -> float:
        return scale_factor(self.n_vars, 2)

    @property
    def scale3(self) -> float:
        return scale_factor(self.n_vars, 3)

    @classmethod
    def init(cls, window, in_channels, out_channels, order=2, seed=0):
        """Uniform init, half-width sqrt(1/m); higher-order weights shrunk by 0.1.

        Each array draws from its own stream, so the bias and ``w1`` of an
        order-2 bank equal those of an order-1 bank built with the same seed.
        """
        if not 1 <= order <= MAX_ORDER:
            raise ConfigurationError(f"order must be in 1..{MAX_ORDER}, got {order}")
        m = window.volume * in_channels
        half = math.sqrt(1.0 / m)

        def draw(stream, shape, gain=1.0):
            rng = np.random.default_rng([seed, stream])
            return gain * rng.uniform(-half, half, size=shape)

        w1 = draw(0, (out_channels, m))
        bias = draw(1, (out_channels,))
        w2 = draw(2, (out_channels, n_pairs(m)), 0.1) if order >= 2 else None
        w3 = draw(3, (out_channels, n_triples(m)), 0.1) if order >= 3 else None
        return cls(window, in_channels, bias, w1, w2, w3)

    def zeros_like(self) -> HoKernelBank:
        return HoKernelBank(
            self.window,
            self.in_channels,
            np.zeros_like(self.bias),
            np.zeros_like(self.w1),
            None if self.w2 is None else np.zeros_like(self.w2),
            None if self.w3 is None else np.zeros_like(self.w3),
        )

    def dense_w2(self) -> np.ndarray:
        """Upper-triangular ``(out_channels, m, m)`` view of the packed pairs."""
        m = self.n_vars
        dense = np.zeros((self.out_channels, m, m))
        if self.w2 is not None:
            iu, ju = _triu(m)
            dense[:, iu, ju] = self.w2
        return dense

    def to_bytes(self) -> bytes:
        header = struct.pack(
            "<5I", self.order, self.out_channels, self.window.n_t, self.window.n_s, self.in_channels
        )
        parts = [header, self.bias.astype("<f8").tobytes(), self.w1.astype("<f8").tobytes()]
        for extra in (self.w2, self.w3):
            if extra is not None:
                parts.append(extra.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf, offset=0) -> tuple[HoKernelBank, int]:
        """Decode one record starting at ``offset``; returns the bank and the next offset."""
        if len(buf) - offset < 20:
            raise TruncatedFileError("kernel-bank header truncated")
        order, c_out, n_t, n_s, c_in = struct.unpack_from("<5I", buf, offset)
        if not 1 <= order <= MAX_ORDER:
            raise ConfigurationError(f"kernel-bank order {order} not supported")
        offset += 20
        window = WindowSpec(n_t, n_s)
        m = window.volume * c_in
        sizes = [c_out, c_out * m]
        if order >= 2:
            sizes.append(c_out * n_pairs(m))
        if order >= 3:
            sizes.append(c_out * n_triples(m))
        arrays = []
        for size in sizes:
            end = offset + 8 * size
            if end > len(buf):
                raise TruncatedFileError("kernel-bank payload truncated")
            arrays.append(np.frombuffer(buf, dtype="<f8", count=size, offset=offset).astype(np.float64))
            offset = end
        bias, w1 = arrays[0], arrays[1].reshape(c_out, m)
        w2 = arrays[2].reshape(c_out, -1) if order >= 2 else None
        w3 = arrays[3].reshape(c_out, -1) if order >= 3 else None
        return cls(window, c_in, bias, w1, w2, w3), offset


def fold_dense_w2(dense: np.ndarray) -> np.ndarray:
    """Fold a dense ``(out, m, m)`` pair tensor into packed upper-triangular storage.

    ``x_i x_j`` and ``x_j x_i`` are the same monomial, so off-diagonal
    weights are summed.
    """
    dense = np.asarray(dense, dtype=np.float64)
    m = dense.shape[-1]
    iu, ju = _triu(m)
    summed = dense + np.swapaxes(dense, -1, -2)
    folded = summed[..., iu, ju]
    diag = iu == ju
    folded[..., diag] = dense[..., iu[diag], ju[diag]]
    return folded


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ConfigurationError(f"expected a (T, H, W, C) video or a batch of them, got shape {x.shape}")


def _check_input(x5: np.ndarray, bank: HoKernelBank) -> tuple[int, int, int]:
    if x5.shape[-1] != bank.in_channels:
        raise ConfigurationError(f"input has {x5.shape[-1]} channels, kernels expect {bank.in_channels}")
    return bank.window.output_shape(*x5.shape[1:4])


def _frame_chunks(batch: int, t_out: int, rows_per_frame: int):
    step = max(1, CHUNK_ROWS // rows_per_frame)
    for b in range(batch):
        for t0 in range(0, t_out, step):
            yield b, t0, min(t_out, t0 + step)


def _window_view(x5: np.ndarray, window: WindowSpec) -> np.ndarray:
    # (B, To, Ho, Wo, C, nt, ns, ns) -> (B, To, Ho, Wo, nt, ns, ns, C), no copy
    view = sliding_window_view(x5, (window.n_t, window.n_s, window.n_s), axis=(1, 2, 3))
    return np.moveaxis(view, 4, -1)


class _Coefficients:
    """Forward-ready rearrangements of a kernel bank, built once per call."""

    def __init__(self, bank: HoKernelBank):
        m, c_out = bank.n_vars, bank.out_channels
        self.w1t = bank.w1.T.copy()
        self.order = bank.order
        if self.order >= 2:
            dense = bank.dense_w2() * bank.scale2
            # column c*m + j of quad holds G_c[:, j]
            self.quad = dense.transpose(1, 0, 2).reshape(m, c_out * m).copy()
            sym = dense + dense.transpose(0, 2, 1)
            self.quad_sym = sym.transpose(1, 0, 2).reshape(m, c_out * m).copy()
        if self.order >= 3:
            self.cubic_idx = _cubic_index(m)
            self.w3t = (bank.w3 * bank.scale3).T.copy()


def _cubic_monomials(patches: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return patches[:, idx[:, 0]] * patches[:, idx[:, 1]] * patches[:, idx[:, 2]]


def _offsets(window: WindowSpec):
    for dt in range(window.n_t):
        for dy in range(window.n_s):
            for dx in range(window.n_s):
                yield dt, dy, dx


def _linear_taps(bank: HoKernelBank) -> np.ndarray:
    """w1 as ``(n_t, n_s, n_s, C_in, C_out)`` for shift-and-accumulate."""
    w = bank.window
    return bank.w1.reshape(bank.out_channels, w.n_t, w.n_s, w.n_s, bank.in_channels).transpose(1, 2, 3, 4, 0)


def _linear_forward(x5: np.ndarray, bank: HoKernelBank, shape) -> np.ndarray:
    # order 1, several input channels: one small matmul per offset, no patch matrix
    t_out, h_out, w_out = shape
    taps = _linear_taps(bank)
    out = np.empty((x5.shape[0], t_out, h_out, w_out, bank.out_channels))
    out[...] = bank.bias
    for dt, dy, dx in _offsets(bank.window):
        out += x5[:, dt : dt + t_out, dy : dy + h_out, dx : dx + w_out] @ taps[dt, dy, dx]
    return out


def _linear_backward(x5, bank: HoKernelBank, g5, shape, input_grad: bool):
    t_out, h_out, w_out = shape
    taps = _linear_taps(bank)
    grad_taps = np.empty_like(taps)
    grad_x = np.zeros_like(x5) if input_grad else None
    g2 = g5.reshape(-1, bank.out_channels)
    for dt, dy, dx in _offsets(bank.window):
        sl = (slice(None), slice(dt, dt + t_out), slice(dy, dy + h_out), slice(dx, dx + w_out))
        grad_taps[dt, dy, dx] = x5[sl].reshape(-1, bank.in_channels).T @ g2
        if input_grad:
            grad_x[sl] += g5 @ taps[dt, dy, dx].T
    grad_w1 = grad_taps.transpose(4, 0, 1, 2, 3).reshape(bank.out_channels, -1)
    return grad_x, grad_w1


def _forward(x5: np.ndarray, bank: HoKernelBank) -> np.ndarray:
    t_out, h_out, w_out = _check_input(x5, bank)
    if bank.order == 1 and bank.in_channels > 1:
        return _linear_forward(x5, bank, (t_out, h_out, w_out))
    m, c_out = bank.n_vars, bank.out_channels
    coef = _Coefficients(bank)
    view = _window_view(x5, bank.window)
    out = np.empty((x5.shape[0], t_out, h_out, w_out, c_out))
    for b, t0, t1 in _frame_chunks(x5.shape[0], t_out, h_out * w_out):
        patches = view[b, t0:t1].reshape(-1, m)
        y = patches @ coef.w1t
        y += bank.bias
        if coef.order >= 2:
            q = (patches @ coef.quad).reshape(-1, c_out, m)
            y += np.einsum("ncm,nm->nc", q, patches)
        if coef.order >= 3:
            y += _cubic_monomials(patches, coef.cubic_idx) @ coef.w3t
        out[b, t0:t1] = y.reshape(t1 - t0, h_out, w_out, c_out)
    return out


def _raise_if_nonfinite(out: np.ndarray, squeeze: bool) -> None:
    if np.isfinite(out).all():
        return
    bad = tuple(int(i) for i in np.argwhere(~np.isfinite(out))[0])
    if squeeze:
        bad = bad[1:]
    raise NumericOverflowError(f"non-finite convolution output at index {bad}")


def conv3d_forward(x, kernels: HoKernelBank) -> np.ndarray:
    """Linear valid 3D convolution, ``b + w1 . patch`` at every window position."""
    if kernels.order != 1:
        raise ContractViolation("conv3d_forward takes an order-1 kernel bank")
    x5, squeeze = _as_batch(x)
    out = _forward(x5, kernels)
    _raise_if_nonfinite(out, squeeze)
    return out[0] if squeeze else out


def hoconv3d_forward(x, kernels: HoKernelBank) -> np.ndarray:
    """Higher-order valid 3D convolution (order 2, or 3 when ``w3`` is set)."""
    if kernels.order < 2:
        raise ContractViolation("hoconv3d_forward takes a kernel bank of order >= 2")
    x5, squeeze = _as_batch(x)
    out = _forward(x5, kernels)
    _raise_if_nonfinite(out, squeeze)
    return out[0] if squeeze else out


def conv_forward_any(x, kernels: HoKernelBank) -> np.ndarray:
    """Dispatch on ``kernels.order``; used by the network layers."""
    x5, squeeze = _as_batch(x)
    out = _forward(x5, kernels)
    _raise_if_nonfinite(out, squeeze)
    return out[0] if squeeze else out


def hoconv3d_backward(x, kernels: HoKernelBank, upstream_grad, input_grad: bool = True) -> tuple[np.ndarray | None, HoKernelBank]:
    """Gradients of ``sum(upstream_grad * forward(x))`` w.r.t. input and kernels.

    Works for every order, so it doubles as the order-1 convolution backward.
    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    x5, squeeze = _as_batch(x)
    g5 = np.asarray(upstream_grad, dtype=np.float64)
    if squeeze:
        g5 = g5[None]
    t_out, h_out, w_out = _check_input(x5, kernels)
    expected = (x5.shape[0], t_out, h_out, w_out, kernels.out_channels)
    if g5.shape != expected:
        raise ContractViolation(f"upstream_grad shape {g5.shape[int(squeeze):]} != {expected[int(squeeze):]}")

    if kernels.order == 1:
        grad_x, grad_w1 = _linear_backward(x5, kernels, g5, (t_out, h_out, w_out), input_grad)
        grads = HoKernelBank(kernels.window, kernels.in_channels, g5.sum(axis=(0, 1, 2, 3)), grad_w1)
        if grad_x is not None and squeeze:
            grad_x = grad_x[0]
        return grad_x, grads

    window = kernels.window
    m, c_out = kernels.n_vars, kernels.out_channels
    coef = _Coefficients(kernels)
    view = _window_view(x5, window)
    grad_x = np.zeros_like(x5) if input_grad else None
    grad_w1 = np.zeros((c_out, m))
    grad_quad = np.zeros((m, c_out * m)) if coef.order >= 2 else None
    grad_w3 = np.zeros((c_out, n_triples(m))) if coef.order >= 3 else None

    for b, t0, t1 in _frame_chunks(x5.shape[0], t_out, h_out * w_out):
        patches = view[b, t0:t1].reshape(-1, m)
        g = g5[b, t0:t1].reshape(-1, c_out)
        grad_w1 += g.T @ patches
        if coef.order >= 2:
            weighted = (g[:, :, None] * patches[:, None, :]).reshape(-1, c_out * m)
            grad_quad += patches.T @ weighted
        if coef.order >= 3:
            grad_w3 += g.T @ _cubic_monomials(patches, coef.cubic_idx)
        if not input_grad:
            continue
        d_patches = g @ kernels.w1
        if coef.order >= 2:
            q = (patches @ coef.quad_sym).reshape(-1, c_out, m)
            d_patches += np.einsum("nc,ncm->nm", g, q)
        if coef.order >= 3:
            idx = coef.cubic_idx
            d_mono = g @ coef.w3t.T
            for k in range(3):
                other = patches[:, idx[:, (k + 1) % 3]] * patches[:, idx[:, (k + 2) % 3]]
                contrib = d_mono * other
                for col in range(m):
                    sel = idx[:, k] == col
                    d_patches[:, col] += contrib[:, sel].sum(axis=1)
        _scatter_patches(grad_x[b], d_patches, window, t0, t1, h_out, w_out)

    grad_w2 = None
    if coef.order >= 2:
        iu, ju = _triu(m)
        full = grad_quad.reshape(m, c_out, m).transpose(1, 0, 2)
        grad_w2 = kernels.scale2 * full[:, iu, ju]
    if grad_w3 is not None:
        grad_w3 *= kernels.scale3
    grads = HoKernelBank(
        window,
        kernels.in_channels,
        g5.sum(axis=(0, 1, 2, 3)),
        grad_w1,
        grad_w2,
        grad_w3,
    )
    if grad_x is not None and squeeze:
        grad_x = grad_x[0]
    return grad_x, grads


def _scatter_patches(grad_video, d_patches, window, t0, t1, h_out, w_out):
    """Transpose of patch extraction: add each window's gradient back to its pixels."""
    c = grad_video.shape[-1]
    d = d_patches.reshape(t1 - t0, h_out, w_out, window.n_t, window.n_s, window.n_s, c)
    for dt in range(window.n_t):
        for dy in range(window.n_s):
            for dx in range(window.n_s):
                grad_video[t0 + dt : t1 + dt, dy : dy + h_out, dx : dx + w_out] += d[:, :, :, dt, dy, dx]


conv3d_backward = hoconv3d_backward


def hoconv_oracle(x, kernels: HoKernelBank) -> np.ndarray:
    """Reference implementation by explicit loops over outputs, windows and monomials."""
    x5, squeeze = _as_batch(x)
    t_out, h_out, w_out = _check_input(x5, kernels)
    nt, ns = kernels.window.n_t, kernels.window.n_s
    order = kernels.order
    s2 = kernels.scale2 if order >= 2 else 0.0
    s3 = kernels.scale3 if order >= 3 else 0.0
    out = np.zeros((x5.shape[0], t_out, h_out, w_out, kernels.out_channels))
    for b in range(x5.shape[0]):
        video = x5[b]
        for t in range(t_out):
            for row in range(h_out):
                for col in range(w_out):
                    patch = [
                        float(video[t + dt, row + dy, col + dx, ch])
                        for dt in range(nt)
                        for dy in range(ns)
                        for dx in range(ns)
                        for ch in range(kernels.in_channels)
                    ]
                    m = len(patch)
                    for co in range(kernels.out_channels):
                        acc = float(kernels.bias[co])
                        for i in range(m):
                            acc += float(kernels.w1[co, i]) * patch[i]
                        if order >= 2:
                            quad = 0.0
                            k = 0
                            for i in range(m):
                                for j in range(i, m):
                                    quad += float(kernels.w2[co, k]) * patch[i] * patch[j]
                                    k += 1
                            acc += s2 * quad
                        if order >= 3:
                            cubic = 0.0
                            k = 0
                            for i in range(m):
                                for j in range(i, m):
                                    for l in range(j, m):
                                        cubic += float(kernels.w3[co, k]) * patch[i] * patch[j] * patch[l]
                                        k += 1
                            acc += s3 * cubic
                        out[b, t, row, col, co] = acc
    _raise_if_nonfinite(out, squeeze)
    return out[0] if squeeze else out


def tied_weights_rank_check(w, alpha2: float) -> int:
    """Numerical rank of the order-2 coefficients ``alpha2 * w w^T`` of a pointwise nonlinearity.

    Always <= 1; a free pairwise kernel generally has full rank.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    return numerical_rank(alpha2 * np.outer(w, w))


def numerical_rank(matrix, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))
