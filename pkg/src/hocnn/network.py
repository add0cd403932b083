"""Layer stacks, Poisson loss, AdamW, plateau scheduling and the training loop.

A network is an ordered list of :class:`LayerSpec` ending in
``dense, softplus``.  Convolutions keep the time axis; ``flatten`` folds
``(H, W, C)`` per time step so the dense read-out is applied frame by frame.
Feeding a clip exactly as long as the network's temporal history gives one
rate vector; longer clips give one per extra frame.

Gradients are written out per layer; there is no graph autodiff.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, DataError, FormatError, NumericError, TrainingAborted, TruncatedFileError, VersionError
from .hoconv import HoKernelBank, WindowSpec, conv_forward_any, hoconv3d_backward

LAYER_KINDS = ("conv3d", "hoconv3d", "batch_norm", "relu", "flatten", "dense", "softplus")
CHECKPOINT_MAGIC = b"HOCK"
CHECKPOINT_VERSION = 1
POISSON_EPS = 1e-8


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    window: WindowSpec | None = None
    out: int | None = None
    order: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3d", "hoconv3d") and (self.window is None or not self.out):
            raise ConfigurationError(f"{self.kind} needs a window and out channels")
        if self.kind == "dense" and not self.out:
            raise ConfigurationError("dense needs out units")

    @property
    def conv_order(self) -> int:
        return 1 if self.kind == "conv3d" else self.order

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.window is not None:
            d["window"] = [self.window.n_t, self.window.n_s]
        if self.out is not None:
            d["out"] = self.out
        if self.kind == "hoconv3d":
            d["order"] = self.order
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        window = WindowSpec(*d["window"]) if "window" in d else None
        return cls(d["kind"], window, d.get("out"), d.get("order", 2))


def mcintosh_layers(model: str, n_cells: int, channels=(4, 4), windows=((3, 3), (6, 3)), order=2) -> list[LayerSpec]:
    """Two conv blocks (conv, batch norm, relu) and a softplus dense read-out.

    ``model`` is ``"baseline"`` or ``"hocnn"``; the latter swaps only the
    first convolution for a higher-order one.
    """
    if model == "hocnn_v2":
        raise ConfigurationError("the hocnn_v2 architecture is a configuration hook only")
    if model not in ("baseline", "hocnn"):
        raise ConfigurationError(f"unknown model {model!r}")
    first = "hoconv3d" if model == "hocnn" else "conv3d"
    return [
        LayerSpec(first, WindowSpec(*windows[0]), channels[0], order),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
        LayerSpec("conv3d", WindowSpec(*windows[1]), channels[1]),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", out=n_cells),
        LayerSpec("softplus"),
    ]


def propagate_shapes(layers, input_shape) -> list[tuple]:
    """Output shape after each layer for a single (unbatched) input."""
    if not layers:
        raise ConfigurationError("a network needs at least one layer")
    if len(layers) < 2 or layers[-2].kind != "dense" or layers[-1].kind != "softplus":
        raise ConfigurationError("a network must end with dense, softplus")
    shape = tuple(int(s) for s in input_shape)
    if len(shape) != 4:
        raise ConfigurationError(f"input shape must be (T, H, W, C), got {shape}")
    shapes = []
    for i, layer in enumerate(layers):
        if layer.kind in ("conv3d", "hoconv3d"):
            if len(shape) != 4:
                raise ConfigurationError(f"layer {i} ({layer.kind}) needs a video input, got {shape}")
            shape = layer.window.output_shape(*shape[:3]) + (layer.out,)
        elif layer.kind == "batch_norm" and len(shape) != 4:
            raise ConfigurationError(f"layer {i}: batch_norm follows a convolution")
        elif layer.kind == "flatten":
            if len(shape) != 4:
                raise ConfigurationError(f"layer {i}: flatten needs a video input")
            shape = (shape[0], shape[1] * shape[2] * shape[3])
        elif layer.kind == "dense":
            if len(shape) != 2:
                raise ConfigurationError(f"layer {i}: dense needs a flattened input")
            shape = (shape[0], layer.out)
        shapes.append(shape)
    return shapes


def history_length(layers) -> int:
    """Frames of input needed for one output frame."""
    return 1 + sum(l.window.n_t - 1 for l in layers if l.kind in ("conv3d", "hoconv3d"))


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-6
    batch_size: int = 4
    max_epochs: int = 30
    val_fraction: float = 0.10
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    scheduler_threshold: float = 1e-5
    min_lr: float = 1e-7
    early_stop_patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    freeze: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("need lr > 0 and weight_decay >= 0")
        self.freeze = tuple(self.freeze)


@dataclass
class NetworkState:
    """Architecture, parameters, batch-norm statistics and optimizer moments.

    Parameter keys are ``"<layer index>.<name>"``: ``b``/``w1``/``w2``/``w3``
    for convolutions, ``gamma``/``beta`` for batch norm, ``W``/``b`` for dense.
    """

    layers: tuple
    input_shape: tuple
    params: dict
    bn_stats: dict
    moments: dict = field(default_factory=dict)
    step_count: int = 0
    rng_seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def bank(self, i: int) -> HoKernelBank:
        layer = self.layers[i]
        c_in = self._in_channels(i)
        p = self.params
        return HoKernelBank(
            layer.window, c_in, p[f"{i}.b"], p[f"{i}.w1"], p.get(f"{i}.w2"), p.get(f"{i}.w3")
        )

    def _in_channels(self, i: int) -> int:
        if i == 0:
            return self.input_shape[-1]
        return propagate_shapes(self.layers, self.input_shape)[i - 1][-1]

    @property
    def shapes(self) -> list[tuple]:
        return propagate_shapes(self.layers, self.input_shape)

    @property
    def history(self) -> int:
        return history_length(self.layers)

    def checksum(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        for key in sorted(self.params):
            digest.update(key.encode())
            digest.update(np.ascontiguousarray(self.params[key]).tobytes())
        return digest.hexdigest()

    def param_shapes(self) -> dict:
        return {k: v.shape for k, v in self.params.items()}


def init_network(layers, input_shape, seed=0, bn_momentum=0.1, bn_eps=1e-5) -> NetworkState:
    """Random initial state.

    Each layer seeds from ``(seed, layer index)``, so two architectures
    differing only in their first layer start with identical later layers.
    """
    layers = tuple(layers)
    shapes = propagate_shapes(layers, input_shape)
    params, stats = {}, {}
    prev = tuple(input_shape)
    for i, layer in enumerate(layers):
        layer_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        if layer.kind in ("conv3d", "hoconv3d"):
            bank = HoKernelBank.init(layer.window, prev[-1], layer.out, layer.conv_order, layer_seed)
            params[f"{i}.b"] = bank.bias
            params[f"{i}.w1"] = bank.w1
            if bank.w2 is not None:
                params[f"{i}.w2"] = bank.w2
            if bank.w3 is not None:
                params[f"{i}.w3"] = bank.w3
        elif layer.kind == "batch_norm":
            c = prev[-1]
            params[f"{i}.gamma"] = np.ones(c)
            params[f"{i}.beta"] = np.zeros(c)
            stats[f"{i}.mean"] = np.zeros(c)
            stats[f"{i}.var"] = np.ones(c)
        elif layer.kind == "dense":
            fan_in = prev[-1]
            half = math.sqrt(1.0 / fan_in)
            rng = np.random.default_rng(layer_seed)
            params[f"{i}.W"] = rng.uniform(-half, half, size=(layer.out, fan_in))
            params[f"{i}.b"] = np.zeros(layer.out)
        prev = shapes[i]
    return NetworkState(layers, tuple(input_shape), params, stats, {}, 0, seed, bn_momentum, bn_eps)


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_batch(x, state: NetworkState) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x, single = x[None], True
    elif x.ndim == 5:
        single = False
    else:
        raise ConfigurationError(f"network input must be (T, H, W, C) or batched, got {x.shape}")
    if x.shape[2:] != tuple(state.input_shape[1:]):
        raise ConfigurationError(f"input frames {x.shape[2:]} do not match {state.input_shape[1:]}")
    if x.shape[1] < state.history:
        raise ConfigurationError(f"clip of {x.shape[1]} frames shorter than history {state.history}")
    return x, single


def run_layers(state: NetworkState, x5: np.ndarray, train: bool, stop: int | None = None):
    """Forward through layers ``[0, stop)``; returns (output, caches, updated bn stats)."""
    h = x5
    caches = []
    new_stats = {}
    stop = len(state.layers) if stop is None else stop
    p = state.params
    for i, layer in enumerate(state.layers[:stop]):
        kind = layer.kind
        if kind in ("conv3d", "hoconv3d"):
            caches.append(h)
            h = conv_forward_any(h, state.bank(i))
        elif kind == "batch_norm":
            axes = (0, 1, 2, 3)
            if train:
                mean = h.mean(axis=axes)
                var = h.var(axis=axes)
                n = h.size // h.shape[-1]
                mom = state.bn_momentum
                unbiased = var * n / max(n - 1, 1)
                new_stats[f"{i}.mean"] = (1 - mom) * state.bn_stats[f"{i}.mean"] + mom * mean
                new_stats[f"{i}.var"] = (1 - mom) * state.bn_stats[f"{i}.var"] + mom * unbiased
            else:
                mean, var = state.bn_stats[f"{i}.mean"], state.bn_stats[f"{i}.var"]
            inv_std = 1.0 / np.sqrt(var + state.bn_eps)
            xhat = (h - mean) * inv_std
            caches.append((xhat, inv_std, train))
            h = p[f"{i}.gamma"] * xhat + p[f"{i}.beta"]
        elif kind == "relu":
            caches.append(h > 0)
            h = np.maximum(h, 0.0)
        elif kind == "flatten":
            caches.append(h.shape)
            h = h.reshape(h.shape[0], h.shape[1], -1)
        elif kind == "dense":
            caches.append(h)
            h = h @ p[f"{i}.W"].T + p[f"{i}.b"]
        elif kind == "softplus":
            caches.append(h)
            h = softplus(h)
    return h, caches, new_stats


def backward_layers(state: NetworkState, caches, grad_out, need_input: bool = False) -> tuple[np.ndarray | None, dict]:
    """Reverse pass matching :func:`run_layers`; returns (grad wrt input, param grads).

    The input gradient is only computed when ``need_input`` is set.
    """
    grads = {}
    g = grad_out
    p = state.params
    for i in range(len(caches) - 1, -1, -1):
        layer, cache = state.layers[i], caches[i]
        kind = layer.kind
        if kind in ("conv3d", "hoconv3d"):
            g, gk = hoconv3d_backward(cache, state.bank(i), g, input_grad=i > 0 or need_input)
            grads[f"{i}.b"] = gk.bias
            grads[f"{i}.w1"] = gk.w1
            if gk.w2 is not None:
                grads[f"{i}.w2"] = gk.w2
            if gk.w3 is not None:
                grads[f"{i}.w3"] = gk.w3
        elif kind == "batch_norm":
            xhat, inv_std, train = cache
            axes = (0, 1, 2, 3)
            grads[f"{i}.gamma"] = (g * xhat).sum(axis=axes)
            grads[f"{i}.beta"] = g.sum(axis=axes)
            dxhat = g * p[f"{i}.gamma"]
            if train:
                n = g.size // g.shape[-1]
                g = (inv_std / n) * (
                    n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
                )
            else:
                g = dxhat * inv_std
        elif kind == "relu":
            g = g * cache
        elif kind == "flatten":
            g = g.reshape(cache)
        elif kind == "dense":
            flat_in = cache.reshape(-1, cache.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            grads[f"{i}.W"] = flat_g.T @ flat_in
            grads[f"{i}.b"] = flat_g.sum(axis=0)
            g = g @ p[f"{i}.W"]
        elif kind == "softplus":
            g = g * _sigmoid(cache)
    return g, grads


def forward_network(state: NetworkState, x, mode: str = "eval") -> np.ndarray:
    """Nonnegative rates ``(..., T_out, n_cells)``.

    A single clip of exactly ``state.history`` frames returns ``(n_cells,)``.
    ``mode="train"`` normalises with batch statistics (without updating the
    running ones); ``"eval"`` uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    propagate_shapes(state.layers, state.input_shape)
    x5, single = _as_batch(x, state)
    out, _, _ = run_layers(state, x5, mode == "train")
    if single:
        out = out[0]
        if out.shape[0] == 1:
            out = out[0]
    return out


def poisson_nll(rates, counts) -> float:
    """Mean of ``(rate + eps) - count * log(rate + eps)``; log(count!) omitted."""
    rates = np.asarray(rates, dtype=np.float64)
    counts = np.asarray(counts)
    if rates.shape != counts.shape:
        raise ContractViolation(f"rates {rates.shape} and counts {counts.shape} differ")
    if (counts < 0).any():
        raise DataError("negative spike count")
    lam = rates + POISSON_EPS
    return float(np.mean(lam - counts * np.log(lam)))


def poisson_nll_grad(rates, counts) -> np.ndarray:
    lam = np.asarray(rates, dtype=np.float64) + POISSON_EPS
    return (1.0 - counts / lam) / lam.size


def loss_and_grads(state: NetworkState, x5, counts, train=True):
    """Poisson loss of a batch plus gradients for every parameter."""
    rates, caches, new_stats = run_layers(state, x5, train)
    loss = poisson_nll(rates, counts)
    _, grads = backward_layers(state, caches, poisson_nll_grad(rates, counts))
    return loss, grads, new_stats


def adamw_step(state: NetworkState, grads: dict, config: TrainConfig) -> NetworkState:
    """One AdamW update with decoupled weight decay; frozen keys are left alone."""
    for key, g in grads.items():
        if not np.isfinite(g).all():
            layer, name = key.split(".", 1)
            raise NumericError(f"non-finite gradient in layer {layer}, parameter {name}")
    step = state.step_count + 1
    lr, wd = config.lr, config.weight_decay
    b1, b2 = config.beta1, config.beta2
    params, moments = dict(state.params), dict(state.moments)
    for key, value in state.params.items():
        if key in config.freeze or key not in grads:
            continue
        g = grads[key]
        m_prev, v_prev = moments.get(key, (np.zeros_like(value), np.zeros_like(value)))
        m = b1 * m_prev + (1 - b1) * g
        v = b2 * v_prev + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        decayed = value - lr * wd * value
        params[key] = decayed - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        moments[key] = (m, v)
    return replace(state, params=params, moments=moments, step_count=step)


def _improved(value: float, best: float, threshold: float) -> bool:
    if math.isinf(best):
        return value < best
    return value < best - abs(best) * threshold


def plateau_scheduler_update(history, current_lr, factor=0.5, patience=5, threshold=1e-5, min_lr=1e-7) -> float:
    """Learning rate after the latest epoch of ``history``.

    Replays the plateau rule over the whole history: an epoch is bad unless
    it beats the best loss by ``threshold`` (relative); after ``patience``
    consecutive bad epochs the rate is cut by ``factor`` and the count
    restarts.  Returns ``current_lr * factor`` (floored at ``min_lr``) only
    if a cut falls on the last epoch.
    """
    history = list(history)
    if not history:
        raise ContractViolation("plateau scheduler needs a nonempty history")
    best, bad, cut_at = math.inf, 0, set()
    for epoch, value in enumerate(history):
        if _improved(value, best, threshold):
            best, bad = value, 0
        else:
            bad += 1
        if bad >= patience:
            cut_at.add(epoch)
            bad = 0
    if len(history) - 1 in cut_at:
        return max(current_lr * factor, min_lr)
    return current_lr


@dataclass
class TrainData:
    """Aligned clips and targets.

    ``inputs`` is ``(S, T_in, H, W, C)``; ``targets`` is ``(S, T_out, n_cells)``
    spike counts for the last ``T_out`` frames, with
    ``T_out = T_in - history + 1``.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx) -> TrainData:
        return TrainData(self.inputs[idx], self.targets[idx])


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    stopped_early: bool = False
    aborted: bool = False
    best_epoch: int = -1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("epoch", "train_loss", "val_loss", "lr", "wall_seconds"))
            for r in self.rows:
                writer.writerow(
                    (r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"]), f"{r['wall_seconds']:.3f}")
                )

    def losses(self, key="train_loss") -> list:
        return [r[key] for r in self.rows]


def split_train_val(n: int, val_fraction: float, fraction: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Chronological split: validation is the final block, training a prefix.

    ``fraction`` (of all sequences) selects how much of the front to train
    on; it may not reach into the validation block.
    """
    n_val = max(1, int(round(n * val_fraction)))
    n_avail = n - n_val
    if n_avail < 1:
        raise DataError(f"{n} sequences leave nothing to train on")
    if fraction is None:
        n_train = n_avail
    else:
        if not 0.0 < fraction <= 1.0 - val_fraction + 1e-12:
            raise ConfigurationError(f"training fraction {fraction} overlaps the validation block")
        n_train = max(1, min(n_avail, int(round(n * fraction))))
    return np.arange(n_train), np.arange(n - n_val, n)


def evaluate_loss(state: NetworkState, data: TrainData, batch_size: int) -> float:
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.inputs[start : start + batch_size].astype(np.float64)
        rates, _, _ = run_layers(state, x, False)
        y = data.targets[start : start + batch_size]
        total += poisson_nll(rates, y) * y.size
        count += y.size
    return total / count


def predict(state: NetworkState, inputs, batch_size: int = 4) -> np.ndarray:
    """Eval-mode rates for a stack of clips -> ``(S, T_out, n_cells)``."""
    out = []
    for start in range(0, len(inputs), batch_size):
        rates, _, _ = run_layers(state, np.asarray(inputs[start : start + batch_size], dtype=np.float64), False)
        out.append(rates)
    return np.concatenate(out, axis=0)


def train(state: NetworkState, data: TrainData, config: TrainConfig, fraction: float | None = None, progress=None):
    """Fit ``state`` to ``data``; returns (best checkpoint by validation loss, log).

    The validation block is the last ``val_fraction`` of the sequences.
    Training batches are reshuffled each epoch from ``(config.seed, epoch)``.
    A non-finite validation loss raises :class:`TrainingAborted` carrying the
    best finite checkpoint so far.
    """
    train_idx, val_idx = split_train_val(len(data), config.val_fraction, fraction)
    train_data, val_data = data.take(train_idx), data.take(val_idx)
    state = replace(state, bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
    log = TrainLog()
    best_state, best_val = state, math.inf
    lr = config.lr
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        step_config = replace(config, lr=lr)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_data))
        batch_losses, batch_sizes = [], []
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            x = train_data.inputs[idx].astype(np.float64)
            y = train_data.targets[idx]
            try:
                loss, grads, new_stats = loss_and_grads(state, x, y)
                if not math.isfinite(loss):
                    raise NumericError("non-finite training loss")
                state = adamw_step(replace(state, bn_stats={**state.bn_stats, **new_stats}), grads, step_config)
            except NumericError as exc:
                log.aborted = True
                raise TrainingAborted(f"epoch {epoch}: {exc}", best_state, log) from exc
            batch_losses.append(loss)
            batch_sizes.append(len(idx))
        train_loss = float(np.average(batch_losses, weights=batch_sizes))
        val_loss = evaluate_loss(state, val_data, config.batch_size)
        log.rows.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr, "wall_seconds": time.perf_counter() - t0}
        )
        if progress is not None:
            progress(log.rows[-1])
        if not math.isfinite(val_loss):
            log.aborted = True
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}", best_state, log)
        if val_loss < best_val:
            best_val, best_state, stale = val_loss, state, 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale > config.early_stop_patience or config.early_stop_patience == 0:
                log.stopped_early = True
                break
        lr = plateau_scheduler_update(
            log.losses("val_loss"), lr, config.scheduler_factor, config.scheduler_patience,
            config.scheduler_threshold, config.min_lr,
        )
    return best_state, log


@dataclass
class CorrelationSummary:
    per_cell: np.ndarray
    mean: float
    stderr: float
    n_excluded: int


def correlation_to_mean(predicted, trial_mean) -> CorrelationSummary:
    """Per-cell Pearson r between predicted rates and trial-averaged responses.

    Both inputs are ``(n_cells, n_bins)``.  Cells whose trial mean (or
    prediction) is constant get NaN and are left out of the aggregate.
    """
    pred = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    target = np.atleast_2d(np.asarray(trial_mean, dtype=np.float64))
    if pred.shape != target.shape:
        raise ContractViolation(f"prediction {pred.shape} and trial mean {target.shape} differ")
    if pred.shape[1] < 2:
        raise ContractViolation("need at least 2 time bins")
    a = pred - pred.mean(axis=1, keepdims=True)
    b = target - target.mean(axis=1, keepdims=True)
    va, vb = (a * a).sum(axis=1), (b * b).sum(axis=1)
    ok = (va > 0) & (vb > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(ok, (a * b).sum(axis=1) / np.sqrt(va * vb), np.nan)
    rho = np.clip(rho, -1.0, 1.0)
    valid = rho[ok]
    mean = float(valid.mean()) if valid.size else math.nan
    stderr = float(valid.std(ddof=1) / math.sqrt(valid.size)) if valid.size > 1 else math.nan
    return CorrelationSummary(rho, mean, stderr, int((~ok).sum()))


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _layer_arrays(state: NetworkState, i: int) -> list[str]:
    kind = state.layers[i].kind
    if kind == "batch_norm":
        return [f"{i}.gamma", f"{i}.beta"]
    if kind == "dense":
        return [f"{i}.W", f"{i}.b"]
    return []


def checkpoint_bytes(state: NetworkState) -> bytes:
    """``HOCK`` layout: magic, u16 version, u32 header length, canonical JSON
    architecture header, then per layer its kernel fragment or float64 arrays,
    then optimizer moments in sorted key order."""
    moment_keys = sorted(state.moments)
    header = {
        "layers": [l.to_dict() for l in state.layers],
        "input_shape": list(state.input_shape),
        "step_count": state.step_count,
        "rng_seed": state.rng_seed,
        "bn_momentum": state.bn_momentum,
        "bn_eps": state.bn_eps,
        "moment_keys": moment_keys,
    }
    blob = _canonical(header)
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob]
    for i, layer in enumerate(state.layers):
        if layer.kind in ("conv3d", "hoconv3d"):
            parts.append(state.bank(i).to_bytes())
        elif layer.kind == "batch_norm":
            for key in (f"{i}.gamma", f"{i}.beta"):
                parts.append(state.params[key].astype("<f8").tobytes())
            for key in (f"{i}.mean", f"{i}.var"):
                parts.append(state.bn_stats[key].astype("<f8").tobytes())
        else:
            for key in _layer_arrays(state, i):
                parts.append(state.params[key].astype("<f8").tobytes())
    for key in moment_keys:
        m, v = state.moments[key]
        parts.append(m.astype("<f8").tobytes())
        parts.append(v.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(state: NetworkState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def checkpoint_from_bytes(raw: bytes) -> NetworkState:
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a HOCK checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if 10 + hlen > len(raw):
        raise TruncatedFileError("checkpoint header truncated")
    try:
        header = json.loads(raw[10 : 10 + hlen])
        layers = tuple(LayerSpec.from_dict(d) for d in header["layers"])
        input_shape = tuple(header["input_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("malformed checkpoint header") from exc
    shapes = propagate_shapes(layers, input_shape)
    offset = 10 + hlen

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        end = offset + 8 * size
        if end > len(raw):
            raise TruncatedFileError("checkpoint payload truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        offset = end
        return arr

    params, stats = {}, {}
    prev = input_shape
    for i, layer in enumerate(layers):
        if layer.kind in ("conv3d", "hoconv3d"):
            bank, offset = HoKernelBank.from_bytes(raw, offset)
            if bank.order != layer.conv_order or bank.in_channels != prev[-1]:
                raise FormatError(f"kernel fragment {i} disagrees with the architecture header")
            params[f"{i}.b"], params[f"{i}.w1"] = bank.bias, bank.w1
            if bank.w2 is not None:
                params[f"{i}.w2"] = bank.w2
            if bank.w3 is not None:
                params[f"{i}.w3"] = bank.w3
        elif layer.kind == "batch_norm":
            c = prev[-1]
            params[f"{i}.gamma"], params[f"{i}.beta"] = take((c,)), take((c,))
            stats[f"{i}.mean"], stats[f"{i}.var"] = take((c,)), take((c,))
        elif layer.kind == "dense":
            params[f"{i}.W"] = take((layer.out, prev[-1]))
            params[f"{i}.b"] = take((layer.out,))
        prev = shapes[i]
    moments = {}
    for key in header.get("moment_keys", []):
        moments[key] = (take(params[key].shape), take(params[key].shape))
    if offset != len(raw):
        raise FormatError("trailing bytes after checkpoint payload")
    return NetworkState(
        layers, input_shape, params, stats, moments, int(header["step_count"]), int(header["rng_seed"]),
        float(header["bn_momentum"]), float(header["bn_eps"]),
    )


def load_checkpoint(path) -> NetworkState:
    return checkpoint_from_bytes(Path(path).read_bytes())
