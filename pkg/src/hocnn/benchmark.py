"""Synthetic directional benchmark: baseline CNN against HoCNN on model cells.

Every seed builds a fresh dataset and cell bank, simulates responses and
trains seven networks: both models on all cells at the full training
fraction, HoCNN at half the data, and both models on the expansion and the
control cell subsets.  Correlation to the trial mean and linear geometry
readouts are collected per run.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .hoconv import numerical_rank
from .network import TrainConfig, init_network, mcintosh_layers, train
from .pipeline import evaluate_model, make_train_data, network_input, simulate_split
from .readout import build_feature_matrix, default_tap, evaluate_readout, fit_readout, select_lambda
from .retina import CellBankConfig, bootstrap_reliability, make_cell_bank, select_reliable_cells
from .stimulus import StimulusConfig, generate_dataset

SUBSETS = ("all", "expansion", "control")


@dataclass
class BenchmarkConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    height: int = 50
    width: int = 50
    n_train: int = 400
    n_test: int = 20
    n_repeats: int = 60
    channels: tuple = (4, 4)
    windows: tuple = ((3, 3), (3, 3))
    max_epochs: int = 1
    lr: float = 2e-3
    batch_size: int = 2
    early_stop_patience: int = 5
    full_fraction: float = 0.9
    half_fraction: float = 0.5
    control_size: int = 11
    n_bootstrap: int = 200
    lambdas: tuple = (1e-1, 1.0, 10.0, 100.0, 1e3, 1e4)
    cells: CellBankConfig = field(default_factory=CellBankConfig)


@dataclass
class RunResult:
    model: str
    subset: str
    fraction: float
    corr: float
    rho_h11: float
    rho_h22: float
    seconds: float
    w2_rank: float = float("nan")


@dataclass
class SeedResult:
    seed: int
    runs: list
    seconds: float

    def get(self, model: str, subset: str = "all", fraction: float | None = None) -> RunResult:
        for r in self.runs:
            if r.model == model and r.subset == subset and (fraction is None or abs(r.fraction - fraction) < 1e-12):
                return r
        raise KeyError((model, subset, fraction))


def control_subset(cells, reliability: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` most reliable cells that are not expansion cells."""
    pool = [i for i, c in enumerate(cells) if c.group != "expansion"]
    return sorted(select_reliable_cells(reliability[pool], pool, k))


def first_layer_w2_rank(state) -> float:
    """Mean numerical rank of the symmetric quadratic kernel over output channels."""
    bank = state.bank(0)
    if bank.order < 2:
        return float("nan")
    dense = bank.dense_w2()
    sym = dense + dense.transpose(0, 2, 1)
    return float(np.mean([numerical_rank(q) for q in sym]))


def _readout_rhos(state, ds, lambdas) -> tuple[float, float]:
    tap = default_tap(state)
    train_fm = build_feature_matrix(state, network_input(ds.train_videos), ds.train_labels, tap)
    test_fm = build_feature_matrix(state, network_input(ds.test_videos), ds.test_labels, tap)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lam, _ = select_lambda(train_fm, lambdas)
        ev = evaluate_readout(fit_readout(train_fm, lam), test_fm)
    return ev.rho_of("H11"), ev.rho_of("H22")


def run_seed(cfg: BenchmarkConfig, seed: int, log=None) -> SeedResult:
    start = time.perf_counter()
    stim = StimulusConfig(height=cfg.height, width=cfg.width, n_train=cfg.n_train, n_test=cfg.n_test, n_repeats=cfg.n_repeats)
    ds = generate_dataset(stim, seed)
    cells = make_cell_bank(cfg.cells, (cfg.height, cfg.width), seed)
    bpf = cfg.cells.bins_per_frame
    train_resp = simulate_split(ds, cells, "train", 1, seed, bpf)
    test_resp = simulate_split(ds, cells, "test", cfg.n_repeats, seed + 1, bpf)
    rel = bootstrap_reliability(test_resp, cfg.n_bootstrap, seed).mean
    subsets = {
        "all": list(range(len(cells))),
        "expansion": [i for i, c in enumerate(cells) if c.group == "expansion"],
        "control": control_subset(cells, rel, cfg.control_size),
    }
    plan = [("baseline", s, cfg.full_fraction) for s in SUBSETS]
    plan += [("hocnn", s, cfg.full_fraction) for s in SUBSETS]
    plan.append(("hocnn", "all", cfg.half_fraction))
    train_cfg = TrainConfig(
        lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
        early_stop_patience=cfg.early_stop_patience, seed=seed,
    )
    runs = []
    for model, subset, fraction in plan:
        t0 = time.perf_counter()
        idx = subsets[subset]
        layers = mcintosh_layers(model, len(idx), cfg.channels, cfg.windows)
        state = init_network(layers, (ds.train_videos.shape[1], cfg.height, cfg.width, 1), seed)
        data = make_train_data(ds, train_resp, state.history, cells=idx, bins_per_frame=bpf)
        best, _ = train(state, data, train_cfg, fraction)
        summary, _, _ = evaluate_model(best, ds, test_resp.subset(idx), bins_per_frame=bpf)
        h11, h22 = _readout_rhos(best, ds, cfg.lambdas)
        result = RunResult(model, subset, fraction, summary.mean, h11, h22, time.perf_counter() - t0, first_layer_w2_rank(best))
        runs.append(result)
        if log is not None:
            log(f"seed {seed} {model:8s} {subset:9s} f={fraction:.2f} corr={result.corr:.3f} "
                f"rhoH11={h11:.3f} rhoH22={h22:.3f} {result.seconds:.0f}s")
    return SeedResult(seed, runs, time.perf_counter() - start)


@dataclass
class BenchmarkSummary:
    seeds: list
    seconds: float

    def mean(self, attr: str, model: str, subset: str = "all", fraction: float | None = None) -> float:
        return float(np.nanmean([getattr(s.get(model, subset, fraction), attr) for s in self.seeds]))

    def table(self) -> list[tuple]:
        rows = []
        for r in self.seeds[0].runs:
            key = (r.model, r.subset, r.fraction)
            rows.append(key + tuple(self.mean(a, *key) for a in ("corr", "rho_h11", "rho_h22")))
        return rows


def run_benchmark(cfg: BenchmarkConfig | None = None, log=None) -> BenchmarkSummary:
    cfg = BenchmarkConfig() if cfg is None else cfg
    start = time.perf_counter()
    seeds = [run_seed(cfg, s, log) for s in cfg.seeds]
    return BenchmarkSummary(seeds, time.perf_counter() - start)
