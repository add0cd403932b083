"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The directional benchmark (criteria 4 and 6) trains 35 networks and takes
about 20 minutes on one core; it runs once per session through a
module-scoped fixture.
"""

import math
import time
from dataclasses import replace
from itertools import combinations_with_replacement

import numpy as np
import pytest

from hocnn.benchmark import BenchmarkConfig, run_benchmark
from hocnn.cli import main
from hocnn.hoconv import (
    HoKernelBank,
    WindowSpec,
    count_monomials,
    hoconv3d_backward,
    hoconv3d_forward,
    hoconv_oracle,
    scale_factor,
    tied_weights_rank_check,
)
from hocnn.network import (
    TrainConfig,
    TrainData,
    checkpoint_bytes,
    init_network,
    load_checkpoint,
    loss_and_grads,
    mcintosh_layers,
    poisson_nll,
    run_layers,
    train,
)
from hocnn.pipeline import simulate_split
from hocnn.retina import (
    CellBankConfig,
    ModelCell,
    ResponseSet,
    bootstrap_reliability,
    make_cell_bank,
    read_responses,
    sample_spikes,
    simulate_rates,
    write_responses,
)
from hocnn.sta import N_LAGS, binary_noise, compute_sta, svd_decompose
from hocnn.stimulus import StimulusConfig, dataset_file_size, generate_dataset, read_dataset, write_dataset


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, f"criterion {number}: {detail}"


def random_bank(rng, window, c_in, c_out):
    m = window.volume * c_in
    return HoKernelBank(
        window, c_in, rng.normal(size=c_out), rng.normal(size=(c_out, m)), rng.normal(size=(c_out, m * (m + 1) // 2))
    )


def finite_difference(f, value, h=1e-6):
    grad = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        orig = value[idx]
        value[idx] = orig + h
        up = f()
        value[idx] = orig - h
        down = f()
        value[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max())
    # gradients that vanish (conv bias before batch norm) only need to agree absolutely
    return 0.0 if scale < 1e-8 else np.abs(analytic - numeric).max() / scale


@pytest.fixture(scope="module")
def benchmark():
    return run_benchmark(BenchmarkConfig())


# --- 1 ------------------------------------------------------------------------


def test_criterion_1_operator_matches_oracle(capsys):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        window = WindowSpec(int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        bank = random_bank(rng, window, int(rng.integers(1, 3)), int(rng.integers(1, 4)))
        shape = (window.n_t + int(rng.integers(0, 3)), window.n_s + int(rng.integers(0, 4)), window.n_s + int(rng.integers(0, 4)))
        x = rng.normal(size=shape + (bank.in_channels,))
        fast, slow = hoconv3d_forward(x, bank), hoconv_oracle(x, bank)
        worst = max(worst, np.abs(fast - slow).max() / max(np.abs(slow).max(), 1e-300))
    seconds = time.perf_counter() - start
    report(capsys, 1, worst <= 1e-10 and seconds < 30, f"200 instances, max relative error {worst:.2e}, {seconds:.1f} s")


# --- 2 ------------------------------------------------------------------------


def test_criterion_2_gradient_suite(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    errors = {}
    x = rng.normal(size=(3, 4, 4, 2))
    bank = random_bank(rng, WindowSpec(2, 2), 2, 2)
    up = rng.normal(size=(2, 3, 3, 2))

    def loss():
        return float(np.sum(up * hoconv_oracle(x, bank)))

    grad_x, grads = hoconv3d_backward(x, bank, up)
    errors["op.input"] = relative_error(grad_x, finite_difference(loss, x))
    for name in ("bias", "w1", "w2"):
        errors[f"op.{name}"] = relative_error(getattr(grads, name), finite_difference(loss, getattr(bank, name)))

    layers = mcintosh_layers("hocnn", 3, (2, 2), ((2, 2), (2, 2)))
    state = init_network(layers, (4, 5, 5, 1), seed=3)
    xs = rng.random((3, 4, 5, 5, 1))
    y = rng.poisson(1.0, size=run_layers(state, xs, True)[0].shape).astype(float)
    for mode in (True, False):
        _, net_grads, _ = loss_and_grads(state, xs, y, train=mode)
        for key, value in state.params.items():
            value = value.copy()
            probe = lambda: poisson_nll(run_layers(replace(state, params={**state.params, key: value}), xs, mode)[0], y)
            errors[f"net.{'train' if mode else 'eval'}.{key}"] = relative_error(net_grads[key], finite_difference(probe, value))
    seconds = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and seconds < 120
    report(capsys, 2, ok, f"{len(errors)} gradient checks, worst {worst} at {errors[worst]:.2e}, {seconds:.1f} s")


# --- 3 ------------------------------------------------------------------------


def test_criterion_3_count_and_scale_laws(capsys):
    mismatches = []
    for n in range(1, 11):
        for p in range(0, 4):
            brute = sum(1 for d in range(p + 1) for _ in combinations_with_replacement(range(n), d))
            if count_monomials(n, p) != brute:
                mismatches.append((n, p))
    six = count_monomials(2, 2)
    scale_ok = all(scale_factor(n, 2) == 1.0 / math.sqrt(math.comb(n + 2, 2)) for n in range(1, 200))
    ok = not mismatches and six == 6 and scale_ok
    report(capsys, 3, ok, f"enumeration mismatches {mismatches}, count(2, 2) = {six}, scale exact: {scale_ok}")


# --- 4 ------------------------------------------------------------------------


def test_criterion_4_tied_weights_gap(capsys, benchmark):
    rng = np.random.default_rng(4)
    tied = [tied_weights_rank_check(rng.normal(size=int(rng.integers(1, 60))), float(rng.normal())) for _ in range(200)]
    ranks = [s.get("hocnn", "all", 0.9).w2_rank for s in benchmark.seeds]
    mean_rank = float(np.mean(ranks))
    ok = max(tied) <= 1 and mean_rank >= 3
    report(capsys, 4, ok, f"max tied rank {max(tied)}, trained first-layer w2 rank {mean_rank:.2f} (per seed {ranks})")


# --- 5 ------------------------------------------------------------------------


def test_criterion_5_frozen_w2_reduces_to_baseline(capsys):
    rng = np.random.default_rng(5)
    x = rng.random((12, 6, 7, 7, 1))
    y = rng.poisson(1.0, size=(12, 3, 3)).astype(float)
    windows = ((2, 3), (3, 2))
    gaps = []
    for seed in range(3):
        base = init_network(mcintosh_layers("baseline", 3, (2, 2), windows), x.shape[1:], seed=seed)
        ho = init_network(mcintosh_layers("hocnn", 3, (2, 2), windows), x.shape[1:], seed=seed)
        ho = replace(ho, params={**ho.params, "0.w2": np.zeros_like(ho.params["0.w2"])})
        cfg = TrainConfig(lr=1e-2, batch_size=3, max_epochs=5, seed=seed)
        _, log_b = train(base, TrainData(x, y), cfg)
        _, log_h = train(ho, TrainData(x, y), replace(cfg, freeze=("0.w2",)))
        for key in ("train_loss", "val_loss"):
            a, b = np.array(log_b.losses(key)), np.array(log_h.losses(key))
            gaps.append(np.abs(a - b).max() if a.shape == b.shape else np.inf)
    worst = max(gaps)
    report(capsys, 5, worst <= 1e-6, f"max per-epoch loss difference {worst:.2e} over 3 seeds")


# --- 6 ------------------------------------------------------------------------


def test_criterion_6_directional_benchmark(capsys, benchmark):
    b = benchmark
    corr_base, corr_ho = b.mean("corr", "baseline", "all", 0.9), b.mean("corr", "hocnn", "all", 0.9)
    corr_half = b.mean("corr", "hocnn", "all", 0.5)
    rho = {(m, s, k): b.mean(k, m, s, 0.9) for m in ("baseline", "hocnn") for s in ("all", "expansion", "control") for k in ("rho_h11", "rho_h22")}
    gap_h11 = rho["hocnn", "all", "rho_h11"] - rho["baseline", "all", "rho_h11"]
    gap_h22 = rho["hocnn", "all", "rho_h22"] - rho["baseline", "all", "rho_h22"]
    base_spread = max(rho["baseline", s, "rho_h11"] for s in ("all", "expansion", "control")) - min(
        rho["baseline", s, "rho_h11"] for s in ("all", "expansion", "control")
    )
    checks = {
        "a": corr_ho - corr_base >= 0.05,
        "b": corr_half >= corr_base,
        "c": gap_h11 >= 0.1 and gap_h22 >= 0.1,
        "d": rho["hocnn", "expansion", "rho_h11"] > rho["hocnn", "all", "rho_h11"] > rho["hocnn", "control", "rho_h11"] and base_spread < 0.05,
        "time": b.seconds <= 20 * 60,
    }
    with capsys.disabled():
        print("\nbenchmark means over seeds (model, subset, fraction, corr, rho H11, rho H22):")
        for row in b.table():
            print("  {:8s} {:9s} {:.2f} {:.3f} {:.3f} {:.3f}".format(*row))
    detail = (
        f"a: corr {corr_ho:.3f} vs {corr_base:.3f} ({'ok' if checks['a'] else 'no'}); "
        f"b: half {corr_half:.3f} vs {corr_base:.3f} ({'ok' if checks['b'] else 'no'}); "
        f"c: rho gaps {gap_h11:+.3f}/{gap_h22:+.3f} ({'ok' if checks['c'] else 'no'}); "
        f"d: hocnn H11 exp/all/ctl {rho['hocnn', 'expansion', 'rho_h11']:.3f}/{rho['hocnn', 'all', 'rho_h11']:.3f}/"
        f"{rho['hocnn', 'control', 'rho_h11']:.3f}, baseline spread {base_spread:.3f} ({'ok' if checks['d'] else 'no'}); "
        f"runtime {b.seconds / 60:.1f} min ({'ok' if checks['time'] else 'no'})"
    )
    report(capsys, 6, all(checks.values()), detail)


# --- 7 ------------------------------------------------------------------------


def test_criterion_7_reliability_estimator(capsys):
    pattern = np.random.default_rng(7).poisson(2.0, size=(3, 80))
    identical = bootstrap_reliability(ResponseSet(["a", "b", "c"], ["linear_LNP"] * 3, np.repeat(pattern[None], 8, axis=0)), 500, 0)
    noise = bootstrap_reliability(sample_spikes(np.full((10, 400), 2.0), 60, 8), 1000, 0)
    ds = generate_dataset(StimulusConfig(n_train=0, n_test=20), 0)
    resp = simulate_split(ds, make_cell_bank(CellBankConfig(), (50, 50), 0), "test", 60, 1)
    start = time.perf_counter()
    full = bootstrap_reliability(resp, 10_000, 0)
    seconds = time.perf_counter() - start
    exact = bool((identical.mean == 1.0).all())
    noise_mean = float(np.mean(noise.mean))
    ok = exact and abs(noise_mean) < 0.05 and seconds < 60 and full.mean.shape == (40,)
    report(capsys, 7, ok, f"identical trials exact 1.0: {exact}, noise mean {noise_mean:+.4f}, 10000 x 40 cells in {seconds:.1f} s")


# --- 8 ------------------------------------------------------------------------


def test_criterion_8_sta_recovery(capsys):
    cell = ModelCell("p", "linear_LNP", (10, 10), radius=4, gain=1.5, offset=-2.0, base_rate=4.0)
    noise = binary_noise(12_000, 21, 21, 7)
    spikes = np.random.default_rng(8).poisson(simulate_rates([cell], (noise + 1.0) / 2.0)[0])
    sta = compute_sta(noise, spikes)
    truth = cell.linear_filter((21, 21), N_LAGS)
    rho = float(np.corrcoef(svd_decompose(sta).reconstruction().ravel(), truth.ravel())[0, 1])
    rng = np.random.default_rng(9)
    u, v = rng.normal(size=N_LAGS), rng.normal(size=(8, 8))
    separable = u[:, None, None] * v[None] + 1e-4 * rng.normal(size=(N_LAGS, 8, 8))
    sep = svd_decompose(separable).separability
    ok = sta.n_spikes >= 1e4 and rho > 0.9 and sep > 0.999
    report(capsys, 8, ok, f"{sta.n_spikes:.0f} spikes, planted filter rho {rho:.3f}, separability {sep:.6f}")


# --- 9 ------------------------------------------------------------------------

SMALL = """
seed = 11
n_bootstrap = 40
[stimulus]
height = 24
width = 24
check_size = 4
n_frames = 10
n_train = 8
n_test = 2
n_repeats = 4
[cells]
n_linear = 2
n_multiplicative = 1
n_expansion = 2
n_distractor = 1
margin = 6
[model]
channels = [2, 2]
[train]
max_epochs = 2
[sta]
n_frames = 500
height = 16
width = 16
n_cells = 2
"""


def test_criterion_9_determinism_and_formats(capsys, tmp_path):
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = []
    for out in outs:
        for command in ("generate", "simulate", "train", "eval", "decode", "sta"):
            codes.append(main(["--config", str(cfg), "--out", str(out), command]))
    different = []
    for path in sorted(outs[0].iterdir()):
        other = outs[1] / path.name
        if path.name in ("train_log.csv", "manifest_train.json"):
            # wall-clock seconds in the training log are the one intended difference
            strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]
            if path.name == "train_log.csv" and strip(path) != strip(other):
                different.append(path.name)
        elif path.read_bytes() != other.read_bytes():
            different.append(path.name)

    a = outs[0]
    round_trips = []
    ds = read_dataset(a / "stimulus.hocv")
    write_dataset(ds, tmp_path / "d.hocv")
    round_trips.append((tmp_path / "d.hocv").read_bytes() == (a / "stimulus.hocv").read_bytes())
    resp = read_responses(a / "responses_test.horx")
    write_responses(resp, tmp_path / "r.horx")
    round_trips.append((tmp_path / "r.horx").read_bytes() == (a / "responses_test.horx").read_bytes())
    state = load_checkpoint(a / "model.hock")
    round_trips.append(checkpoint_bytes(state) == (a / "model.hock").read_bytes())

    sizes = []
    raw = (a / "stimulus.hocv").read_bytes()
    meta = int.from_bytes(raw[6:10], "little")
    sizes.append(len(raw) == dataset_file_size(ds) == 10 + meta + 4 * 10 * 10 * 24 * 24 + 8 * 10 * 10 * 8)
    raw = (a / "responses_test.horx").read_bytes()
    meta = int.from_bytes(raw[6:10], "little")
    sizes.append(len(raw) == 10 + meta + 2 * resp.counts.size)
    raw = (a / "model.hock").read_bytes()
    meta = int.from_bytes(raw[6:10], "little")
    n_floats = sum(v.size for v in state.params.values()) + sum(v.size for v in state.bn_stats.values())
    n_floats += 2 * sum(m.size for m, _ in state.moments.values())
    sizes.append(len(raw) == 10 + meta + 2 * 20 + 8 * n_floats)

    ok = not any(codes) and not different and all(round_trips) and all(sizes)
    detail = f"exit codes {set(codes)}, differing files {different or 'none'}, round trips {round_trips}, sizes {sizes}"
    report(capsys, 9, ok, detail)
