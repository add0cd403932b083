import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hocnn.errors import ConfigurationError, DataError, FormatError, TruncatedFileError
from hocnn.retina import (
    CellBankConfig,
    ModelCell,
    ResponseSet,
    biphasic_kernel,
    bootstrap_reliability,
    make_cell_bank,
    read_responses,
    sample_spikes,
    select_reliable_cells,
    simulate_rates,
    softplus,
    split_half_correlation,
    write_reliability_csv,
    write_responses,
)
from hocnn.stimulus import StimulusConfig, generate_dataset, generate_sequence, make_checkerboard


def ranks(a):
    return np.argsort(np.argsort(a))


@pytest.fixture(scope="module")
def bank():
    return make_cell_bank(CellBankConfig(), (50, 50), 0)


def test_bank_composition(bank):
    groups = [c.group for c in bank]
    assert len(bank) == 40
    assert [groups.count(g) for g in ("linear", "multiplicative", "expansion", "distractor")] == [12, 10, 11, 7]
    assert len({c.cell_id for c in bank}) == 40
    for c in bank:
        c.validate((50, 50))
    assert make_cell_bank(CellBankConfig(), (50, 50), 0) == bank


def test_gray_stimulus_gives_rest_rate(bank):
    rates = simulate_rates(bank, np.full((12, 50, 50), 0.5))
    for cell, r in zip(bank, rates):
        assert_array_equal(r, cell.base_rate * softplus(cell.offset))


def test_linear_cell_peaks_at_kernel_alignment():
    cell = ModelCell("a", "linear_LNP", (10, 10), radius=0, gain=1.0, offset=0.0)
    k = biphasic_kernel()
    t = 30
    stim = np.full((t, 21, 21), 0.5)
    # play the time-reversed kernel so the drive is k @ k at the end of the burst
    burst = k[::-1]
    stim[10 : 10 + len(k), 10, 10] = 0.5 + 0.5 * burst / np.abs(burst).max()
    rates = simulate_rates([cell], stim)[0]
    contrast = 2 * stim[:, 10, 10] - 1
    drive = np.array([sum(k[lag] * contrast[i - lag] for lag in range(len(k)) if i - lag >= 0) for i in range(t)])
    assert_allclose(rates, softplus(drive), rtol=1e-12)
    assert np.argmax(rates) == 10 + len(k) - 1


def test_expansion_cells_prefer_expansion(bank):
    exp = [c for c in bank if c.group == "expansion"]
    base = make_checkerboard(50, 50, 5, (2, 3))
    means = {}
    for s in (1.3, 0.8):
        v, _ = generate_sequence(None, base, 20, None, target=np.diag([s, s, 1.0]))
        means[s] = simulate_rates(exp, v).mean()
    assert means[1.3] > means[0.8]


def test_expansion_selectivity_is_ordered(bank):
    exp = [c for c in bank if c.group == "expansion"]
    scales = np.random.default_rng(0).uniform(0.7, 1.4, 24)
    base = make_checkerboard(50, 50, 5, (2, 3))
    mean_rate = []
    for s in scales:
        v, _ = generate_sequence(None, base, 20, None, target=np.diag([s, s, 1.0]))
        mean_rate.append(simulate_rates(exp, v).mean())
    spearman = np.corrcoef(ranks(scales**2), ranks(mean_rate))[0, 1]
    assert spearman > 0.8


def ln_fit_r2(cell, videos):
    """Variance of the rate explained by linear regression in drive space, then softplus."""
    r = cell.radius + 2
    r0, c0 = cell._pixel_center()
    lags = cell.filter_length
    xs, ys, rates = [], [], []
    for v in videos:
        contrast = 2.0 * v.astype(np.float64) - 1.0
        rate = simulate_rates([cell], v)[0] / cell.base_rate
        y = np.log(np.expm1(np.maximum(rate, 1e-12)))
        patch = contrast[:, r0 - r : r0 + r + 1, c0 - r : c0 + r + 1].reshape(len(v), -1)
        for t in range(lags, len(v)):
            xs.append(np.append(patch[t - lags + 1 : t + 1].ravel(), 1.0))
            ys.append(y[t])
            rates.append(rate[t])
    x, y, rates = np.array(xs), np.array(ys), np.array(rates)
    w = np.linalg.lstsq(x, y, rcond=None)[0]
    pred = softplus(x @ w)
    return 1.0 - np.var(rates - pred) / np.var(rates)


def test_multiplicative_cells_are_not_linear_nonlinear(bank):
    videos = generate_dataset(StimulusConfig(n_train=40, n_test=0), 1).train_videos
    for cell in [c for c in bank if c.group == "linear"][:3]:
        assert ln_fit_r2(cell, videos) > 0.95
    for cell in [c for c in bank if c.group == "multiplicative"][:3]:
        assert ln_fit_r2(cell, videos) < 0.5


# --- spikes -----------------------------------------------------------------


def test_sample_spikes_examples():
    zero = sample_spikes(np.zeros((2, 5)), 3, 0)
    assert not zero.counts.any()
    big = sample_spikes(np.array([[5.0]]), 10_000, 1).counts[:, 0, 0]
    assert 4.9 <= big.mean() <= 5.1
    assert 0.95 <= big.var() / big.mean() <= 1.05
    a = sample_spikes(np.full((2, 8), 2.0), 4, 9)
    b = sample_spikes(np.full((2, 8), 2.0), 4, 9)
    assert_array_equal(a.counts, b.counts)
    with pytest.raises(DataError):
        sample_spikes(np.array([[-1.0]]), 1, 0)


def test_trial_mean_converges_to_rate():
    rates = np.array([[0.2, 1.0, 3.0]])
    resp = sample_spikes(rates, 20_000, 2)
    assert_allclose(resp.trial_mean(), rates, atol=0.05)


def test_responses_round_trip(tmp_path):
    resp = sample_spikes(np.full((3, 10), 1.5), 4, 3, cell_ids=["x", "y", "z"], kinds=["linear_LNP"] * 3, bins_per_sequence=5)
    path = tmp_path / "r.horx"
    write_responses(resp, path)
    raw = path.read_bytes()
    meta_len = int.from_bytes(raw[6:10], "little")
    assert len(raw) == 10 + meta_len + 2 * 4 * 3 * 10
    back = read_responses(path)
    assert_array_equal(back.counts, resp.counts)
    assert back.cell_ids == ["x", "y", "z"] and back.n_sequences == 2
    write_responses(back, tmp_path / "s.horx")
    assert (tmp_path / "s.horx").read_bytes() == raw
    path.write_bytes(raw[:-1])
    with pytest.raises(TruncatedFileError):
        read_responses(path)
    path.write_bytes(raw + b"\0\0")
    with pytest.raises(FormatError):
        read_responses(path)


# --- reliability ------------------------------------------------------------


def test_identical_trials_are_perfectly_reliable():
    pattern = np.random.default_rng(0).poisson(2.0, size=(2, 50))
    resp = ResponseSet(["a", "b"], ["linear_LNP"] * 2, np.repeat(pattern[None], 6, axis=0))
    rel = bootstrap_reliability(resp, 200, 0)
    assert_array_equal(rel.mean, 1.0)
    assert_array_equal(rel.ci_low, 1.0)
    assert_array_equal(rel.ci_high, 1.0)


def test_unlocked_noise_is_unreliable():
    resp = sample_spikes(np.full((5, 200), 2.0), 60, 4)
    rel = bootstrap_reliability(resp, 500, 0)
    assert abs(np.mean(rel.mean)) < 0.05


def test_two_trials_equal_split_half():
    rng = np.random.default_rng(5)
    counts = rng.poisson(2.0, (2, 1, 40))
    rel = bootstrap_reliability(ResponseSet(["c"], ["linear_LNP"], counts), 50, 0)
    assert_allclose(rel.mean[0], split_half_correlation(counts[0, 0], counts[1, 0]), rtol=1e-12)
    assert_allclose(rel.mean[0], np.corrcoef(counts[0, 0], counts[1, 0])[0, 1], rtol=1e-12)


def test_reliability_permutation_invariance():
    resp = sample_spikes(np.abs(np.random.default_rng(6).normal(1.0, 1.0, (3, 60))), 10, 7)
    shuffled = ResponseSet(resp.cell_ids, resp.kinds, resp.counts[np.random.default_rng(8).permutation(10)])
    a = bootstrap_reliability(resp, 4000, 1).mean
    b = bootstrap_reliability(shuffled, 4000, 1).mean
    assert_allclose(a, b, atol=0.01)


def test_reliability_undefined_for_silent_cell(tmp_path):
    counts = np.zeros((6, 2, 30), dtype=np.int64)
    counts[:, 1] = np.random.default_rng(0).poisson(1.0, (6, 30))
    resp = ResponseSet(["silent", "busy"], ["linear_LNP"] * 2, counts)
    rel = bootstrap_reliability(resp, 100, 0)
    assert np.isnan(rel.mean[0]) and not rel.defined[0]
    write_reliability_csv(resp, rel, tmp_path / "rel.csv")
    rows = (tmp_path / "rel.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("silent,nan")
    with pytest.raises(DataError):
        bootstrap_reliability(ResponseSet(["a"], ["linear_LNP"], counts[:1, 1:]), 10, 0)


def test_default_bank_reliability_near_reference(bank):
    from hocnn.pipeline import simulate_split

    ds = generate_dataset(StimulusConfig(n_train=0, n_test=20), 0)
    resp = simulate_split(ds, bank, "test", 60, 1)
    rel = bootstrap_reliability(resp, 300, 0).mean
    groups = np.array([c.group for c in bank])
    assert 0.75 <= np.nanmean(rel) <= 0.85
    assert np.nanmean(rel[groups == "expansion"]) > np.nanmean(rel[groups == "distractor"])


def test_select_reliable_cells():
    assert select_reliable_cells([0.9, 0.2, 0.9], ["a", "b", "c"], 2) == ["a", "c"]
    assert select_reliable_cells([0.9, 0.2, 0.9], ["a", "b", "c"], 0) == []
    assert select_reliable_cells([0.1, np.nan, 0.5], ["a", "b", "c"], 3) == ["c", "a", "b"]
    with pytest.raises(ConfigurationError):
        select_reliable_cells([0.1], ["a"], 2)
