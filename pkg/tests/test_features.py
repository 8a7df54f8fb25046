import numpy as np
import pytest

from asad.data import DecisionWindow, LEFT, RIGHT
from asad.features import (
    SsfMap,
    SsfTensor,
    band_power,
    extract_ssf,
    fft_length,
    load_tensor_cache,
    save_tensor_cache,
    write_map_csv,
    write_map_pgm,
)
from asad.geometry import project_electrodes

from conftest import make_random_montage


def naive_band_power(segment, fs, band):
    """O(N^2) DFT-definition oracle on the padded bin grid."""
    seg = np.asarray(segment, dtype=float)
    w = seg.shape[1]
    nfft = fft_length(w)
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    keep = (freqs >= band[0]) & (freqs <= band[1])
    out = np.zeros(seg.shape[0])
    n_idx = np.arange(w)
    for ci in range(seg.shape[0]):
        acc = []
        for k in np.flatnonzero(keep):
            xk = np.sum(seg[ci] * np.exp(-2j * np.pi * k * n_idx / nfft))
            acc.append(abs(xk) ** 2 / (w * w))
        out[ci] = np.mean(acc)
    return out


def test_zero_signal_zero_power():
    assert np.all(band_power(np.zeros((3, 70)), 70.0, (8, 13)) == 0.0)


def test_amplitude_scaling_quadruples_power(rng):
    seg = rng.normal(size=(4, 70))
    p1 = band_power(seg, 70.0, (8, 13))
    p2 = band_power(2.0 * seg, 70.0, (8, 13))
    assert np.allclose(p2, 4.0 * p1, rtol=1e-12)


def test_band_power_matches_naive_dft_sinusoid():
    t = np.arange(70) / 70.0
    seg = np.sin(2 * np.pi * 10 * t)[None, :]
    mine = band_power(seg, 70.0, (8, 13))
    oracle = naive_band_power(seg, 70.0, (8, 13))
    assert abs(mine[0] - oracle[0]) < 1e-10 * max(1.0, abs(oracle[0]))


def test_band_power_exhaustive_small_windows(rng):
    # covered again (with timing) by the acceptance suite
    for w in range(2, 129, 7):
        seg = rng.normal(size=(2, w))
        mine = band_power(seg, 70.0, (8, 13))
        oracle = naive_band_power(seg, 70.0, (8, 13))
        rel = np.abs(mine - oracle) / np.maximum(np.abs(oracle), 1e-300)
        assert np.max(rel) < 1e-10


def test_band_without_bins_rejected(rng):
    seg = rng.normal(size=(1, 16))
    with pytest.raises(ValueError, match="no FFT bin"):
        band_power(seg, 70.0, (0.01, 0.2))


def test_extract_single_map(rng):
    mont = make_random_montage(16, 0)
    layout = project_electrodes(mont)
    win = DecisionWindow("s", rng.normal(size=(16, 70)), LEFT, (0, 0))
    t = extract_ssf(win, layout, fs=70.0)
    assert t.maps.shape == (1, 32, 32)
    assert t.label == LEFT


def test_extract_identical_halves(rng):
    mont = make_random_montage(16, 1)
    layout = project_electrodes(mont)
    half = rng.normal(size=(16, 64))
    win = DecisionWindow("s", np.concatenate([half, half], axis=1), RIGHT, (0, 0))
    t = extract_ssf(win, layout, fs=70.0, sub_windows=2)
    assert t.maps.shape == (2, 32, 32)
    assert np.max(np.abs(t.maps[0] - t.maps[1])) < 1e-9


def test_extract_bad_subdivision(rng):
    mont = make_random_montage(16, 2)
    layout = project_electrodes(mont)
    win = DecisionWindow("s", rng.normal(size=(16, 70)), LEFT, (0, 0))
    with pytest.raises(ValueError, match="sub-windows"):
        extract_ssf(win, layout, fs=70.0, sub_windows=3)  # 70 % 3 != 0


def test_log_power_option(rng):
    mont = make_random_montage(16, 3)
    layout = project_electrodes(mont)
    win = DecisionWindow("s", rng.normal(size=(16, 70)), LEFT, (0, 0))
    plain = extract_ssf(win, layout, fs=70.0)
    logged = extract_ssf(win, layout, fs=70.0, log_power=True)
    assert not np.allclose(plain.maps, logged.maps)


def test_subwindow_maps_track_full_window():
    # stationary alpha: each of the S=10 sub-window maps stays within the
    # sampling-variability band around the full-window map, with the band
    # measured by a Monte-Carlo oracle over fresh draws of the same process
    mont = make_random_montage(16, 5)
    layout = project_electrodes(mont)

    def draw(seed):
        r = np.random.default_rng(seed)
        t = np.arange(70) / 70.0
        phase = r.uniform(0, 2 * np.pi)
        sig = np.sin(2 * np.pi * 10 * t + phase)[None, :] + r.normal(0, 0.5, (16, 70))
        return DecisionWindow("s", sig, LEFT, (0, 0))

    def deviation(win):
        subs = extract_ssf(win, layout, fs=70.0, sub_windows=10).maps
        full = extract_ssf(win, layout, fs=70.0, sub_windows=1).maps[0]
        return float(np.max(np.abs(subs.mean(axis=0) - full)))

    bound = 1.2 * max(deviation(draw(1000 + i)) for i in range(200))
    assert deviation(draw(7)) <= bound


def test_tensor_cache_roundtrip(tmp_path, rng):
    tensors = [
        SsfTensor(maps=rng.normal(size=(2, 32, 32)).astype(np.float32), label=LEFT),
        SsfTensor(maps=rng.normal(size=(2, 32, 32)).astype(np.float32), label=RIGHT),
    ]
    save_tensor_cache(tensors, ["s0", "s1"], (0.0, 1.0, 0.0, 1.0), tmp_path / "cache")
    maps, labels, subjects, header = load_tensor_cache(tmp_path / "cache")
    assert maps.shape == (2, 2, 32, 32)
    assert labels == [LEFT, RIGHT]
    assert subjects == ["s0", "s1"]
    assert header["S"] == 2 and header["grid_n"] == 32
    assert np.array_equal(maps[0], tensors[0].maps.astype(np.float32))


def test_pgm_uniform_for_constant_map(tmp_path):
    m = SsfMap(grid=np.full((32, 32), 5.0), extent=(0, 1, 0, 1))
    write_map_pgm(m, tmp_path / "m.pgm")
    lines = (tmp_path / "m.pgm").read_text().strip().splitlines()
    assert lines[0] == "P2"
    assert lines[1] == "32 32"
    assert lines[2] == "255"
    body = " ".join(lines[3:]).split()
    assert set(body) == {"0"}


def test_map_csv_roundtrip(tmp_path, rng):
    grid = rng.normal(size=(32, 32))
    write_map_csv(SsfMap(grid=grid, extent=(0, 1, 0, 1)), tmp_path / "m.csv")
    back = np.array(
        [[float(x) for x in line.split(",")] for line in (tmp_path / "m.csv").read_text().splitlines()]
    )
    assert np.array_equal(back, grid)
