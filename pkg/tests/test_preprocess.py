import numpy as np
import pytest

from asad.data import LEFT, RIGHT, RawRecording, Trial
from asad.preprocess import (
    PreprocConfig,
    bandpass,
    normalize_trial,
    preprocess_recording,
    rereference,
    resample,
    resample_series,
)


def _sine_recording(freqs, fs=128.0, seconds=30.0, ref_value=None):
    t = np.arange(int(fs * seconds)) / fs
    rows = [np.sin(2 * np.pi * f * t) for f in freqs]
    names = [f"c{i}" for i in range(len(rows))]
    if ref_value is not None:
        rows.append(np.full_like(t, ref_value))
        names.append("ref")
    return RawRecording(
        "s", fs, names, np.vstack(rows), [Trial(0, len(t), LEFT)]
    ).validate()


def test_rereference_identical_channel_zeroes():
    t = np.arange(100) / 10.0
    x = np.sin(t)
    rec = RawRecording("s", 10.0, ["a", "m"], np.vstack([x, x]), [Trial(0, 100, LEFT)])
    out = rereference(rec, ["m"])
    assert out.channels == ["a"]
    assert np.allclose(out.data[0], 0.0)


def test_rereference_constant_pair_shift():
    rec = RawRecording(
        "s", 10.0, ["a", "m1", "m2"],
        np.vstack([np.arange(50.0), np.full(50, 2.0), np.full(50, 4.0)]),
        [Trial(0, 50, RIGHT)],
    )
    out = rereference(rec, ["m1", "m2"])
    assert np.allclose(out.data[0], np.arange(50.0) - 3.0)


def test_rereference_missing_channel():
    rec = _sine_recording([10.0])
    with pytest.raises(ValueError, match="unknown channel"):
        rereference(rec, ["m9"])


def test_bandpass_passband_and_stopband():
    rec = _sine_recording([10.5, 2.0])
    out = bandpass(rec, (8.0, 13.0), 4)
    edge = int(2 * rec.sample_rate)
    inband = out.data[0, edge:-edge]
    assert abs(np.abs(inband).max() - 1.0) < 0.01
    stop = out.data[1, edge:-edge]
    rms_in = np.sqrt(np.mean(rec.data[1] ** 2))
    assert np.sqrt(np.mean(stop**2)) < 0.05 * rms_in


def test_bandpass_zero_in_zero_out():
    rec = _sine_recording([10.0])
    rec.data[:] = 0.0
    out = bandpass(rec, (8.0, 13.0), 4)
    assert np.all(out.data == 0.0)


def test_bandpass_zero_phase_no_lag():
    # alpha burst: cross-correlation of input and output peaks at lag 0
    fs = 128.0
    t = np.arange(int(fs * 20)) / fs
    burst = np.sin(2 * np.pi * 10 * t) * np.exp(-((t - 10) ** 2) / 2.0)
    rec = RawRecording("s", fs, ["a"], burst[None, :], [Trial(0, len(t), LEFT)])
    out = bandpass(rec, (8.0, 13.0), 4)
    xc = np.correlate(out.data[0], rec.data[0], mode="full")
    assert np.argmax(xc) == len(t) - 1


def test_bandpass_edge_above_nyquist():
    rec = _sine_recording([10.0], fs=20.0)
    with pytest.raises(ValueError, match="Nyquist"):
        bandpass(rec, (8.0, 13.0), 4)


def test_resample_identity():
    rec = _sine_recording([10.0], seconds=5.0)
    out = resample(rec, rec.sample_rate)
    assert np.sqrt(np.mean((out.data - rec.data) ** 2)) < 1e-9


def test_resample_analytic_sinusoid():
    fs = 8192.0
    n = int(fs * 60)
    x = np.sin(2 * np.pi * 10 * np.arange(n) / fs)[None, :]
    y = resample_series(x, fs, 70.0)
    assert y.shape[1] == round(n * 70 / 8192)
    expected = np.sin(2 * np.pi * 10 * np.arange(y.shape[1]) / 70.0)
    rel = np.sqrt(np.mean((y[0] - expected) ** 2)) / np.sqrt(np.mean(expected**2))
    assert rel < 0.01


def test_resample_six_minute_trial_count():
    fs = 8192.0
    n = int(fs * 360)
    rec = RawRecording(
        "s", fs, ["a"], np.zeros((1, n), dtype=np.float32), [Trial(0, n, LEFT)]
    )
    out = resample(rec, 70.0)
    assert out.trials[0].length == 25200  # 360 s * 70 Hz
    assert out.n_samples == 25200


def test_normalize_two_point_segment():
    rec = RawRecording("s", 2.0, ["a"], np.array([[1.0, 3.0]]), [Trial(0, 2, LEFT)])
    out = normalize_trial(rec)
    assert np.allclose(out.data, [[-1.0, 1.0]])


def test_normalize_idempotent():
    rec = _sine_recording([10.0], seconds=4.0)
    once = normalize_trial(rec)
    twice = normalize_trial(once)
    assert np.max(np.abs(once.data - twice.data)) < 1e-12


def test_normalize_constant_segment_error():
    rec = RawRecording(
        "s", 10.0, ["a", "b"],
        np.vstack([np.arange(40.0), np.full(40, 7.0)]),
        [Trial(0, 40, LEFT)],
    )
    with pytest.raises(ValueError, match="zero-variance segment.*'b'.*trial 0"):
        normalize_trial(rec)


def test_chain_invariants():
    fs = 128.0
    rng = np.random.default_rng(0)
    n = int(fs * 40)
    data = rng.normal(size=(5, n))
    trials = [Trial(0, n // 2, LEFT), Trial(n // 2, n, RIGHT)]
    rec = RawRecording("s", fs, ["a", "b", "c", "m1", "m2"], data, trials).validate()
    cfg = PreprocConfig(reference_channels=["m1", "m2"])
    out = preprocess_recording(rec, cfg)
    assert out.channels == ["a", "b", "c"]
    assert out.sample_rate == 70.0
    assert [t.label for t in out.trials] == [LEFT, RIGHT]
    for tr in out.trials:
        seg = out.data[:, tr.start : tr.end]
        assert np.all(np.abs(seg.mean(axis=1)) < 1e-9)
        assert np.all(np.abs(seg.var(axis=1) - 1.0) < 1e-6)


def test_chain_deterministic():
    rec = _sine_recording([10.0, 9.0], ref_value=0.5)
    rec.data += np.random.default_rng(4).normal(0, 0.1, rec.data.shape)
    cfg = PreprocConfig(reference_channels=["ref"])
    a = preprocess_recording(rec, cfg)
    b = preprocess_recording(rec, cfg)
    assert np.array_equal(a.data, b.data)


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocConfig(reference_channels=[]).validate()
    with pytest.raises(ValueError):
        PreprocConfig(reference_channels=["m"], band=(8.0, 40.0)).validate()
    with pytest.raises(ValueError):
        PreprocConfig(reference_channels=["m"], filter_order=3).validate()
