import numpy as np
import pytest

from asad.baseline import (
    Envelope,
    LinearDecoder,
    decide_attention,
    fit_decoder,
    fit_decoder_segments,
    load_decoder,
    load_envelope,
    pearson,
    reconstruct,
    save_decoder,
    save_envelope,
    synth_envelope,
)
from asad.data import LEFT, RIGHT


def test_exact_regression_single_lag(rng):
    eeg = rng.normal(size=(4, 2000))
    dec = fit_decoder(eeg, eeg[0].copy(), lags=0, ridge_lambda=0.0)
    assert abs(dec.weights[0, 0] - 1.0) < 1e-8
    assert np.max(np.abs(dec.weights[1:, 0])) < 1e-8


def test_shift_oracle_unit_weight_at_lag_three(rng):
    env = np.abs(rng.normal(size=3000))
    eeg = rng.normal(size=(3, 3000)) * 1e-6
    eeg[0] = np.concatenate([np.zeros(3), env[:-3]])  # channel follows envelope by 3
    dec = fit_decoder(eeg, env, lags=5, ridge_lambda=0.0)
    assert abs(dec.weights[0, 3] - 1.0) < 1e-6
    others = dec.weights.copy()
    others[0, 3] = 0.0
    assert np.max(np.abs(others)) < 1e-6
    s_hat = reconstruct(dec, eeg)
    assert pearson(s_hat, env[: len(s_hat)]) > 0.999


def test_ridge_shrinkage_monotone(rng):
    eeg = rng.normal(size=(3, 1500))
    env = np.abs(rng.normal(size=1500))
    norms = [
        np.linalg.norm(fit_decoder(eeg, env, lags=4, ridge_lambda=lam).weights)
        for lam in (0.0, 0.1, 1.0, 10.0, 100.0, 1e4)
    ]
    assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-2 * norms[0]


def test_lambda_zero_is_least_squares_optimal(rng):
    eeg = rng.normal(size=(4, 1200))
    env = np.abs(rng.normal(size=1200))
    r0 = None
    for lam in (0.0, 0.5, 5.0, 50.0):
        dec = fit_decoder(eeg, env, lags=3, ridge_lambda=lam)
        r = pearson(reconstruct(dec, eeg), env[: 1200 - 3])
        if lam == 0.0:
            r0 = r
        else:
            assert r0 >= r - 1e-12


def test_singular_system_reported():
    rng = np.random.default_rng(0)
    row = rng.normal(size=2000)
    eeg = np.vstack([row, row])  # duplicated channel: singular at lambda 0
    with pytest.raises(ValueError, match="singular"):
        fit_decoder(eeg, np.abs(row), lags=2, ridge_lambda=0.0)


def test_reconstruct_zero_weights_and_linearity(rng):
    dec = LinearDecoder(weights=np.zeros((2, 4)), lags=np.arange(4), ridge_lambda=0.0)
    eeg = rng.normal(size=(2, 300))
    assert np.all(reconstruct(dec, eeg) == 0.0)

    dec = LinearDecoder(weights=rng.normal(size=(2, 4)), lags=np.arange(4), ridge_lambda=0.0)
    a, b = rng.normal(size=(2, 300)), rng.normal(size=(2, 300))
    lhs = reconstruct(dec, a + b)
    rhs = reconstruct(dec, a) + reconstruct(dec, b)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_reconstruct_too_short(rng):
    dec = LinearDecoder(weights=np.zeros((1, 10)), lags=np.arange(10), ridge_lambda=0.0)
    with pytest.raises(ValueError, match="shorter than max lag"):
        reconstruct(dec, rng.normal(size=(1, 5)))


def test_decide_exact_match_and_swap(rng):
    env_a = np.abs(rng.normal(size=200))
    env_b = np.abs(rng.normal(size=200))
    d = decide_attention(env_a, env_a, env_b)
    assert d.label == LEFT and abs(d.r_left - 1.0) < 1e-12 and not d.tie
    swapped = decide_attention(env_a, env_b, env_a)
    assert swapped.label == RIGHT
    assert abs(swapped.r_right - d.r_left) < 1e-12


def test_decide_tie_flag(rng):
    s = rng.normal(size=100)
    env = np.abs(rng.normal(size=100))
    d = decide_attention(s, env, env.copy())
    assert d.tie and d.label == LEFT


def test_decide_null_distribution(rng):
    # uncorrelated reconstruction: |r| stays small, a decision is still emitted
    for _ in range(20):
        s = rng.normal(size=3000)
        d = decide_attention(s, np.abs(rng.normal(size=3000)), np.abs(rng.normal(size=3000)))
        assert d.label in (LEFT, RIGHT)
        assert abs(d.r_left) < 0.1 and abs(d.r_right) < 0.1


def test_decide_zero_variance_error(rng):
    with pytest.raises(ValueError, match="zero-variance"):
        decide_attention(np.ones(50), np.abs(rng.normal(size=50)), np.abs(rng.normal(size=50)))


def test_pearson_shift_scale_invariance(rng):
    a, b = rng.normal(size=500), rng.normal(size=500)
    r = pearson(a, b)
    assert abs(pearson(a, 3.7 * b + 11.0) - r) < 1e-12


def test_envelope_roundtrip(tmp_path, rng):
    env = synth_envelope(500, 70.0, "spk", rng)
    save_envelope(env, tmp_path / "e")
    back = load_envelope(tmp_path / "e")
    assert back.speaker_id == "spk"
    assert back.sample_rate == 70.0
    assert np.allclose(back.samples, env.samples.astype(np.float32))
    assert np.all(back.samples >= 0)


def test_envelope_negative_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        Envelope(samples=np.array([0.5, -0.1]), speaker_id="x", sample_rate=70.0).validate()


def test_decoder_roundtrip(tmp_path, rng):
    dec = LinearDecoder(weights=rng.normal(size=(5, 7)), lags=np.arange(7), ridge_lambda=2.5)
    save_decoder(dec, tmp_path / "d")
    back = load_decoder(tmp_path / "d")
    assert back.ridge_lambda == 2.5
    assert np.allclose(back.weights, dec.weights.astype(np.float32))


def test_fit_decoder_segments_matches_single_fit(rng):
    eeg = rng.normal(size=(3, 2000))
    env = np.abs(rng.normal(size=2000))
    whole = fit_decoder(eeg, env, lags=4, ridge_lambda=1.0)
    # one segment equals the plain fit
    seg = fit_decoder_segments([(eeg, env)], n_lags=5, ridge_lambda=1.0)
    assert np.allclose(whole.weights, seg.weights)


def test_accuracy_grows_with_window_length():
    # closed loop at moderate SNR: longer decision windows decode better
    from asad.data import RawRecording, Trial, segment_windows, stratified_split
    from asad.baseline import add_envelope_mixture

    fs, n_trials, trial_s = 70.0, 12, 60.0
    n = int(fs * n_trials * trial_s)
    env_l = synth_envelope(n, fs, "left", np.random.default_rng(1))
    env_r = synth_envelope(n, fs, "right", np.random.default_rng(2))
    labels = [LEFT, RIGHT] * 6
    trials = [
        Trial(int(i * trial_s * fs), int((i + 1) * trial_s * fs), labels[i])
        for i in range(n_trials)
    ]
    base = RawRecording(
        "s0", fs, [f"ch{c:02d}" for c in range(8)],
        np.random.default_rng(7).normal(0, 2.0, (8, n)), trials,
    )
    rec = add_envelope_mixture(base, env_l, env_r, max_lag=18, mix_gain=0.4, seed=9)

    def seg(w, env):
        return env.samples[w.origin[1] : w.origin[1] + w.length]

    accs = []
    for ws in (2.0, 5.0, 10.0):
        wins = segment_windows(rec, ws, 0.5)
        split = stratified_split(wins, (0.7, 0.1, 0.2), seed=9, block_s=30.0, sample_rate=fs)
        pairs = [(w.samples, seg(w, env_l if w.label == LEFT else env_r)) for w in split.train]
        dec = fit_decoder_segments(pairs, n_lags=19, ridge_lambda=1.0)
        held = split.validation + split.test
        hits = sum(
            decide_attention(
                reconstruct(dec, w.samples),
                seg(w, env_l)[: w.length - 18],
                seg(w, env_r)[: w.length - 18],
            ).label
            == w.label
            for w in held
        )
        accs.append(hits / len(held))
    assert accs[0] < accs[1] < accs[2], accs
