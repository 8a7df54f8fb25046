"""Deterministic EEG preprocessing chain.

Order is fixed: mastoid-style re-referencing, zero-phase Butterworth
bandpass (per trial, so filter transients never smear across trials),
polyphase resampling to the target rate, then per-trial normalization to
zero mean / unit variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .data import RawRecording, Trial, _round_half_up


@dataclass
class PreprocConfig:
    reference_channels: list[str]
    band: tuple[float, float] = (8.0, 13.0)
    target_rate: float = 70.0
    filter_order: int = 4

    def validate(self) -> "PreprocConfig":
        low, high = self.band
        if not (0 < low < high):
            raise ValueError(f"band edges must satisfy 0 < low < high, got {self.band}")
        if high >= self.target_rate / 2:
            raise ValueError(
                f"band high edge {high} Hz must stay below target Nyquist "
                f"{self.target_rate / 2} Hz"
            )
        if not self.reference_channels:
            raise ValueError("reference_channels must be non-empty")
        if self.filter_order < 2 or self.filter_order % 2 != 0:
            raise ValueError("filter_order must be an even integer >= 2")
        return self


def rereference(rec: RawRecording, reference_channels: list[str]) -> RawRecording:
    """Subtract the per-sample mean of the reference channels everywhere,
    then drop the reference channels."""
    if not reference_channels:
        raise ValueError("reference_channels must be non-empty")
    ref_idx = [rec.channel_index(n) for n in reference_channels]
    ref_mean = rec.data[ref_idx].mean(axis=0)
    keep = [i for i in range(rec.n_channels) if i not in set(ref_idx)]
    if not keep:
        raise ValueError("re-referencing would drop every channel")
    data = rec.data[keep] - ref_mean[None, :]
    return replace(
        rec,
        channels=[rec.channels[i] for i in keep],
        data=data,
        trials=[replace(t) for t in rec.trials],
    ).validate()


def _design_bandpass(band: tuple[float, float], order: int, fs: float) -> np.ndarray:
    low, high = band
    if high >= fs / 2:
        raise ValueError(f"band edge {high} Hz is at or above Nyquist {fs / 2} Hz")
    return sps.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")


def _impulse_settle_len(sos: np.ndarray, fs: float, tol: float = 1e-9) -> int:
    """Samples until the impulse response decays below tol of its peak;
    used as the reflect-pad length for zero-phase filtering."""
    n = max(64, int(fs))
    for _ in range(16):
        imp = np.zeros(n)
        imp[0] = 1.0
        h = sps.sosfilt(sos, imp)
        peak = np.max(np.abs(h))
        idx = np.flatnonzero(np.abs(h) > tol * peak)
        if idx.size and idx[-1] < n - 1:
            return int(idx[-1]) + 1
        n *= 2
    return n


def _zero_phase(sos: np.ndarray, x: np.ndarray, pad: int) -> np.ndarray:
    """Forward pass, time-reverse, second pass, reverse; reflect-padded."""
    n = x.shape[-1]
    pad = min(pad, n - 1)
    if pad > 0:
        left = x[..., 1 : pad + 1][..., ::-1]
        right = x[..., -pad - 1 : -1][..., ::-1]
        ext = np.concatenate([left, x, right], axis=-1)
    else:
        ext = x
    y = sps.sosfilt(sos, ext, axis=-1)
    y = sps.sosfilt(sos, y[..., ::-1], axis=-1)[..., ::-1]
    if pad > 0:
        y = y[..., pad : pad + n]
    return np.ascontiguousarray(y)


def bandpass(
    rec: RawRecording, band: tuple[float, float] = (8.0, 13.0), order: int = 4
) -> RawRecording:
    """Zero-phase Butterworth bandpass applied independently per trial."""
    sos = _design_bandpass(band, order, rec.sample_rate)
    pad = _impulse_settle_len(sos, rec.sample_rate)
    data = rec.data.astype(float).copy()
    for tr in rec.trials:
        seg = data[:, tr.start : tr.end]
        data[:, tr.start : tr.end] = _zero_phase(sos, seg, pad)
    return replace(rec, data=data, trials=[replace(t) for t in rec.trials]).validate()


def resample_series(x: np.ndarray, fs: float, target_rate: float) -> np.ndarray:
    """Kaiser-windowed-sinc polyphase resampling along the last axis.

    The input is reflect-extended by whole down-factor multiples so the
    output is transient-free at the edges, then cut to exactly
    round(n * target_rate / fs) samples.
    """
    n = x.shape[-1]
    ratio = Fraction(target_rate) / Fraction(fs)
    ratio = ratio.limit_denominator(1_000_000)
    up, down = ratio.numerator, ratio.denominator
    n_out = _round_half_up(n * target_rate / fs)
    if up == down:
        return x.astype(float, copy=True)
    # reflect-pad by k*down input samples so the pad maps to exactly k*up
    # output samples on each side
    half_len_in = 10 * max(up, down) / up  # scipy's default filter half-length
    k = int(math.ceil((half_len_in + 1) / down)) + 1
    pad = min(k * down, (n - 1) // down * down)
    if pad > 0:
        left = x[..., 1 : pad + 1][..., ::-1]
        right = x[..., -pad - 1 : -1][..., ::-1]
        ext = np.concatenate([left, x, right], axis=-1)
    else:
        ext = x
    y = sps.resample_poly(ext, up, down, axis=-1, window=("kaiser", 8.6))
    off = pad * up // down
    return np.ascontiguousarray(y[..., off : off + n_out])


def resample(rec: RawRecording, target_rate: float) -> RawRecording:
    """Resample the whole recording; trial boundaries rescale by the same
    ratio and are re-validated."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == rec.sample_rate:
        return replace(
            rec, data=rec.data.astype(float).copy(), trials=[replace(t) for t in rec.trials]
        ).validate()
    ratio = target_rate / rec.sample_rate
    data = resample_series(rec.data.astype(float), rec.sample_rate, target_rate)
    trials = [
        Trial(_round_half_up(t.start * ratio), _round_half_up(t.end * ratio), t.label)
        for t in rec.trials
    ]
    return replace(rec, sample_rate=target_rate, data=data, trials=trials).validate()


def normalize_trial(rec: RawRecording) -> RawRecording:
    """Shift/scale each (channel, trial) segment to mean 0, variance 1
    (population variance). Samples outside any trial are left untouched."""
    data = rec.data.astype(float).copy()
    for ti, tr in enumerate(rec.trials):
        seg = data[:, tr.start : tr.end]
        if seg.shape[1] < 2:
            raise ValueError(f"trial {ti} has fewer than 2 samples")
        mean = seg.mean(axis=1, keepdims=True)
        var = seg.var(axis=1, keepdims=True)
        dead = np.flatnonzero(var[:, 0] <= 0.0)
        if dead.size:
            raise ValueError(
                f"zero-variance segment: channel {rec.channels[dead[0]]!r} in trial {ti}"
            )
        data[:, tr.start : tr.end] = (seg - mean) / np.sqrt(var)
    return replace(rec, data=data, trials=[replace(t) for t in rec.trials]).validate()


def preprocess_recording(rec: RawRecording, cfg: PreprocConfig) -> RawRecording:
    """Full chain: re-reference, bandpass, resample, normalize."""
    cfg.validate()
    if cfg.band[1] * 2 >= cfg.target_rate:
        raise ValueError("target_rate must exceed twice the band high edge")
    out = rereference(rec, cfg.reference_channels)
    out = bandpass(out, cfg.band, cfg.filter_order)
    out = resample(out, cfg.target_rate)
    out = normalize_trial(out)
    return out
