import numpy as np
import pytest

from asad.data import Montage, RawRecording, Trial


def make_random_montage(n: int, seed: int) -> Montage:
    """Unit-sphere electrodes on the upper cap (z >= 0.1)."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[:, 2] = np.abs(v[:, 2]) * 0.9 + 0.1
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return Montage(names=[f"E{i:02d}" for i in range(n)], positions=v).validate()


def make_recording(
    n_channels=3, n_samples=400, sample_rate=100.0, n_trials=2, seed=0, subject="t0"
) -> RawRecording:
    rng = np.random.default_rng(seed)
    per = n_samples // n_trials
    trials = [
        Trial(i * per, (i + 1) * per, "Left" if i % 2 == 0 else "Right")
        for i in range(n_trials)
    ]
    return RawRecording(
        subject_id=subject,
        sample_rate=sample_rate,
        channels=[f"c{i}" for i in range(n_channels)],
        data=rng.normal(size=(n_channels, n_samples)),
        trials=trials,
    ).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
