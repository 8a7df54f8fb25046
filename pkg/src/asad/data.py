"""Recording/montage containers, decision windows, splitting, synthesis.

On-disk recording container (format version 1):

  ``<name>.json``  header: {"format_version": 1, "subject_id": ...,
                   "sample_rate": ..., "channels": [...],
                   "trials": [{"start": ..., "end": ..., "label": ...}]}
  ``<name>.f32``   raw little-endian float32 samples, channel-major
                   (channel 0's full series first).

A montage file is a JSON list of {"name", "x", "y", "z"} entries with unit
head-centered positions (+x right ear, +y nasion, +z vertex). Canonical
64- and 32-electrode layouts ship under ``asad/assets``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import zlib
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

LEFT = "Left"
RIGHT = "Right"
LABELS = (LEFT, RIGHT)
LABEL_INDEX = {LEFT: 0, RIGHT: 1}

MIDLINE_TOL = 1e-9  # |x| below this counts as neither hemisphere


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temporary sibling file and rename, so readers never see
    a half-written file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_header(obj: dict) -> str:
    """Canonical JSON encoding used by every container in this package."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class Trial:
    start: int
    end: int  # exclusive
    label: str

    def validate(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"unknown trial label {self.label!r}, expected one of {LABELS}")
        if not (0 <= self.start < self.end):
            raise ValueError(f"bad trial range [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class RawRecording:
    subject_id: str
    sample_rate: float
    channels: list[str]
    data: np.ndarray  # (n_channels, n_samples)
    trials: list[Trial]

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def validate(self) -> "RawRecording":
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channels):
            raise ValueError(
                f"channel/data shape mismatch: {len(self.channels)} channel names, "
                f"data shape {self.data.shape}"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel names must be unique")
        if not self.trials:
            raise ValueError("recording has no trials")
        for tr in self.trials:
            tr.validate()
            if tr.end > self.n_samples:
                raise ValueError(
                    f"trial [{tr.start}, {tr.end}) exceeds {self.n_samples} samples"
                )
        spans = sorted((t.start, t.end) for t in self.trials)
        for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ValueError(f"overlapping trials: [{s0},{e0}) and [{s1},{e1})")
        return self

    def channel_index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise ValueError(f"unknown channel {name!r}") from None


@dataclass
class Montage:
    names: list[str]
    positions: np.ndarray  # (n, 3) unit vectors

    def __len__(self) -> int:
        return len(self.names)

    def validate(self) -> "Montage":
        if self.positions.ndim != 2 or self.positions.shape != (len(self.names), 3):
            raise ValueError("montage positions must be (n, 3) matching the name list")
        if len(set(self.names)) != len(self.names):
            raise ValueError("montage names must be unique")
        norms = np.linalg.norm(self.positions, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
        if bad.size:
            raise ValueError(f"montage positions not unit length at indices {bad.tolist()}")
        if len(self.names) < 3:
            raise ValueError("montage needs at least 3 electrodes")
        # At least 3 non-collinear points are needed to triangulate later on.
        p = self.positions
        collinear = True
        v0 = p[1] - p[0]
        for q in p[2:]:
            if np.linalg.norm(np.cross(v0, q - p[0])) > 1e-12:
                collinear = False
                break
        if collinear:
            raise ValueError("montage electrodes are collinear")
        return self

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown montage electrode {name!r}") from None


@dataclass
class DecisionWindow:
    subject_id: str
    samples: np.ndarray  # (n_channels, W)
    label: str
    origin: tuple[int, int]  # (trial index, start sample)

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class SplitSet:
    train: list[DecisionWindow]
    validation: list[DecisionWindow]
    test: list[DecisionWindow]
    seed: int

    def partitions(self) -> dict[str, list[DecisionWindow]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass
class SynthConfig:
    """Synthetic cocktail-party EEG: per-channel Gaussian noise plus an
    alpha-band sinusoid whose amplitude is boosted by (1 + gain) on the
    hemisphere matching the attended side."""

    n_channels: int = 64
    duration_s: float = 240.0
    sample_rate: float = 128.0
    alpha_center: float = 10.0
    lateralization_gain: float = 1.0
    noise_sigma: float = 1.0
    n_trials: int = 8
    seed: int = 0
    # Extra noise-only channels appended after the montage channels; they
    # stand in for mastoid references so the full preprocessing chain can
    # run on synthetic data and drop them at the re-reference step.
    reference_channels: tuple[str, ...] = ("M1", "M2")

    def validate(self) -> "SynthConfig":
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.sample_rate <= 0 or self.duration_s <= 0:
            raise ValueError("sample_rate and duration_s must be positive")
        if not (0 < self.alpha_center < self.sample_rate / 2):
            raise ValueError("alpha_center must lie inside (0, sample_rate/2)")
        if self.lateralization_gain < 0:
            raise ValueError("lateralization_gain must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        total = self.duration_s * self.sample_rate
        per_trial = total / self.n_trials
        if abs(total - round(total)) > 1e-9 or abs(per_trial - round(per_trial)) > 1e-9:
            raise ValueError("duration must divide into n_trials equal whole-sample trials")
        return self


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------

def container_paths(path: str | Path) -> tuple[Path, Path]:
    """Header/payload sibling paths; appends suffixes rather than replacing
    them so dotted base names survive."""
    p = Path(path)
    base = str(p)[: -len(".json")] if p.suffix == ".json" else str(p)
    return Path(base + ".json"), Path(base + ".f32")


def save_recording(rec: RawRecording, path: str | Path) -> Path:
    """Write the JSON header + float32 payload pair. Returns the header path."""
    rec.validate()
    header_path, data_path = container_paths(path)
    header = {
        "format_version": FORMAT_VERSION,
        "subject_id": rec.subject_id,
        "sample_rate": rec.sample_rate,
        "channels": list(rec.channels),
        "trials": [{"start": t.start, "end": t.end, "label": t.label} for t in rec.trials],
    }
    atomic_write_text(header_path, dump_header(header))
    atomic_write_bytes(data_path, np.ascontiguousarray(rec.data, dtype="<f4").tobytes())
    return header_path


def load_recording(path: str | Path) -> RawRecording:
    header_path, data_path = container_paths(path)
    try:
        raw = header_path.read_text()
    except OSError as exc:
        raise ValueError(f"cannot read recording header {header_path}: {exc}") from exc
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed header {header_path}: {exc}") from exc
    for key in ("format_version", "subject_id", "sample_rate", "channels", "trials"):
        if key not in header:
            raise ValueError(f"malformed header {header_path}: missing key {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {header['format_version']}")
    channels = [str(c) for c in header["channels"]]
    blob = data_path.read_bytes()
    n_ch = len(channels)
    if n_ch == 0 or len(blob) % (4 * n_ch) != 0:
        raise ValueError(
            f"channel/data shape mismatch: {len(blob)} payload bytes do not form "
            f"{n_ch} equal float32 channels"
        )
    n_samples = len(blob) // (4 * n_ch)
    data = np.frombuffer(blob, dtype="<f4").reshape(n_ch, n_samples).copy()
    trials = [Trial(int(t["start"]), int(t["end"]), str(t["label"])) for t in header["trials"]]
    rec = RawRecording(
        subject_id=str(header["subject_id"]),
        sample_rate=float(header["sample_rate"]),
        channels=channels,
        data=data,
        trials=trials,
    )
    return rec.validate()


def save_montage(montage: Montage, path: str | Path) -> None:
    montage.validate()
    entries = [
        {"name": n, "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}
        for n, p in zip(montage.names, montage.positions)
    ]
    atomic_write_text(Path(path), dump_header(entries))


def load_montage(path: str | Path) -> Montage:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed montage file {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ValueError(f"montage file {path} must hold a JSON list")
    names = [str(e["name"]) for e in entries]
    pos = np.array([[float(e["x"]), float(e["y"]), float(e["z"])] for e in entries], dtype=float)
    return Montage(names=names, positions=pos).validate()


def bundled_montage(name: str = "biosemi64") -> Montage:
    """Load one of the packaged electrode layouts ('biosemi64' or 'biosemi32')."""
    ref = resources.files("asad").joinpath(f"assets/{name}.json")
    with resources.as_file(ref) as p:
        return load_montage(p)


# ---------------------------------------------------------------------------
# Channel subsetting and windowing
# ---------------------------------------------------------------------------

def subset_channels(
    rec: RawRecording, montage: Montage, keep: list[str]
) -> tuple[RawRecording, Montage]:
    """Restrict recording and montage to `keep`, in the order given."""
    rec_idx = [rec.channel_index(n) for n in keep]
    mon_idx = [montage.index(n) for n in keep]
    new_rec = replace(
        rec,
        channels=list(keep),
        data=rec.data[rec_idx].copy(),
        trials=[replace(t) for t in rec.trials],
    ).validate()
    new_mon = Montage(names=list(keep), positions=montage.positions[mon_idx].copy()).validate()
    return new_rec, new_mon


def window_hop(window_samples: int, overlap_fraction: float) -> int:
    return max(1, _round_half_up(window_samples * (1.0 - overlap_fraction)))


def segment_windows(
    rec: RawRecording, window_s: float, overlap_fraction: float
) -> list[DecisionWindow]:
    """Slice every trial into decision windows of `window_s` seconds.

    Starts advance by hop = round(W * (1 - overlap)); a trial of length L
    yields floor((L - W)/hop) + 1 windows. Windows never cross trial
    boundaries and inherit the trial label.
    """
    if not (0.0 <= overlap_fraction < 1.0):
        raise ValueError("overlap_fraction must lie in [0, 1)")
    w = _round_half_up(window_s * rec.sample_rate)
    if w < 2:
        raise ValueError(f"window of {window_s} s is {w} samples; need >= 2")
    hop = window_hop(w, overlap_fraction)
    out: list[DecisionWindow] = []
    for ti, tr in enumerate(rec.trials):
        length = tr.length
        if length < w:
            continue
        count = (length - w) // hop + 1
        for k in range(count):
            start = tr.start + k * hop
            out.append(
                DecisionWindow(
                    subject_id=rec.subject_id,
                    samples=rec.data[:, start : start + w],
                    label=tr.label,
                    origin=(ti, start),
                )
            )
    if not out:
        raise ValueError(
            f"window of {w} samples is longer than every trial "
            f"(max length {max(t.length for t in rec.trials)})"
        )
    return out


def stratified_split(
    windows: list[DecisionWindow],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    block_s: float = 60.0,
    sample_rate: float | None = None,
) -> SplitSet:
    """Label-stratified train/validation/test split on contiguous blocks.

    Windows are grouped per (subject, label) and bundled into contiguous
    blocks of ~`block_s` seconds inside each trial; whole blocks are then
    shuffled and dealt greedily toward the target ratios. Afterwards any
    window whose samples spill into a block assigned to a different
    partition is dropped, so no sample is shared across partitions even
    with overlapping windows.
    """
    if not windows:
        raise ValueError("no windows to split")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative and sum to 1")
    if sample_rate is None:
        raise ValueError("sample_rate is required to size split blocks")
    w_len = windows[0].length
    block_samples = max(_round_half_up(block_s * sample_rate), w_len)

    def block_key(win: DecisionWindow) -> tuple[str, int, int]:
        ti, start = win.origin
        return (win.subject_id, ti, start // block_samples)

    groups: dict[tuple[str, str], dict[tuple, list[DecisionWindow]]] = {}
    for win in windows:
        grp = groups.setdefault((win.subject_id, win.label), {})
        grp.setdefault(block_key(win), []).append(win)

    names = ("train", "validation", "test")
    assignment: dict[tuple, int] = {}
    parts: tuple[list[DecisionWindow], ...] = ([], [], [])

    for gkey in sorted(groups):
        blocks = groups[gkey]
        keys = sorted(blocks)
        if len(keys) < sum(1 for r in ratios if r > 0):
            raise ValueError(
                f"group subject={gkey[0]!r} label={gkey[1]!r} has only {len(keys)} "
                f"block(s); cannot populate all partitions"
            )
        # group-local stream: the shuffle must not depend on how many other
        # groups were processed first
        g_seed = (seed, zlib.crc32(gkey[0].encode()), LABEL_INDEX[gkey[1]])
        order = np.random.default_rng(g_seed).permutation(len(keys))
        total = len(keys)
        targets = [r * total for r in ratios]
        counts = [0, 0, 0]
        for oi in order:
            key = keys[oi]
            # fill the partition with the most remaining relative capacity
            scores = [
                (targets[p] - counts[p]) / targets[p] if targets[p] > 0 else -1.0
                for p in range(3)
            ]
            p = int(np.argmax(scores))
            assignment[key] = p
            counts[p] += 1

    # Boundary scrub: a window reaching into blocks of another partition
    # would share samples across partitions, so it is discarded.
    for win in windows:
        key = block_key(win)
        p = assignment[key]
        ti, start = win.origin
        last_block = (start + win.length - 1) // block_samples
        ok = True
        for b in range(key[2] + 1, last_block + 1):
            peer = (win.subject_id, ti, b)
            if assignment.get(peer, p) != p:
                ok = False
                break
        if ok:
            parts[p].append(win)

    split = SplitSet(train=parts[0], validation=parts[1], test=parts[2], seed=seed)
    for name, part in split.partitions().items():
        if not part and ratios[names.index(name)] > 0:
            raise ValueError(f"partition {name!r} ended up empty")
    return split


# ---------------------------------------------------------------------------
# Synthetic recordings
# ---------------------------------------------------------------------------

def hemisphere_signs(montage: Montage) -> np.ndarray:
    """-1 for left-hemisphere electrodes, +1 for right, 0 for midline."""
    x = montage.positions[:, 0]
    return np.where(x > MIDLINE_TOL, 1, np.where(x < -MIDLINE_TOL, -1, 0))


def synth_recording(
    cfg: SynthConfig, montage: Montage, subject_id: str = "synth-0"
) -> RawRecording:
    """Deterministic synthetic recording; see SynthConfig for the model."""
    cfg.validate()
    if cfg.n_channels > len(montage):
        raise ValueError(
            f"n_channels={cfg.n_channels} exceeds montage size {len(montage)}"
        )
    rng = np.random.default_rng(cfg.seed)
    n_total = _round_half_up(cfg.duration_s * cfg.sample_rate)
    per_trial = n_total // cfg.n_trials
    names = list(montage.names[: cfg.n_channels]) + list(cfg.reference_channels)
    if len(set(names)) != len(names):
        raise ValueError("reference channel names collide with montage names")
    n_ch = len(names)

    labels = [LEFT, RIGHT] * ((cfg.n_trials + 1) // 2)
    labels = labels[: cfg.n_trials]
    rng.shuffle(labels)

    # scale=0 still consumes the stream, so seeds stay comparable across sigmas
    data = rng.normal(0.0, cfg.noise_sigma, size=(n_ch, n_total))

    signs = hemisphere_signs(Montage(names[: cfg.n_channels],
                                     montage.positions[: cfg.n_channels]))
    g = cfg.lateralization_gain
    trials = []
    for ti in range(cfg.n_trials):
        start, end = ti * per_trial, (ti + 1) * per_trial
        label = labels[ti]
        phase = rng.uniform(0.0, 2.0 * math.pi)
        t = np.arange(per_trial) / cfg.sample_rate
        carrier = np.sin(2.0 * math.pi * cfg.alpha_center * t + phase)
        boosted = -1 if label == LEFT else 1
        amp = np.where(signs == boosted, 1.0 + g, np.where(signs == 0, 1.0 + g / 2.0, 1.0))
        data[: cfg.n_channels, start:end] += amp[:, None] * carrier[None, :]
        trials.append(Trial(start, end, label))

    return RawRecording(
        subject_id=subject_id,
        sample_rate=cfg.sample_rate,
        channels=names,
        data=data,
        trials=trials,
    ).validate()
