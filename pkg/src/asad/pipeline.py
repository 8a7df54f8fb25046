"""Experiment orchestration: config handling and the batch stages.

A workspace directory accumulates stage outputs::

    recordings/   synthetic (or converted) recording containers
    envelopes/    ground-truth speech envelopes (when the linear model runs)
    preprocessed/ alpha-band chain output, one container per subject
    preprocessed_baseline/, envelopes_rs/   inputs for the linear decoder
    features/w{size}/{train,validation,test}.{json,f32}   tensor caches
    runs/w{size}/seed{k}/   checkpoints and training history
    eval/, baseline_eval/   per-seed and per-subject metrics fragments
    report/       metrics.csv, report.md, paired_tests.csv

Every stage writes to a temporary directory that replaces the target only
on success, so failed stages leave no partial outputs, and reruns with the
same config and seeds are byte-identical.
"""

from __future__ import annotations

import csv
import json
import shutil
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baseline import (
    LAMBDA_GRID,
    Envelope,
    add_envelope_mixture,
    decide_attention,
    load_envelope,
    reconstruct,
    save_decoder,
    save_envelope,
    select_lambda,
    synth_envelope,
)
from .data import (
    LABEL_INDEX,
    LEFT,
    Montage,
    RawRecording,
    SynthConfig,
    _round_half_up,
    atomic_write_text,
    bundled_montage,
    dump_header,
    load_montage,
    load_recording,
    save_recording,
    segment_windows,
    stratified_split,
    subset_channels,
    synth_recording,
)
from .features import (
    SsfMap,
    extract_ssf,
    load_tensor_cache,
    save_tensor_cache,
    write_map_csv,
    write_map_pgm,
)
from .geometry import project_electrodes
from .network import (
    CnnConfig,
    TrainConfig,
    evaluate_features,
    load_checkpoint,
    paired_t_test,
    save_checkpoint,
    save_history_csv,
    train_arrays,
)
from .preprocess import PreprocConfig, preprocess_recording, resample_series

METRICS_HEADER = "model,window_s,subject,accuracy"
METRICS_SEED_HEADER = "model,window_s,seed,subject,accuracy"
PAIRED_HEADER = "model_a,model_b,window_s,t,p,df,degenerate"


class ConfigError(ValueError):
    """Invalid configuration or usage; the CLI exits with code 2."""


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config section {name!r}")
    for key in ("band", "fc_sizes", "ratios"):
        if key in raw and isinstance(raw[key], list):
            raw[key] = tuple(raw[key])
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad config section {name!r}: {exc}") from exc


@dataclass
class SynthSection:
    n_subjects: int = 4
    n_channels: int = 64
    duration_s: float = 240.0
    sample_rate: float = 128.0
    alpha_center: float = 10.0
    lateralization_gain: float = 1.0
    noise_sigma: float = 1.0
    n_trials: int = 8
    seed: int = 0
    envelope_mix_gain: float = 0.0
    envelope_max_lag_s: float = 0.25


@dataclass
class FeatureSection:
    band: tuple[float, float] = (8.0, 13.0)
    sub_windows: int = 1
    grid_n: int = 32
    log_power: bool = False
    clamp_gradients: bool = False


@dataclass
class SplitSection:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    block_s: float = 60.0


@dataclass
class BaselineSection:
    max_lag_s: float = 0.25
    band: tuple[float, float] = (1.0, 9.0)
    lambda_grid: tuple[float, ...] = LAMBDA_GRID


@dataclass
class SeedsSection:
    base: int = 7
    runs: int = 1


@dataclass
class PipelineConfig:
    montage: str = "builtin:biosemi64"
    channels: list[str] | None = None
    recordings_dir: str | None = None
    reference_channels: list[str] = field(default_factory=lambda: ["M1", "M2"])
    band: tuple[float, float] = (8.0, 13.0)
    target_rate: float = 70.0
    filter_order: int = 4
    window_sizes_s: tuple[float, ...] = (0.1, 1.0, 2.0, 5.0, 10.0)
    overlap_fraction: float = 0.5
    models: tuple[str, ...] = ("cnn", "linear")
    synth: SynthSection = field(default_factory=SynthSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    split: SplitSection = field(default_factory=SplitSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "PipelineConfig":
        if not self.window_sizes_s:
            raise ConfigError("window_sizes_s must not be empty")
        if any(w <= 0 for w in self.window_sizes_s):
            raise ConfigError("window sizes must be positive")
        if not (0.0 <= self.overlap_fraction < 1.0):
            raise ConfigError("overlap_fraction must lie in [0, 1)")
        bad = [m for m in self.models if m not in ("cnn", "linear")]
        if bad:
            raise ConfigError(f"unknown model(s) {bad}; choose from 'cnn', 'linear'")
        if not self.models:
            raise ConfigError("models must not be empty")
        try:
            self.preproc_config().validate()
            self.cnn.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def preproc_config(self, band: tuple[float, float] | None = None) -> PreprocConfig:
        return PreprocConfig(
            reference_channels=list(self.reference_channels),
            band=tuple(band or self.band),
            target_rate=self.target_rate,
            filter_order=self.filter_order,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(raw: dict) -> PipelineConfig:
    raw = dict(raw)
    sections = {
        "synth": SynthSection,
        "features": FeatureSection,
        "split": SplitSection,
        "baseline": BaselineSection,
        "seeds": SeedsSection,
        "cnn": CnnConfig,
        "train": TrainConfig,
    }
    kwargs: dict = {}
    for name, cls in sections.items():
        if name in raw:
            kwargs[name] = _section(cls, raw.pop(name), name)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    for key in ("band", "window_sizes_s", "models"):
        if key in raw and isinstance(raw[key], list):
            raw[key] = tuple(raw[key])
    cfg = PipelineConfig(**raw, **kwargs)
    # the network consumes one input channel per sub-window map
    cfg.cnn = replace(
        cfg.cnn, in_channels=cfg.features.sub_windows, in_size=cfg.features.grid_n
    )
    return cfg.validate()


def load_config(path: str | Path, overrides: list[str] | None = None, seed: int | None = None) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like dotted.path=value")
        dotted, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-object value")
        node[parts[-1]] = value
    if seed is not None:
        raw.setdefault("seeds", {})["base"] = seed
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# Workspace plumbing
# ---------------------------------------------------------------------------

@contextmanager
def stage_output(out_dir: Path, name: str):
    """Build a stage directory atomically: work in a temp dir, swap on success."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / f".tmp-{name.replace('/', '_')}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    final = out_dir / name
    if final.exists():
        shutil.rmtree(final)
    tmp.replace(final)


def resolve_montage(cfg: PipelineConfig) -> Montage:
    if cfg.montage.startswith("builtin:"):
        mont = bundled_montage(cfg.montage.split(":", 1)[1])
    else:
        p = Path(cfg.montage)
        if not p.exists():
            raise ConfigError(f"montage file {p} does not exist")
        mont = load_montage(p)
    if cfg.channels:
        idx = [mont.index(n) for n in cfg.channels]
        mont = Montage(names=list(cfg.channels), positions=mont.positions[idx].copy()).validate()
    return mont


def _recording_paths(cfg: PipelineConfig, out_dir: Path) -> list[Path]:
    root = Path(cfg.recordings_dir) if cfg.recordings_dir else out_dir / "recordings"
    if not root.is_dir():
        raise FileNotFoundError(f"recordings directory {root} not found (run synth first?)")
    paths = sorted(root.glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no recording containers under {root}")
    return paths


def _reorder_recording(rec: RawRecording, wanted: list[str]) -> RawRecording:
    idx = [rec.channel_index(n) for n in wanted]
    return replace(
        rec, channels=list(wanted), data=rec.data[idx].copy(),
        trials=[replace(t) for t in rec.trials],
    ).validate()


def _ws_tag(window_s: float) -> str:
    return f"w{window_s:g}"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, out_dir: Path) -> None:
    """Generate recordings (and envelope pairs when the linear model runs)."""
    mont = resolve_montage(cfg)
    s = cfg.synth
    want_env = "linear" in cfg.models
    n_samples = _round_half_up(s.duration_s * s.sample_rate)
    max_lag = _round_half_up(s.envelope_max_lag_s * s.sample_rate)
    with stage_output(out_dir, "recordings") as rec_tmp:
        env_records = []
        for i in range(s.n_subjects):
            sid = f"S{i:02d}"
            scfg = SynthConfig(
                n_channels=s.n_channels,
                duration_s=s.duration_s,
                sample_rate=s.sample_rate,
                alpha_center=s.alpha_center,
                lateralization_gain=s.lateralization_gain,
                noise_sigma=s.noise_sigma,
                n_trials=s.n_trials,
                seed=s.seed + i,
                reference_channels=tuple(cfg.reference_channels),
            )
            rec = synth_recording(scfg, mont, subject_id=sid)
            if want_env:
                env_l = synth_envelope(
                    n_samples, s.sample_rate, f"{sid}.left",
                    np.random.default_rng((s.seed, i, 1)),
                )
                env_r = synth_envelope(
                    n_samples, s.sample_rate, f"{sid}.right",
                    np.random.default_rng((s.seed, i, 2)),
                )
                if s.envelope_mix_gain > 0:
                    rec = add_envelope_mixture(
                        rec, env_l, env_r, max_lag, s.envelope_mix_gain, (s.seed, i, 3)
                    )
                env_records.append((sid, env_l, env_r))
            save_recording(rec, rec_tmp / sid)
    if want_env:
        with stage_output(out_dir, "envelopes") as env_tmp:
            for sid, env_l, env_r in env_records:
                save_envelope(env_l, env_tmp / f"{sid}.left")
                save_envelope(env_r, env_tmp / f"{sid}.right")


def stage_preprocess(cfg: PipelineConfig, out_dir: Path) -> None:
    """Run the preprocessing chain(s) over every recording."""
    mont = resolve_montage(cfg)
    paths = _recording_paths(cfg, out_dir)
    want_lin = "linear" in cfg.models
    pp = cfg.preproc_config()
    pp_lin = cfg.preproc_config(band=cfg.baseline.band) if want_lin else None
    with stage_output(out_dir, "preprocessed") as tmp:
        lin_tmp = out_dir / ".tmp-preprocessed_baseline"
        env_tmp = out_dir / ".tmp-envelopes_rs"
        for d in (lin_tmp, env_tmp):
            if d.exists():
                shutil.rmtree(d)
        if want_lin:
            lin_tmp.mkdir()
            env_tmp.mkdir()
        try:
            for path in paths:
                rec = load_recording(path)
                wanted = list(mont.names) + [
                    r for r in cfg.reference_channels if r in rec.channels
                ]
                rec = _reorder_recording(rec, wanted)
                prep = preprocess_recording(rec, pp)
                if prep.channels != list(mont.names):
                    raise RuntimeError(
                        f"preprocessed channels diverge from montage for {rec.subject_id}"
                    )
                save_recording(prep, tmp / rec.subject_id)
                if want_lin:
                    save_recording(preprocess_recording(rec, pp_lin), lin_tmp / rec.subject_id)
                    for side in ("left", "right"):
                        env = load_envelope(out_dir / "envelopes" / f"{rec.subject_id}.{side}")
                        rs = resample_series(env.samples, env.sample_rate, cfg.target_rate)
                        env_rs = Envelope(
                            samples=np.clip(rs, 0.0, None),
                            speaker_id=env.speaker_id,
                            sample_rate=cfg.target_rate,
                        )
                        save_envelope(env_rs, env_tmp / f"{rec.subject_id}.{side}")
        except BaseException:
            shutil.rmtree(lin_tmp, ignore_errors=True)
            shutil.rmtree(env_tmp, ignore_errors=True)
            raise
        if want_lin:
            for tmp_dir, name in ((lin_tmp, "preprocessed_baseline"), (env_tmp, "envelopes_rs")):
                final = out_dir / name
                if final.exists():
                    shutil.rmtree(final)
                tmp_dir.replace(final)


def _load_preprocessed(out_dir: Path, sub_dir: str = "preprocessed") -> list[RawRecording]:
    root = out_dir / sub_dir
    if not root.is_dir():
        raise FileNotFoundError(f"{root} not found (run preprocess first?)")
    return [load_recording(p) for p in sorted(root.glob("*.json"))]


def build_split(cfg: PipelineConfig, recs: list[RawRecording], window_s: float):
    windows = []
    for rec in recs:
        windows.extend(segment_windows(rec, window_s, cfg.overlap_fraction))
    return stratified_split(
        windows,
        ratios=tuple(cfg.split.ratios),
        seed=cfg.seeds.base,
        block_s=cfg.split.block_s,
        sample_rate=cfg.target_rate,
    )


def stage_extract(cfg: PipelineConfig, out_dir: Path) -> None:
    """Split windows and cache one feature tensor file per partition/window size."""
    mont = resolve_montage(cfg)
    layout = project_electrodes(mont)
    recs = _load_preprocessed(out_dir)
    feat = cfg.features
    with stage_output(out_dir, "features") as tmp:
        for ws in cfg.window_sizes_s:
            split = build_split(cfg, recs, ws)
            ws_dir = tmp / _ws_tag(ws)
            ws_dir.mkdir()
            for pname, wins in split.partitions().items():
                tensors = [
                    extract_ssf(
                        w,
                        layout,
                        fs=cfg.target_rate,
                        band=tuple(feat.band),
                        sub_windows=feat.sub_windows,
                        grid_n=feat.grid_n,
                        log_power=feat.log_power,
                        clamp_gradients=feat.clamp_gradients,
                    )
                    for w in wins
                ]
                save_tensor_cache(
                    tensors, [w.subject_id for w in wins], layout.extent, ws_dir / pname
                )


def stage_train(cfg: PipelineConfig, out_dir: Path) -> None:
    """Train the network per window size and per seed from the cached tensors."""
    if "cnn" not in cfg.models:
        return
    feat_root = out_dir / "features"
    if not feat_root.is_dir():
        raise FileNotFoundError(f"{feat_root} not found (run extract first?)")
    with stage_output(out_dir, "runs") as tmp:
        for ws in cfg.window_sizes_s:
            ws_dir = feat_root / _ws_tag(ws)
            x_tr, lab_tr, _, _ = load_tensor_cache(ws_dir / "train")
            x_va, lab_va, _, _ = load_tensor_cache(ws_dir / "validation")
            y_tr = np.array([LABEL_INDEX[l] for l in lab_tr])
            y_va = np.array([LABEL_INDEX[l] for l in lab_va])
            for k in range(cfg.seeds.runs):
                seed = cfg.seeds.base + k
                tc = replace(cfg.train, seed=seed)
                ckpt, history = train_arrays(cfg.cnn, tc, x_tr, y_tr, x_va, y_va)
                run_dir = tmp / _ws_tag(ws) / f"seed{seed}"
                run_dir.mkdir(parents=True)
                save_checkpoint(ckpt, run_dir / "checkpoint")
                save_history_csv(history, run_dir / "history.csv")


def stage_eval(cfg: PipelineConfig, out_dir: Path) -> None:
    """Evaluate every checkpoint on its test partition."""
    if "cnn" not in cfg.models:
        return
    rows = []
    for ws in cfg.window_sizes_s:
        ws_dir = out_dir / "features" / _ws_tag(ws)
        x_te, lab_te, subj_te, _ = load_tensor_cache(ws_dir / "test")
        y_te = np.array([LABEL_INDEX[l] for l in lab_te])
        for k in range(cfg.seeds.runs):
            seed = cfg.seeds.base + k
            ckpt = load_checkpoint(out_dir / "runs" / _ws_tag(ws) / f"seed{seed}" / "checkpoint")
            metrics = evaluate_features(ckpt, x_te, y_te, subj_te)
            for subj, acc in metrics.per_subject.items():
                rows.append(("cnn", ws, seed, subj, acc))
    with stage_output(out_dir, "eval") as tmp:
        _write_seed_metrics(tmp / "metrics_by_seed.csv", rows)


def stage_baseline(cfg: PipelineConfig, out_dir: Path) -> None:
    """Fit and evaluate the per-subject linear decoders."""
    if "linear" not in cfg.models:
        return
    recs = _load_preprocessed(out_dir, "preprocessed_baseline")
    n_lags = _round_half_up(cfg.baseline.max_lag_s * cfg.target_rate) + 1
    rows = []
    with stage_output(out_dir, "baseline_eval") as tmp:
        dec_dir = tmp / "decoders"
        dec_dir.mkdir()
        for rec in recs:
            env = {
                side: load_envelope(out_dir / "envelopes_rs" / f"{rec.subject_id}.{side}")
                for side in ("left", "right")
            }
            for ws in cfg.window_sizes_s:
                w_len = _round_half_up(ws * cfg.target_rate)
                if w_len < n_lags + 3:
                    continue  # window too short for the lag span
                split = build_split(cfg, [rec], ws)

                def seg(win, side):
                    _, start = win.origin
                    return env[side].samples[start : start + win.length]

                def att(win):
                    return seg(win, "left" if win.label == LEFT else "right")

                train_pairs = [(w.samples, att(w)) for w in split.train]
                val_tuples = [
                    (w.samples, seg(w, "left"), seg(w, "right"), w.label)
                    for w in split.validation
                ]
                decoder, _ = select_lambda(
                    train_pairs, val_tuples, n_lags, tuple(cfg.baseline.lambda_grid)
                )
                hits = 0
                for w in split.test:
                    s_hat = reconstruct(decoder, w.samples)
                    d = decide_attention(
                        s_hat, seg(w, "left")[: len(s_hat)], seg(w, "right")[: len(s_hat)]
                    )
                    hits += d.label == w.label
                acc = hits / len(split.test)
                rows.append(("linear", ws, cfg.seeds.base, rec.subject_id, acc))
                save_decoder(decoder, dec_dir / f"{rec.subject_id}.{_ws_tag(ws)}")
        _write_seed_metrics(tmp / "metrics_by_seed.csv", rows)


def _write_seed_metrics(path: Path, rows: list[tuple]) -> None:
    lines = [METRICS_SEED_HEADER]
    for model, ws, seed, subj, acc in sorted(rows, key=lambda r: (r[0], r[1], r[2], r[3])):
        lines.append(f"{model},{ws!r},{seed},{subj},{acc!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_seed_metrics(path: Path) -> list[tuple[str, float, int, str, float]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                (
                    rec["model"],
                    float(rec["window_s"]),
                    int(rec["seed"]),
                    rec["subject"],
                    float(rec["accuracy"]),
                )
            )
    return rows


def stage_report(cfg: PipelineConfig, out_dir: Path) -> None:
    """Merge metric fragments into the consolidated CSV, the aggregate
    accuracy table, and pairwise significance tests."""
    rows = []
    for frag in ("eval", "baseline_eval"):
        path = out_dir / frag / "metrics_by_seed.csv"
        if path.exists():
            rows.extend(_read_seed_metrics(path))
    if not rows:
        raise FileNotFoundError("no metrics fragments found (run eval/baseline first?)")

    # seed-mean accuracy per (model, window, subject)
    acc: dict[tuple[str, float, str], list[float]] = {}
    for model, ws, _seed, subj, a in rows:
        acc.setdefault((model, ws, subj), []).append(a)
    merged = {k: float(np.mean(v)) for k, v in acc.items()}

    with stage_output(out_dir, "report") as tmp:
        lines = [METRICS_HEADER]
        for (model, ws, subj), a in sorted(merged.items()):
            lines.append(f"{model},{ws!r},{subj},{a!r}")
        atomic_write_text(tmp / "metrics.csv", "\n".join(lines) + "\n")

        models = sorted({k[0] for k in merged})
        sizes = sorted({k[1] for k in merged})
        md = ["# Attention detection report", ""]
        md.append("Per-cell: mean accuracy +/- SD across subjects (seed-averaged).")
        md.append("")
        md.append("| model | " + " | ".join(f"{w:g} s" for w in sizes) + " |")
        md.append("|" + "---|" * (len(sizes) + 1))
        for model in models:
            cells = []
            for ws in sizes:
                vals = [v for (m, w, _s), v in merged.items() if m == model and w == ws]
                if vals:
                    cells.append(f"{np.mean(vals):.3f} ± {np.std(vals):.3f}")
                else:
                    cells.append("-")
            md.append(f"| {model} | " + " | ".join(cells) + " |")
        md.append("")

        pair_lines = [PAIRED_HEADER]
        for i, ma in enumerate(models):
            for mb in models[i + 1 :]:
                for ws in sizes:
                    subj_a = {s: v for (m, w, s), v in merged.items() if m == ma and w == ws}
                    subj_b = {s: v for (m, w, s), v in merged.items() if m == mb and w == ws}
                    shared = sorted(set(subj_a) & set(subj_b))
                    if len(shared) < 2:
                        continue
                    res = paired_t_test(
                        [subj_a[s] for s in shared], [subj_b[s] for s in shared]
                    )
                    pair_lines.append(
                        f"{ma},{mb},{ws!r},{res.t!r},{res.p!r},{res.df},{res.degenerate}"
                    )
        atomic_write_text(tmp / "paired_tests.csv", "\n".join(pair_lines) + "\n")

        if len(pair_lines) > 1:
            md.append("## Paired t-tests (per-subject accuracies)")
            md.append("")
            md.append("| pair | window | t | p |")
            md.append("|---|---|---|---|")
            for line in pair_lines[1:]:
                ma, mb, ws, t, p, _df, _deg = line.split(",")
                md.append(f"| {ma} vs {mb} | {float(ws):g} s | {float(t):.3f} | {float(p):.4f} |")
            md.append("")
        atomic_write_text(tmp / "report.md", "\n".join(md) + "\n")


STAGES = ("synth", "preprocess", "extract", "train", "eval", "baseline", "report")


def run_experiment(cfg: PipelineConfig, out_dir: str | Path) -> Path:
    """Execute the full pipeline; any stage failure aborts with the stage
    name, leaving no partially written stage directory behind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", dump_header(cfg.to_dict()))
    funcs = {
        "synth": stage_synth,
        "preprocess": stage_preprocess,
        "extract": stage_extract,
        "train": stage_train,
        "eval": stage_eval,
        "baseline": stage_baseline,
        "report": stage_report,
    }
    for name in STAGES:
        if name == "synth" and cfg.recordings_dir:
            continue
        try:
            funcs[name](cfg, out)
        except ConfigError:
            raise
        except Exception as exc:
            raise RuntimeError(f"stage {name!r} failed: {exc}") from exc
    return out / "report"


# ---------------------------------------------------------------------------
# Map dumps
# ---------------------------------------------------------------------------

def dump_map(
    cfg: PipelineConfig,
    recording: str | Path,
    window_index: int,
    out_prefix: str | Path,
    window_s: float | None = None,
) -> tuple[Path, Path]:
    """Write one window's map as ASCII PGM plus raw CSV."""
    mont = resolve_montage(cfg)
    rec = load_recording(recording)
    rec, mont = subset_channels(rec, mont, list(mont.names))
    ws = window_s if window_s is not None else cfg.window_sizes_s[0]
    windows = segment_windows(rec, ws, cfg.overlap_fraction)
    if not (0 <= window_index < len(windows)):
        raise ConfigError(
            f"window index {window_index} out of range (have {len(windows)} windows)"
        )
    layout = project_electrodes(mont)
    feat = cfg.features
    tensor = extract_ssf(
        windows[window_index],
        layout,
        fs=rec.sample_rate,
        band=tuple(feat.band),
        sub_windows=feat.sub_windows,
        grid_n=feat.grid_n,
        log_power=feat.log_power,
        clamp_gradients=feat.clamp_gradients,
    )
    ssf_map = SsfMap(grid=tensor.maps[0], extent=layout.extent)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    pgm = Path(str(prefix) + ".pgm")
    csv_path = Path(str(prefix) + ".csv")
    write_map_pgm(ssf_map, pgm)
    write_map_csv(ssf_map, csv_path)
    return pgm, csv_path
