"""Compact convolutional left/right classifier, written against numpy.

Fixed architecture: same-padded 3x3 conv (stride 1) -> batch norm -> ReLU
-> 2x2/2 average pool -> dropout -> flatten -> fc -> ReLU -> dropout ->
fc -> ReLU -> linear -> softmax. Weights are stored single precision;
all arithmetic runs in double precision so gradient checks and reruns
reproduce bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import stdtr

from .data import (
    FORMAT_VERSION,
    LABEL_INDEX,
    DecisionWindow,
    SplitSet,
    atomic_write_bytes,
    atomic_write_text,
    container_paths,
    dump_header,
)

TENSOR_ORDER = (
    "conv_w", "conv_b", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b",
)
TRAINED = tuple(n for n in TENSOR_ORDER if not n.startswith("bn_running"))


@dataclass
class CnnConfig:
    in_channels: int = 1  # sub-window maps stacked as input channels
    conv_filters: int = 8
    in_size: int = 32
    fc_sizes: tuple[int, int] = (512, 32)
    classes: int = 2
    dropout_p: float = 0.5
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def validate(self) -> "CnnConfig":
        if self.conv_filters < 1 or self.in_channels < 1:
            raise ValueError("conv_filters and in_channels must be >= 1")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.in_size < 2 or self.in_size % 2 != 0:
            raise ValueError("in_size must be even and >= 2")
        if len(self.fc_sizes) != 2 or any(s < 1 for s in self.fc_sizes):
            raise ValueError("fc_sizes must be two positive widths")
        if self.classes != 2:
            raise ValueError("binary classifier: classes must be 2")
        return self

    @property
    def pooled_size(self) -> int:
        return self.in_size // 2

    @property
    def flat_features(self) -> int:
        return self.conv_filters * self.pooled_size * self.pooled_size


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 1e-3
    rmsprop_rho: float = 0.9
    rmsprop_epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 50
    early_stop_patience: int = 5
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.rmsprop_rho < 1.0):
            raise ValueError("rmsprop_rho must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay < 0 or self.rmsprop_epsilon <= 0:
            raise ValueError("decay must be >= 0 and rmsprop_epsilon > 0")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")
        return self


def param_shapes(cfg: CnnConfig) -> dict[str, tuple[int, ...]]:
    f, s = cfg.conv_filters, cfg.in_channels
    h1, h2 = cfg.fc_sizes
    return {
        "conv_w": (f, s, 3, 3),
        "conv_b": (f,),
        "bn_gamma": (f,),
        "bn_beta": (f,),
        "bn_running_mean": (f,),
        "bn_running_var": (f,),
        "fc1_w": (h1, cfg.flat_features),
        "fc1_b": (h1,),
        "fc2_w": (h2, h1),
        "fc2_b": (h2,),
        "out_w": (cfg.classes, h2),
        "out_b": (cfg.classes,),
    }


def init_params(cfg: CnnConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """He-uniform weights for the ReLU stack, zero biases, unit batch-norm."""
    cfg.validate()
    shapes = param_shapes(cfg)
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        elif name in ("bn_gamma", "bn_running_var"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def validate_params(cfg: CnnConfig, params: dict) -> None:
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        if name not in params:
            raise ValueError(f"missing parameter tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise ValueError(
                f"parameter {name!r} has shape {params[name].shape}, expected {shape}"
            )
        if not np.all(np.isfinite(params[name])):
            raise FloatingPointError(f"non-finite values in parameter {name!r}")
    if np.any(params["bn_running_var"] <= 0):
        raise ValueError("bn_running_var must stay positive")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patches of the 1-padded input."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * 9, h * w)


def _col2im(dcols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col."""
    dxp = np.zeros((b, c, h + 2, w + 2))
    dcols = dcols.reshape(b, c, 3, 3, h, w)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki : ki + h, kj : kj + w] += dcols[:, :, ki, kj]
    return dxp[:, :, 1 : 1 + h, 1 : 1 + w]


def _draw_masks(cfg: CnnConfig, batch_size: int, rng: np.random.Generator) -> dict:
    p = cfg.dropout_p
    hp = cfg.pooled_size
    shapes = {
        "drop_pool": (batch_size, cfg.conv_filters, hp, hp),
        "drop_fc1": (batch_size, cfg.fc_sizes[0]),
    }
    masks = {}
    for name, shape in shapes.items():
        if p == 0.0:
            masks[name] = np.ones(shape)
        else:
            masks[name] = (rng.random(shape) >= p) / (1.0 - p)
    return masks


def forward(
    cfg: CnnConfig,
    params: dict,
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    masks: dict | None = None,
):
    """Probabilities (B, 2); additionally the activation cache in train mode.

    Train mode normalizes with batch statistics and applies inverted
    dropout (masks drawn from `rng` unless supplied); eval mode uses the
    running statistics and no dropout, and is fully deterministic.
    """
    cfg.validate()
    validate_params(cfg, params)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.in_size, cfg.in_size):
        raise ValueError(
            f"batch shape {x.shape} incompatible with config "
            f"(*, {cfg.in_channels}, {cfg.in_size}, {cfg.in_size})"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input batch")
    p64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    b = x.shape[0]
    f = cfg.conv_filters
    h = w = cfg.in_size
    train = mode == "train"

    cols = _im2col(x)
    conv = np.matmul(p64["conv_w"].reshape(f, -1), cols) + p64["conv_b"][None, :, None]
    conv = conv.reshape(b, f, h, w)

    if train:
        mu = conv.mean(axis=(0, 2, 3))
        var = conv.var(axis=(0, 2, 3))
    else:
        mu = p64["bn_running_mean"]
        var = p64["bn_running_var"]
    inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
    xhat = (conv - mu[None, :, None, None]) * inv_std[None, :, None, None]
    bn = p64["bn_gamma"][None, :, None, None] * xhat + p64["bn_beta"][None, :, None, None]

    relu1 = np.maximum(bn, 0.0)
    hp = cfg.pooled_size
    pooled = relu1.reshape(b, f, hp, 2, hp, 2).mean(axis=(3, 5))

    if train:
        if masks is None:
            if rng is None:
                raise ValueError("train mode needs an rng (or explicit masks) for dropout")
            masks = _draw_masks(cfg, b, rng)
        drop1 = pooled * masks["drop_pool"]
    else:
        drop1 = pooled

    flat = drop1.reshape(b, -1)
    fc1 = flat @ p64["fc1_w"].T + p64["fc1_b"]
    relu2 = np.maximum(fc1, 0.0)
    drop2 = relu2 * masks["drop_fc1"] if train else relu2
    fc2 = drop2 @ p64["fc2_w"].T + p64["fc2_b"]
    relu3 = np.maximum(fc2, 0.0)
    logits = relu3 @ p64["out_w"].T + p64["out_b"]

    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("non-finite activation at softmax")

    if not train:
        return probs, None
    cache = {
        "x": x, "cols": cols, "conv": conv, "mu": mu, "var": var, "inv_std": inv_std,
        "xhat": xhat, "bn": bn, "pooled": pooled, "masks": masks, "flat": flat,
        "fc1": fc1, "relu2": relu2, "drop2": drop2, "fc2": fc2, "relu3": relu3,
        "probs": probs, "p64": p64,
    }
    return probs, cache


def loss_and_grad(
    cfg: CnnConfig,
    params: dict,
    batch: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator | None = None,
    masks: dict | None = None,
):
    """Mean cross-entropy and its gradient w.r.t. every trainable tensor.

    Backpropagates through the batch-norm batch statistics and reuses the
    dropout masks drawn in the forward pass.
    """
    y = np.asarray(labels)
    if y.ndim != 1 or np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be a vector over {0, 1}")
    probs, cache = forward(cfg, params, batch, mode="train", rng=rng, masks=masks)
    b = len(y)
    f = cfg.conv_filters
    h = w = cfg.in_size
    p64 = cache["p64"]

    eps = np.finfo(float).tiny
    loss = float(-np.mean(np.log(probs[np.arange(b), y] + eps)))
    correct = int(np.sum(probs.argmax(axis=1) == y))

    dlogits = probs.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b

    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = dlogits.T @ cache["relu3"]
    grads["out_b"] = dlogits.sum(axis=0)
    drelu3 = dlogits @ p64["out_w"]
    dfc2 = drelu3 * (cache["fc2"] > 0)
    grads["fc2_w"] = dfc2.T @ cache["drop2"]
    grads["fc2_b"] = dfc2.sum(axis=0)
    ddrop2 = dfc2 @ p64["fc2_w"]
    drelu2 = ddrop2 * cache["masks"]["drop_fc1"]
    dfc1 = drelu2 * (cache["fc1"] > 0)
    grads["fc1_w"] = dfc1.T @ cache["flat"]
    grads["fc1_b"] = dfc1.sum(axis=0)
    dflat = dfc1 @ p64["fc1_w"]

    hp = cfg.pooled_size
    ddrop1 = dflat.reshape(b, f, hp, hp)
    dpooled = ddrop1 * cache["masks"]["drop_pool"]
    drelu1 = np.repeat(np.repeat(dpooled, 2, axis=2), 2, axis=3) / 4.0
    dbn = drelu1 * (cache["bn"] > 0)

    xhat = cache["xhat"]
    grads["bn_gamma"] = np.sum(dbn * xhat, axis=(0, 2, 3))
    grads["bn_beta"] = np.sum(dbn, axis=(0, 2, 3))
    dxhat = dbn * p64["bn_gamma"][None, :, None, None]
    n = b * h * w
    inv_std = cache["inv_std"][None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dconv = (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)

    dconv_mat = dconv.reshape(b, f, h * w)
    grads["conv_w"] = np.einsum("bfn,bcn->fc", dconv_mat, cache["cols"]).reshape(
        f, cfg.in_channels, 3, 3
    )
    grads["conv_b"] = dconv_mat.sum(axis=(0, 2))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")

    aux = {"correct": correct, "batch_mean": cache["mu"], "batch_var": cache["var"]}
    return loss, grads, aux


def rmsprop_step(
    params: dict, grads: dict, state: dict | None, t: int, cfg: TrainConfig
) -> tuple[dict, dict]:
    """v <- rho v + (1-rho) g^2; theta <- theta - lr_t g / (sqrt(v) + eps),
    with lr_t = learning_rate / (1 + decay * t). Pure function of inputs."""
    cfg.validate()
    if state is None:
        state = {k: np.zeros_like(np.asarray(grads[k], dtype=np.float64)) for k in grads}
    lr_t = cfg.learning_rate / (1.0 + cfg.decay * t)
    new_params = dict(params)
    new_state = {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if state[name].shape != g.shape:
            raise ValueError(f"optimizer state shape mismatch for {name!r}")
        v = cfg.rmsprop_rho * state[name] + (1.0 - cfg.rmsprop_rho) * g * g
        theta = np.asarray(params[name], dtype=np.float64)
        theta = theta - lr_t * g / (np.sqrt(v) + cfg.rmsprop_epsilon)
        new_state[name] = v
        new_params[name] = theta.astype(params[name].dtype)
    return new_params, new_state


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: CnnConfig
    params: dict
    train_config: TrainConfig
    epoch: int
    validation_accuracy: float
    format_version: int = FORMAT_VERSION


@dataclass
class Metrics:
    accuracy: float
    per_subject: dict[str, float]
    subject_mean: float
    subject_sd: float
    n_windows: int


class TrainingDiverged(RuntimeError):
    pass


def featurize(windows: list[DecisionWindow], feature_fn) -> tuple[np.ndarray, np.ndarray]:
    """Stack feature tensors (float32) and label indices for a window list."""
    if not windows:
        raise ValueError("empty window set")
    xs, ys = [], []
    for win in windows:
        t = feature_fn(win)
        xs.append(np.asarray(t.maps, dtype=np.float32))
        ys.append(LABEL_INDEX[t.label])
    return np.stack(xs), np.array(ys, dtype=np.int64)


def predict_proba(cfg: CnnConfig, params: dict, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = [forward(cfg, params, x[i : i + chunk], mode="eval")[0] for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def train(
    cnn_cfg: CnnConfig,
    train_cfg: TrainConfig,
    splits: SplitSet,
    feature_fn,
) -> tuple[Checkpoint, list[dict]]:
    """Train on a window split; feature_fn maps DecisionWindow -> SsfTensor."""
    if not splits.train or not splits.validation:
        raise ValueError("train and validation partitions must be non-empty")
    x_train, y_train = featurize(splits.train, feature_fn)
    x_val, y_val = featurize(splits.validation, feature_fn)
    return train_arrays(cnn_cfg, train_cfg, x_train, y_train, x_val, y_val)


def train_arrays(
    cnn_cfg: CnnConfig,
    train_cfg: TrainConfig,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
) -> tuple[Checkpoint, list[dict]]:
    """Train with seeded shuffling and keep the best-validation weights.

    Stops at max_epochs or once validation accuracy has not improved for
    early_stop_patience consecutive epochs. Deterministic given the seed.
    """
    cnn_cfg.validate()
    train_cfg.validate()
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation sets must be non-empty")

    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(cnn_cfg, rng)
    state: dict | None = None
    mom = cnn_cfg.bn_momentum
    n = len(x_train)
    history: list[dict] = []
    best_acc, best_epoch, best_params, stale = -1.0, -1, None, 0

    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            try:
                loss, grads, aux = loss_and_grad(
                    cnn_cfg, params, x_train[idx], y_train[idx], rng=rng
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch}, batch {lo // train_cfg.batch_size}: {exc}"
                ) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            trained = {k: grads[k] for k in TRAINED}
            params, state = rmsprop_step(params, trained, state, epoch, train_cfg)
            params["bn_running_mean"] = (
                mom * params["bn_running_mean"].astype(np.float64)
                + (1.0 - mom) * aux["batch_mean"]
            ).astype(params["bn_running_mean"].dtype)
            params["bn_running_var"] = np.maximum(
                mom * params["bn_running_var"].astype(np.float64)
                + (1.0 - mom) * aux["batch_var"],
                1e-12,
            ).astype(params["bn_running_var"].dtype)
            total_loss += loss * len(idx)
            correct += aux["correct"]
        val_probs = predict_proba(cnn_cfg, params, x_val)
        val_acc = float(np.mean(val_probs.argmax(axis=1) == y_val))
        history.append(
            {
                "epoch": epoch,
                "train_loss": total_loss / n,
                "train_acc": correct / n,
                "val_acc": val_acc,
            }
        )
        if val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= train_cfg.early_stop_patience:
                break

    checkpoint = Checkpoint(
        config=cnn_cfg,
        params=best_params,
        train_config=train_cfg,
        epoch=best_epoch,
        validation_accuracy=best_acc,
    )
    return checkpoint, history


def evaluate(checkpoint: Checkpoint, windows: list[DecisionWindow], feature_fn) -> Metrics:
    """Eval-mode accuracy overall and per subject (argmax decision)."""
    if not windows:
        raise ValueError("empty window set")
    x, y = featurize(windows, feature_fn)
    return evaluate_features(checkpoint, x, y, [w.subject_id for w in windows])


def evaluate_features(
    checkpoint: Checkpoint, x: np.ndarray, y: np.ndarray, subjects: list[str]
) -> Metrics:
    if len(x) == 0:
        raise ValueError("empty window set")
    probs = predict_proba(checkpoint.config, checkpoint.params, x)
    hits = probs.argmax(axis=1) == np.asarray(y)
    per_subject: dict[str, list[bool]] = {}
    for subj, hit in zip(subjects, hits):
        per_subject.setdefault(subj, []).append(bool(hit))
    subj_acc = {s: float(np.mean(v)) for s, v in sorted(per_subject.items())}
    accs = np.array(list(subj_acc.values()))
    return Metrics(
        accuracy=float(np.mean(hits)),
        per_subject=subj_acc,
        subject_mean=float(accs.mean()),
        subject_sd=float(accs.std()),
        n_windows=len(x),
    )


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    hdr_path, data_path = container_paths(path)
    validate_params(ckpt.config, ckpt.params)
    header = {
        "format_version": ckpt.format_version,
        "kind": "cnn_checkpoint",
        "config": asdict(ckpt.config),
        "train_config": asdict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "validation_accuracy": ckpt.validation_accuracy,
        "tensors": [
            {"name": n, "shape": list(ckpt.params[n].shape)} for n in TENSOR_ORDER
        ],
    }
    atomic_write_text(hdr_path, dump_header(header))
    blob = b"".join(
        np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes() for n in TENSOR_ORDER
    )
    atomic_write_bytes(data_path, blob)
    return hdr_path


def load_checkpoint(path: str | Path) -> Checkpoint:
    hdr_path, data_path = container_paths(path)
    header = json.loads(hdr_path.read_text())
    if header.get("format_version") != FORMAT_VERSION or header.get("kind") != "cnn_checkpoint":
        raise ValueError(f"not a version-{FORMAT_VERSION} cnn checkpoint: {hdr_path}")
    cfgd = dict(header["config"])
    cfgd["fc_sizes"] = tuple(cfgd["fc_sizes"])
    cfg = CnnConfig(**cfgd).validate()
    tc = TrainConfig(**header["train_config"]).validate()
    blob = np.frombuffer(data_path.read_bytes(), dtype="<f4")
    params = {}
    off = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        params[entry["name"]] = blob[off : off + size].reshape(shape).copy()
        off += size
    if off != blob.size:
        raise ValueError("checkpoint payload size mismatch")
    validate_params(cfg, params)
    return Checkpoint(
        config=cfg,
        params=params,
        train_config=tc,
        epoch=int(header["epoch"]),
        validation_accuracy=float(header["validation_accuracy"]),
        format_version=int(header["format_version"]),
    )


def save_history_csv(history: list[dict], path: str | Path) -> None:
    lines = ["epoch,train_loss,train_acc,val_acc"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['train_loss']!r},{row['train_acc']!r},{row['val_acc']!r}"
        )
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Paired comparison
# ---------------------------------------------------------------------------

@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_t_test(accuracies_a, accuracies_b) -> TTestResult:
    """Two-tailed paired t-test on per-subject accuracy differences.

    Zero-variance differences give the defined degenerate result: p = 1
    when the mean difference is 0, else p = 0.
    """
    a = np.asarray(accuracies_a, dtype=float)
    b = np.asarray(accuracies_b, dtype=float)
    if a.ndim != 1 or a.shape != b.shape or len(a) < 2:
        raise ValueError("need two equal-length vectors of length >= 2")
    d = a - b
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, df=df, degenerate=True)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, df=df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return TTestResult(t=t, p=p, df=df, degenerate=False)
