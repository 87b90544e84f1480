"""Tiny backbone, minibatch SGD trainer and evaluation for the motion task."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, format_run_config, parse_run_config
from .errors import ConfigError, DivergenceError
from .grad import classifier_loss, forward_with_tape, kpsem_backward
from .head import KpsemParams, init_params, temporal_extent
from .synth import CLASSES

log = logging.getLogger(__name__)

TINY_RUN_CONFIG = RunConfig(K=4, G=4, embed_dim=8)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    mode: str = "hard"
    use_kpsem: bool = True
    position: int = 2

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.mode not in ("hard", "soft"):
            raise ConfigError(f"mode must be hard or soft, got {self.mode!r}")
        if self.position not in (1, 2):
            raise ConfigError(f"position must be 1 or 2 (backbone stage), got {self.position}")


# --- 3x3 stride-2 convolution with circular padding ---------------------------------

def _im2col(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
    cols = np.empty((n, c, 3, 3, ho, wo))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2]
    return cols.reshape(n, c * 9, ho * wo)


def conv3x3_s2(x, w, b):
    n, _, h, wd = x.shape
    cols = _im2col(x)
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[:, None]
    return out.reshape(n, w.shape[0], h // 2, wd // 2), cols


def conv3x3_s2_backward(x_shape, cols, w, dout):
    n, c, h, wd = x_shape
    ho, wo = h // 2, wd // 2
    d = dout.reshape(n, w.shape[0], ho * wo)
    o = w.shape[0]
    dflat = d.transpose(1, 0, 2).reshape(o, -1)
    dw = (dflat @ cols.transpose(1, 0, 2).reshape(cols.shape[1], -1).T).reshape(w.shape)
    db = dflat.sum(axis=1)
    dcols = np.matmul(w.reshape(o, -1).T, d).reshape(n, c, 3, 3, ho, wo)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2] += dcols[:, :, dy, dx]
    # fold the wrapped border back onto the opposite edge
    dxp[:, :, 1, :] += dxp[:, :, h + 1, :]
    dxp[:, :, h, :] += dxp[:, :, 0, :]
    dxp[:, :, :, 1] += dxp[:, :, :, wd + 1]
    dxp[:, :, :, wd] += dxp[:, :, :, 0]
    return dxp[:, :, 1:h + 1, 1:wd + 1], dw, db


def init_backbone(rng, widths=(1, 8, 16)):
    params = {}
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        a = 1.0 / math.sqrt(cin * 9)
        params[f"backbone.conv{i}.weight"] = rng.uniform(-a, a, (cout, cin, 3, 3))
        params[f"backbone.conv{i}.bias"] = rng.uniform(-a, a, cout)
    return params


# --- model ---------------------------------------------------------------------------

@dataclass
class Model:
    backbone: dict
    kpsem: KpsemParams | None
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    run_cfg: RunConfig
    train_cfg: TrainConfig

    def named(self):
        out = dict(self.backbone)
        if self.kpsem is not None:
            out.update({f"kpsem.{k}": v for k, v in self.kpsem.named().items()})
        out["classifier.weight"] = self.classifier_w
        out["classifier.bias"] = self.classifier_b
        return out

    def param_count(self):
        return int(sum(v.size for v in self.named().values()))

    def backbone_param_count(self):
        return int(sum(v.size for v in self.backbone.values()))


def build_model(frames, run_cfg, train_cfg, rng, n_classes=len(CLASSES)):
    backbone = init_backbone(rng)
    spatial = backbone["backbone.conv2.weight"].shape[0]
    kpsem = None
    temporal = 0
    if train_cfg.use_kpsem:
        channels = backbone[f"backbone.conv{train_cfg.position}.weight"].shape[0]
        kpsem = init_params(channels, run_cfg, rng)
        temporal = temporal_extent(channels, frames)
    in_dim = spatial + temporal
    a = 1.0 / math.sqrt(in_dim)
    return Model(backbone, kpsem, rng.uniform(-a, a, (n_classes, in_dim)),
                 rng.uniform(-a, a, n_classes), run_cfg, train_cfg)


def _to_features(a, batch, frames):
    # (B*T, C, h, w) -> (B, C, T, h, w)
    return a.reshape((batch, frames) + a.shape[1:]).swapaxes(1, 2)


def forward(model, x, labels=None, want_grads=False):
    """Logits for videos ``x`` of shape ``(B, 1, T, H, W)``.

    With ``want_grads`` returns ``(loss, grads)`` instead.
    """
    x = np.asarray(x, np.float64)
    B, _, T = x.shape[:3]
    frames = x.swapaxes(1, 2).reshape((B * T, 1) + x.shape[-2:])
    bb = model.backbone
    pre1, cols1 = conv3x3_s2(frames, bb["backbone.conv1.weight"], bb["backbone.conv1.bias"])
    a1 = np.maximum(pre1, 0.0)
    pre2, cols2 = conv3x3_s2(a1, bb["backbone.conv2.weight"], bb["backbone.conv2.bias"])
    a2 = np.maximum(pre2, 0.0)
    feats2 = _to_features(a2, B, T)
    f_out = feats2.mean(axis=(2, 3, 4))
    tcfg = model.train_cfg
    tape = None
    if model.kpsem is not None:
        F = _to_features(a1 if tcfg.position == 1 else a2, B, T)
        p_out, tape = forward_with_tape(F, model.kpsem, model.run_cfg, tcfg.mode)
    else:
        p_out = np.zeros((B, 0))
    if not want_grads:
        fused = np.concatenate([f_out, p_out], axis=-1)
        return fused @ model.classifier_w.T + model.classifier_b

    loss, cgrads, df_out, dp_out = classifier_loss(f_out, p_out, labels, model)
    grads = {"classifier.weight": cgrads["classifier.weight"],
             "classifier.bias": cgrads["classifier.bias"]}
    da2 = np.broadcast_to(df_out[:, :, None, None, None] / (T * a2.shape[-2] * a2.shape[-1]),
                          feats2.shape).copy()
    da1 = np.zeros((B,) + (a1.shape[1], T) + a1.shape[2:])
    if tape is not None:
        kgrads, dF = kpsem_backward(tape, dp_out, model.kpsem)
        grads.update({f"kpsem.{k}": v for k, v in kgrads.items()})
        if tcfg.position == 1:
            da1 += dF
        else:
            da2 += dF
    da2 = da2.swapaxes(1, 2).reshape(a2.shape) * (pre2 > 0)
    d1, grads["backbone.conv2.weight"], grads["backbone.conv2.bias"] = conv3x3_s2_backward(
        a1.shape, cols2, bb["backbone.conv2.weight"], da2)
    d1 = (d1 + da1.swapaxes(1, 2).reshape(a1.shape)) * (pre1 > 0)
    _, grads["backbone.conv1.weight"], grads["backbone.conv1.bias"] = conv3x3_s2_backward(
        frames.shape, cols1, bb["backbone.conv1.weight"], d1)
    return loss, grads


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        for name, p in self.params.items():
            g = grads[name] + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= self.lr * v


# --- evaluation ------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray


def confusion_metrics(y_true, y_pred, n_classes):
    conf = np.zeros((n_classes, n_classes), np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    totals = conf.sum(axis=1)
    per_class = np.divide(np.diag(conf), totals, out=np.zeros(n_classes), where=totals > 0)
    acc = float(np.trace(conf) / max(conf.sum(), 1))
    return EvalResult(acc, per_class, conf)


def predict(model, x, batch=64):
    out = [forward(model, x[i:i + batch]).argmax(axis=-1) for i in range(0, len(x), batch)]
    return np.concatenate(out)


def evaluate(model, x, y, n_classes=len(CLASSES)):
    return confusion_metrics(y, predict(model, x), n_classes)


# --- training loop ------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_acc: float
    per_class: tuple


def train(dataset, train_cfg=None, run_cfg=None, progress=None):
    """Train on ``dataset``; returns ``(model, trace)``.

    ``progress``, if given, is called with each :class:`EpochMetrics`.
    """
    train_cfg = train_cfg or TrainConfig()
    run_cfg = run_cfg or TINY_RUN_CONFIG
    rng = np.random.default_rng(train_cfg.seed)
    frames = dataset.x_train.shape[2]
    model = build_model(frames, run_cfg, train_cfg, rng, dataset.n_classes)
    params = model.named()
    opt = SGD(params, train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)
    n = len(dataset.y_train)
    trace = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            loss, grads = forward(model, dataset.x_train[idx], dataset.y_train[idx], True)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                    f"lr={train_cfg.lr}, mode={train_cfg.mode}")
            opt.step(grads)
            total += loss * len(idx)
            seen += len(idx)
        res = evaluate(model, dataset.x_test, dataset.y_test, dataset.n_classes)
        m = EpochMetrics(epoch, total / seen, res.accuracy, tuple(float(a) for a in res.per_class))
        trace.append(m)
        log.info("epoch %d loss %.4f test_acc %.4f", epoch, m.train_loss, m.test_acc)
        if progress is not None:
            progress(m)
    return model, trace


def write_trace_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_acc"] + [f"acc_{c}" for c in CLASSES])
        for m in trace:
            w.writerow([m.epoch, f"{m.train_loss:.6f}", f"{m.test_acc:.4f}"]
                       + [f"{a:.4f}" for a in m.per_class])


# --- persistence -----------------------------------------------------------------------------

def save_model(model, directory):
    config = dict(line.split("=", 1) for line in format_run_config(model.run_cfg).splitlines())
    for f in dataclasses.fields(model.train_cfg):
        config[f"train.{f.name}"] = getattr(model.train_cfg, f.name)
    save_checkpoint(directory, model.named(), config)


def load_model(directory):
    tensors, config = load_checkpoint(directory)
    run_text = "".join(f"{k}={v}\n" for k, v in config.items() if not k.startswith("train."))
    run_cfg = parse_run_config(run_text, source=str(directory))
    tfields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    tkw = {}
    for k, v in config.items():
        if k.startswith("train."):
            name = k[len("train."):]
            kind = tfields.get(name)
            if kind == "bool":
                tkw[name] = v == "True"
            elif kind == "int":
                tkw[name] = int(v)
            elif kind == "float":
                tkw[name] = float(v)
            elif kind is not None:
                tkw[name] = v
    train_cfg = TrainConfig(**tkw)
    backbone = {k: v.astype(np.float64) for k, v in tensors.items() if k.startswith("backbone.")}
    kp = {k[len("kpsem."):]: v for k, v in tensors.items() if k.startswith("kpsem.")}
    kpsem = KpsemParams.from_named(kp) if kp else None
    return Model(backbone, kpsem, tensors["classifier.weight"].astype(np.float64),
                 tensors["classifier.bias"].astype(np.float64), run_cfg, train_cfg)
