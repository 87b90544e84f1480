"""Multi-set embedding, dimension reduction and feature fusion."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .arese import arese_forward
from .errors import ConfigError, NeedTwoFramesError, ShapeError
from .partition import SeparationNet
from .tensor import conv_1x3_halve, linear_forward


def _uniform(rng, fan_in, shape):
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, shape)


@dataclass
class KpsemParams:
    sep: list
    embed_w: list
    embed_b: list
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    classifier_w: np.ndarray | None = None
    classifier_b: np.ndarray | None = None

    @property
    def G(self):
        return len(self.sep)

    @property
    def channels(self):
        return self.conv1_w.shape[1]

    @property
    def embed_dim(self):
        return self.embed_w[0].shape[0]

    @property
    def K(self):
        return self.embed_w[0].shape[1] // 2

    def named(self):
        """Name -> array view of every trainable tensor (shared storage)."""
        out = {}
        for g, net in enumerate(self.sep):
            out[f"sep{g}.w1"] = net.w1
            out[f"sep{g}.b1"] = net.b1
            out[f"sep{g}.w2"] = net.w2
            out[f"sep{g}.b2"] = net.b2
        for g, (w, b) in enumerate(zip(self.embed_w, self.embed_b)):
            out[f"embed{g}.weight"] = w
            out[f"embed{g}.bias"] = b
        out["conv1.weight"] = self.conv1_w
        out["conv1.bias"] = self.conv1_b
        out["conv2.weight"] = self.conv2_w
        out["conv2.bias"] = self.conv2_b
        if self.classifier_w is not None:
            out["classifier.weight"] = self.classifier_w
            out["classifier.bias"] = self.classifier_b
        return out

    @classmethod
    def from_named(cls, tensors):
        G = 0
        while f"embed{G}.weight" in tensors:
            G += 1
        if G == 0:
            raise KeyError("no embed0.weight in parameter set")
        t = {k: np.asarray(v, np.float64) for k, v in tensors.items()}
        return cls(
            sep=[SeparationNet(t[f"sep{g}.w1"], t[f"sep{g}.b1"], t[f"sep{g}.w2"], t[f"sep{g}.b2"])
                 for g in range(G)],
            embed_w=[t[f"embed{g}.weight"] for g in range(G)],
            embed_b=[t[f"embed{g}.bias"] for g in range(G)],
            conv1_w=t["conv1.weight"], conv1_b=t["conv1.bias"],
            conv2_w=t["conv2.weight"], conv2_b=t["conv2.bias"],
            classifier_w=t.get("classifier.weight"), classifier_b=t.get("classifier.bias"),
        )

    def copy(self):
        return KpsemParams.from_named({k: v.copy() for k, v in self.named().items()})


def init_params(channels, cfg, rng):
    """Fresh parameters, uniform in +-1/sqrt(fan_in)."""
    if channels % 4:
        raise ConfigError(f"channel count must be divisible by 4, got {channels}")
    c2, c4, de, k2 = channels // 2, channels // 4, cfg.embed_dim, 2 * cfg.K
    sep = [SeparationNet.init(channels, rng) for _ in range(cfg.G)]
    embed_w = [_uniform(rng, k2, (de, k2)) for _ in range(cfg.G)]
    embed_b = [_uniform(rng, k2, de) for _ in range(cfg.G)]
    return KpsemParams(
        sep=sep, embed_w=embed_w, embed_b=embed_b,
        conv1_w=_uniform(rng, 3 * channels, (c2, channels, 1, 3)),
        conv1_b=_uniform(rng, 3 * channels, c2),
        conv2_w=_uniform(rng, 3 * c2, (c4, c2, 1, 3)),
        conv2_b=_uniform(rng, 3 * c2, c4),
    )


def init_classifier(params, in_dim, n_classes, rng):
    params.classifier_w = _uniform(rng, in_dim, (n_classes, in_dim))
    params.classifier_b = _uniform(rng, in_dim, n_classes)
    return params


def temporal_extent(channels, frames):
    return (channels // 4) * (frames - 1)


def check_params(params, cfg, channels):
    if channels % 4:
        raise ConfigError(f"channel count must be divisible by 4, got {channels}")
    if params.G != cfg.G or params.K != cfg.K or params.embed_dim != cfg.embed_dim:
        raise ConfigError(
            f"parameters (G={params.G}, K={params.K}, embed_dim={params.embed_dim}) do not "
            f"match config (G={cfg.G}, K={cfg.K}, embed_dim={cfg.embed_dim})")
    if params.channels != channels:
        raise ConfigError(f"parameters expect {params.channels} channels, input has {channels}")


def embed_inputs(rkps):
    """``(..., K, C, T-1, 2)`` -> ``(..., C, T-1, K*2)``, region-major then (row, col)."""
    x = np.moveaxis(rkps, -4, -2)
    return x.reshape(x.shape[:-2] + (-1,))


def multiset_embed(rkps_list, params):
    if len(rkps_list) != params.G:
        raise ShapeError(f"got {len(rkps_list)} RKPS tensors for {params.G} sets")
    shape = rkps_list[0].shape
    out = None
    for g, rkps in enumerate(rkps_list):
        if rkps.shape != shape:
            raise ShapeError(f"set {g}: RKPS {rkps.shape} vs {shape}")
        e = linear_forward(embed_inputs(rkps), params.embed_w[g], params.embed_b[g])
        out = e if out is None else out + e
    return out


def reduce_dimensions(e, params, relu=True):
    e = np.asarray(e, np.float64)
    C, de = e.shape[-3], e.shape[-1]
    if C % 4 or de % 4:
        raise ConfigError(f"need C and embed_dim divisible by 4, got C={C}, embed_dim={de}")
    h = conv_1x3_halve(e, params.conv1_w, params.conv1_b)
    if relu:
        h = np.maximum(h, 0.0)
    h = conv_1x3_halve(h, params.conv2_w, params.conv2_b)
    if relu:
        h = np.maximum(h, 0.0)
    pooled = h.mean(axis=-1)
    return pooled.reshape(pooled.shape[:-2] + (-1,))


def kpsem_forward(F, params, cfg, threads=1):
    """Temporal feature ``(..., (C/4)*(T-1))`` for ``F`` of shape ``(..., C, T, H, W)``."""
    F = np.asarray(F, np.float64)
    if F.ndim < 4:
        raise ShapeError(f"expected (..., C, T, H, W), got rank {F.ndim}")
    C, T = F.shape[-4:-2]
    if T < 2:
        raise NeedTwoFramesError(T)
    check_params(params, cfg, C)
    if threads > 1 and params.G > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rkps = list(pool.map(lambda net: arese_forward(F, net, cfg), params.sep))
    else:
        rkps = [arese_forward(F, net, cfg) for net in params.sep]
    return reduce_dimensions(multiset_embed(rkps, params), params, cfg.reduction_relu)


def fuse_features(f_out, p_out):
    f_out = np.asarray(f_out, np.float64)
    p_out = np.asarray(p_out, np.float64)
    if f_out.shape[-1] == 0 or p_out.shape[-1] == 0:
        raise ConfigError("cannot fuse zero-extent feature vectors")
    if not (np.all(np.isfinite(f_out)) and np.all(np.isfinite(p_out))):
        raise ValueError("non-finite features")
    return np.concatenate([f_out, p_out], axis=-1)
