"""Analytic backward passes, the soft (differentiable) surrogate, and gradcheck.

Hard mode runs the exact forward. Key-point coordinates and region lines are
piecewise constant there, so they carry zero gradient and the separation nets
receive none; the max value routes its adjoint to the argmax cell.

Soft mode swaps the argmax for a region-restricted softmax (temperature
``tau_point``) and the integer region lines for sigmoid membership
(temperature ``tau_region``), which makes every parameter trainable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arese import (KeyPointField, key_point_shifts, location_differences, masked_argmax,
                    region_means, shift_scale, value_gaps)
from .config import RunConfig
from .errors import ConfigError, NeedTwoFramesError, ShapeError
from .head import check_params, embed_inputs, init_classifier, init_params
from .partition import baseline_lines, bias_from_means, bias_scale, build_partition
from .tensor import conv_1x3_halve, conv_1x3_halve_backward, softmax_axis, softmax_backward

ZERO_BY_DESIGN = "zero-gradient (by design)"


@dataclass(frozen=True)
class SoftModeConfig:
    tau_point: float = 0.1
    tau_region: float = 0.25

    def __post_init__(self):
        if not (self.tau_point > 0 and self.tau_region > 0):
            raise ConfigError(f"soft-mode temperatures must be > 0, got {self}")

    @classmethod
    def from_run(cls, cfg):
        return cls(cfg.soft_tau_point, cfg.soft_tau_region)


@dataclass
class SetTape:
    gap: np.ndarray
    pre: np.ndarray
    th: np.ndarray
    scale: np.ndarray
    bias: np.ndarray
    masks: np.ndarray
    coords: np.ndarray
    values: np.ndarray
    deltas: np.ndarray
    gaps: np.ndarray
    affinity: np.ndarray
    weights: np.ndarray
    shifts: np.ndarray
    means: np.ndarray
    regional: np.ndarray
    rkps: np.ndarray
    flat_idx: np.ndarray | None = None
    soft: dict = field(default_factory=dict)


@dataclass
class GradTape:
    mode: str
    cfg: object
    soft_cfg: SoftModeConfig | None
    F: np.ndarray
    sets: list
    embed_x: list
    embedding: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    p_out: np.ndarray


# --- soft region membership --------------------------------------------------

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_lines(n, k, offset):
    """Continuous interior lines ``(..., k-1)`` and the mask of unclamped entries."""
    j = np.arange(1, k)
    raw = baseline_lines(n, k) + np.asarray(offset)[..., None]
    lo, hi = j, n - k + j
    return np.clip(raw, lo, hi), (raw > lo) & (raw < hi)


def _soft_axis_logmember(lines, n, k, tau):
    """Log membership of cells ``0..n-1`` in the k bands of one axis: ``(..., k, n)``."""
    centers = np.arange(n) + 0.5
    x = (centers - lines[..., :, None]) / tau  # (..., k-1, n)
    lead = lines.shape[:-1]
    logm = np.zeros(lead + (k, n))
    logm[..., 1:, :] += _log_sigmoid(x)
    logm[..., :-1, :] += _log_sigmoid(-x)
    return logm, x


def _soft_axis_backward(dlogm, x, tau):
    # gradient of the band log-memberships w.r.t. the interior lines
    dx = dlogm[..., 1:, :] * _sigmoid(-x) - dlogm[..., :-1, :] * _sigmoid(x)
    return -dx.sum(axis=-1) / tau


def soft_masks(H, W, k, bias, tau_region):
    """Soft region membership ``(..., K, H, W)`` plus the cache for backward."""
    rows, act_r = soft_lines(H, k, bias[..., 0])
    cols, act_c = soft_lines(W, k, bias[..., 1])
    logr, xr = _soft_axis_logmember(rows, H, k, tau_region)
    logc, xc = _soft_axis_logmember(cols, W, k, tau_region)
    logm = logr[..., :, None, :, None] + logc[..., None, :, None, :]
    logm = logm.reshape(logm.shape[:-4] + (k * k, H, W))
    cache = dict(xr=xr, xc=xc, act_r=act_r, act_c=act_c, k=k, H=H, W=W)
    return logm, cache


def soft_key_points(F, logm, tau_point):
    """Softmax-weighted expected coordinates and values per region."""
    H, W = F.shape[-2:]
    logits = F[..., None, :, :, :, :] / tau_point + np.swapaxes(logm, -4, -3)[..., :, None, :, :, :]
    flat = logits.reshape(logits.shape[:-2] + (H * W,))
    probs = softmax_axis(flat, -1)
    rr, cc = np.divmod(np.arange(H * W), W)
    coords = np.stack([probs @ rr.astype(np.float64), probs @ cc.astype(np.float64)], axis=-1)
    fflat = F.reshape(F.shape[:-2] + (H * W,))[..., None, :, :, :]
    values = (probs * fflat).sum(axis=-1)
    return coords, values, probs


# --- forward with tape ---------------------------------------------------------

def _set_forward(F, net, cfg, mode, soft_cfg):
    C, T, H, W = F.shape[-4:]
    k = cfg.k
    scale = bias_scale(H, W, k)
    gap = np.moveaxis(F.mean(axis=(-2, -1)), -2, -1)  # (..., T, C)
    bias, pre, th = bias_from_means(gap, net, scale)
    soft = {}
    flat_idx = None
    if mode == "hard":
        masks = build_partition(H, W, k, bias).masks()
        flat_idx, values = masked_argmax(F, masks)
        coords = np.stack(np.divmod(flat_idx, W), axis=-1).astype(np.float64)
    else:
        logm, cache = soft_masks(H, W, k, bias, soft_cfg.tau_region)
        masks = np.exp(logm)
        coords, values, probs = soft_key_points(F, logm, soft_cfg.tau_point)
        soft = dict(cache, probs=probs)
    kp = KeyPointField(coords, values)
    deltas = location_differences(kp).astype(np.float64)
    gaps = value_gaps(values)
    affinity = 1.0 / (np.abs(gaps) + cfg.epsilon)
    weights = softmax_axis(affinity, -3)
    shifts = key_point_shifts(deltas, weights)
    if cfg.normalize_shifts:
        shifts = shifts * shift_scale(H, W)
    means = region_means(F, masks)
    regional = softmax_axis(0.5 * (means[..., :-1] + means[..., 1:]), -3)
    rkps = regional[..., None] * shifts
    return SetTape(gap, pre, th, scale, bias, masks, coords, values, deltas, gaps, affinity,
                   weights, shifts, means, regional, rkps, flat_idx, soft)


def forward_with_tape(F, params, cfg, mode="hard", soft_cfg=None):
    """Run the module, recording what :func:`kpsem_backward` needs."""
    if mode not in ("hard", "soft"):
        raise ConfigError(f"mode must be 'hard' or 'soft', got {mode!r}")
    F = np.asarray(F, np.float64)
    if F.ndim < 4:
        raise ShapeError(f"expected (..., C, T, H, W), got rank {F.ndim}")
    C, T, H, W = F.shape[-4:]
    if T < 2:
        raise NeedTwoFramesError(T)
    if H < cfg.k or W < cfg.k:
        raise ShapeError(f"frame {H}x{W} too small for a {cfg.k}x{cfg.k} grid")
    check_params(params, cfg, C)
    if mode == "soft" and soft_cfg is None:
        soft_cfg = SoftModeConfig.from_run(cfg)
    sets = [_set_forward(F, net, cfg, mode, soft_cfg) for net in params.sep]
    embed_x = [embed_inputs(s.rkps) for s in sets]
    e = None
    for g, x in enumerate(embed_x):
        y = x @ params.embed_w[g].T + params.embed_b[g]
        e = y if e is None else e + y
    pre1 = conv_1x3_halve(e, params.conv1_w, params.conv1_b)
    h1 = np.maximum(pre1, 0.0) if cfg.reduction_relu else pre1
    pre2 = conv_1x3_halve(h1, params.conv2_w, params.conv2_b)
    h2 = np.maximum(pre2, 0.0) if cfg.reduction_relu else pre2
    pooled = h2.mean(axis=-1)
    p_out = pooled.reshape(pooled.shape[:-2] + (-1,))
    tape = GradTape(mode, cfg, soft_cfg, F, sets, embed_x, e, pre1, h1, pre2, h2, p_out)
    return p_out, tape


def soft_forward(F, params, cfg, soft_cfg=None):
    if soft_cfg is None:
        soft_cfg = SoftModeConfig.from_run(cfg)
    return forward_with_tape(F, params, cfg, "soft", soft_cfg)[0]


# --- backward ------------------------------------------------------------------

def _lead_sum(a, keep):
    return a.sum(axis=tuple(range(a.ndim - keep))) if a.ndim > keep else a


def _outer_sum(dy, x):
    """``sum over leading axes of dy[..., o] * x[..., i]`` -> ``(o, i)``."""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _set_backward(st, drkps, F, net, cfg, mode, soft_cfg, dF):
    H, W = F.shape[-2:]
    dregional = (drkps * st.shifts).sum(axis=-1)
    dshifts = drkps * st.regional[..., None]
    if cfg.normalize_shifts:
        dshifts = dshifts * shift_scale(H, W)

    # regional weights: softmax over K of pair-averaged region means
    dpairs = softmax_backward(st.regional, dregional, -3)
    dmeans = np.zeros_like(st.means)
    dmeans[..., :-1] += 0.5 * dpairs
    dmeans[..., 1:] += 0.5 * dpairs
    m = st.masks.astype(np.float64)
    counts = np.swapaxes(m.sum(axis=(-2, -1)), -2, -1)[..., :, None, :]
    gmean = dmeans / counts
    H, W = F.shape[-2:]
    mf = m.reshape(m.shape[:-2] + (H * W,))  # (..., T, K, HW)
    gt = np.moveaxis(gmean, -1, -3)  # (..., T, K, C)
    dF += np.swapaxes(np.matmul(np.swapaxes(gt, -1, -2), mf), -3, -2).reshape(dF.shape)
    dmask = None
    if mode == "soft":
        ff = np.swapaxes(F.reshape(F.shape[:-2] + (H * W,)), -3, -2)  # (..., T, C, HW)
        dmask = np.matmul(gt, ff).reshape(m.shape)
        dmask -= np.swapaxes((gmean * st.means).sum(axis=-2), -2, -1)[..., None, None]

    # shift weights and key point shifts
    dweights = (dshifts[..., :, None, :, :, :] * st.deltas).sum(axis=-1)
    daff = softmax_backward(st.weights, dweights, -3)
    dgaps = -daff * np.sign(st.gaps) * st.affinity ** 2
    dvalues = np.zeros_like(st.values)
    dvalues[..., :-1] += dgaps.sum(axis=-3)
    dvalues[..., 1:] -= dgaps.sum(axis=-4)

    grads = {}
    if mode == "hard":
        HW = H * W
        onehot = st.flat_idx[..., None] == np.arange(HW)
        scat = (onehot * dvalues[..., None]).sum(axis=-4)  # (..., C, T, HW)
        dF += scat.reshape(dF.shape)
        grads["w1"] = np.zeros_like(net.w1)
        grads["b1"] = np.zeros_like(net.b1)
        grads["w2"] = np.zeros_like(net.w2)
        grads["b2"] = np.zeros_like(net.b2)
        return grads

    ddeltas = st.weights[..., None] * dshifts[..., :, None, :, :, :]
    dcoords = np.zeros_like(st.coords)
    dcoords[..., 1:, :] += ddeltas.sum(axis=-5)
    dcoords[..., :-1, :] -= ddeltas.sum(axis=-4)

    sd = st.soft
    probs = sd["probs"]  # (..., K, C, T, HW)
    HW = H * W
    rr, cc = np.divmod(np.arange(HW), W)
    fflat = F.reshape(F.shape[:-2] + (HW,))[..., None, :, :, :]
    dprobs = (dcoords[..., 0:1] * rr + dcoords[..., 1:2] * cc + dvalues[..., None] * fflat)
    dlogits = softmax_backward(probs, dprobs, -1)
    dF += ((dvalues[..., None] * probs).sum(axis=-4)).reshape(dF.shape)
    dF += (dlogits.sum(axis=-4) / soft_cfg.tau_point).reshape(dF.shape)
    dlogm = np.swapaxes(dlogits.sum(axis=-3), -3, -2).reshape(st.masks.shape)
    dlogm = dlogm + dmask * st.masks

    k = sd["k"]
    shaped = dlogm.reshape(dlogm.shape[:-3] + (k, k, H, W))
    dlogr = shaped.sum(axis=(-3, -1))  # (..., T, k, H)
    dlogc = shaped.sum(axis=(-4, -2))  # (..., T, k, W)
    dlines_r = _soft_axis_backward(dlogr, sd["xr"], soft_cfg.tau_region) * sd["act_r"]
    dlines_c = _soft_axis_backward(dlogc, sd["xc"], soft_cfg.tau_region) * sd["act_c"]
    dbias = np.stack([dlines_r.sum(axis=-1), dlines_c.sum(axis=-1)], axis=-1)

    dz = dbias * st.scale * (1.0 - st.th ** 2)
    hidden = np.maximum(st.pre, 0.0)
    grads["w2"] = _outer_sum(dz, hidden)
    grads["b2"] = _lead_sum(dz, 1)
    dpre = (dz @ net.w2) * (st.pre > 0)
    grads["w1"] = _outer_sum(dpre, st.gap)
    grads["b1"] = _lead_sum(dpre, 1)
    dgap = dpre @ net.w1  # (..., T, C)
    dF += np.moveaxis(dgap, -1, -2)[..., None, None] / (H * W)
    return grads


def kpsem_backward(tape, upstream, params):
    """Adjoints of all module parameters and of the input features.

    ``upstream`` is the adjoint of the temporal feature. Returns
    ``(grads, dF)`` with ``grads`` keyed like :meth:`KpsemParams.named`.
    """
    upstream = np.asarray(upstream, np.float64)
    if upstream.shape != tape.p_out.shape:
        raise ShapeError(f"upstream {upstream.shape} vs temporal feature {tape.p_out.shape}")
    cfg = tape.cfg
    grads = {}
    dh2 = np.repeat(upstream.reshape(tape.h2.shape[:-1])[..., None] / tape.h2.shape[-1],
                    tape.h2.shape[-1], axis=-1)
    if cfg.reduction_relu:
        dh2 = dh2 * (tape.pre2 > 0)
    dh1, grads["conv2.weight"], grads["conv2.bias"] = conv_1x3_halve_backward(
        tape.h1, params.conv2_w, dh2)
    if cfg.reduction_relu:
        dh1 = dh1 * (tape.pre1 > 0)
    de, grads["conv1.weight"], grads["conv1.bias"] = conv_1x3_halve_backward(
        tape.embedding, params.conv1_w, dh1)

    F = tape.F
    dF = np.zeros_like(F)
    K = cfg.K
    for g, (st, x) in enumerate(zip(tape.sets, tape.embed_x)):
        grads[f"embed{g}.weight"] = _outer_sum(de, x)
        grads[f"embed{g}.bias"] = _lead_sum(de, 1)
        dx = de @ params.embed_w[g]
        drkps = np.moveaxis(dx.reshape(dx.shape[:-1] + (K, 2)), -2, -4)
        sg = _set_backward(st, drkps, F, params.sep[g], cfg, tape.mode, tape.soft_cfg, dF)
        for name, v in sg.items():
            grads[f"sep{g}.{name}"] = v
    return grads, dF


# --- classifier loss -------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean cross-entropy and its adjoint w.r.t. the logits."""
    logits = np.asarray(logits, np.float64)
    labels = np.asarray(labels)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def classifier_loss(f_out, p_out, labels, params):
    """Loss of the linear classifier over fused ``[f_out, p_out]``; returns adjoints too."""
    fused = np.concatenate([f_out, p_out], axis=-1)
    logits = fused @ params.classifier_w.T + params.classifier_b
    loss, dlogits = cross_entropy(logits, labels)
    grads = {
        "classifier.weight": dlogits.T @ fused,
        "classifier.bias": dlogits.sum(axis=0),
    }
    dfused = dlogits @ params.classifier_w
    cs = f_out.shape[-1]
    return loss, grads, dfused[..., :cs], dfused[..., cs:]


# --- finite-difference verification ----------------------------------------------

@dataclass
class BlockCheck:
    name: str
    max_rel_err: float
    status: str
    n_checked: int = 0
    n_bad: int = 0

    @property
    def failed(self):
        return self.status == "FAIL"

    def line(self):
        return f"{self.name} {self.max_rel_err:.3e} {self.status}"


@dataclass
class GradReport:
    blocks: list

    @property
    def passed(self):
        return not any(b.failed for b in self.blocks)

    @property
    def max_rel_err(self):
        return max((b.max_rel_err for b in self.blocks), default=0.0)

    def text(self):
        return "".join(b.line() + "\n" for b in self.blocks)


# gradients below this multiple of the difference resolution count as tiny
TINY_GRADIENT = 1e3


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(f, params, grads, seed=0, h=1e-5, tol=1e-4, n_samples=12,
                      suspect=None, skip=None):
    """Central-difference check of ``grads`` against ``f()``.

    ``params`` maps block names to arrays that ``f`` reads; entries are
    perturbed in place and restored. A mismatch is reported as ``flagged``
    instead of failing when ``suspect(name, index)`` is true, or when the
    absolute gap is below what a central difference can resolve at this
    ``h`` (a few ulps of ``f`` divided by ``h``) and the gradient itself is
    within ``TINY_GRADIENT`` times that resolution. Flagged errors still count
    towards the block's maximum. Blocks listed in ``skip`` (name -> status)
    are not evaluated.
    """
    rng = np.random.default_rng(seed)
    skip = skip or {}
    blocks = []
    for name, arr in params.items():
        if name in skip:
            blocks.append(BlockCheck(name, 0.0, skip[name]))
            continue
        g = np.asarray(grads[name])
        if g.shape != arr.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {arr.shape}")
        n = min(arr.size, n_samples)
        picks = np.sort(rng.choice(arr.size, size=n, replace=False))
        worst, bad, flagged = 0.0, 0, False
        for flat in picks:
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = relative_error(float(g[idx]), numeric)
            worst = max(worst, err)
            if err >= tol:
                # resolution of the central difference; only excuses gradients
                # small enough that this resolution dominates their relative error
                floor = 4.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / h
                tiny = max(abs(float(g[idx])), abs(numeric)) < TINY_GRADIENT * floor
                if (tiny and abs(float(g[idx]) - numeric) <= floor) or (
                        suspect is not None and suspect(name, idx)):
                    flagged = True
                else:
                    bad += 1
        status = "FAIL" if bad else ("flagged" if flagged else "ok")
        blocks.append(BlockCheck(name, worst, status, n, bad))
    return GradReport(blocks)


# --- a small end-to-end gradcheck problem ------------------------------------------

GRADCHECK_SHAPE = dict(batch=2, C=4, T=3, H=6, W=6, spatial=3, classes=3)


def near_tie_cells(F, masks, margin):
    """Cells within ``margin`` of their region's maximum when the top two are that close."""
    m = np.swapaxes(masks, -4, -3)[..., :, None, :, :, :]
    fx = np.where(m, F[..., None, :, :, :, :], -np.inf)
    flat = fx.reshape(fx.shape[:-2] + (-1,))
    top2 = -np.partition(-flat, 1, axis=-1)[..., :2]
    close = (top2[..., 0] - top2[..., 1]) < margin
    hot = close[..., None, None] & (fx >= top2[..., 0, None, None] - margin)
    return hot.any(axis=-5)


def _separated(tape, h):
    """True when no kink, tie or dead unit lies within reach of an ``h`` perturbation."""
    margin = 10 * h
    kink = 100 * h
    for st in tape.sets:
        if tape.mode == "hard":
            if near_tie_cells(tape.F, st.masks, margin).any():
                return False
            frac = st.bias - np.floor(st.bias)
            if np.any(np.abs(frac - 0.5) < 1e-3):
                return False
        elif np.any(np.abs(st.pre) < kink) or not np.any(st.pre > 0):
            # a dead hidden layer would make the separation-net check vacuous
            return False
        if np.any(np.abs(st.gaps) < margin):
            return False
    if tape.cfg.reduction_relu:
        if np.any(np.abs(tape.pre1) < kink) or np.any(np.abs(tape.pre2) < kink):
            return False
        # every output feature must depend on its inputs, or the check is vacuous
        if not np.all((tape.pre2 > 0).any(axis=-1)):
            return False
    return True


def gradcheck_problem(seed, mode="soft", cfg=None, h=1e-5, shape=None):
    """Random tiny instance with a classifier loss, rejecting near-kink draws.

    Returns ``(f, tensors, grads, skip)`` ready for :func:`finite_diff_check`.
    """
    cfg = cfg or RunConfig(K=4, G=2, embed_dim=8)
    s = dict(GRADCHECK_SHAPE, **(shape or {}))
    C, T = s["C"], s["T"]
    in_dim = s["spatial"] + (C // 4) * (T - 1)
    soft_cfg = SoftModeConfig.from_run(cfg) if mode == "soft" else None
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        params = init_params(C, cfg, rng)
        init_classifier(params, in_dim, s["classes"], rng)
        F = rng.normal(size=(s["batch"], C, T, s["H"], s["W"]))
        f_out = rng.normal(size=(s["batch"], s["spatial"]))
        labels = rng.integers(s["classes"], size=s["batch"])
        p_out, tape = forward_with_tape(F, params, cfg, mode, soft_cfg)
        if _separated(tape, h):
            break
    else:
        raise RuntimeError(f"no well-separated gradcheck instance for seed {seed}")

    def f():
        p, _ = forward_with_tape(F, params, cfg, mode, soft_cfg)
        return classifier_loss(f_out, p, labels, params)[0]

    _, cgrads, _, dp = classifier_loss(f_out, p_out, labels, params)
    grads, dF = kpsem_backward(tape, dp, params)
    grads.update(cgrads)
    grads["input"] = dF
    tensors = params.named()
    tensors["input"] = F
    skip = {}
    if mode == "hard":
        skip = {name: ZERO_BY_DESIGN for name in tensors if name.startswith("sep")}
    return f, tensors, grads, skip


def run_gradcheck(seed=0, mode="soft", h=1e-5, tol=1e-4, cfg=None, n_samples=12):
    f, tensors, grads, skip = gradcheck_problem(seed, mode, cfg, h)
    return finite_diff_check(f, tensors, grads, seed=seed, h=h, tol=tol,
                             n_samples=n_samples, skip=skip)
