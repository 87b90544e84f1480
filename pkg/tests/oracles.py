"""Naive nested-loop reference implementations.

Written against the definitions only, with plain Python loops and ``math``.
Arrays are used for storage, never for vectorised arithmetic, so a shared
bug with the package code is unlikely.
"""
import math

import numpy as np


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def separation_bias(frame, net, k):
    """(d_row, d_col) for one C x H x W frame."""
    C, H, W = frame.shape
    means = []
    for c in range(C):
        acc = 0.0
        for r in range(H):
            for q in range(W):
                acc += frame[c, r, q]
        means.append(acc / (H * W))
    hidden = []
    for j in range(net.w1.shape[0]):
        z = net.b1[j]
        for c in range(C):
            z += net.w1[j, c] * means[c]
        hidden.append(max(z, 0.0))
    out = []
    for o in range(2):
        z = net.b2[o]
        for j in range(len(hidden)):
            z += net.w2[o, j] * hidden[j]
        out.append(math.tanh(z))
    return H / (2 * k) * out[0], W / (2 * k) * out[1]


def grid_edges(n, k, bias):
    shift = math.floor(bias + 0.5)
    edges = [0]
    for j in range(1, k):
        line = math.floor(j * n / k + 0.5) + shift
        line = min(max(line, j), n - k + j)
        edges.append(line)
    edges.append(n)
    return edges


def regions(H, W, k, bias):
    rows = grid_edges(H, k, bias[0])
    cols = grid_edges(W, k, bias[1])
    out = []
    for a in range(k):
        for b in range(k):
            out.append((rows[a], rows[a + 1], cols[b], cols[b + 1]))
    return out


def region_max(frame, rect):
    r0, r1, c0, c1 = rect
    best, at = -math.inf, None
    for r in range(r0, r1):
        for q in range(c0, c1):
            if frame[r, q] > best:
                best, at = frame[r, q], (r, q)
    return at, best


def region_mean(frame, rect):
    r0, r1, c0, c1 = rect
    acc = 0.0
    for r in range(r0, r1):
        for q in range(c0, c1):
            acc += frame[r, q]
    return acc / ((r1 - r0) * (c1 - c0))


def arese(F, net, k, epsilon=0.1):
    """RKPS ``(K, C, T-1, 2)`` for one C x T x H x W video."""
    C, T, H, W = F.shape
    K = k * k
    rects = [regions(H, W, k, separation_bias(F[:, t], net, k)) for t in range(T)]
    I = [[[None] * T for _ in range(C)] for _ in range(K)]
    V = [[[0.0] * T for _ in range(C)] for _ in range(K)]
    M = [[[0.0] * T for _ in range(C)] for _ in range(K)]
    for t in range(T):
        for c in range(C):
            for r in range(K):
                I[r][c][t], V[r][c][t] = region_max(F[c, t], rects[t][r])
                M[r][c][t] = region_mean(F[c, t], rects[t][r])
    out = np.zeros((K, C, T - 1, 2))
    for c in range(C):
        for i in range(T - 1):
            wr = softmax_list([0.5 * (M[r][c][i] + M[r][c][i + 1]) for r in range(K)])
            for a in range(K):
                aff = [1.0 / (abs(V[a][c][i] - V[b][c][i + 1]) + epsilon) for b in range(K)]
                w = softmax_list(aff)
                s = [0.0, 0.0]
                for b in range(K):
                    for comp in range(2):
                        s[comp] += w[b] * (I[b][c][i + 1][comp] - I[a][c][i][comp])
                for comp in range(2):
                    out[a, c, i, comp] = wr[a] * s[comp]
    return out


def conv_1x3_halve(x, w, bias, relu):
    Cin, A, B = x.shape
    Cout = w.shape[0]
    Bo = (B - 1) // 2 + 1
    y = np.zeros((Cout, A, Bo))
    for o in range(Cout):
        for a in range(A):
            for b in range(Bo):
                z = bias[o]
                for c in range(Cin):
                    for d in range(3):
                        q = 2 * b + d - 1
                        if 0 <= q < B:
                            z += w[o, c, 0, d] * x[c, a, q]
                y[o, a, b] = max(z, 0.0) if relu else z
    return y


def kpsem(F, params, k, epsilon=0.1, relu=True):
    """Temporal feature ``((C/4)*(T-1),)`` for one C x T x H x W video."""
    C, T = F.shape[:2]
    K = k * k
    de = params.embed_w[0].shape[0]
    e = np.zeros((C, T - 1, de))
    for g, net in enumerate(params.sep):
        rk = arese(F, net, k, epsilon)
        for c in range(C):
            for i in range(T - 1):
                flat = [rk[r, c, i, comp] for r in range(K) for comp in range(2)]
                for d in range(de):
                    z = params.embed_b[g][d]
                    for j in range(2 * K):
                        z += params.embed_w[g][d, j] * flat[j]
                    e[c, i, d] += z
    h = conv_1x3_halve(e, params.conv1_w, params.conv1_b, relu)
    h = conv_1x3_halve(h, params.conv2_w, params.conv2_b, relu)
    out = []
    for c in range(h.shape[0]):
        for i in range(h.shape[1]):
            out.append(sum(h[c, i, b] for b in range(h.shape[2])) / h.shape[2])
    return np.array(out)
