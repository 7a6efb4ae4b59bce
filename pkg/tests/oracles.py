"""Slow, loop-based reference implementations used only by the tests."""

import math

import numpy as np


def reflect_index(j, n):
    if n == 1:
        return 0
    while j < 0 or j >= n:
        j = -j if j < 0 else 2 * (n - 1) - j
    return j


def naive_stft(x, frame_len, hop, window):
    x = np.asarray(x, dtype=np.float64)
    pad = frame_len // 2
    padded = np.array([x[reflect_index(j, len(x))] for j in range(-pad, len(x) + pad)])
    n_frames = 1 + (len(padded) - frame_len) // hop
    n_bins = frame_len // 2 + 1
    k = np.arange(n_bins)[:, None]
    n = np.arange(frame_len)[None, :]
    basis = np.exp(-2j * np.pi * k * n / frame_len)  # explicit O(N^2) DFT matrix
    out = np.zeros((n_bins, n_frames), dtype=complex)
    for t in range(n_frames):
        frame = padded[t * hop: t * hop + frame_len] * window
        out[:, t] = basis @ frame
    return out


def slaney_hz_to_mel(f):
    if f < 1000.0:
        return 3.0 * f / 200.0
    return 15.0 + 27.0 * math.log(f / 1000.0) / math.log(6.4)


def slaney_mel_to_hz(m):
    if m < 15.0:
        return 200.0 * m / 3.0
    return 1000.0 * math.exp((m - 15.0) * math.log(6.4) / 27.0)


def loop_filterbank(n_mels, frame_len, sr, fmin=0.0, fmax=None):
    fmax = sr / 2 if fmax is None else fmax
    lo_m, hi_m = slaney_hz_to_mel(fmin), slaney_hz_to_mel(fmax)
    edges = [slaney_mel_to_hz(lo_m + (hi_m - lo_m) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    n_bins = frame_len // 2 + 1
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
        for k in range(n_bins):
            f = k * sr / frame_len
            w = max(0.0, min((f - lo) / (c - lo), (hi - f) / (hi - c)))
            fb[i, k] = w * 2.0 / (hi - lo)
    return fb


def naive_dct_ortho(x):
    n = len(x)
    out = np.zeros(n)
    for k in range(n):
        s = sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out[k] = s * (math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n))
    return out


def periodic_hann(n):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * k / n) for k in range(n)])


def naive_mfcc(x, sr, n_mfcc=40, n_mels=128, frame_len=2048, hop=512):
    spec = naive_stft(x, frame_len, hop, periodic_hann(frame_len))
    mel = loop_filterbank(n_mels, frame_len, sr) @ (np.abs(spec) ** 2)
    db = 10.0 * np.log10(np.maximum(mel, 1e-10))
    return np.stack([naive_dct_ortho(db[:, t])[:n_mfcc] for t in range(db.shape[1])], axis=1)


def scalar_gmu(f_t, f_v, w_t, w_v, w_z, b_t, b_v, b_z):
    """Per-sample, per-unit loops; weights stored [out, in]."""
    g = len(b_t)
    h = np.zeros(g)
    z = np.zeros(g)
    fz = list(f_t) + list(f_v)
    for j in range(g):
        ht = math.tanh(sum(w_t[j][i] * f_t[i] for i in range(len(f_t))) + b_t[j])
        hv = math.tanh(sum(w_v[j][i] * f_v[i] for i in range(len(f_v))) + b_v[j])
        a = sum(w_z[j][i] * fz[i] for i in range(len(fz))) + b_z[j]
        z[j] = 1.0 / (1.0 + math.exp(-a))
        h[j] = z[j] * ht + (1.0 - z[j]) * hv
    return h, z


def triple_loop_crossattention(x_q, x_k, key_mask, w_q, w_k, w_v):
    """One batch element: queries from x_q, keys/values from x_k."""
    tq, tk = len(x_q), len(x_k)
    dk = len(w_q[0])
    dv = len(w_v[0])
    d = len(x_q[0])

    def proj(row, w, j):
        return sum(row[i] * w[i][j] for i in range(d))

    q = [[proj(x_q[t], w_q, j) for j in range(dk)] for t in range(tq)]
    k = [[proj(x_k[t], w_k, j) for j in range(dk)] for t in range(tk)]
    v = [[proj(x_k[t], w_v, j) for j in range(dv)] for t in range(tk)]
    out = np.zeros((tq, dv))
    weights = np.zeros((tq, tk))
    for i in range(tq):
        scores = [sum(q[i][j] * k[s][j] for j in range(dk)) / math.sqrt(dk) for s in range(tk)]
        live = [s for s in range(tk) if key_mask is None or key_mask[s]]
        m = max(scores[s] for s in live)
        e = {s: math.exp(scores[s] - m) for s in live}
        total = sum(e.values())
        for s in live:
            weights[i, s] = e[s] / total
            for j in range(dv):
                out[i, j] += weights[i, s] * v[s][j]
    return out, weights
