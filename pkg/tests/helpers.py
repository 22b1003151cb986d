import numpy as np

from mmfed import data


def random_batch(arch, n, rng):
    shapes = arch.input_shapes()
    return data.AlignedDataset(
        rng.standard_normal((n, *shapes["image"])),
        rng.standard_normal((n, *shapes["spectrogram"])),
        rng.standard_normal((n, *shapes["sign"])),
        rng.integers(0, 10, n),
    )


def naive_conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[fi]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                r = i * stride - padding + a
                                s = j * stride - padding + bb
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[ni, ci, r, s] * w[fi, ci, a, bb]
                    out[ni, fi, i, j] = acc
    return out


def naive_maxpool(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[ni, ci, i, j] = max(x[ni, ci, i * stride + a, j * stride + b]
                                            for a in range(k) for b in range(k))
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


# (criterion, passed, detail) tuples, printed by the terminal summary hook in conftest.
ACCEPTANCE = []


def record(criterion, passed, detail):
    ACCEPTANCE.append((criterion, passed, detail))
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")
