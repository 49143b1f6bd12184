"""Slow reference implementations used only by the tests."""

import numpy as np

from wsiscreen.tensorcore import bilinear_sample


def naive_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[oc] if b is not None else 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                rr = r * stride - pad + i
                                cc = s * stride - pad + j
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += w[oc, ic, i, j] * x[bi, ic, rr, cc]
                    out[bi, oc, r, s] = acc
    return out


def naive_deform_conv2d(x, off, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[oc] if b is not None else 0.0
                    for i in range(kh):
                        for j in range(kw):
                            k = i * kw + j
                            pr = r * stride - pad + i + off[bi, 2 * k, r, s]
                            pc = s * stride - pad + j + off[bi, 2 * k + 1, r, s]
                            for ic in range(c):
                                acc += w[oc, ic, i, j] * bilinear_sample(x[bi, ic], (pr, pc))
                    out[bi, oc, r, s] = acc
    return out


def otsu_oracle(hist):
    """Exhaustive search over all 256 cuts in exact integer arithmetic.

    Class 0 is values <= t.  Between-class variance times total**2 equals
    (s0*n1 - s1*n0)**2 / (n0*n1); candidates are compared by
    cross-multiplication.  Returns (t, degenerate) with ties -> smallest t.
    """
    hist = [int(v) for v in hist]
    total = sum(hist)
    grand = sum(i * v for i, v in enumerate(hist))
    best_num, best_den, best_t = -1, 1, 0
    n0 = s0 = 0
    for t in range(256):
        n0 += hist[t]
        s0 += t * hist[t]
        n1, s1 = total - n0, grand - s0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            num, den = (s0 * n1 - s1 * n0) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t, best_num == 0


def concordant_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    credit = 0.0
    for p in pos:
        for q in neg:
            credit += 1.0 if p > q else 0.5 if p == q else 0.0
    return credit / (len(pos) * len(neg))
