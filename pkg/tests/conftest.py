import numpy as np
import pytest


def conv_loop(x, k, b, stride, pad):
    """Quadruple-loop cross-correlation, independent of im2col."""
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


def deconv_loop(x, k, b, stride, pad, out_pad=0):
    """Scatter form of the transposed convolution."""
    cin, h, w = x.shape
    _, cout, kh, kw = k.shape
    ho = (h - 1) * stride - 2 * pad + kh + out_pad
    wo = (w - 1) * stride - 2 * pad + kw + out_pad
    buf = np.zeros((cout, ho + 2 * pad, wo + 2 * pad))
    for c in range(cin):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    for u in range(kh):
                        for v in range(kw):
                            buf[o, i * stride + u, j * stride + v] += x[c, i, j] * k[c, o, u, v]
    return buf[:, pad:pad + ho, pad:pad + wo] + b[:, None, None]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
