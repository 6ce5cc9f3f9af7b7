import math

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def naive_conv2d(x, w, b, stride, pad):
    """Direct quadruple-loop convolution."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[bi, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def jacobi_top_singular_value(a, sweeps=50):
    """Largest singular value via cyclic Jacobi eigen-decomposition of A A^T."""
    s = np.array(a, dtype=np.float64) @ np.array(a, dtype=np.float64).T
    n = s.shape[0]
    for _ in range(sweeps):
        off = sum(s[i, j] ** 2 for i in range(n) for j in range(n) if i != j)
        if off < 1e-24:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(s[p, q]) < 1e-300:
                    continue
                theta = (s[q, q] - s[p, p]) / (2 * s[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = sn
                rot[q, p] = -sn
                s = rot.T @ s @ rot
    return math.sqrt(max(np.diag(s)))


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
