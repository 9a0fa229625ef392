"""Test oracles shared across modules: finite differences and naive loops."""

import numpy as np

FD_STEP = 1e-5
FD_RTOL = 1e-4


def central_difference(f, arr, index, step=FD_STEP):
    """d f / d arr[index] by central differences, restoring ``arr`` afterwards."""
    orig = arr[index]
    arr[index] = orig + step
    up = f()
    arr[index] = orig - step
    down = f()
    arr[index] = orig
    return (up - down) / (2 * step)


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_gradient(f, arr, grad, rng, n_coords=12):
    """Relative error between ``grad`` and finite differences of scalar ``f``
    over up to ``n_coords`` random coordinates of ``arr``."""
    flat = arr.reshape(-1)
    k = min(n_coords, flat.size)
    coords = rng.choice(flat.size, size=k, replace=False)
    numeric = [central_difference(f, flat, i) for i in coords]
    return relative_error(grad.reshape(-1)[coords], numeric)


def naive_conv(x, w, stride, pad):
    """Quadruple-loop reference for a standard convolution (N, M, K, K)."""
    b_, m_, h, wd = x.shape
    n_, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((b_, n_, ho, wo))
    for b in range(b_):
        for n in range(n_):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for m in range(m_):
                        for i in range(k):
                            for j in range(k):
                                acc += w[n, m, i, j] * xp[b, m, oh * stride + i, ow * stride + j]
                    y[b, n, oh, ow] = acc
    return y


def naive_depthwise(x, w, stride, pad):
    b_, m_, h, wd = x.shape
    k = w.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((b_, m_, ho, wo))
    for b in range(b_):
        for m in range(m_):
            for oh in range(ho):
                for ow in range(wo):
                    y[b, m, oh, ow] = sum(
                        w[m, i, j] * xp[b, m, oh * stride + i, ow * stride + j] for i in range(k) for j in range(k)
                    )
    return y


def min_kink_distance(pre):
    """Distance of the closest pre-activation to a ReLU6 kink."""
    pre = np.asarray(pre)
    return float(min(np.abs(pre).min(), np.abs(pre - 6.0).min()))


# criterion number -> [(passed, title, detail)]; printed by the terminal summary hook
ACCEPTANCE: dict = {}


class criterion:
    """Context manager recording one pass/fail line for an acceptance criterion."""

    def __init__(self, num: int, title: str):
        self.num, self.title, self.detail = num, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE.setdefault(self.num, []).append((ok, self.title, detail))
        print(f"criterion {self.num}: {'PASS' if ok else 'FAIL'} - {self.title} {detail}")
        return False
