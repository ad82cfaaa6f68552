"""Independent reference computations used by the tests."""

import math

import numpy as np


def central_diff(f, arr, h=1e-5, idx=None):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    picks = range(flat.size) if idx is None else idx
    out = []
    for i in picks:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def brute_ks(a, b):
    """sup |F_a - F_b| by direct counting at every sample point, O(n^2)."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    best = 0.0
    for x in list(a) + list(b):
        fa = sum(1 for v in a if v <= x) / len(a)
        fb = sum(1 for v in b if v <= x) / len(b)
        best = max(best, abs(fa - fb))
    return best


def brute_kendall_tau_b(x, y):
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    n = len(x)
    s = n1 = n2 = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = (x[i] > x[j]) - (x[i] < x[j])
            dy = (y[i] > y[j]) - (y[i] < y[j])
            s += dx * dy
            n1 += dx == 0
            n2 += dy == 0
    n0 = n * (n - 1) // 2
    return s / math.sqrt((n0 - n1) * (n0 - n2))
