"""Independent reference computations used by several test modules."""
import numpy as np

from ascfusion.gbm import GAIN_RTOL, TIE_RTOL


def brute_force_split(bins, idx, g, h, n_bins, lambda_l2, min_data, min_hess):
    """Exhaustive best (feature, bin, gain) for the samples ``idx``.

    Evaluates every 'bin <= t goes left' partition directly from the sample
    arrays (no histograms).  Gains within round-off of the best are ties and
    resolve to the lowest feature, then the lowest bin.  Returns None when no admissible split has a gain above
    the round-off floor ``GAIN_RTOL * (sum |g|)^2 / (H + lambda)``.
    """
    idx = np.asarray(idx)
    G, H = g[idx].sum(), h[idx].sum()
    floor = GAIN_RTOL * np.abs(g[idx]).sum() ** 2 / (H + lambda_l2)
    parent = G * G / (H + lambda_l2) if H + lambda_l2 > 0 else 0.0
    cands = []
    for f in range(bins.shape[1]):
        col = bins[idx, f]
        for t in range(n_bins - 1):
            left = col <= t
            nl, nr = int(left.sum()), int((~left).sum())
            gl, hl = g[idx][left].sum(), h[idx][left].sum()
            gr, hr = G - gl, H - hl
            if nl < min_data or nr < min_data or hl < min_hess or hr < min_hess:
                continue
            cands.append((f, t, gl * gl / (hl + lambda_l2) + gr * gr / (hr + lambda_l2) - parent))
    if not cands:
        return None
    best = max(c[2] for c in cands)
    if not (best > 0 and best > floor):
        return None
    return next(c for c in cands if c[2] >= best - max(TIE_RTOL * abs(best), floor))


def random_split_instance(rng):
    """A small multiclass problem with repeated columns and coarse values, so
    exact gain ties between features and bins actually occur."""
    n = int(rng.integers(20, 201))
    f = int(rng.integers(1, 6))
    k = int(rng.integers(2, 5))
    X = rng.integers(0, rng.integers(2, 30), size=(n, f)).astype(float)
    if f > 1 and rng.random() < 0.5:
        X[:, -1] = X[:, 0]  # duplicate column: every gain tied with feature 0
    y = rng.integers(0, k, n)
    y[:k] = np.arange(k)
    return X, y, k
