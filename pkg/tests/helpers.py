"""Small shared helpers for the test modules."""
import numpy as np

from diffedit.numerics.rng import RngStream


def randomize(params, seed=0, scale=0.3):
    """Give every weight (including the zero output head) generic random values."""
    rng = RngStream(seed, 99)
    for k, v in params.weights.items():
        params.weights[k] = rng.gaussian(v.shape) * scale
    return params


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gaussian_eps(schedule, means, std=0.5):
    """Exact ε-predictor for data ``N(means[y], std²)``; ``y=None`` uses mean 0.

    Stands in for a perfectly trained model so sampler tests need no training.
    """
    means = np.asarray(means, dtype=np.float64)

    def model(z, t, y):
        ab = schedule.alpha_bar(t)
        m = 0.0 if y is None else means[np.asarray(y)]
        if np.ndim(m) == 1 and np.ndim(z) > 1:
            m = m.reshape((-1,) + (1,) * (np.ndim(z) - 1))
        return np.sqrt(1 - ab) * (np.asarray(z) - np.sqrt(ab) * m) / (ab * std**2 + 1 - ab)

    return model


def central_diff_at(f, x, flat_idx, h=1e-5):
    """Central differences of scalar ``f`` at the given flat positions of ``x``."""
    flat = x.reshape(-1)
    out = np.zeros(len(flat_idx))
    for j, i in enumerate(flat_idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out
