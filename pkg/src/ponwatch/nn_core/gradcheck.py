import numpy as np


def numeric_gradient(loss_fn, params, step=1e-6, coords=None):
    """Central differences of `loss_fn()` w.r.t. arrays in `params` (perturbed in place).

    `coords` optionally maps a parameter name to the flat indices to probe;
    unprobed entries are left as NaN.
    """
    out = {}
    for name, p in params.items():
        g = np.full(p.shape, np.nan) if coords is not None else np.zeros(p.shape)
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        idx = range(flat_p.size) if coords is None else coords.get(name, ())
        for i in idx:
            old = flat_p[i]
            flat_p[i] = old + step
            up = loss_fn()
            flat_p[i] = old - step
            down = loss_fn()
            flat_p[i] = old
            flat_g[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_error(analytic, numeric):
    """||a - n|| / (||a|| + ||n||) over the probed (non-NaN) entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    ok = ~np.isnan(n)
    a, n = a[ok], n[ok]
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
