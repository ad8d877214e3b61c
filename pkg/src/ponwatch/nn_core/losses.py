import numpy as np

PROB_FLOOR = 1e-15


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_crossentropy(p, y):
    """-ln(p[y] + floor) for one distribution or a batch (mean)."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
        raise ValueError("p is not a probability distribution")
    if p.ndim == 1:
        return float(-np.log(p[int(y)] + PROB_FLOOR))
    y = np.asarray(y)
    return float(-np.log(p[np.arange(len(y)), y] + PROB_FLOOR).mean())


def softmax_cross_entropy(logits, y):
    """Mean CCE over the batch and its gradient w.r.t. the logits."""
    y = np.asarray(y)
    n = len(y)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return float(loss), d / n


def mse_loss(pred, target, mask=None):
    """Mean squared error over mask-valid entries; 0 when nothing is valid."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch")
    m = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    k = int(m.sum())
    if k == 0:
        return 0.0
    diff = np.where(m, pred - target, 0.0)
    return float((diff * diff).sum() / k)


def mse_loss_grad(pred, target, mask=None):
    pred = np.asarray(pred, dtype=float)
    m = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    k = int(m.sum())
    if k == 0:
        return 0.0, np.zeros_like(pred)
    diff = np.where(m, pred - np.asarray(target, dtype=float), 0.0)
    return float((diff * diff).sum() / k), 2.0 * diff / k
