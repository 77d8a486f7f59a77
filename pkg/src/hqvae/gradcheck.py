"""Central finite-difference gradient checks (float64)."""
import numpy as np

from .tensor import backward


def numeric_grad(fn, tensor, h=1e-5):
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor."""
    g = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, rel_floor=1e-3, abs_floor=1e-8):
    """max |a - n| / max(|a|, |n|, floor) over all entries.

    ``floor`` is ``rel_floor`` times the largest gradient magnitude (at least
    ``abs_floor``), so entries that are zero up to round-off do not dominate.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    floor = max(abs_floor, rel_floor * max(np.abs(a).max(), np.abs(n).max()))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn, params, h=1e-5, max_entries=None, rng=None):
    """Return {name: max relative error} comparing backward() with finite differences.

    ``max_entries`` limits the number of probed coordinates per parameter
    (chosen at random) to keep big checks cheap.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        errors[name] = max_rel_error(analytic[name].reshape(-1)[idx], num)
    return errors
