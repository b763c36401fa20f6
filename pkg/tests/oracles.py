"""Independent reference computations used by the tests.

Nothing here calls into the package's gradient or loss code paths.
"""
import math

import numpy as np
import torch


def central_difference(f, x: torch.Tensor, index: tuple, h: float) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, restoring ``x`` afterwards.

    ``f`` runs with autograd enabled, since it may differentiate internally.
    """
    orig = x[index].item()

    def at(v):
        with torch.no_grad():
            x[index] = v
        return float(torch.as_tensor(f()).detach())

    fp, fm = at(orig + h), at(orig - h)
    with torch.no_grad():
        x[index] = orig
    return (fp - fm) / (2 * h)


def relative_errors(numeric, analytic, floor: float) -> np.ndarray:
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return np.abs(numeric - analytic) / scale


def softmax_ce(logits, label: int) -> float:
    m = max(logits)
    z = sum(math.exp(v - m) for v in logits)
    return -(logits[label] - m - math.log(z))


def linear_softmax_grads(W: np.ndarray, b: np.ndarray, x: np.ndarray, y: int):
    """Gradients of CE(W x + b, y) w.r.t. W and b for one example."""
    logits = W @ x + b
    p = np.exp(logits - logits.max())
    p /= p.sum()
    e = np.zeros_like(p)
    e[y] = 1.0
    return np.outer(p - e, x), p - e


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    return 1.0 - float(a @ b) / (na * nb)


def kl_divergence(p, q) -> float:
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def softmax(v, tau=1.0):
    m = max(v)
    e = [math.exp((x - m) / tau) for x in v]
    s = sum(e)
    return [x / s for x in e]
