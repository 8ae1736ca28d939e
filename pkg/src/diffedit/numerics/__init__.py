import numpy as np

from . import tensor as ops
from .optim import SGD, AdamW, make_optimizer
from .rng import RngError, RngStream, gaussian
from .tensor import GradientError, Tensor, as_tensor, backward, grad, parameter


class DegenerateVectorError(ValueError):
    pass


def cosine_similarity(a, b, eps: float = 1e-12) -> float:
    """<a, b> / (|a| |b|); raises on a norm below ``eps``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        raise DegenerateVectorError("cosine similarity of a near-zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


__all__ = [
    "AdamW", "DegenerateVectorError", "GradientError", "RngError", "RngStream", "SGD",
    "Tensor", "as_tensor", "backward", "cosine_similarity", "gaussian", "grad",
    "make_optimizer", "ops", "parameter",
]
