"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np
import torch

from .captions import COUNTS


def check_count(count) -> int:
    if isinstance(count, bool) or not isinstance(count, numbers.Integral):
        raise TypeError(f"count must be an integer, got {type(count).__name__}")
    if int(count) not in COUNTS:
        raise ValueError(f"count must be in [2, 10], got {count}")
    return int(count)


def check_counts(counts) -> np.ndarray:
    """Validate a 1-D sequence of counts in [2, 10] and return it as int64."""
    arr = np.asarray(counts)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D sequence of counts, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("counts must be integers")
    arr = arr.astype(np.int64)
    bad = arr[(arr < 2) | (arr > 10)]
    if bad.size:
        raise ValueError(f"counts must be in [2, 10], got {sorted(set(bad.tolist()))}")
    return arr


def check_embeddings(emb, name: str = "embeddings", ndim: int = 2) -> torch.Tensor:
    """Coerce to a floating tensor of the given rank and reject non-finite entries."""
    t = torch.as_tensor(emb)
    if not torch.is_floating_point(t):
        t = t.to(torch.get_default_dtype())
    if t.dim() != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    return t


def check_same_dim(*tensors: torch.Tensor) -> int:
    dims = {t.shape[-1] for t in tensors}
    if len(dims) != 1:
        raise ValueError(f"embedding dimensions differ: {sorted(dims)}")
    return dims.pop()


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cannot normalize a zero-norm embedding")
    return x / norms
