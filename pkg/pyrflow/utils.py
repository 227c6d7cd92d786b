"""Additional utility functions."""

import os
import random
import hashlib
import json
import tempfile
from contextlib import contextmanager
from typing import Iterator, Union
import numpy as np
import torch


def seed_everything(seed: int) -> torch.Generator:
    """Seed the python, numpy and torch random number generators.

    Args:
        seed (int): The seed.

    Returns:
        torch.Generator: A torch generator seeded with the same value.
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def get_dtype(precision: str) -> torch.dtype:
    """Map a precision name to the torch floating point type.

    Args:
        precision (str): Either "single" or "double".

    Returns:
        torch.dtype: The matching floating point type.
    """
    if precision == "single":
        return torch.float32
    if precision == "double":
        return torch.float64
    raise ValueError(f"precision must be 'single' or 'double', got {precision!r}")


def to_tensor(
    array: Union[np.ndarray, torch.Tensor], dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Convert an array to a torch tensor of the given type.

    Args:
        array: A numpy array or a tensor.
        dtype (torch.dtype): The requested type.

    Returns:
        torch.Tensor: The converted tensor.
    """
    if isinstance(array, torch.Tensor):
        return array.to(dtype)
    return torch.as_tensor(np.ascontiguousarray(array), dtype=dtype)


def to_numpy(tensor: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Detach a tensor and return it as a numpy array."""
    if isinstance(tensor, np.ndarray):
        return tensor
    return tensor.detach().cpu().numpy()


def fingerprint(record: dict) -> str:
    """Stable short hash of a JSON-serializable record.

    Args:
        record (dict): The record, typically a configuration dictionary.

    Returns:
        str: The first 16 hex characters of the SHA-256 of the sorted JSON.
    """
    payload = json.dumps(record, sort_keys=True, default=list)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@contextmanager
def atomic_path(path: str) -> Iterator[str]:
    """Yield a temporary sibling path that replaces ``path`` on success.

    The temporary file is removed if the body raises, so a failed write never
    leaves a partial file at ``path``.

    Args:
        path (str): The final destination.

    Yields:
        str: The temporary path to write to.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    suffix = os.path.splitext(path)[1]
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", suffix=suffix, dir=directory)
    os.close(fd)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
