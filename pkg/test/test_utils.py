import pytest
import os
import random
import numpy as np
import torch
from pyrflow.utils import (
    atomic_path,
    fingerprint,
    get_dtype,
    seed_everything,
    to_numpy,
    to_tensor,
)


def test_seed_everything():
    generator = seed_everything(7)
    a = (
        random.random(),
        np.random.rand(),
        torch.rand(1).item(),
        torch.rand(1, generator=generator),
    )
    generator = seed_everything(7)
    b = (
        random.random(),
        np.random.rand(),
        torch.rand(1).item(),
        torch.rand(1, generator=generator),
    )
    assert a[:3] == b[:3]
    assert torch.equal(a[3], b[3])


def test_get_dtype():
    assert get_dtype("single") == torch.float32
    assert get_dtype("double") == torch.float64

    with pytest.raises(ValueError):
        get_dtype("half")


def test_tensor_conversion():
    array = np.arange(6, dtype=np.float64).reshape(2, 3)
    tensor = to_tensor(array)
    assert tensor.dtype == torch.float32
    assert tensor.tolist() == array.tolist()

    # non-contiguous views convert too
    assert to_tensor(array.T, torch.float64).shape == (3, 2)
    assert to_tensor(tensor, torch.float64).dtype == torch.float64

    grad = torch.ones(2, requires_grad=True) * 2
    assert to_numpy(grad).tolist() == [2.0, 2.0]
    assert to_numpy(array) is array


def test_fingerprint():
    record = {"b": (1, 2), "a": 0.5}
    assert fingerprint(record) == fingerprint({"a": 0.5, "b": [1, 2]})
    assert fingerprint(record) != fingerprint({"a": 0.25, "b": (1, 2)})
    assert len(fingerprint(record)) == 16


def test_atomic_path(tmp_path):
    path = os.path.join(tmp_path, "sub", "file.txt")
    with atomic_path(path) as tmp:
        assert tmp != path
        assert tmp.endswith(".txt")
        with open(tmp, "w") as f:
            f.write("done")
    with open(path) as f:
        assert f.read() == "done"

    with pytest.raises(RuntimeError):
        with atomic_path(path) as tmp:
            with open(tmp, "w") as f:
                f.write("partial")
            raise RuntimeError("interrupted")
    with open(path) as f:
        assert f.read() == "done"
    assert os.listdir(os.path.dirname(path)) == ["file.txt"]
