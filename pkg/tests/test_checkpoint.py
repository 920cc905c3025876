from collections import OrderedDict

import numpy as np
import pytest

from fedsem import checkpoint


def _sample_state():
    return OrderedDict([
        ("layer.weight", np.arange(12.0).reshape(3, 4)),
        ("layer.bias", np.array([-0.0, 1.5, np.pi])),
        ("temperature", np.array(0.75)),  # rank 0
        ("empty", np.zeros((0, 3))),
    ])


def test_roundtrip_bitexact():
    state = _sample_state()
    back = checkpoint.loads(checkpoint.dumps(state))
    assert list(back) == list(state)
    for name in state:
        assert back[name].shape == state[name].shape
        assert np.array_equal(
            back[name].view(np.uint64), state[name].astype(np.float64).view(np.uint64))


def test_roundtrip_preserves_nan_and_signed_zero():
    nan = np.frombuffer(np.uint64(0x7FF80000DEADBEEF).tobytes(), dtype=np.float64)
    state = {"x": np.array([nan[0], -0.0, 0.0])}
    back = checkpoint.loads(checkpoint.dumps(state))
    assert np.array_equal(back["x"].view(np.uint64),
                          state["x"].view(np.uint64))


def test_double_serialization_identical_bytes():
    state = _sample_state()
    blob = checkpoint.dumps(state)
    assert checkpoint.dumps(checkpoint.loads(blob)) == blob


def test_non_contiguous_input():
    arr = np.arange(20.0).reshape(4, 5)[:, ::2]
    back = checkpoint.loads(checkpoint.dumps({"x": arr}))
    assert np.array_equal(back["x"], arr)


def test_bad_magic_rejected():
    blob = checkpoint.dumps({"x": np.zeros(2)})
    with pytest.raises(ValueError, match="magic"):
        checkpoint.loads(b"XXXX" + blob[4:])


def test_bad_version_rejected():
    blob = bytearray(checkpoint.dumps({"x": np.zeros(2)}))
    blob[4] = 99
    with pytest.raises(ValueError, match="version"):
        checkpoint.loads(bytes(blob))


def test_trailing_bytes_rejected():
    blob = checkpoint.dumps({"x": np.zeros(2)})
    with pytest.raises(ValueError, match="trailing"):
        checkpoint.loads(blob + b"\x00")


def test_unicode_names():
    state = {"stage.0.weight": np.ones(1), "äöü": np.zeros(1)}
    back = checkpoint.loads(checkpoint.dumps(state))
    assert set(back) == set(state)


def test_empty_state():
    assert checkpoint.loads(checkpoint.dumps({})) == OrderedDict()


def test_file_roundtrip(tmp_path):
    state = _sample_state()
    path = tmp_path / "model.flsc"
    checkpoint.save(path, state)
    back = checkpoint.load(path)
    assert all(np.array_equal(back[k], state[k].astype(np.float64))
               for k in state)
