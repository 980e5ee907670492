import numpy as np
import pytest

from mx4train import matio
from mx4train.codec import FormatError


def test_csv_roundtrip(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 7))
    path = tmp_path / "m.csv"
    matio.write_matrix_csv(path, m)
    assert np.array_equal(matio.read_matrix(path), m)


def test_bin_roundtrip(tmp_path):
    m = np.random.default_rng(1).normal(size=(9, 3)).astype(np.float32)
    path = tmp_path / "m.bin"
    matio.write_matrix_bin(path, m)
    back = matio.read_matrix(path)
    assert back.dtype == np.float64
    assert np.array_equal(back.astype(np.float32), m)


def test_csv_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0,2.0\n3.0,oops\n")
    with pytest.raises(FormatError, match=":2:"):
        matio.read_matrix(path)


def test_csv_ragged_rejected(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("1.0,2.0\n3.0\n")
    with pytest.raises(FormatError, match="columns"):
        matio.read_matrix(path)


def test_bin_truncated(tmp_path):
    m = np.ones((2, 2), dtype=np.float32)
    path = tmp_path / "m.bin"
    matio.write_matrix_bin(path, m)
    data = path.read_bytes()
    path.write_bytes(data[:-2])
    with pytest.raises(FormatError, match="length"):
        matio.read_matrix(path)


@pytest.mark.parametrize("cols", [1, 7, 8, 9, 64])
def test_mask_roundtrip(tmp_path, cols):
    mask = np.random.default_rng(cols).integers(0, 2, size=(3, cols)).astype(bool)
    path = tmp_path / "m.mask"
    matio.write_mask(path, mask)
    assert np.array_equal(matio.read_mask(path), mask)


def test_keyvalue_config(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("a = 1\n# comment\nb = two words  # trailing\n\n")
    assert matio.read_keyvalue_config(path) == {"a": "1", "b": "two words"}
    path.write_text("broken line\n")
    with pytest.raises(FormatError, match=":1:"):
        matio.read_keyvalue_config(path)
