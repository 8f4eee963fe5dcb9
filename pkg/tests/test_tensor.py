import numpy as np
import pytest

from statefusion.tensor import (
    ShapeError,
    flatten_scan_order,
    read_csv,
    tensor,
    unflatten_scan_order,
    write_csv,
)


def test_flatten_single_pixel_identity():
    grid = tensor([[[5.0]]])
    assert np.array_equal(flatten_scan_order(grid), [[5.0]])


def test_flatten_row_major_definition():
    grid = tensor([1.0, 2.0, 3.0, 4.0], shape=(2, 2, 1))
    seq = flatten_scan_order(grid)
    assert np.array_equal(seq[:, 0], [1.0, 2.0, 3.0, 4.0])


def test_unflatten_trivial_cases():
    seq = tensor([[1.0], [2.0], [3.0], [4.0]])
    grid = unflatten_scan_order(seq, 2, 2)
    assert np.array_equal(grid[:, :, 0], [[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(unflatten_scan_order(tensor([[7.0]]), 1, 1), [[[7.0]]])


def test_roundtrip_by_index_enumeration():
    # independent oracle: place the flat position into each cell, then check
    # the index formula t = h*W + w against both directions
    height, width, chans = 3, 4, 2
    grid = np.zeros((height, width, chans))
    for h in range(height):
        for w in range(width):
            for c in range(chans):
                grid[h, w, c] = (h * width + w) * 10 + c
    seq = flatten_scan_order(grid)
    for h in range(height):
        for w in range(width):
            t = h * width + w
            assert np.array_equal(seq[t], grid[h, w])
    assert np.array_equal(unflatten_scan_order(seq, height, width), grid)


def test_roundtrip_random_bit_exact():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(3, 4, 2))
    assert np.array_equal(unflatten_scan_order(flatten_scan_order(grid), 3, 4), grid)
    seq = rng.normal(size=(15, 3))
    assert np.array_equal(flatten_scan_order(unflatten_scan_order(seq, 5, 3)), seq)


def test_elementwise_ops_commute_with_flattening():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 5, 3))
    b = rng.normal(size=(4, 5, 3))
    assert np.array_equal(
        flatten_scan_order(a) + flatten_scan_order(b), flatten_scan_order(a + b)
    )
    assert np.array_equal(flatten_scan_order(2.5 * a), 2.5 * flatten_scan_order(a))


def test_shape_errors():
    with pytest.raises(ShapeError):
        flatten_scan_order(tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeError):
        unflatten_scan_order(tensor(np.zeros((5, 2))), 2, 2)
    with pytest.raises(ShapeError):
        unflatten_scan_order(tensor(np.zeros((4, 4, 1))), 2, 2)


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    mat = rng.normal(size=(4, 3))
    path = tmp_path / "m.csv"
    write_csv(path, mat)
    assert np.array_equal(read_csv(path), mat)
    # no header, '.' decimal, comma separated
    first = path.read_text().splitlines()[0]
    assert first.count(",") == 2 and "." in first


def test_csv_single_column(tmp_path):
    path = tmp_path / "col.csv"
    write_csv(path, np.array([[1.5], [-2.0], [0.25]]))
    back = read_csv(path)
    assert back.shape == (3, 1)
    assert np.array_equal(back[:, 0], [1.5, -2.0, 0.25])
