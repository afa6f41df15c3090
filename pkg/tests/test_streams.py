import numpy as np
from scipy import stats

from dimlearn.streams import path_normals, rows_normals


def test_bulk_equals_one_by_one():
    bulk = path_normals(9, 4, 37, path_start=5, n_paths=20)
    for j in range(20):
        assert np.array_equal(bulk[j], path_normals(9, 4, 37, path_start=5 + j)[0])


def test_keys_separate_streams():
    a = path_normals(1, 0, 16)
    assert not np.array_equal(a, path_normals(1, 1, 16))
    assert not np.array_equal(a, path_normals(2, 0, 16))
    assert np.array_equal(a, path_normals(1, 0, 16))


def test_rows_are_first_paths():
    rows = rows_normals(3, [0, 7, 2], 11)
    assert np.array_equal(rows[1], path_normals(3, 7, 11)[0])


def test_standard_normal_moments():
    z = path_normals(123, 0, 50, 0, 4000).ravel()
    n = z.size
    assert abs(z.mean()) < 4 / np.sqrt(n)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / n)
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert np.all(np.isfinite(z))
