import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpctd.errors import DimensionMismatch, ParseError, RangeError
from smpctd.ingest import (Accumulators, ChunkReader, accumulate, iter_chunks, load_matrix,
                           make_spectrum_data, read_chunk, split_parties, write_csv)

A44 = np.arange(1, 17, dtype=np.float64).reshape(4, 4)


def _csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_chunks_of_two(tmp_path):
    path = _csv(tmp_path, "".join(f"{i},{i * 2}\n" for i in range(5)))
    reader = ChunkReader(path, chunk_rows=2)
    sizes = []
    while (chunk := read_chunk(reader)) is not None:
        sizes.append(chunk.shape[0])
        assert chunk.shape[1] == 2
    assert sizes == [2, 2, 1]
    assert reader.rows_read == 5


def test_empty_file(tmp_path):
    assert read_chunk(ChunkReader(_csv(tmp_path, ""))) is None


def test_short_row_reports_line(tmp_path):
    path = _csv(tmp_path, "1,2,3\n4,5,6\n7,8\n")
    with pytest.raises(DimensionMismatch) as err:
        list(ChunkReader(path, chunk_rows=1))
    assert err.value.line == 3


def test_parse_error_and_range(tmp_path):
    with pytest.raises(ParseError) as err:
        list(ChunkReader(_csv(tmp_path, "1,2\nx,3\n")))
    assert err.value.line == 2
    with pytest.raises(RangeError):
        list(ChunkReader(_csv(tmp_path, "1,2\n3,400\n", "b.csv"), max_abs=100))
    with pytest.raises(RangeError):
        ChunkReader(_csv(tmp_path, "1\n", "c.csv"), chunk_rows=0)


def test_header_blank_lines_and_multiple_files(tmp_path):
    a = _csv(tmp_path, "x,y\n1,2\n\n3,4\n", "a.csv")
    b = _csv(tmp_path, "x,y\n5,6\n", "b.csv")
    np.testing.assert_array_equal(load_matrix([a, b], header=True), [[1, 2], [3, 4], [5, 6]])


def test_gram_of_a44_in_two_chunks():
    acc = Accumulators(4)
    accumulate(acc, A44[:2], "gram")
    accumulate(acc, A44[2:], "gram")
    assert acc.gram[0, 0] == 276
    np.testing.assert_array_equal(acc.gram[0], [276, 304, 332, 360])


def test_sum_single_row():
    acc = accumulate(Accumulators(2), np.array([[1.0, 3.0]]), "sum")
    np.testing.assert_array_equal(acc.column_sum, [1, 3])
    assert acc.total_lines == 1


def test_centered_gram_matches_covariance():
    x = make_spectrum_data(200, 4, seed=1)
    acc = accumulate(Accumulators(4), x, "centered_gram", x.mean(axis=0))
    np.testing.assert_allclose(acc.centered_gram, np.cov(x.T, bias=True) * 200, rtol=1e-12)


def test_accumulate_errors():
    with pytest.raises(DimensionMismatch):
        accumulate(Accumulators(3), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        accumulate(Accumulators(2), np.zeros((2, 2)), "centered_gram")
    with pytest.raises(ValueError):
        accumulate(Accumulators(2), np.zeros((2, 2)), "cube")


def _full_pass(chunks, d, mu):
    acc = Accumulators(d)
    for c in chunks:
        accumulate(acc, c, "sum")
        accumulate(acc, c, "gram")
        accumulate(acc, c, "centered_gram", mu)
    return acc


def test_chunk_size_invariance_exact(tmp_path):
    x = make_spectrum_data(250, 6, seed=3, mean=np.arange(6.0))
    path = tmp_path / "x.csv"
    write_csv(path, x, precision=9)
    pooled = load_matrix(path)
    mu = pooled.mean(axis=0)
    results = [_full_pass(iter_chunks(path, k), 6, mu) for k in (1, 7, 100, 250)]
    for acc in results[1:]:
        assert acc.total_lines == results[0].total_lines == 250
        np.testing.assert_array_equal(acc.column_sum, results[0].column_sum)
        np.testing.assert_array_equal(acc.gram, results[0].gram)
        np.testing.assert_array_equal(acc.centered_gram, results[0].centered_gram)
    np.testing.assert_allclose(results[0].gram, pooled.T @ pooled, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 5), st.integers(1, 70), st.integers(0, 2**31))
def test_chunking_never_changes_totals(n, d, k, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    a = _full_pass(iter_chunks(x, k), d, np.zeros(d))
    b = _full_pass([x], d, np.zeros(d))
    np.testing.assert_array_equal(a.column_sum, b.column_sum)
    np.testing.assert_array_equal(a.gram, b.gram)
    assert sum(c.shape[0] for c in iter_chunks(x, k)) == n


def test_spectrum_data_and_split():
    x = make_spectrum_data(20000, 3, seed=0, spectrum=[4.0, 1.0, 0.25], mean=[1.0, 2.0, 3.0])
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1], [4, 1, 0.25], rtol=0.05)
    np.testing.assert_allclose(x.mean(axis=0), [1, 2, 3], atol=0.05)
    parts = split_parties(x, 3)
    assert sum(p.shape[0] for p in parts) == 20000
    with pytest.raises(DimensionMismatch):
        make_spectrum_data(5, 3, spectrum=[1.0])
