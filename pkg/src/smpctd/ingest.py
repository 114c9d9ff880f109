"""Chunked CSV reading and the streaming accumulators built on it.

Each party reads its data a piece at a time, folds the piece into running
sums and drops it.  Accumulation is strictly row by row so the result is
bit-identical whatever the chunk size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionMismatch, ParseError, RangeError

DEFAULT_CHUNK_ROWS = 1000


class ChunkReader:
    """Reads rows from one or more CSV files, ``chunk_rows`` at a time.

    ``d`` is inferred from the first row when not given.  Values larger in
    magnitude than ``max_abs`` are rejected at load time.
    """

    def __init__(self, paths: str | Path | Sequence[str | Path], chunk_rows: int = DEFAULT_CHUNK_ROWS,
                 d: int | None = None, header: bool = False, max_abs: float | None = None):
        if chunk_rows < 1:
            raise RangeError("chunk_rows must be at least 1")
        self.paths = [Path(paths)] if isinstance(paths, (str, Path)) else [Path(p) for p in paths]
        self.chunk_rows = chunk_rows
        self.d = d
        self.header = header
        self.max_abs = max_abs
        self.rows_read = 0
        self._rows = self._iter_rows()

    def _iter_rows(self) -> Iterator[list[float]]:
        for path in self.paths:
            with open(path, newline="") as fh:
                for lineno, fields in enumerate(csv.reader(fh), start=1):
                    if lineno == 1 and self.header:
                        continue
                    if not fields or all(not f.strip() for f in fields):
                        continue
                    if self.d is None:
                        self.d = len(fields)
                    if len(fields) != self.d:
                        raise DimensionMismatch(f"{path}: expected {self.d} fields, got {len(fields)}", lineno)
                    try:
                        row = [float(f) for f in fields]
                    except ValueError:
                        raise ParseError(f"{path}: not a number in {fields!r}", lineno) from None
                    if self.max_abs is not None and any(abs(v) > self.max_abs for v in row):
                        raise RangeError(f"{path} line {lineno}: value exceeds max_abs={self.max_abs}")
                    yield row

    def read_chunk(self) -> np.ndarray | None:
        """Next block of at most ``chunk_rows`` rows, or None at end of data."""
        rows = []
        for row in self._rows:
            rows.append(row)
            if len(rows) == self.chunk_rows:
                break
        if not rows:
            return None
        self.rows_read += len(rows)
        return np.asarray(rows, dtype=np.float64)

    def __iter__(self):
        while (chunk := self.read_chunk()) is not None:
            yield chunk


def read_chunk(reader: ChunkReader) -> np.ndarray | None:
    return reader.read_chunk()


def iter_chunks(data, chunk_rows: int = DEFAULT_CHUNK_ROWS, **kw) -> Iterator[np.ndarray]:
    """Chunks from an in-memory array or from CSV path(s)."""
    if isinstance(data, np.ndarray):
        for i in range(0, data.shape[0], chunk_rows):
            yield data[i:i + chunk_rows]
    else:
        yield from ChunkReader(data, chunk_rows, **kw)


@dataclass
class Accumulators:
    d: int
    column_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    total_lines: int = 0
    gram: np.ndarray = field(default=None)  # type: ignore[assignment]
    centered_gram: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.column_sum is None:
            self.column_sum = np.zeros(self.d)
        if self.gram is None:
            self.gram = np.zeros((self.d, self.d))
        if self.centered_gram is None:
            self.centered_gram = np.zeros((self.d, self.d))

    @property
    def column_avg(self) -> np.ndarray:
        return self.column_sum / self.total_lines

    @property
    def covariance(self) -> np.ndarray:
        """Centered Gram divided by this party's own row count."""
        return self.centered_gram / self.total_lines


def accumulate(acc: Accumulators, chunk: np.ndarray, mode: str = "sum", mu=None) -> Accumulators:
    """Fold one chunk into ``acc``.

    mode ``sum`` updates column_sum and total_lines, ``gram`` adds A^T A
    and ``centered_gram`` adds (A - mu)^T (A - mu).
    """
    chunk = np.atleast_2d(np.asarray(chunk, dtype=np.float64))
    if chunk.size == 0:
        return acc
    if chunk.shape[1] != acc.d:
        raise DimensionMismatch(f"chunk has {chunk.shape[1]} columns, accumulator expects {acc.d}")
    if mode == "sum":
        for row in chunk:
            acc.column_sum += row
        acc.total_lines += chunk.shape[0]
    elif mode == "gram":
        for row in chunk:
            acc.gram += np.outer(row, row)
    elif mode == "centered_gram":
        if mu is None:
            raise ValueError("centered_gram needs the mean")
        for row in chunk - np.asarray(mu, dtype=np.float64):
            acc.centered_gram += np.outer(row, row)
    else:
        raise ValueError(f"unknown accumulate mode {mode!r}")
    return acc


def make_spectrum_data(n: int, d: int = 6, seed: int = 0, spectrum=None, mean=None) -> np.ndarray:
    """Gaussian rows whose covariance has the given eigenvalues.

    The eigenbasis is a seeded random rotation, so eigenvectors are not
    axis aligned.
    """
    rng = np.random.default_rng(seed)
    spectrum = np.linspace(2.0, 0.5, d) if spectrum is None else np.asarray(spectrum, dtype=np.float64)
    if spectrum.size != d:
        raise DimensionMismatch(f"spectrum has {spectrum.size} entries, d={d}")
    q, r = np.linalg.qr(np.random.default_rng([seed, 7]).normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    z = rng.normal(size=(n, d)) * np.sqrt(spectrum)
    mu = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
    return z @ q.T + mu


def split_parties(data: np.ndarray, m: int) -> list[np.ndarray]:
    return [np.asarray(p) for p in np.array_split(data, m)]


def write_csv(path, data: np.ndarray, header: Sequence[str] | None = None, precision: int = 6) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in data:
            w.writerow([f"{v:.{precision}f}" for v in row])


def load_matrix(paths, header: bool = False, max_abs: float | None = None) -> np.ndarray:
    """Whole dataset as one array (for oracles and tests)."""
    reader = ChunkReader(paths, chunk_rows=1 << 30, header=header, max_abs=max_abs)
    chunk = reader.read_chunk()
    return chunk if chunk is not None else np.zeros((0, reader.d or 0))
