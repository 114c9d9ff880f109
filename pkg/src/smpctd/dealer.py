"""Trusted dealer: correlated randomness for multiplication and truncation.

The dealer never sees inputs.  Parties request material in lock-step (the
protocol is deterministic, so every party asks for the same sequence) and
the dealer answers each request with one share per party.  The same records
can be written to per-party files instead of streamed.

Spec words (u64) identifying a request:

    MUL     [1, ndim_x, *shape_x, ndim_y, *shape_y]   c = a * b (broadcast)
    MATMUL  [2, p, q, r]                              C = A @ B
    TRUNC   [3, bits, ndim, *shape]                   (r, r >> bits)
    CLOSE   [0]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ProtocolError, TripleExhausted
from .ring import DTYPE, WIRE_DTYPE, from_wire, ring_op, shift_right_signed, to_wire, uniform
from .transport import DEALER, Channel, MsgType, Session, decode_frame, encode_frame

CLOSE, MUL, MATMUL, TRUNC = 0, 1, 2, 3

MAGIC = b"SMTD"
VERSION = 1
FILE_HEADER = struct.Struct("<4sHBB")


def mul_spec(shape_x, shape_y) -> tuple[int, ...]:
    return (MUL, len(shape_x), *shape_x, len(shape_y), *shape_y)


def matmul_spec(p: int, q: int, r: int) -> tuple[int, ...]:
    return (MATMUL, p, q, r)


def trunc_spec(bits: int, shape) -> tuple[int, ...]:
    return (TRUNC, bits, len(shape), *shape)


def spec_shapes(spec: Sequence[int]) -> list[tuple[int, ...]]:
    """Shapes of the arrays carried by one party's share of ``spec``."""
    kind = spec[0]
    if kind == MUL:
        nx = spec[1]
        sx = tuple(spec[2:2 + nx])
        ny = spec[2 + nx]
        sy = tuple(spec[3 + nx:3 + nx + ny])
        return [sx, sy, np.broadcast_shapes(sx, sy)]
    if kind == MATMUL:
        p, q, r = spec[1:4]
        return [(p, q), (q, r), (p, r)]
    if kind == TRUNC:
        shape = tuple(spec[3:3 + spec[2]])
        return [shape, shape]
    raise ProtocolError(f"unknown triple kind {kind}")


@dataclass
class Triple:
    """One party's share of a correlated-randomness record."""

    spec: tuple[int, ...]
    parts: list[np.ndarray]

    @property
    def a(self):
        return self.parts[0]

    @property
    def b(self):
        return self.parts[1]

    @property
    def c(self):
        return self.parts[2]

    def to_words(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.parts]) if self.parts else np.zeros(0, DTYPE)

    @classmethod
    def from_words(cls, spec, words: np.ndarray) -> "Triple":
        parts, pos = [], 0
        for shape in spec_shapes(spec):
            n = int(np.prod(shape, dtype=np.int64))
            if pos + n > words.size:
                raise ProtocolError("triple payload too short")
            parts.append(words[pos:pos + n].reshape(shape))
            pos += n
        if pos != words.size:
            raise ProtocolError("triple payload has trailing words")
        return cls(tuple(int(s) for s in spec), parts)


@ring_op
def share_ring(value: np.ndarray, m: int, rng: np.random.Generator) -> list[np.ndarray]:
    value = np.asarray(value, dtype=DTYPE)
    shares = [uniform(rng, value.shape) for _ in range(m - 1)]
    last = value.copy()
    for s in shares:
        last -= s
    return shares + [last]


class TripleFactory:
    def __init__(self, m: int, seed: int | None = None):
        self.m = m
        self.rng = np.random.default_rng(seed)

    @ring_op
    def generate(self, spec: Sequence[int]) -> list[Triple]:
        spec = tuple(int(s) for s in spec)
        kind = spec[0]
        shapes = spec_shapes(spec)
        if kind == MUL:
            a, b = uniform(self.rng, shapes[0]), uniform(self.rng, shapes[1])
            values = [a, b, a * b]
        elif kind == MATMUL:
            a, b = uniform(self.rng, shapes[0]), uniform(self.rng, shapes[1])
            values = [a, b, a @ b]
        else:
            r = uniform(self.rng, shapes[0])
            values = [r, shift_right_signed(r, spec[1])]
        per_value = [share_ring(v, self.m, self.rng) for v in values]
        return [Triple(spec, [pv[i] for pv in per_value]) for i in range(self.m)]


def dealer_generate(spec, count: int, m: int, seed: int | None = None,
                    out_dir: str | Path | None = None, frac_bits: int = 20) -> list[list[Triple]]:
    """Generate ``count`` records of ``spec`` (or a list of specs, each once) for m parties.

    With ``out_dir`` the per-party streams are also written to
    ``party<i>.smtd`` files.
    """
    factory = TripleFactory(m, seed)
    specs = [spec] * count if spec and isinstance(spec[0], int) else list(spec) * count
    streams: list[list[Triple]] = [[] for _ in range(m)]
    for s in specs:
        for i, t in enumerate(factory.generate(s)):
            streams[i].append(t)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, stream in enumerate(streams):
            write_triple_file(out / f"party{i}.smtd", stream, frac_bits, m)
    return streams


# -- files ------------------------------------------------------------------

def write_triple_file(path: str | Path, triples: Sequence[Triple], frac_bits: int, m: int) -> None:
    with open(path, "wb") as fh:
        fh.write(FILE_HEADER.pack(MAGIC, VERSION, frac_bits, m))
        for t in triples:
            spec = np.asarray(t.spec, dtype=WIRE_DTYPE)
            data = t.to_words()
            fh.write(to_wire(np.array([spec.size], dtype=DTYPE)) + to_wire(spec))
            fh.write(to_wire(np.array([data.size], dtype=DTYPE)) + to_wire(data))


class FileTripleSource:
    """Reads one party's triple stream from disk, strictly in order."""

    def __init__(self, path: str | Path):
        raw = Path(path).read_bytes()
        if len(raw) < FILE_HEADER.size:
            raise ProtocolError("triple file too short")
        magic, version, self.frac_bits, self.m = FILE_HEADER.unpack_from(raw)
        if magic != MAGIC or version != VERSION:
            raise ProtocolError("not a triple file (bad magic or version)")
        self._words = from_wire(raw[FILE_HEADER.size:])
        self._pos = 0

    def _take(self, n: int) -> np.ndarray:
        if self._pos + n > self._words.size:
            raise TripleExhausted("triple file exhausted")
        out = self._words[self._pos:self._pos + n]
        self._pos += n
        return out

    def fetch(self, spec: Sequence[int]) -> Triple:
        want = tuple(int(s) for s in spec)
        if self._pos >= self._words.size:
            raise TripleExhausted("triple file exhausted")
        got = tuple(int(x) for x in self._take(int(self._take(1)[0])))
        if got != want:
            raise ProtocolError(f"next triple is {got}, protocol asked for {want}")
        return Triple.from_words(got, self._take(int(self._take(1)[0])))

    def close(self) -> None:
        pass


class MemoryTripleSource:
    def __init__(self, triples: Sequence[Triple]):
        self._triples = list(triples)
        self._pos = 0

    def fetch(self, spec: Sequence[int]) -> Triple:
        if self._pos >= len(self._triples):
            raise TripleExhausted("no triples left")
        t = self._triples[self._pos]
        if t.spec != tuple(int(s) for s in spec):
            raise ProtocolError(f"next triple is {t.spec}, protocol asked for {tuple(spec)}")
        self._pos += 1
        return t

    def close(self) -> None:
        pass


# -- online dealer ----------------------------------------------------------

class DealerClient:
    """Party-side stub requesting material over the session's dealer link."""

    def __init__(self, session: Session):
        self.session = session

    def fetch(self, spec: Sequence[int]) -> Triple:
        self.session.send_block(DEALER, MsgType.TRIPLE, np.asarray(spec, dtype=DTYPE))
        words = self.session.recv_block(DEALER, MsgType.TRIPLE)
        return Triple.from_words(spec, words)

    def close(self) -> None:
        if self.session.dealer is not None and not self.session.dealer.closed:
            self.session.send_block(DEALER, MsgType.TRIPLE, np.array([CLOSE], dtype=DTYPE))


def serve_dealer(channels: Sequence[Channel], seed: int | None = None) -> int:
    """Answer lock-step requests until every party sends CLOSE.

    Returns the number of records served.
    """
    m = len(channels)
    factory = TripleFactory(m, seed)
    served = 0
    while True:
        specs = []
        for ch in channels:
            msg_type, payload = decode_frame(ch.recv())
            if msg_type != MsgType.TRIPLE:
                raise ProtocolError(f"dealer expected a triple request, got {msg_type.name}")
            specs.append(tuple(int(w) for w in from_wire(payload)))
        if all(s == (CLOSE,) for s in specs):
            return served
        if any(s != specs[0] for s in specs):
            raise ProtocolError(f"parties disagree on triple request #{served}: {specs}")
        for ch, t in zip(channels, factory.generate(specs[0])):
            ch.send(encode_frame(MsgType.TRIPLE, to_wire(t.to_words())))
        served += 1
