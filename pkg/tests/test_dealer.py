import numpy as np
import pytest

from smpctd.dealer import (FileTripleSource, MemoryTripleSource, Triple, TripleFactory, dealer_generate,
                           matmul_spec, mul_spec, trunc_spec)
from smpctd.errors import ProtocolError, TripleExhausted
from smpctd.ring import shift_right_signed


def _open(parts):
    total = np.zeros_like(parts[0])
    for p in parts:
        total += p
    return total


def test_scalar_triple_exact():
    for m in (2, 3, 5):
        shares = TripleFactory(m, seed=1).generate(mul_spec((), ()))
        a, b, c = (_open([t.parts[k] for t in shares]) for k in range(3))
        assert c == a * b


def test_matrix_triple_exact():
    shares = TripleFactory(3, seed=2).generate(matmul_spec(2, 2, 2))
    a, b, c = (_open([t.parts[k] for t in shares]) for k in range(3))
    np.testing.assert_array_equal(c, a @ b)


def test_broadcast_mul_triple():
    shares = TripleFactory(2, seed=3).generate(mul_spec((4, 1), (1, 3)))
    a, b, c = (_open([t.parts[k] for t in shares]) for k in range(3))
    assert c.shape == (4, 3)
    np.testing.assert_array_equal(c, a * b)


def test_trunc_pair():
    shares = TripleFactory(3, seed=4).generate(trunc_spec(20, (50,)))
    r, rt = (_open([t.parts[k] for t in shares]) for k in range(2))
    np.testing.assert_array_equal(rt, shift_right_signed(r, 20))


def test_seeded_streams_identical():
    s1 = dealer_generate(mul_spec((3,), (3,)), 4, 2, seed=9)
    s2 = dealer_generate(mul_spec((3,), (3,)), 4, 2, seed=9)
    s3 = dealer_generate(mul_spec((3,), (3,)), 4, 2, seed=10)
    words = lambda s: np.concatenate([t.to_words() for stream in s for t in stream])
    np.testing.assert_array_equal(words(s1), words(s2))
    assert not np.array_equal(words(s1), words(s3))


def test_file_roundtrip(tmp_path):
    spec = matmul_spec(2, 3, 2)
    streams = dealer_generate(spec, 3, 2, seed=5, out_dir=tmp_path)
    src = FileTripleSource(tmp_path / "party1.smtd")
    assert (src.frac_bits, src.m) == (20, 2)
    for expected in streams[1]:
        got = src.fetch(spec)
        np.testing.assert_array_equal(got.to_words(), expected.to_words())
    with pytest.raises(TripleExhausted):
        src.fetch(spec)


def test_file_spec_mismatch_and_bad_magic(tmp_path):
    dealer_generate(mul_spec((2,), (2,)), 1, 2, seed=5, out_dir=tmp_path)
    with pytest.raises(ProtocolError):
        FileTripleSource(tmp_path / "party0.smtd").fetch(mul_spec((3,), (3,)))
    (tmp_path / "bad.smtd").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ProtocolError):
        FileTripleSource(tmp_path / "bad.smtd")


def test_memory_source_exhausts():
    spec = mul_spec((), ())
    src = MemoryTripleSource(dealer_generate(spec, 1, 2, seed=0)[0])
    src.fetch(spec)
    with pytest.raises(TripleExhausted):
        src.fetch(spec)


def test_words_roundtrip():
    t = TripleFactory(2, seed=0).generate(matmul_spec(2, 3, 4))[0]
    back = Triple.from_words(t.spec, t.to_words())
    assert [p.shape for p in back.parts] == [(2, 3), (3, 4), (2, 4)]
    with pytest.raises(ProtocolError):
        Triple.from_words(t.spec, t.to_words()[:-1])
