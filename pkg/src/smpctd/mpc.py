"""Semi-honest additive secret sharing over Z_{2^64} with dealer triples.

Each party runs the same code against its own :class:`Engine`; every
method that communicates must be called by all parties in the same order.
Values live at fixed-point scale f.  Products are computed at scale 2f and
truncated back: locally for two parties, with a dealer truncation pair for
three or more.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import dealer as dl
from .errors import BoundViolation, MissingShare, RangeError, ShapeMismatch
from .ring import DTYPE, FixedPointCodec, ring_op, shift_right_signed
from .transport import MsgType, Session


@dataclass
class RevealRecord:
    subtask_label: str
    shape: tuple[int, ...]
    irreversible: bool
    timestamp: float
    bytes_offset: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return json.dumps(d)


class SecretShareTensor:
    """This party's additive share of a secret tensor at scale ``frac_bits``."""

    __slots__ = ("data", "frac_bits", "engine", "__weakref__")

    def __init__(self, data: np.ndarray, frac_bits: int, engine: "Engine | None" = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.frac_bits = frac_bits
        self.engine = engine
        if engine is not None:
            engine._track(self.data.size)

    def __del__(self):
        eng = getattr(self, "engine", None)
        if eng is not None:
            eng._track(-self.data.size)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def scale(self) -> int:
        return self.frac_bits

    @property
    def size(self) -> int:
        return self.data.size

    def _wrap(self, data) -> "SecretShareTensor":
        return SecretShareTensor(data, self.frac_bits, self.engine)

    def _check(self, other: "SecretShareTensor"):
        if other.frac_bits != self.frac_bits:
            raise ShapeMismatch(f"scale {self.frac_bits} vs {other.frac_bits}")
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ShapeMismatch(f"shapes {self.shape} and {other.shape} do not broadcast") from None

    def _public(self, c) -> np.ndarray:
        """Encoding of a public constant as this party's share of it."""
        codec = FixedPointCodec(self.frac_bits)
        enc = np.asarray(codec.encode(np.asarray(c, dtype=np.float64)), dtype=DTYPE)
        pid = self.engine.party_id if self.engine is not None else 0
        return enc if pid == 0 else np.zeros_like(enc)

    @ring_op
    def __add__(self, other):
        if isinstance(other, SecretShareTensor):
            self._check(other)
            return self._wrap(self.data + other.data)
        return self._wrap(self.data + self._public(other))

    __radd__ = __add__

    @ring_op
    def __sub__(self, other):
        if isinstance(other, SecretShareTensor):
            self._check(other)
            return self._wrap(self.data - other.data)
        return self._wrap(self.data - self._public(other))

    @ring_op
    def __rsub__(self, other):
        return self._wrap(self._public(other) - self.data)

    @ring_op
    def __neg__(self):
        return self._wrap(np.zeros_like(self.data) - self.data)

    @ring_op
    def mul_int(self, k) -> "SecretShareTensor":
        """Multiply by a public integer: purely local, no rescaling."""
        return self._wrap(self.data * np.asarray(k, dtype=np.int64).astype(DTYPE))

    @property
    def T(self):
        return self._wrap(self.data.T.copy())

    def __getitem__(self, idx):
        return self._wrap(np.array(self.data[idx], dtype=DTYPE))

    def reshape(self, *shape):
        return self._wrap(self.data.reshape(*shape).copy())

    @ring_op
    def sum(self, axis=None, keepdims=False):
        return self._wrap(np.asarray(self.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)))

    def diagonal(self):
        return self._wrap(np.diagonal(self.data).copy())

    def __repr__(self):
        return f"SecretShareTensor(shape={self.shape}, f={self.frac_bits})"


def stack(parts: Sequence[SecretShareTensor], axis=0) -> SecretShareTensor:
    first = parts[0]
    return SecretShareTensor(np.stack([p.data for p in parts], axis=axis), first.frac_bits, first.engine)


def concatenate(parts: Sequence[SecretShareTensor], axis=0) -> SecretShareTensor:
    first = parts[0]
    return SecretShareTensor(np.concatenate([p.data for p in parts], axis=axis), first.frac_bits, first.engine)


def eye_like(x: SecretShareTensor, n: int):
    """Shared public identity of size n (only party 0 holds the encoding)."""
    return SecretShareTensor(x._public(np.eye(n)), x.frac_bits, x.engine)


# -- dealer/test-harness side helpers ---------------------------------------

def share(secret, m: int, rng_seed=None, codec: FixedPointCodec | None = None) -> list[SecretShareTensor]:
    """Split reals into m additive shares; m-1 uniform, the last balances."""
    codec = codec or FixedPointCodec()
    enc = np.asarray(codec.encode(np.asarray(secret, dtype=np.float64)), dtype=DTYPE)
    rng = np.random.default_rng(rng_seed)
    return [SecretShareTensor(s, codec.frac_bits) for s in dl.share_ring(enc, m, rng)]


@ring_op
def reconstruct(shares: Sequence[SecretShareTensor | None], m: int | None = None,
                codec: FixedPointCodec | None = None, record: RevealRecord | None = None,
                log: list | None = None) -> np.ndarray:
    """Sum all parties' shares and decode; optionally append ``record`` to ``log``."""
    if m is not None and len(shares) != m or any(s is None for s in shares):
        raise MissingShare(f"need {m or len(shares)} shares")
    first = shares[0]
    for s in shares[1:]:
        if s.shape != first.shape or s.frac_bits != first.frac_bits:
            raise ShapeMismatch(f"share shapes/scales differ: {first.shape}/{first.frac_bits} vs {s.shape}/{s.frac_bits}")
    total = np.zeros(first.shape, dtype=DTYPE)
    for s in shares:
        total += s.data
    if record is not None and log is not None:
        log.append(record)
    return (codec or FixedPointCodec(first.frac_bits)).decode(total)


# -- the per-party engine ---------------------------------------------------

# extra fractional bits kept on x*y inside the Newton step
NEWTON_EXTRA_BITS = 4


class Engine:
    def __init__(self, session: Session, triples, codec: FixedPointCodec | None = None,
                 seed: int | None = None, debug: bool = False):
        self.session = session
        self.triples = triples
        self.codec = codec or FixedPointCodec(session.frac_bits)
        self.f = self.codec.frac_bits
        self.party_id = session.party_id
        self.m = session.m
        self.rng = np.random.default_rng(None if seed is None else [seed, session.party_id])
        self.debug = debug
        self.reveal_log: list[RevealRecord] = []
        self._live = 0

    # bookkeeping
    def _track(self, delta: int) -> None:
        self._live += delta
        if delta > 0:
            self.session.note_live_elements(self._live)

    @property
    def live_elements(self) -> int:
        return self._live

    def _wrap(self, data) -> SecretShareTensor:
        return SecretShareTensor(data, self.f, self)

    def constant(self, c) -> SecretShareTensor:
        enc = np.asarray(self.codec.encode(np.asarray(c, dtype=np.float64)), dtype=DTYPE)
        return self._wrap(enc if self.party_id == 0 else np.zeros_like(enc))

    def zeros(self, shape) -> SecretShareTensor:
        return self._wrap(np.zeros(shape, dtype=DTYPE))

    # input / output
    @ring_op
    def input(self, owner: int, value=None, shape=None) -> SecretShareTensor:
        """Secret-share ``value`` held by ``owner``; everyone else passes ``shape``."""
        self.session.begin_round()
        if self.party_id == owner:
            enc = np.asarray(self.codec.encode(np.asarray(value, dtype=np.float64)), dtype=DTYPE)
            parts = dl.share_ring(enc, self.m, self.rng)
            for peer in range(self.m):
                if peer != owner:
                    self.session.send_block(peer, MsgType.DATA, parts[peer].reshape(-1))
            return self._wrap(parts[owner])
        got = self.session.recv_block(owner, MsgType.DATA)
        try:
            # a -1 in ``shape`` lets the owner's row count show through
            return self._wrap(got.reshape(shape))
        except ValueError:
            raise ShapeMismatch(f"party {owner} shared {got.size} elements, expected shape {shape}") from None

    @ring_op
    def input_all(self, value) -> list[SecretShareTensor]:
        """Every party shares its own same-shaped value in a single round."""
        self.session.begin_round()
        enc = np.asarray(self.codec.encode(np.asarray(value, dtype=np.float64)), dtype=DTYPE)
        parts = dl.share_ring(enc, self.m, self.rng)
        for peer in sorted(self.session.peers):
            self.session.send_block(peer, MsgType.DATA, parts[peer].reshape(-1))
        out: list[SecretShareTensor] = [None] * self.m  # type: ignore[list-item]
        out[self.party_id] = self._wrap(parts[self.party_id])
        for peer in sorted(self.session.peers):
            got = self.session.recv_block(peer, MsgType.DATA)
            if got.size != enc.size:
                raise ShapeMismatch(f"party {peer} shared {got.size} elements, expected {enc.size}")
            out[peer] = self._wrap(got.reshape(enc.shape))
        return out

    @ring_op
    def reveal(self, x: SecretShareTensor, label: str, irreversible: bool = False) -> np.ndarray:
        """Reconstruct ``x`` to every party and log the reveal."""
        offset = self.session.metrics_snapshot().bytes_sent
        blocks = self.session.exchange(x.data, MsgType.REVEAL)
        total = np.zeros(x.data.size, dtype=DTYPE)
        for b in blocks:
            total += b
        self.reveal_log.append(RevealRecord(label, tuple(x.shape), irreversible, time.time(), offset))
        return self.codec.decode(total.reshape(x.shape))

    def write_reveal_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.reveal_log:
                fh.write(rec.to_json() + "\n")

    @ring_op
    def _open(self, blocks: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Publish masked values (never logged: they are uniformly random)."""
        flat = np.concatenate([b.reshape(-1) for b in blocks]) if blocks else np.zeros(0, DTYPE)
        total = np.zeros(flat.size, dtype=DTYPE)
        for part in self.session.exchange(flat, MsgType.DATA):
            total += part
        out, pos = [], 0
        for b in blocks:
            out.append(total[pos:pos + b.size].reshape(b.shape))
            pos += b.size
        return out

    # truncation
    @ring_op
    def truncate_raw(self, raws: Sequence[np.ndarray], bits: Sequence[int] | int) -> list[np.ndarray]:
        if isinstance(bits, int):
            bits = [bits] * len(raws)
        if self.m == 2:
            if self.party_id == 0:
                return [shift_right_signed(r, b) for r, b in zip(raws, bits)]
            return [np.zeros_like(r) - shift_right_signed(np.zeros_like(r) - r, b) for r, b in zip(raws, bits)]
        pairs = [self.triples.fetch(dl.trunc_spec(b, r.shape)) for r, b in zip(raws, bits)]
        opened = self._open([r - p.a for r, p in zip(raws, pairs)])
        out = []
        for c, p, b in zip(opened, pairs, bits):
            res = p.b.copy()
            if self.party_id == 0:
                res += shift_right_signed(c, b)
            out.append(res)
        return out

    def truncate(self, x: SecretShareTensor, bits: int | None = None) -> SecretShareTensor:
        return self._wrap(self.truncate_raw([x.data], self.f if bits is None else bits)[0])

    # multiplication
    @ring_op
    def mul_batch(self, ops: Sequence[tuple]) -> list[SecretShareTensor]:
        """Run independent products in one opening round.

        Each op is ``("mul", x, y)`` (elementwise, broadcasting) or
        ``("matmul", x, y)``, optionally followed by extra right-shift bits
        applied on top of the usual f.
        """
        triples, blocks = [], []
        for op in ops:
            kind, x, y = op[:3]
            if kind == "mul":
                try:
                    np.broadcast_shapes(x.shape, y.shape)
                except ValueError:
                    raise ShapeMismatch(f"cannot multiply {x.shape} by {y.shape}") from None
                spec = dl.mul_spec(x.shape, y.shape)
            elif kind == "matmul":
                if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[0]:
                    raise ShapeMismatch(f"cannot matmul {x.shape} by {y.shape}")
                spec = dl.matmul_spec(x.shape[0], x.shape[1], y.shape[1])
            else:
                raise ValueError(f"unknown product kind {kind!r}")
            t = self.triples.fetch(spec)
            triples.append(t)
            blocks += [x.data - t.a, y.data - t.b]
        opened = self._open(blocks)
        raws, bits = [], []
        for i, (op, t) in enumerate(zip(ops, triples)):
            e, d = opened[2 * i], opened[2 * i + 1]
            if op[0] == "mul":
                z = t.c + e * t.b + t.a * d
                if self.party_id == 0:
                    z = z + e * d
            else:
                z = t.c + e @ t.b + t.a @ d
                if self.party_id == 0:
                    z = z + e @ d
            raws.append(z)
            bits.append(self.f + (op[3] if len(op) > 3 else 0))
        return [self._wrap(r) for r in self.truncate_raw(raws, bits)]

    def mul(self, x: SecretShareTensor, y: SecretShareTensor, extra_bits: int = 0) -> SecretShareTensor:
        return self.mul_batch([("mul", x, y, extra_bits)])[0]

    def matmul(self, x: SecretShareTensor, y: SecretShareTensor) -> SecretShareTensor:
        return self.mul_batch([("matmul", x, y)])[0]

    @ring_op
    def scale_public(self, x: SecretShareTensor, c) -> SecretShareTensor:
        """Multiply by a public real.

        Small constants are encoded with up to 10 extra fractional bits so
        that e.g. 1/N keeps about f significant bits.
        """
        c = np.asarray(c, dtype=np.float64)
        peak = float(np.max(np.abs(c))) if c.size else 0.0
        if not math.isfinite(peak) or peak * 2**self.f >= 2**62:
            raise RangeError(f"public factor {peak} out of range")
        extra = 0
        if 0 < peak < 1:
            extra = min(10, max(0, -math.floor(math.log2(peak))))
        k = self.f + extra
        factor = np.rint(c * 2.0**k).astype(np.int64).view(DTYPE)
        return self._wrap(self.truncate_raw([x.data * factor], k)[0])

    @ring_op
    def matmul_public(self, x: SecretShareTensor, p) -> SecretShareTensor:
        """Product of a shared matrix with a public matrix or vector (local plus truncation)."""
        enc = np.asarray(self.codec.encode(np.asarray(p, dtype=np.float64)), dtype=DTYPE)
        return self._wrap(self.truncate_raw([x.data @ enc], self.f)[0])

    def add_local(self, x: SecretShareTensor, y: SecretShareTensor) -> SecretShareTensor:
        return x + y

    # nonlinear
    def inv_sqrt(self, x: SecretShareTensor, bound: float | None = None, rounds: int = 15,
                 guess: SecretShareTensor | None = None, floor: float = 0.0) -> SecretShareTensor:
        """Newton iteration y <- y (3 - x y^2) / 2 towards 1/sqrt(x).

        Starts from the public 1/sqrt(bound) unless a (shared) ``guess`` is
        given; with a guess, ``bound`` only picks the product order.
        Starting below the root, iterates increase monotonically and never
        overshoot.  ``floor`` is a public offset added to x first.
        """
        if floor:
            x = x + floor
        if self.debug and bound is not None and guess is None:
            vals = self._debug_open(x)
            if np.any(vals <= 0) or np.any(vals > bound * (1 + 1e-6) + self.codec.ulp):
                raise BoundViolation(f"inv_sqrt input outside (0, {bound}]")
        if guess is None:
            if bound is None or bound <= 0:
                raise RangeError("inv_sqrt needs a positive public bound or a guess")
            y = self.constant(np.full(x.shape, 1.0 / math.sqrt(bound)))
        else:
            y = guess
        # x*y ~ sqrt(x) is kept NEWTON_EXTRA_BITS finer so small x keeps its
        # relative precision without forming y*y ~ 1/x, which for tiny x
        # would push raw products near the ring capacity.  The update is
        # written y + y(1 - w)/2 so its product shrinks as Newton converges.
        k = NEWTON_EXTRA_BITS
        for _ in range(rounds):
            z = self.mul(x, y, extra_bits=-k)
            w = self.mul(z, y, extra_bits=k)
            y = y + self.mul(y, 1.0 - w, extra_bits=1)
        return y

    def sqrt(self, x: SecretShareTensor, bound: float | None = None, rounds: int = 15,
             guess: SecretShareTensor | None = None, floor: float = 0.0) -> SecretShareTensor:
        return self.mul(x, self.inv_sqrt(x, bound, rounds, guess, floor))

    def _debug_open(self, x: SecretShareTensor) -> np.ndarray:
        return self.codec.decode(self._open([x.data])[0])


def plain_inv_sqrt_newton(x, bound: float, rounds: int, codec: FixedPointCodec | None = None):
    """Plaintext Newton with the same start and round count.

    With ``codec`` every intermediate is rounded to the fixed-point grid,
    mimicking the shared computation.
    """
    q = (lambda v: np.rint(np.asarray(v) * codec.scale) / codec.scale) if codec else (lambda v: np.asarray(v, dtype=np.float64))
    fine = (lambda v: np.rint(np.asarray(v) * codec.scale * 2 ** NEWTON_EXTRA_BITS)
            / (codec.scale * 2 ** NEWTON_EXTRA_BITS)) if codec else q
    x = q(x)
    y = q(np.full(np.shape(x), 1.0 / math.sqrt(bound)))
    for _ in range(rounds):
        w = q(fine(x * y) * y)
        y = y + q(y * (1.0 - w) / 2.0)
    return y
