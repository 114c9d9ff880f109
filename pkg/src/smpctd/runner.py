"""Drive m parties plus the dealer, either as threads or as TCP roles.

``run_local`` is the workhorse of the tests and the bench: it wires up
loopback sessions, starts one thread per party and one for the dealer, and
returns each party's result together with its metrics.  If any thread
fails, the shared abort event unblocks the rest.
"""

from __future__ import annotations

import threading
import traceback
from dataclasses import dataclass
from typing import Any, Callable

from .dealer import DealerClient, FileTripleSource, serve_dealer
from .errors import ChannelClosed, ChildFailure
from .mpc import Engine
from .ring import FixedPointCodec
from .transport import PartyConfig, SessionMetrics, dealer_listen, establish_session, loopback_sessions


@dataclass
class PartyResult:
    party_id: int
    value: Any
    metrics: SessionMetrics
    reveal_log: list


def run_local(m: int, fn: Callable[[Engine], Any], frac_bits: int = 20, seed: int = 0,
              session_id: str = "smpctd-local", debug: bool = False,
              timeout: float | None = None) -> list[PartyResult]:
    """Run ``fn(engine)`` on every party concurrently and collect results.

    The first exception raised by any party (or the dealer) is re-raised
    here; a ChannelClosed caused only by the abort is not reported in its
    place.
    """
    abort = threading.Event()
    sessions, dealer_side = loopback_sessions(m, frac_bits, session_id, abort)
    results: list[PartyResult | None] = [None] * m
    failures: list[tuple[str, BaseException, str]] = []
    lock = threading.Lock()

    def fail(who, exc):
        with lock:
            failures.append((who, exc, traceback.format_exc()))
        abort.set()

    def party(i):
        session = sessions[i]
        triples = DealerClient(session)
        engine = Engine(session, triples, FixedPointCodec(frac_bits), seed=seed, debug=debug)
        try:
            value = fn(engine)
            triples.close()
            results[i] = PartyResult(i, value, session.metrics_snapshot(), list(engine.reveal_log))
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            fail(f"party {i}", exc)

    def dealer():
        try:
            serve_dealer(dealer_side, seed=seed)
        except BaseException as exc:  # noqa: BLE001
            fail("dealer", exc)

    threads = [threading.Thread(target=party, args=(i,), daemon=True) for i in range(m)]
    threads.append(threading.Thread(target=dealer, daemon=True))
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    if any(t.is_alive() for t in threads):
        abort.set()
        for t in threads:
            t.join(5)
        raise ChildFailure("local run timed out")
    for s in sessions:
        s.close()
    if failures:
        real = [f for f in failures if not isinstance(f[1], ChannelClosed)] or failures
        raise real[0][1]
    return results  # type: ignore[return-value]


# -- one OS process per role ------------------------------------------------

def run_party(config: PartyConfig, task: str, mode: str, data, cfg=None, seed: int = 0,
              triple_file: str | None = None) -> PartyResult:
    """Party role over TCP: connect, run the pipeline, disconnect."""
    from .pipelines import party_main

    session = establish_session(config)
    try:
        triples = FileTripleSource(triple_file) if triple_file else DealerClient(session)
        engine = Engine(session, triples, FixedPointCodec(config.frac_bits), seed=seed)
        value = party_main(engine, task, mode, data, cfg)
        triples.close()
        return PartyResult(config.party_id, value, session.metrics_snapshot(), list(engine.reveal_log))
    finally:
        session.close()


def run_dealer(address: tuple[str, int], m: int, frac_bits: int = 20, session_id: str = "smpctd",
               seed: int = 0, timeout: float = 10.0) -> int:
    """Dealer role over TCP; returns the number of records served."""
    channels = dealer_listen(address, m, frac_bits, session_id, timeout)
    try:
        return serve_dealer(channels, seed=seed)
    finally:
        for ch in channels:
            ch.close()
