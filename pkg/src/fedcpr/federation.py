"""Round-based communication fabric: score histories, shuffled buffers,
u-record exchange, server aggregation, and message accounting.

One round = every client uploads (model, this round's histories, and for
the nonlinear-f algorithm its momentum and u-records), the server averages
the models (and momenta) and concatenates the record sets in client-index
order, and the aggregate is broadcast back. Clients consume the received
records through :class:`Buffer`, a shuffled queue drawn without replacement;
records consumed in round r were produced in round r-1, never earlier,
because buffers are flushed and refilled from the fresh aggregate each
round.

Record provenance (client, iteration, sample_id) is carried for
testability; the math needs only the float values.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SIDE_POS = "pos"  # records of positive-side (S1) scores
SIDE_NEG = "neg"  # records of negative-side (S2) scores


class ProtocolError(RuntimeError):
    """A violation of the round exchange contract."""


@dataclass(frozen=True, slots=True)
class ScoreRecord:
    """One historical prediction score with provenance."""

    value: float
    client: int
    iteration: int
    sample_id: int


@dataclass(frozen=True, slots=True)
class URecord:
    """One communicated inner-mean estimate with provenance."""

    value: float
    client: int
    iteration: int
    sample_id: int


@dataclass(frozen=True)
class HistorySet:
    records: tuple[ScoreRecord, ...]
    side: str

    def __post_init__(self) -> None:
        if self.side not in (SIDE_POS, SIDE_NEG):
            raise ValueError(f"unknown history side: {self.side!r}")

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class RoundUpload:
    client: int
    model: np.ndarray
    h1: HistorySet  # positive-side scores produced this round
    h2: HistorySet  # negative-side scores produced this round
    momentum: np.ndarray | None = None  # nonlinear-f algorithms only
    u: tuple[URecord, ...] | None = None  # nonlinear-f algorithms only


@dataclass(frozen=True)
class RoundDownload:
    model: np.ndarray
    r1: HistorySet  # aggregated positive-side history
    r2: HistorySet  # aggregated negative-side history
    momentum: np.ndarray | None = None
    p: tuple[URecord, ...] | None = None


def tree_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Mean with deterministic pairwise-tree summation in list order."""

    def tree_sum(lo: int, hi: int) -> np.ndarray:
        if hi - lo == 1:
            return vectors[lo]
        mid = (lo + hi) // 2
        return tree_sum(lo, mid) + tree_sum(mid, hi)

    return tree_sum(0, len(vectors)) / len(vectors)


def server_aggregate(uploads: Sequence[RoundUpload]) -> RoundDownload:
    """Average models (and momenta), concatenate record sets in client order.

    Arrival order does not matter: uploads are sorted by client index before
    reducing. Client indices must be exactly 0..N-1.
    """
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    ordered = sorted(uploads, key=lambda u: u.client)
    if [u.client for u in ordered] != list(range(len(ordered))):
        raise ProtocolError(
            f"expected client indices 0..{len(ordered) - 1}, "
            f"got {[u.client for u in ordered]}"
        )
    dim = ordered[0].model.size
    if any(u.model.size != dim for u in ordered):
        raise ProtocolError("uploaded models have mismatched lengths")
    with_momentum = [u.momentum is not None for u in ordered]
    if any(with_momentum) and not all(with_momentum):
        raise ProtocolError("momentum must be present on all uploads or none")
    with_u = [u.u is not None for u in ordered]
    if any(with_u) and not all(with_u):
        raise ProtocolError("u-records must be present on all uploads or none")

    model = tree_mean([u.model for u in ordered])
    momentum = tree_mean([u.momentum for u in ordered]) if all(with_momentum) else None
    r1_records: list[ScoreRecord] = []
    r2_records: list[ScoreRecord] = []
    for u in ordered:
        r1_records.extend(u.h1.records)
        r2_records.extend(u.h2.records)
    p: tuple[URecord, ...] | None = None
    if all(with_u):
        p = tuple(rec for u in ordered for rec in u.u)
    return RoundDownload(
        model=model,
        r1=HistorySet(tuple(r1_records), SIDE_POS),
        r2=HistorySet(tuple(r2_records), SIDE_NEG),
        momentum=momentum,
        p=p,
    )


class Buffer:
    """Shuffled queue of received records, drawn sequentially without
    replacement. If a draw exhausts the buffer mid-round it reshuffles the
    same entries and continues (wrap-around); ``wraps`` counts those events
    so tests can assert they never happen under default configurations.
    """

    def __init__(self) -> None:
        self._entries: list | None = None
        self._order: np.ndarray | None = None
        self._rng: np.random.Generator | None = None
        self.cursor = 0
        self.wraps = 0

    def __len__(self) -> int:
        return 0 if self._entries is None else len(self._entries)

    def refill(self, received: Sequence, rng: np.random.Generator) -> None:
        """Flush and replace contents with a permutation of ``received``."""
        received = list(received)
        if not received:
            raise ProtocolError("cannot refill a buffer from an empty aggregate")
        self._entries = received
        self._rng = rng
        self._reshuffle()

    def _reshuffle(self) -> None:
        assert self._entries is not None and self._rng is not None
        self._order = self._rng.permutation(len(self._entries))
        self.cursor = 0

    def draw(self, count: int) -> list:
        """Next ``count`` entries in permutation order."""
        if self._entries is None:
            raise ProtocolError("buffer was never refilled")
        if count < 1:
            raise ValueError("count must be positive")
        out = []
        while len(out) < count:
            if self.cursor >= len(self._entries):
                self._reshuffle()
                self.wraps += 1
            out.append(self._entries[self._order[self.cursor]])
            self.cursor += 1
        return out


def _u_len(u: tuple[URecord, ...] | None) -> int:
    return 0 if u is None else len(u)


def comm_cost(upload: RoundUpload, download: RoundDownload) -> tuple[int, int]:
    """(uplink_floats, downlink_floats): every real number in the messages.

    Provenance integers are excluded; see :func:`comm_cost_ints`.
    """
    up = upload.model.size + len(upload.h1) + len(upload.h2) + _u_len(upload.u)
    if upload.momentum is not None:
        up += upload.momentum.size
    down = download.model.size + len(download.r1) + len(download.r2) + _u_len(download.p)
    if download.momentum is not None:
        down += download.momentum.size
    return int(up), int(down)


def comm_cost_ints(upload: RoundUpload, download: RoundDownload) -> tuple[int, int]:
    """Provenance integers (client, iteration, sample_id per record),
    counted separately from the float payload."""
    up = 3 * (len(upload.h1) + len(upload.h2) + _u_len(upload.u))
    down = 3 * (len(download.r1) + len(download.r2) + _u_len(download.p))
    return up, down


class InProcessTransport:
    """The one mandated transport: an in-process mailbox with deterministic
    delivery. Contract: all N clients upload, the server aggregates once
    (barrier: no partial aggregation), and the single aggregate is the
    download for every client. A socket transport could implement the same
    two methods without touching algorithm code.
    """

    def __init__(self, n_clients: int) -> None:
        self.n_clients = n_clients
        self._pending: list[RoundUpload] = []

    def upload(self, message: RoundUpload) -> None:
        self._pending.append(message)

    def exchange(self) -> RoundDownload:
        if len(self._pending) != self.n_clients:
            raise ProtocolError(
                f"expected {self.n_clients} uploads, got {len(self._pending)}"
            )
        download = server_aggregate(self._pending)
        self._pending = []
        return download


def run_round(
    clients: Sequence,
    round_fn: Callable,
    download: RoundDownload | None,
    transport: InProcessTransport,
    threads: int = 0,
) -> tuple[RoundDownload, list[RoundUpload]]:
    """Execute one synchronous round.

    ``round_fn(client, download) -> RoundUpload`` runs each client's local
    work (possibly in parallel across clients: each client owns its state
    exclusively and all randomness is substream-derived, so any degree of
    parallelism yields bitwise-identical results). All uploads are collected
    before aggregation; no client observes round r+1 state before every
    round-r upload is in.
    """
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            uploads = list(pool.map(lambda c: round_fn(c, download), clients))
    else:
        uploads = [round_fn(c, download) for c in clients]
    for up in uploads:
        transport.upload(up)
    return transport.exchange(), uploads
