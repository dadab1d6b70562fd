"""Federated optimizers for compositional pairwise risks, their baselines,
and theory-driven hyperparameter schedules.

Two federated algorithms share one round structure (bootstrap exchange,
then R rounds of K local steps between exchanges):

* ``fedx1`` (linear outer function): each local step combines *active*
  factors (fresh scores and score gradients of locally sampled data at the
  current local model) with *lazy* factors (score records produced on all
  machines during the previous round, delivered via the server and drawn
  from a shuffled buffer without replacement).
* ``fedx2`` (nonlinear outer function): adds a per-positive-sample moving
  average ``u`` tracking the inner pairwise mean, a second lazy channel
  carrying u-records (co-shuffled with the positive-side score records so
  each drawn pair shares provenance), and a momentum average of the
  gradient estimates; model and momentum are both averaged by the server.

Baselines: ``local_sgd`` (per-sample logistic loss, model averaging),
``local_pair`` (the same update rules with lazy factors replaced by fresh
local partner scores, no history exchange), and ``centralized`` (one worker
on the union dataset; all pairs of the two minibatches, with the
moving-average machinery when the outer function is nonlinear).

Every random draw comes from a named substream keyed by
(seed, purpose, client, round, iteration), so any run is a pure function of
(config, seed) at any thread count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import ClientShard, FederatedDataset
from .federation import (
    SIDE_NEG,
    SIDE_POS,
    Buffer,
    HistorySet,
    InProcessTransport,
    RoundDownload,
    RoundUpload,
    ScoreRecord,
    URecord,
    comm_cost,
    run_round,
)
from .losses import (
    IDENTITY_OUTER,
    OuterFnSpec,
    PairwiseLossSpec,
    exact_grad,
    exact_objective,
    loss,
    loss_grads,
    outer_deriv,
)
from .metrics import ScoredEval, auc, partial_auc
from .model import ScorerSpec, init_params, score_grad_many, score_many
from .rng import substream

DEFAULT_PAUC_FPRS = (0.3, 0.5)


@dataclass(frozen=True)
class HyperParams:
    eta: float = 0.1
    K: int = 32
    R: int = 30
    B1: int = 32
    B2: int = 32
    gamma: float = 0.1
    beta: float = 0.1
    lr_decay_every: int | None = None
    lr_decay_factor: float = 0.1
    seed: int = 0
    history_samples: str = "independent"  # or "reuse": history/u emission batches

    def __post_init__(self) -> None:
        # eta = 0 is legal: frozen-model protocols rely on it.
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.lr_decay_factor <= 0:
            raise ValueError("lr_decay_factor must be positive")
        for name in ("K", "R", "B1", "B2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("gamma", "beta"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1]")
        if self.lr_decay_every is not None and self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1 or none")
        if self.history_samples not in ("independent", "reuse"):
            raise ValueError("history_samples must be 'independent' or 'reuse'")

    def eta_at(self, local_iter: int) -> float:
        """Step size in effect at a client's lifetime local iteration."""
        if self.lr_decay_every is None:
            return self.eta
        return self.eta * self.lr_decay_factor ** (local_iter // self.lr_decay_every)


def _ceil(x: float) -> int:
    # Guard against float fuzz: values within 1e-9 of an integer round to it.
    return int(math.ceil(x - 1e-9))


def theory_schedule(
    kind: str,
    target_eps: float,
    n_clients: int,
    max_shard: int = 1,
    scale: float = 1.0,
) -> HyperParams:
    """Hyperparameters from the convergence-guarantee schedules.

    ``fedx1``: R = ceil(scale/eps^3), eta = scale*N*eps^2,
    K = max(1, ceil(1/(N*eps))).
    ``fedx2`` (M = largest positive shard): R = ceil(scale*sqrt(M)/eps^3),
    eta = scale*eps^2/M, gamma = scale*eps^2, beta = scale*eps^2/sqrt(M),
    K = max(1, ceil(sqrt(M)/eps)); gamma and beta clamped to (0, 1].
    """
    if not (0.0 < target_eps < 1.0):
        raise ValueError("target_eps must be in (0, 1)")
    if scale <= 0:
        raise ValueError("scale must be positive")
    eps = target_eps
    if kind == "fedx1":
        return HyperParams(
            eta=scale * n_clients * eps**2,
            K=max(1, _ceil(1.0 / (n_clients * eps))),
            R=max(1, _ceil(scale / eps**3)),
        )
    if kind == "fedx2":
        m = max_shard
        root_m = math.sqrt(m)
        return HyperParams(
            eta=scale * eps**2 / m,
            K=max(1, _ceil(root_m / eps)),
            R=max(1, _ceil(scale * root_m / eps**3)),
            gamma=min(1.0, scale * eps**2),
            beta=min(1.0, scale * eps**2 / root_m),
        )
    raise ValueError(f"unknown schedule kind: {kind!r}")


def momentum_update(momentum: np.ndarray, estimate: np.ndarray, beta: float) -> np.ndarray:
    """(1 - beta) * momentum + beta * estimate."""
    return (1.0 - beta) * momentum + beta * estimate


class UTable:
    """Per-positive-sample moving-average estimates of the inner pairwise
    mean, keyed by sample id. Entries start at 0 and only change through
    :meth:`update`."""

    def __init__(self, ids) -> None:
        self._values: dict[int, float] = {int(i): 0.0 for i in ids}
        self._touched: set[int] = set()

    def __len__(self) -> int:
        return len(self._values)

    def value(self, sample_id: int) -> float:
        try:
            return self._values[int(sample_id)]
        except KeyError:
            raise ValueError(f"sample id {sample_id} is not in this u-table") from None

    def update(self, sample_id: int, value: float) -> None:
        sid = int(sample_id)
        if sid not in self._values:
            raise ValueError(f"sample id {sample_id} is not in this u-table")
        self._values[sid] = float(value)
        self._touched.add(sid)

    def touched(self, sample_id: int) -> bool:
        return int(sample_id) in self._touched

    def emission_value(self, sample_id: int, fallback: float) -> float:
        """Stored value if the entry was ever updated, else ``fallback``.

        Never-updated entries hold the initial 0, which would blow up the
        clamped outer derivative downstream; the fallback is the same
        full-replacement estimate the round-0 bootstrap uses.
        """
        if self.touched(sample_id):
            return self.value(sample_id)
        return float(fallback)

    def snapshot(self) -> dict[int, float]:
        return dict(self._values)


def fedx2_u_update(
    u_table: UTable,
    sample_id: int,
    fresh_score: float,
    lazy_neg: ScoreRecord,
    gamma: float,
    loss_spec: PairwiseLossSpec,
) -> float:
    """Moving-average update of one tracked inner mean.

    new = (1 - gamma) * old + gamma * loss(fresh_score, lazy_neg.value),
    reading the pre-update value. Returns the new value.
    """
    old = u_table.value(sample_id)
    new = (1.0 - gamma) * old + gamma * loss(loss_spec, fresh_score, lazy_neg.value)
    u_table.update(sample_id, new)
    return new


@dataclass(frozen=True)
class RunSettings:
    algorithm: str
    scorer: ScorerSpec
    loss: PairwiseLossSpec
    outer: OuterFnSpec
    hyper: HyperParams

    @property
    def seed(self) -> int:
        return self.hyper.seed


@dataclass
class ClientState:
    """One client's exclusively-owned mutable state."""

    index: int
    shard: ClientShard
    settings: RunSettings
    model: np.ndarray
    momentum: np.ndarray | None = None
    u_table: UTable | None = None
    pos_buffer: Buffer | None = None  # positive-side score records (paired with u-records under nonlinear f)
    neg_buffer: Buffer | None = None
    out_h1: list[ScoreRecord] = field(default_factory=list)
    out_h2: list[ScoreRecord] = field(default_factory=list)
    out_u: list[URecord] = field(default_factory=list)
    local_iters: int = 0


@dataclass
class RoundRecord:
    round: int
    wall_seconds: float
    objective: float | None
    grad_norm_sq: float | None
    auc: float | None
    pauc: dict[float, float] | None
    uplink_floats: int
    downlink_floats: int
    buffer_wraps: int


@dataclass
class IterationRecord:
    client: int
    round: int
    iteration: int
    loss_estimate: float
    step_size: float


@dataclass
class RunTrace:
    settings: RunSettings
    rounds: list[RoundRecord] = field(default_factory=list)
    iterations: list[IterationRecord] = field(default_factory=list)
    final_model: np.ndarray | None = None

    def final_round(self) -> RoundRecord:
        return self.rounds[-1]


def _draw_batch(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    """Indices of a without-replacement minibatch of size min(batch, n)."""
    return rng.choice(n, size=min(batch, n), replace=False)


def _record_values(records) -> np.ndarray:
    return np.array([r.value for r in records], dtype=float)


def fedx1_estimate(
    state: ClientState,
    iteration: int,
    z1_idx: np.ndarray,
    z2_idx: np.ndarray,
    lazy_neg: list[ScoreRecord],
    lazy_pos: list[ScoreRecord],
) -> np.ndarray:
    """Linear-outer gradient estimate from one pair of minibatches.

    Active factors (scores and score gradients of the sampled local data at
    the current local model) pair elementwise with the lazy score records;
    the fresh scores are appended to the outgoing histories with provenance
    (client, iteration, sample id).
    """
    if len(z1_idx) != len(lazy_neg) or len(z2_idx) != len(lazy_pos):
        raise ValueError("each active sample needs exactly one lazy record")
    s = state.settings
    shard = state.shard
    x1, x2 = shard.pos_X[z1_idx], shard.neg_X[z2_idx]
    a = score_many(s.scorer, state.model, x1)
    b = score_many(s.scorer, state.model, x2)
    lazy_neg_vals = _record_values(lazy_neg)
    lazy_pos_vals = _record_values(lazy_pos)
    d1, _ = loss_grads(s.loss, a, lazy_neg_vals)
    _, d2 = loss_grads(s.loss, lazy_pos_vals, b)
    j1 = score_grad_many(s.scorer, state.model, x1)
    j2 = score_grad_many(s.scorer, state.model, x2)
    g = (np.asarray(d1) @ j1) / len(z1_idx) + (np.asarray(d2) @ j2) / len(z2_idx)
    for sid, val in zip(shard.pos_ids[z1_idx], a):
        state.out_h1.append(ScoreRecord(float(val), state.index, iteration, int(sid)))
    for sid, val in zip(shard.neg_ids[z2_idx], b):
        state.out_h2.append(ScoreRecord(float(val), state.index, iteration, int(sid)))
    return g


def fedx2_estimate(
    state: ClientState,
    z1_idx: np.ndarray,
    z2_idx: np.ndarray,
    lazy_neg: list[ScoreRecord],
    lazy_pos: list[ScoreRecord],
    lazy_u: list[URecord],
) -> np.ndarray:
    """Nonlinear-outer gradient estimate.

    The positive-sample term weights each pair by the outer derivative at
    the just-updated tracked inner mean of that sample; the negative-sample
    term weights by the outer derivative at the lazy u-record paired (same
    provenance) with the lazy positive score. Pure: histories are not
    touched here.
    """
    if len(z1_idx) != len(lazy_neg):
        raise ValueError("each positive sample needs exactly one lazy negative score")
    if len(z2_idx) != len(lazy_pos) or len(z2_idx) != len(lazy_u):
        raise ValueError("each negative sample needs one lazy (score, u) pair")
    s = state.settings
    shard = state.shard
    x1, x2 = shard.pos_X[z1_idx], shard.neg_X[z2_idx]
    a = score_many(s.scorer, state.model, x1)
    b = score_many(s.scorer, state.model, x2)
    u_fresh = np.array(
        [state.u_table.value(sid) for sid in shard.pos_ids[z1_idx]], dtype=float
    )
    d1, _ = loss_grads(s.loss, a, _record_values(lazy_neg))
    _, d2 = loss_grads(s.loss, _record_values(lazy_pos), b)
    w1 = np.asarray(outer_deriv(s.outer, u_fresh)) * np.asarray(d1)
    w2 = np.asarray(outer_deriv(s.outer, _record_values(lazy_u))) * np.asarray(d2)
    j1 = score_grad_many(s.scorer, state.model, x1)
    j2 = score_grad_many(s.scorer, state.model, x2)
    return (w1 @ j1) / len(z1_idx) + (w2 @ j2) / len(z2_idx)


class _Program:
    """Per-algorithm client behavior plugged into the shared round engine."""

    uses_momentum = False
    uses_u = False
    shares_histories = False

    def __init__(self, settings: RunSettings) -> None:
        self.settings = settings

    def init_states(self, dataset: FederatedDataset) -> list[ClientState]:
        s = self.settings
        w0 = init_params(s.scorer, substream(s.seed, "init"))
        states = []
        for i, shard in enumerate(dataset.shards):
            st = ClientState(index=i, shard=shard, settings=s, model=w0.copy())
            if self.uses_momentum:
                st.momentum = np.zeros_like(w0)
            if self.uses_u:
                st.u_table = UTable(shard.pos_ids)
            if self.shares_histories:
                st.pos_buffer = Buffer()
                st.neg_buffer = Buffer()
            states.append(st)
        return states

    def _bootstrap_batches(self, st: ClientState):
        """K per-iteration batches per side, scored at the initial model."""
        s = self.settings
        for k in range(s.hyper.K):
            g = substream(s.seed, "bootstrap", st.index, k)
            z1 = _draw_batch(g, st.shard.n_pos, s.hyper.B1)
            z2 = _draw_batch(g, st.shard.n_neg, s.hyper.B2)
            a = score_many(s.scorer, st.model, st.shard.pos_X[z1])
            b = score_many(s.scorer, st.model, st.shard.neg_X[z2])
            yield k, z1, a, z2, b

    def bootstrap_upload(self, st: ClientState) -> RoundUpload:
        if self.shares_histories:
            for k, z1, a, z2, b in self._bootstrap_batches(st):
                for sid, val in zip(st.shard.pos_ids[z1], a):
                    st.out_h1.append(ScoreRecord(float(val), st.index, k, int(sid)))
                for sid, val in zip(st.shard.neg_ids[z2], b):
                    st.out_h2.append(ScoreRecord(float(val), st.index, k, int(sid)))
                if self.uses_u:
                    # Full-replacement estimates so the first cross-client
                    # u-draws are well away from the outer-derivative clamp.
                    for m, (sid, val) in enumerate(zip(st.shard.pos_ids[z1], a)):
                        partner = b[m % len(b)]
                        st.out_u.append(
                            URecord(
                                float(loss(self.settings.loss, val, partner)),
                                st.index,
                                k,
                                int(sid),
                            )
                        )
        return self._upload(st)

    def _upload(self, st: ClientState) -> RoundUpload:
        up = RoundUpload(
            client=st.index,
            model=st.model.copy(),
            h1=HistorySet(tuple(st.out_h1), SIDE_POS),
            h2=HistorySet(tuple(st.out_h2), SIDE_NEG),
            momentum=st.momentum.copy() if self.uses_momentum else None,
            u=tuple(st.out_u) if self.uses_u else None,
        )
        st.out_h1.clear()
        st.out_h2.clear()
        st.out_u.clear()
        return up

    def begin_round(self, st: ClientState, download: RoundDownload, round_idx: int) -> None:
        st.model = download.model.copy()
        if self.uses_momentum and download.momentum is not None:
            st.momentum = download.momentum.copy()
        if self.shares_histories:
            s = self.settings
            if self.uses_u:
                if len(download.r1) != len(download.p or ()):
                    raise ValueError("positive-side scores and u-records must align")
                paired = list(zip(download.r1.records, download.p))
                st.pos_buffer.refill(
                    paired, substream(s.seed, "buffer-pos", st.index, round_idx)
                )
            else:
                st.pos_buffer.refill(
                    download.r1.records,
                    substream(s.seed, "buffer-pos", st.index, round_idx),
                )
            st.neg_buffer.refill(
                download.r2.records,
                substream(s.seed, "buffer-neg", st.index, round_idx),
            )

    def local_step(self, st: ClientState, round_idx: int, k: int, eta: float) -> float:
        raise NotImplementedError

    def build_upload(self, st: ClientState, round_idx: int) -> RoundUpload:
        return self._upload(st)


class FedX1Program(_Program):
    shares_histories = True

    def local_step(self, st: ClientState, round_idx: int, k: int, eta: float) -> float:
        s = self.settings
        g = substream(s.seed, "step", st.index, round_idx, k)
        z1 = _draw_batch(g, st.shard.n_pos, s.hyper.B1)
        z2 = _draw_batch(g, st.shard.n_neg, s.hyper.B2)
        lazy_neg = st.neg_buffer.draw(len(z1))
        lazy_pos = st.pos_buffer.draw(len(z2))
        grad = fedx1_estimate(st, k, z1, z2, lazy_neg, lazy_pos)
        # Loss estimate pairs the fresh positive scores with their lazy partners.
        fresh = [r.value for r in st.out_h1[-len(z1):]]
        est = float(np.mean(loss(s.loss, np.array(fresh), _record_values(lazy_neg))))
        st.model = st.model - eta * grad
        return est


class FedX2Program(_Program):
    uses_momentum = True
    uses_u = True
    shares_histories = True

    def local_step(self, st: ClientState, round_idx: int, k: int, eta: float) -> float:
        s = self.settings
        g = substream(s.seed, "step", st.index, round_idx, k)
        z1 = _draw_batch(g, st.shard.n_pos, s.hyper.B1)
        z2 = _draw_batch(g, st.shard.n_neg, s.hyper.B2)
        lazy_neg = st.neg_buffer.draw(len(z1))
        pairs = st.pos_buffer.draw(len(z2))
        lazy_pos = [p[0] for p in pairs]
        lazy_u = [p[1] for p in pairs]

        a = score_many(s.scorer, st.model, st.shard.pos_X[z1])
        for m, sid in enumerate(st.shard.pos_ids[z1]):
            fedx2_u_update(
                st.u_table, int(sid), float(a[m]), lazy_neg[m], s.hyper.gamma, s.loss
            )
        grad = fedx2_estimate(st, z1, z2, lazy_neg, lazy_pos, lazy_u)

        if s.hyper.history_samples == "independent":
            zh1 = _draw_batch(g, st.shard.n_pos, s.hyper.B1)
            zh2 = _draw_batch(g, st.shard.n_neg, s.hyper.B2)
            ah = score_many(s.scorer, st.model, st.shard.pos_X[zh1])
            bh = score_many(s.scorer, st.model, st.shard.neg_X[zh2])
        else:
            zh1, zh2 = z1, z2
            ah = a
            bh = score_many(s.scorer, st.model, st.shard.neg_X[zh2])
        for sid, val in zip(st.shard.pos_ids[zh1], ah):
            st.out_h1.append(ScoreRecord(float(val), st.index, k, int(sid)))
        for sid, val in zip(st.shard.neg_ids[zh2], bh):
            st.out_h2.append(ScoreRecord(float(val), st.index, k, int(sid)))
        for m, (sid, val) in enumerate(zip(st.shard.pos_ids[zh1], ah)):
            fallback = loss(s.loss, float(val), lazy_neg[m % len(lazy_neg)].value)
            st.out_u.append(
                URecord(
                    st.u_table.emission_value(int(sid), fallback),
                    st.index,
                    k,
                    int(sid),
                )
            )

        st.momentum = momentum_update(st.momentum, grad, s.hyper.beta)
        st.model = st.model - eta * st.momentum
        return float(np.mean(loss(s.loss, a, _record_values(lazy_neg))))


class LocalSGDProgram(_Program):
    """Per-sample logistic loss on local data, model averaging each round."""

    def init_states(self, dataset: FederatedDataset) -> list[ClientState]:
        states = super().init_states(dataset)
        self._union_X = [
            np.vstack([st.shard.pos_X, st.shard.neg_X]) for st in states
        ]
        self._union_y = [
            np.concatenate([np.ones(st.shard.n_pos), -np.ones(st.shard.n_neg)])
            for st in states
        ]
        return states

    def local_step(self, st: ClientState, round_idx: int, k: int, eta: float) -> float:
        s = self.settings
        g = substream(s.seed, "step", st.index, round_idx, k)
        X, y = self._union_X[st.index], self._union_y[st.index]
        idx = _draw_batch(g, X.shape[0], s.hyper.B1 + s.hyper.B2)
        xb, yb = X[idx], y[idx]
        scores = score_many(s.scorer, st.model, xb)
        coeff = -yb * expit(-yb * scores)
        grad = coeff @ score_grad_many(s.scorer, st.model, xb) / len(idx)
        st.model = st.model - eta * grad
        return float(np.mean(np.logaddexp(0.0, -yb * scores)))


class LocalPairProgram(_Program):
    """Pairwise updates on local pairs only: the lazy slots are filled with
    fresh local scores of the opposite-side batch (m-th with m-th, cycling
    when the batch sizes differ). Nonlinear outer adds the local
    moving-average tracker and averaged momentum."""

    def __init__(self, settings: RunSettings) -> None:
        super().__init__(settings)
        self.nonlinear = settings.outer.kind != "identity"
        self.uses_momentum = self.nonlinear
        self.uses_u = self.nonlinear

    def bootstrap_upload(self, st: ClientState) -> RoundUpload:
        return self._upload(st)  # model (and zero momentum) only

    def local_step(self, st: ClientState, round_idx: int, k: int, eta: float) -> float:
        s = self.settings
        g = substream(s.seed, "step", st.index, round_idx, k)
        z1 = _draw_batch(g, st.shard.n_pos, s.hyper.B1)
        z2 = _draw_batch(g, st.shard.n_neg, s.hyper.B2)
        x1, x2 = st.shard.pos_X[z1], st.shard.neg_X[z2]
        a = score_many(s.scorer, st.model, x1)
        b = score_many(s.scorer, st.model, x2)
        n1, n2 = len(z1), len(z2)
        part_b = b[np.arange(n1) % n2]  # partner for each positive
        part_a = a[np.arange(n2) % n1]  # partner for each negative
        d1, _ = loss_grads(s.loss, a, part_b)
        _, d2 = loss_grads(s.loss, part_a, b)
        j1 = score_grad_many(s.scorer, st.model, x1)
        j2 = score_grad_many(s.scorer, st.model, x2)
        if self.nonlinear:
            ids1 = st.shard.pos_ids[z1]
            for m, sid in enumerate(ids1):
                old = st.u_table.value(int(sid))
                st.u_table.update(
                    int(sid),
                    (1.0 - s.hyper.gamma) * old
                    + s.hyper.gamma * loss(s.loss, float(a[m]), float(part_b[m])),
                )
            u1 = np.array([st.u_table.value(int(i)) for i in ids1])
            w1 = np.asarray(outer_deriv(s.outer, u1)) * np.asarray(d1)
            u2 = u1[np.arange(n2) % n1]
            w2 = np.asarray(outer_deriv(s.outer, u2)) * np.asarray(d2)
            grad = (w1 @ j1) / n1 + (w2 @ j2) / n2
            st.momentum = momentum_update(st.momentum, grad, s.hyper.beta)
            st.model = st.model - eta * st.momentum
        else:
            grad = (np.asarray(d1) @ j1) / n1 + (np.asarray(d2) @ j2) / n2
            st.model = st.model - eta * grad
        return float(np.mean(loss(s.loss, a, part_b)))


class CentralizedProgram(_Program):
    """Single worker over the union dataset; every pair of the two
    minibatches contributes. Nonlinear outer is the moving-average tracker
    algorithm with fresh same-iteration negative scores and momentum."""

    def __init__(self, settings: RunSettings) -> None:
        super().__init__(settings)
        self.nonlinear = settings.outer.kind != "identity"
        self.uses_momentum = self.nonlinear
        self.uses_u = self.nonlinear

    def local_step(self, st: ClientState, round_idx: int, k: int, eta: float) -> float:
        s = self.settings
        g = substream(s.seed, "step", st.index, round_idx, k)
        z1 = _draw_batch(g, st.shard.n_pos, s.hyper.B1)
        z2 = _draw_batch(g, st.shard.n_neg, s.hyper.B2)
        x1, x2 = st.shard.pos_X[z1], st.shard.neg_X[z2]
        a = score_many(s.scorer, st.model, x1)
        b = score_many(s.scorer, st.model, x2)
        n1, n2 = len(z1), len(z2)
        d1, d2 = loss_grads(s.loss, a[:, None], b[None, :])  # (n1, n2)
        j1 = score_grad_many(s.scorer, st.model, x1)
        j2 = score_grad_many(s.scorer, st.model, x2)
        if self.nonlinear:
            lmat = loss(s.loss, a[:, None], b[None, :])
            inner = lmat.mean(axis=1)
            ids1 = st.shard.pos_ids[z1]
            for m, sid in enumerate(ids1):
                old = st.u_table.value(int(sid))
                st.u_table.update(
                    int(sid),
                    (1.0 - s.hyper.gamma) * old + s.hyper.gamma * float(inner[m]),
                )
            fpu = np.asarray(
                outer_deriv(
                    s.outer, np.array([st.u_table.value(int(i)) for i in ids1])
                )
            )
            grad = ((fpu * d1.sum(axis=1)) @ j1 + (fpu @ d2) @ j2) / (n1 * n2)
            st.momentum = momentum_update(st.momentum, grad, s.hyper.beta)
            st.model = st.model - eta * st.momentum
            return float(lmat.mean())
        grad = (d1.sum(axis=1) @ j1 + d2.sum(axis=0) @ j2) / (n1 * n2)
        st.model = st.model - eta * grad
        return float(np.mean(loss(s.loss, a[:, None], b[None, :])))


def _union_dataset(dataset: FederatedDataset) -> FederatedDataset:
    pos_ids, pos_X = dataset.pos_union()
    neg_ids, neg_X = dataset.neg_union()
    return replace(dataset, shards=(ClientShard(pos_ids, pos_X, neg_ids, neg_X),))


class _Evaluator:
    """Exact-oracle and held-out-metric snapshots of a global model."""

    def __init__(self, dataset: FederatedDataset, settings: RunSettings, pauc_fprs):
        self.settings = settings
        self.pauc_fprs = tuple(pauc_fprs)
        _, self.pos_X = dataset.pos_union()
        _, self.neg_X = dataset.neg_union()
        self.eval_pos_X = dataset.eval_pos_X
        self.eval_neg_X = dataset.eval_neg_X

    def oracle(self, w: np.ndarray) -> tuple[float, float]:
        s = self.settings
        obj = exact_objective(s.loss, s.outer, s.scorer, w, self.pos_X, self.neg_X)
        grad = exact_grad(s.loss, s.outer, s.scorer, w, self.pos_X, self.neg_X)
        return obj, float(np.dot(grad, grad))

    def held_out(self, w: np.ndarray) -> tuple[float, dict[float, float]]:
        s = self.settings
        ev = ScoredEval(
            score_many(s.scorer, w, self.eval_pos_X),
            score_many(s.scorer, w, self.eval_neg_X),
        )
        return auc(ev), {f: partial_auc(ev, f) for f in self.pauc_fprs}


def _due(round_idx: int, last_round: int, every: int) -> bool:
    if round_idx in (0, last_round):
        return True
    return every > 0 and round_idx % every == 0


def _run_federation(
    program: _Program,
    dataset: FederatedDataset,
    *,
    trace_sink=None,
    eval_every: int = 1,
    oracle_every: int = 1,
    threads: int = 0,
    iteration_trace: bool = False,
    pauc_fprs=DEFAULT_PAUC_FPRS,
) -> RunTrace:
    settings = program.settings
    hyper = settings.hyper
    states = program.init_states(dataset)
    transport = InProcessTransport(len(states))
    evaluator = _Evaluator(dataset, settings, pauc_fprs)
    trace = RunTrace(settings=settings)

    def emit_round(idx, t_start, download, uploads, wraps):
        up_floats, down_floats = comm_cost(uploads[0], download)
        objective = grad_sq = auc_val = pauc_val = None
        if _due(idx, hyper.R, oracle_every):
            objective, grad_sq = evaluator.oracle(download.model)
        if _due(idx, hyper.R, eval_every):
            auc_val, pauc_val = evaluator.held_out(download.model)
        rec = RoundRecord(
            round=idx,
            wall_seconds=time.perf_counter() - t_start,
            objective=objective,
            grad_norm_sq=grad_sq,
            auc=auc_val,
            pauc=pauc_val,
            uplink_floats=up_floats,
            downlink_floats=down_floats,
            buffer_wraps=wraps,
        )
        trace.rounds.append(rec)
        if trace_sink is not None:
            trace_sink.on_round(rec)

    def total_wraps() -> int:
        return sum(
            buf.wraps
            for st in states
            for buf in (st.pos_buffer, st.neg_buffer)
            if buf is not None
        )

    t_start = time.perf_counter()
    download, uploads = run_round(
        states, lambda st, dl: program.bootstrap_upload(st), None, transport, threads
    )
    emit_round(0, t_start, download, uploads, 0)

    for r in range(1, hyper.R + 1):
        t_start = time.perf_counter()
        wraps_before = total_wraps()
        iter_records: dict[int, list[IterationRecord]] = {}

        def client_round(st: ClientState, dl: RoundDownload) -> RoundUpload:
            program.begin_round(st, dl, r)
            recs = []
            for k in range(hyper.K):
                eta_k = hyper.eta_at(st.local_iters)
                est = program.local_step(st, r, k, eta_k)
                if not np.all(np.isfinite(st.model)):
                    raise FloatingPointError(
                        f"model diverged (non-finite entries) on client {st.index} "
                        f"at round {r}, iteration {k}; reduce the step size"
                    )
                st.local_iters += 1
                if iteration_trace:
                    recs.append(IterationRecord(st.index, r, k, est, eta_k))
            iter_records[st.index] = recs
            return program.build_upload(st, r)

        download, uploads = run_round(states, client_round, download, transport, threads)
        if iteration_trace:
            for i in sorted(iter_records):
                trace.iterations.extend(iter_records[i])
                if trace_sink is not None:
                    for rec in iter_records[i]:
                        trace_sink.on_iteration(rec)
        emit_round(r, t_start, download, uploads, total_wraps() - wraps_before)

    trace.final_model = download.model.copy()
    return trace


def fedx1_run(
    dataset: FederatedDataset,
    scorer: ScorerSpec,
    loss_spec: PairwiseLossSpec,
    hyper: HyperParams,
    **engine_kwargs,
) -> RunTrace:
    """Linear-outer federated run. The outer function is forced to identity."""
    settings = RunSettings("fedx1", scorer, loss_spec, IDENTITY_OUTER, hyper)
    return _run_federation(FedX1Program(settings), dataset, **engine_kwargs)


def fedx2_run(
    dataset: FederatedDataset,
    scorer: ScorerSpec,
    loss_spec: PairwiseLossSpec,
    outer: OuterFnSpec,
    hyper: HyperParams,
    **engine_kwargs,
) -> RunTrace:
    """Nonlinear-outer federated run; requires a nonlinear outer function."""
    if outer.kind == "identity":
        raise ValueError("fedx2 requires a nonlinear outer function (kl_log)")
    settings = RunSettings("fedx2", scorer, loss_spec, outer, hyper)
    return _run_federation(FedX2Program(settings), dataset, **engine_kwargs)


def local_sgd_run(
    dataset: FederatedDataset,
    scorer: ScorerSpec,
    loss_spec: PairwiseLossSpec,
    outer: OuterFnSpec,
    hyper: HyperParams,
    **engine_kwargs,
) -> RunTrace:
    """Logistic-loss local SGD with model averaging. The configured pairwise
    loss and outer function are used only for objective reporting."""
    settings = RunSettings("local_sgd", scorer, loss_spec, outer, hyper)
    return _run_federation(LocalSGDProgram(settings), dataset, **engine_kwargs)


def local_pair_run(
    dataset: FederatedDataset,
    scorer: ScorerSpec,
    loss_spec: PairwiseLossSpec,
    outer: OuterFnSpec,
    hyper: HyperParams,
    **engine_kwargs,
) -> RunTrace:
    settings = RunSettings("local_pair", scorer, loss_spec, outer, hyper)
    return _run_federation(LocalPairProgram(settings), dataset, **engine_kwargs)


def centralized_run(
    dataset: FederatedDataset,
    scorer: ScorerSpec,
    loss_spec: PairwiseLossSpec,
    outer: OuterFnSpec,
    hyper: HyperParams,
    **engine_kwargs,
) -> RunTrace:
    settings = RunSettings("centralized", scorer, loss_spec, outer, hyper)
    return _run_federation(
        CentralizedProgram(settings), _union_dataset(dataset), **engine_kwargs
    )


RUNNERS = {
    "fedx1": fedx1_run,
    "fedx2": fedx2_run,
    "local_sgd": local_sgd_run,
    "local_pair": local_pair_run,
    "centralized": centralized_run,
}
