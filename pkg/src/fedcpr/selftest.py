"""Built-in invariant suite behind the ``selftest`` CLI command.

A fast, dependency-free subset of the full pytest suite: cross-checks each
dual-route pair (analytic vs finite-difference gradients, sorted vs
brute-force AUC, estimator vs reduction identities) and the determinism and
accounting contracts. Returns structured results so the CLI can exit 4 on
any failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algorithms import (
    FedX1Program,
    FedX2Program,
    HyperParams,
    RunSettings,
    fedx1_estimate,
    fedx1_run,
    fedx2_estimate,
    fedx2_run,
    momentum_update,
)
from .data import DataConfig, build_dataset
from .federation import Buffer, ScoreRecord, URecord
from .losses import (
    IDENTITY_OUTER,
    OuterFnSpec,
    PairwiseLossSpec,
    exact_grad,
    exact_objective,
    loss,
)
from .metrics import ScoredEval, auc, auc_bruteforce, partial_auc
from .model import ScorerSpec, finite_diff_grad, score, score_grad
from .rng import substream


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _check_score_gradients() -> CheckResult:
    rng = np.random.default_rng(11)
    worst = 0.0
    for spec in (ScorerSpec("linear", 6), ScorerSpec("mlp1", 5, hidden_dim=3)):
        for _ in range(20):
            w = rng.standard_normal(spec.param_count)
            x = rng.standard_normal(spec.input_dim)
            g = score_grad(spec, w, x)
            fd = finite_diff_grad(lambda v: score(spec, v, x), w, 1e-5)
            err = np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(g))
            worst = max(worst, err)
    return CheckResult("score gradients vs finite differences", worst <= 1e-5,
                       f"worst rel err {worst:.2e}")


def _check_exact_gradient() -> CheckResult:
    rng = np.random.default_rng(5)
    scorer = ScorerSpec("mlp1", 4, hidden_dim=3)
    loss_spec = PairwiseLossSpec("kl_opauc", lam=2.0)
    outer = OuterFnSpec("kl_log", lam=2.0)
    pos = rng.standard_normal((5, 4))
    neg = rng.standard_normal((7, 4))
    w = 0.5 * rng.standard_normal(scorer.param_count)
    g = exact_grad(loss_spec, outer, scorer, w, pos, neg)
    fd = finite_diff_grad(
        lambda v: exact_objective(loss_spec, outer, scorer, v, pos, neg), w, 1e-5
    )
    err = np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(g))
    return CheckResult("exact gradient vs finite differences", err <= 1e-5,
                       f"rel err {err:.2e}")


def _check_psm_symmetry() -> CheckResult:
    rng = np.random.default_rng(3)
    spec = PairwiseLossSpec("psm_sigmoid")
    a = rng.uniform(-30, 30, 500)
    b = rng.uniform(-30, 30, 500)
    gap = np.abs(loss(spec, a, b) + loss(spec, b, a) - 1.0).max()
    return CheckResult("psm symmetry", gap <= 1e-12, f"max |l(a,b)+l(b,a)-1| {gap:.2e}")


def _check_auc_routes() -> CheckResult:
    rng = np.random.default_rng(7)
    for _ in range(20):
        ev = ScoredEval(
            rng.integers(0, 6, rng.integers(1, 30)).astype(float),
            rng.integers(0, 6, rng.integers(1, 30)).astype(float),
        )
        if auc(ev) != auc_bruteforce(ev):
            return CheckResult("auc sorted vs brute force", False, "mismatch")
        if partial_auc(ev, 1.0) != auc(ev):
            return CheckResult("auc sorted vs brute force", False,
                               "partial_auc(1) != auc")
    return CheckResult("auc sorted vs brute force", True)


def _toy_states(outer):
    cfg = DataConfig(n_pos_per_client=5, n_neg_per_client=9, input_dim=4,
                     n_clients=2, hetero_var=0, hetero_base=0, hetero_step=0, seed=2)
    ds = build_dataset(cfg)
    hyper = HyperParams(eta=0.05, K=3, R=2, B1=3, B2=4, seed=2)
    settings = RunSettings("fedx2", ScorerSpec("linear", 4),
                           PairwiseLossSpec("kl_opauc", lam=2.0), outer, hyper)
    program = FedX2Program(settings)
    return program.init_states(ds)[0]


def _check_estimator_reduction() -> CheckResult:
    st = _toy_states(IDENTITY_OUTER)
    rng = np.random.default_rng(9)
    z1 = np.array([0, 2, 4])
    z2 = np.array([1, 3, 5, 7])
    lazy_neg = [ScoreRecord(float(v), 0, 0, i) for i, v in enumerate(rng.normal(size=3))]
    lazy_pos = [ScoreRecord(float(v), 1, 0, i) for i, v in enumerate(rng.normal(size=4))]
    lazy_u = [URecord(1.0 + float(abs(v)), 1, 0, i)
              for i, v in enumerate(rng.normal(size=4))]
    for sid in st.shard.pos_ids[z1]:
        st.u_table.update(int(sid), 1.5)
    g2 = fedx2_estimate(st, z1, z2, lazy_neg, lazy_pos, lazy_u)
    g1 = fedx1_estimate(st, 0, z1, z2, lazy_neg, lazy_pos)
    ok = np.array_equal(g1, g2)
    return CheckResult("fedx2 with identity outer equals fedx1", ok)


def _check_momentum_closed_form() -> CheckResult:
    rng = np.random.default_rng(13)
    g0 = rng.standard_normal(6)
    g = rng.standard_normal(6)
    beta = 0.3
    mom = g0.copy()
    for _ in range(12):
        mom = momentum_update(mom, g, beta)
    expected = (1 - beta) ** 12 * g0 + (1 - (1 - beta) ** 12) * g
    gap = np.abs(mom - expected).max()
    return CheckResult("momentum closed form", gap <= 1e-12, f"max gap {gap:.2e}")


def _check_buffer() -> CheckResult:
    records = list(range(52))
    buf = Buffer()
    buf.refill(records, substream(1, "selftest-buffer"))
    first = buf.draw(30) + buf.draw(22)
    ok = sorted(first) == records and buf.wraps == 0
    buf2 = Buffer()
    buf2.refill(records, substream(1, "selftest-buffer"))
    ok = ok and buf2.draw(52) == first
    return CheckResult("buffer permutation and replay", ok)


def _fedx1_trace(seed: int):
    cfg = DataConfig(n_pos_per_client=4, n_neg_per_client=8, input_dim=3,
                     n_clients=2, hetero_var=0, hetero_base=0, hetero_step=0,
                     seed=seed)
    ds = build_dataset(cfg)
    hyper = HyperParams(eta=0.05, K=4, R=3, B1=2, B2=2, seed=seed)
    return fedx1_run(ds, ScorerSpec("linear", 3), PairwiseLossSpec("square"), hyper)


def _check_comm_accounting() -> CheckResult:
    trace = _fedx1_trace(4)
    d, K, B = 3, 4, 2
    ok = all(rec.uplink_floats == d + 2 * K * B for rec in trace.rounds)
    ok = ok and all(rec.buffer_wraps == 0 for rec in trace.rounds)
    return CheckResult("communication accounting", ok)


def _check_replay() -> CheckResult:
    a, b = _fedx1_trace(6), _fedx1_trace(6)
    same = all(
        ra.objective == rb.objective
        and ra.grad_norm_sq == rb.grad_norm_sq
        and ra.auc == rb.auc
        for ra, rb in zip(a.rounds, b.rounds)
    ) and np.array_equal(a.final_model, b.final_model)

    cfg = DataConfig(n_pos_per_client=4, n_neg_per_client=8, input_dim=3,
                     n_clients=2, hetero_var=0, hetero_base=0, hetero_step=0, seed=8)
    ds = build_dataset(cfg)
    hyper = HyperParams(eta=0.01, K=3, R=2, B1=2, B2=2, gamma=0.5, beta=0.5, seed=8)
    kw = dict(
        scorer=ScorerSpec("linear", 3),
        loss_spec=PairwiseLossSpec("kl_opauc", lam=2.0),
        outer=OuterFnSpec("kl_log", lam=2.0),
        hyper=hyper,
    )
    t1 = fedx2_run(ds, **kw)
    t2 = fedx2_run(ds, **kw)
    same = same and np.array_equal(t1.final_model, t2.final_model)
    return CheckResult("deterministic replay", same)


def run_selftest() -> list[CheckResult]:
    checks = [
        _check_score_gradients,
        _check_exact_gradient,
        _check_psm_symmetry,
        _check_auc_routes,
        _check_estimator_reduction,
        _check_momentum_closed_form,
        _check_buffer,
        _check_comm_accounting,
        _check_replay,
    ]
    return [fn() for fn in checks]
