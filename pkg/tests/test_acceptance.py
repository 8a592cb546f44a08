"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines appear in the
terminal summary) or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import time
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest
from scipy.special import logsumexp

from fedmpt import fedsim, transport
from fedmpt import numerics as nx
from fedmpt.config import parse_config
from fedmpt.encoders import TextEncoder, VisualEncoder, encode_visual
from fedmpt.fedsim import ClientState, FedConfig, Server, run_experiment
from fedmpt.model import FedMPTModel, ModelHyper
from fedmpt.numerics import Tape
from fedmpt.objectives import UNKNOWN, AslConfig, asl_loss, f1_scores, mean_average_precision
from fedmpt.runner import execute, metrics_csv, run_config
from fedmpt.transport import TransportProblem, sinkhorn

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)


# ---------------------------------------------------------------- criterion 1


class _FrozenPlans:
    """Replays the plans of a reference forward pass so every re-evaluation holds them fixed."""

    def __init__(self):
        self.plans: list | None = None
        self.calls = 0

    def __call__(self, prob, max_iters=transport.DEFAULT_MAX_ITERS, tol=transport.DEFAULT_TOL):
        if self.plans is None:
            raise RuntimeError("reference plans not recorded")
        plan = self.plans[self.calls % len(self.plans)]
        self.calls += 1
        return plan


def _small_fedmpt(seed=0):
    tenc = TextEncoder(seed, token_dim=8, D=8)
    venc = VisualEncoder(seed, input_dim=6, M=4, D=8)
    hyper = ModelHyper(D_s=4, beta_cond=2, beta_cls=2)
    model = FedMPTModel(["background", "shape", "action"], ["a", "b", "c", "d"], tenc, M=4, hyper=hyper, seed=seed)
    rng = np.random.default_rng(seed + 11)
    for p in model.parameters():  # move off the initial point so no gradient is trivially zero
        p.data[...] += rng.normal(0.0, 0.3, p.shape)
    patches = encode_visual(venc, rng.normal(size=(5, 6))).data
    labels = rng.integers(0, 2, size=(5, 4))
    labels[0, 1] = UNKNOWN
    return model, patches, labels


def test_criterion_1_gradients(monkeypatch):
    start = time.perf_counter()
    model, patches, labels = _small_fedmpt()
    params = model.parameters()

    recorded = []
    real = transport.sinkhorn

    def recording(prob, max_iters=transport.DEFAULT_MAX_ITERS, tol=transport.DEFAULT_TOL):
        plan = real(prob, max_iters, tol)
        recorded.append(plan)
        return plan

    monkeypatch.setattr(transport, "sinkhorn", recording)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = model.loss(patches, labels)
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    frozen = _FrozenPlans()
    frozen.plans = recorded
    monkeypatch.setattr(transport, "sinkhorn", frozen)

    rng = np.random.default_rng(2024)
    picks = [(p, int(rng.integers(p.data.size))) for p in params]
    while len(picks) < 20:
        p = params[int(rng.integers(len(params)))]
        picks.append((p, int(rng.integers(p.data.size))))

    h = 1e-5
    worst = 0.0
    for p, flat in picks:
        idx = np.unravel_index(flat, p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = model.loss(patches, labels).item()
        p.data[idx] = orig - h
        down = model.loss(patches, labels).item()
        p.data[idx] = orig
        fd = (up - down) / (2 * h)
        a = analytic[p.name][idx]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-7)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 60 and len(picks) == 20
    report(1, ok, f"20 parameters, worst relative error {worst:.2e} (<= 1e-3), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 2


def _log_sinkhorn(Cst, a, b, lam, iters=100_000, tol=1e-15):
    """Log-domain Sinkhorn oracle with dual potentials f, g."""
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    la, lb = np.log(a), np.log(b)
    for _ in range(iters):
        f = lam * (la - logsumexp((g[None, :] - Cst) / lam, axis=1))
        g = lam * (lb - logsumexp((f[:, None] - Cst) / lam, axis=0))
        P = np.exp((f[:, None] + g[None, :] - Cst) / lam)
        if np.abs(P.sum(axis=1) - a).max() < tol:
            break
    return P


def _problem(Cst, a, b, lam):
    S = 1.0 - Cst
    return TransportProblem(S=nx.Tensor(S), Cst=Cst, a=a, b=b, lam=lam)


def _vertex_ot(Cst, a, b):
    """Exact 2x2 OT: the polytope is a segment in P11; the optimum sits at an endpoint."""
    best, best_cost = None, np.inf
    for x in (max(0.0, a[0] - b[1]), min(a[0], b[0])):
        P = np.array([[x, a[0] - x], [b[0] - x, a[1] - b[0] + x]])
        cost = float((P * Cst).sum())
        if cost < best_cost:
            best, best_cost = P, cost
    return best


def test_criterion_2_sinkhorn():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_plan = worst_marg = 0.0
    for i in range(100):
        M, C = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        lam = (0.05, 0.2, 1.0)[i % 3]
        Cst = rng.uniform(0.0, 1.0, (M, C))
        a = rng.dirichlet(np.ones(M))
        b = rng.dirichlet(np.ones(C))
        plan = sinkhorn(_problem(Cst, a, b, lam), max_iters=100_000, tol=1e-10)
        oracle = _log_sinkhorn(Cst, a, b, lam)
        worst_plan = max(worst_plan, np.abs(plan.P - oracle).max())
        worst_marg = max(worst_marg, np.abs(plan.P.sum(1) - a).max(), np.abs(plan.P.sum(0) - b).max())

    worst_vertex = 0.0
    for _ in range(100):
        Cst = rng.uniform(0.0, 1.0, (2, 2))
        if abs(Cst[0, 0] + Cst[1, 1] - Cst[0, 1] - Cst[1, 0]) < 0.2:
            continue  # near-tied vertices: the LP optimum is not unique enough to compare against
        a = rng.dirichlet(np.ones(2))
        b = rng.dirichlet(np.ones(2))
        plan = sinkhorn(_problem(Cst, a, b, 0.01), max_iters=100_000, tol=1e-10)
        worst_vertex = max(worst_vertex, np.abs(plan.P - _vertex_ot(Cst, a, b)).max())
    elapsed = time.perf_counter() - start
    ok = worst_plan <= 1e-8 and worst_marg <= 1e-8 and worst_vertex <= 1e-3 and elapsed < 60
    report(
        2, ok,
        f"plan vs log-domain oracle {worst_plan:.1e}, marginals {worst_marg:.1e} (<= 1e-8); "
        f"2x2 vertex gap {worst_vertex:.1e} (<= 1e-3), {elapsed:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_asl():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = AslConfig(gamma_pos=0.0, gamma_neg=0.0, clip=0.0)
    worst = 0.0
    for _ in range(1000):
        B, C = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        p = rng.uniform(1e-3, 1 - 1e-3, (B, C))
        y = rng.integers(0, 2, (B, C))
        unknown = rng.random((B, C)) < 0.2
        unknown[:, 0] = False
        y = np.where(unknown, UNKNOWN, y)
        known = y != UNKNOWN
        terms = np.where(y == 1, np.log(p), np.log(1 - p))
        bce = np.mean([-terms[i][known[i]].mean() for i in range(B)])
        worst = max(worst, abs(asl_loss(p, y, cfg).item() - bce))

    clip_cfg = AslConfig(clip=0.05)
    grid = np.linspace(0.001, 0.2, 400)
    zero_below = all(asl_loss(np.array([q]), np.array([0]), clip_cfg).item() == 0.0 for q in grid if q <= 0.05)
    nonzero_above = all(asl_loss(np.array([q]), np.array([0]), clip_cfg).item() > 0.0 for q in grid if q > 0.05)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and zero_below and nonzero_above
    report(3, ok, f"BCE reduction max error {worst:.1e} (<= 1e-12); clip zeroes negatives iff p <= c: "
                  f"{zero_below and nonzero_above}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 4


def _tiny_world(seed=0, n=64):
    rng = np.random.default_rng(seed)
    venc = VisualEncoder(seed, input_dim=6, M=4, D=8)
    tenc = TextEncoder(seed, token_dim=8, D=8)
    patches = encode_visual(venc, rng.normal(size=(n, 6))).data
    labels = (rng.random((n, 4)) < 0.3).astype(np.int64)
    labels[labels.sum(1) == 0, 0] = 1

    def make():
        return FedMPTModel(["background", "shape"], ["a", "b", "c", "d"], tenc, M=4, hyper=ModelHyper(D_s=4), seed=seed)

    return patches, labels, make


def test_criterion_4_fedavg_degeneracy(monkeypatch):
    start = time.perf_counter()
    rounds, lr, batch = 20, 0.5, 16
    patches, labels, make = _tiny_world()

    # centralized oracle: the same shuffles, plain SGD, no bundles anywhere
    central = make()
    params = central.parameters()
    cseed = 99
    for r in range(rounds):
        order = np.random.default_rng([cseed, r, 0]).permutation(len(labels))
        for s in range(0, len(order), batch):
            idx = order[s : s + batch]
            with Tape() as tape:
                loss = central.loss(patches[idx], labels[idx])
            tape.backward(loss)
            nx.sgd_step(params, lr)

    cfg = FedConfig(K=1, rounds=rounds, participation=1.0, seed=0)
    server = Server(make(), cfg)
    client = ClientState(0, patches, labels, make(), seed=cseed, lr=lr, batch=batch)
    run_experiment(cfg, server, [client], patches, labels, eval_interval=rounds)
    bitwise = all(np.array_equal(server.bundle.entries[k], v) for k, v in central.state().items())

    # identical shards with identical shuffles: the average must equal every client bundle
    captured: list = []
    real_local = fedsim.local_train

    def capture(client, epochs=None, round_idx=0):
        bundle = real_local(client, epochs, round_idx)
        captured.append(bundle)
        return bundle

    monkeypatch.setattr(fedsim, "local_train", capture)
    cfg3 = FedConfig(K=3, rounds=rounds, participation=1.0, seed=0)
    server3 = Server(make(), cfg3)
    clients = [ClientState(k, patches, labels, make(), seed=cseed, lr=lr, batch=batch) for k in range(3)]
    worst = 0.0
    for r in range(rounds):
        captured.clear()
        fedsim.run_round(server3, clients, cfg3, r)
        for b in captured:
            for k, v in server3.bundle.entries.items():
                worst = max(worst, float(np.abs(v - b.entries[k]).max()))
    elapsed = time.perf_counter() - start
    ok = bitwise and worst <= 1e-12 and elapsed < 120
    report(4, ok, f"K=1 run bit-identical to centralized over {rounds} rounds: {bitwise}; "
                  f"symmetric clients max gap {worst:.1e} (<= 1e-12), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 5

F = Fraction


def _ap_enumerated(scores, labels):
    """Precision at the rank of each positive, by explicit enumeration (stable ties)."""
    ranked = sorted((i for i in range(len(scores)) if labels[i] != UNKNOWN), key=lambda i: (-scores[i], i))
    hits, precisions = 0, []
    for rank, i in enumerate(ranked, start=1):
        if labels[i] == 1:
            hits += 1
            precisions.append(F(hits, rank))
    return sum(precisions) / len(precisions) if precisions else None


METRIC_CASES = [
    # (scores, labels, expected mAP, expected (CF1, OF1) at 0.5)
    ([[0.9], [0.8], [0.7]], [[0], [1], [1]], F(7, 12), (F(4, 5), F(4, 5))),
    ([[0.9, 0.1], [0.2, 0.8]], [[1, 0], [0, 1]], F(1), (F(1), F(1))),
    ([[0.1, 0.9], [0.8, 0.2]], [[1, 0], [0, 1]], F(1, 2), (F(0), F(0))),
    ([[0.6, 0.7], [0.4, 0.2], [0.9, 0.3]], [[1, 0], [0, 1], [0, 0]], F(5, 12), (F(1, 3), F(2, 5))),
    ([[0.4], [0.4], [0.4]], [[0], [1], [0]], F(1, 2), (F(0), F(0))),
    ([[0.5], [0.5]], [[1], [0]], F(1), (F(2, 3), F(2, 3))),
    ([[0.3, 0.6], [0.3, 0.4]], [[1, UNKNOWN], [UNKNOWN, 1]], F(1), (F(0), F(0))),
    ([[0.9, 0.2, 0.6], [0.1, 0.7, 0.6], [0.5, 0.3, 0.1]], [[1, 0, 1], [0, 1, 0], [1, 0, 0]], F(1), (F(8, 9), F(8, 9))),
    ([[0.2], [0.3], [0.4], [0.1]], [[1], [0], [1], [0]], F(1, 2) * (1 + F(2, 3)), (F(0), F(0))),
    ([[0.8, 0.1], [0.7, 0.9], [0.6, 0.55]], [[0, 0], [1, 0], [1, 1]], F(13, 24), (F(11, 15), F(3, 4))),
    ([[0.55, 0.45], [0.45, 0.55]], [[1, 1], [0, 0]], F(1, 2) * (1 + F(1, 2)), (F(1, 2), F(1, 2))),
]


def test_criterion_5_metrics():
    worst = 0.0
    for scores, labels, want_map, (want_cf1, want_of1) in METRIC_CASES:
        s, y = np.array(scores, dtype=float), np.array(labels)
        aps = [_ap_enumerated(list(s[:, c]), list(y[:, c])) for c in range(s.shape[1])]
        enumerated = sum(a for a in aps if a is not None) / sum(a is not None for a in aps)
        assert enumerated == want_map  # the hand-written expectation and the enumerator agree
        cf1, of1 = f1_scores(s, y, 0.5)
        worst = max(
            worst,
            abs(mean_average_precision(s, y) - float(want_map)),
            abs(cf1 - float(want_cf1)),
            abs(of1 - float(want_of1)),
        )
    worked = mean_average_precision(np.array([[0.9], [0.8], [0.7]]), np.array([[0], [1], [1]]))
    ok = worst <= 1e-12 and abs(worked - 0.5833333333333334) <= 1e-12
    report(5, ok, f"{len(METRIC_CASES)} crafted instances, max error {worst:.1e} (<= 1e-12); worked AP = {worked:.5f}")
    assert ok


# ---------------------------------------------------------- criteria 6 and 7

SEEDS = (0, 1, 2)
# one schedule for both models; only the model kind changes between arms
PROTOCOL = {"fed": {"rounds": 80}, "hyper": {"lr": 2.0}, "eval_interval": 80}


@lru_cache(maxsize=None)
def final_map(model: str, seed: int, t: float, mask: float) -> float:
    doc = {**PROTOCOL, "model": model, "seed": seed,
           "partition": {"t_percent": t}, "mask": {"mask_percent": mask}}
    report_, _ = execute(parse_config(doc))
    return report_.records[-1]["mAP"]


def test_criterion_6_heterogeneity():
    start = time.perf_counter()
    table = {
        (m, t): float(np.mean([final_map(m, s, t, 0.0) for s in SEEDS]))
        for m in ("fedmpt", "baseline") for t in (10.0, 40.0, 100.0)
    }
    drop = {m: table[(m, 10.0)] - table[(m, 100.0)] for m in ("fedmpt", "baseline")}
    elapsed = time.perf_counter() - start
    ok = drop["fedmpt"] < drop["baseline"] and elapsed < 15 * 60
    means = ", ".join(f"{m}@t={t:g}: {v:.3f}" for (m, t), v in table.items())
    report(6, ok, f"mAP drop t=10 -> t=100: fedmpt {drop['fedmpt']:+.4f} vs baseline {drop['baseline']:+.4f} "
                  f"({means}), {elapsed:.0f}s")
    assert ok


def test_criterion_7_masking():
    start = time.perf_counter()
    table = {
        (m, k): float(np.mean([final_map(m, s, 60.0, k) for s in SEEDS]))
        for m in ("fedmpt", "baseline") for k in (0.0, 70.0)
    }
    loss = {m: table[(m, 0.0)] - table[(m, 70.0)] for m in ("fedmpt", "baseline")}
    elapsed = time.perf_counter() - start
    ok = loss["fedmpt"] > 0 and loss["baseline"] > 0 and loss["fedmpt"] <= loss["baseline"] and elapsed < 10 * 60
    report(7, ok, f"mAP lost at Mask=70%: fedmpt {loss['fedmpt']:+.4f} vs baseline {loss['baseline']:+.4f}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_determinism(tmp_path):
    doc = {"generator": {"samples": 240, "eval_samples": 120}, "fed": {"rounds": 3, "participation": 0.5},
           "partition": {"t_percent": 40}, "mask": {"mask_percent": 30}, "hyper": {"lr": 1.0}}
    same = True
    for model in ("fedmpt", "baseline"):
        a = run_config(parse_config({**doc, "model": model, "output_dir": str(tmp_path / f"{model}_a")}))
        b = run_config(parse_config({**doc, "model": model, "output_dir": str(tmp_path / f"{model}_b")}))
        same &= a["records"] == b["records"]
        same &= (tmp_path / f"{model}_a" / "metrics.csv").read_bytes() == (tmp_path / f"{model}_b" / "metrics.csv").read_bytes()
        same &= (tmp_path / f"{model}_a" / "bundle.json").read_bytes() == (tmp_path / f"{model}_b" / "bundle.json").read_bytes()
        replay, _ = execute(parse_config(a["config"]))
        same &= metrics_csv(replay.records) == (tmp_path / f"{model}_a" / "metrics.csv").read_text()
    report(8, same, f"repeated runs and snapshot replays byte-identical: {same}")
    assert same


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
