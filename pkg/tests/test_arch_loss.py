import csv
import itertools
import math

import numpy as np
import pytest

from toposearch import tensor as T
from toposearch.arch_loss import (
    DEFAULT_LAMBDA,
    DEFAULT_OP_FACTORS,
    LOG_FIELDS,
    NonFiniteGradientError,
    append_log_row,
    arch_grads,
    arch_loss_total,
    build_memory_table,
    entropy_alpha,
    entropy_eta,
    memory_expected,
    memory_expected_patterns,
    memory_loss,
    topology_loss,
)
from toposearch.relax import EPS, ArchParams, relax_all, relax_tensors
from toposearch.space import SearchSpace, SpaceConfig

CLAMP = -math.log(EPS)


def onehot_eta(I, M):
    eta = np.zeros((len(I), M))
    eta[np.arange(len(I)), np.asarray(I) - 1] = 1.0
    return eta


def test_entropy_alpha_examples():
    assert float(entropy_alpha(np.full((3, 4, 5), 0.2))) == pytest.approx(math.log(5) / 5, rel=1e-12)
    assert math.log(5) / 5 == pytest.approx(0.3219, abs=1e-4)
    row = np.array([[[0.5, 0.5, 0, 0, 0]]])
    assert float(entropy_alpha(row)) == pytest.approx(2 * 0.5 * math.log(2) / 5, rel=1e-12)
    assert float(entropy_alpha(row)) == pytest.approx(0.1386, abs=1e-4)
    assert float(entropy_alpha(np.eye(5)[None, [0, 3, 1]])) == 0.0


def test_entropy_eta_examples():
    M = 127
    assert float(entropy_eta(np.full((2, M), 1 / M))) == pytest.approx(math.log(M) / M, rel=1e-12)
    assert float(entropy_eta(onehot_eta([3, 9], M))) == 0.0
    eta = np.random.default_rng(0).dirichlet(np.ones(15), size=3)
    ref = -sum(x * math.log(x) for x in eta.ravel() if x > 0) / eta.size
    assert float(entropy_eta(eta)) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("L", [2, 3])
def test_topology_loss_exhaustive_onehot(L):
    space = SearchSpace(SpaceConfig(L, 2))
    for I in itertools.product(range(1, 16), repeat=L):
        val = float(topology_loss(onehot_eta(I, 15), space))
        if space.is_feasible_sequence(I):
            assert val == 0.0
        else:
            assert val > 0.0


def test_topology_loss_infeasible_pair_value():
    space = SearchSpace(SpaceConfig(2, 2))
    # pattern 1 = edge 0 (0 -> 0) activates only node 0; pattern 2 = edge 1 (1 -> 0) sources node 1
    I = (1, 2)
    assert not space.is_feasible_sequence(I)
    val = float(topology_loss(onehot_eta(I, 15), space))
    # realized activation with p_out = 0, plus the sourced activation with p_in = 0 and p_out = 1
    assert val == pytest.approx(2 * CLAMP, rel=1e-12)
    assert val >= 27.6


def test_topology_loss_hand_enumeration():
    space = SearchSpace(SpaceConfig(2, 2))
    rng = np.random.default_rng(5)
    eta = rng.dirichlet(np.ones(15), size=2)
    sets = space.sets
    total = 0.0
    for a in range(1, 4):
        p_in = sum(eta[0, j - 1] for j in sets.F_in[a])
        p_out = sum(eta[1, k - 1] for k in sets.F_out[a])
        total -= p_in * math.log(max(p_out, EPS)) + (1 - p_in) * math.log(max(1 - p_out, EPS))
    assert float(topology_loss(eta, space)) == pytest.approx(total, rel=1e-12)
    assert float(topology_loss(eta[:1], SearchSpace(SpaceConfig(1, 2)))) == 0.0


def test_memory_table():
    cfg = SpaceConfig(2, 3)
    table = build_memory_table(cfg, 8, (32, 32))
    space = SearchSpace(cfg)
    assert np.all(table.mem >= 0)
    for e, ed in enumerate(space.edges):
        np.testing.assert_allclose(table.mem[:, e, :] / np.array(list(DEFAULT_OP_FACTORS.values())),
                                   8 * 32 * 32 / 2**ed.dst_res)
    assert list(DEFAULT_OP_FACTORS.values()) == [1, 2, 3, 3, 2]
    e0 = space.edges_into(0)[0]
    e1 = space.edges_into(1)[0]
    assert table.mem[0, e1, 0] == table.mem[0, e0, 0] / 2


def test_memory_ratio_pinned_to_literal_normalizer():
    cfg = SpaceConfig(3, 3)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 8)
    factors = np.array(list(DEFAULT_OP_FACTORS.values()), dtype=float)
    alpha = np.zeros((3, cfg.E, 5))
    alpha[..., int(np.argmax(factors))] = 1.0
    eta = onehot_eta([cfg.M] * 3, cfg.M)
    _, m_a, ratio = memory_expected(alpha, eta, table, space)
    assert float(ratio) == pytest.approx(factors.max() / factors.sum(), rel=1e-12)
    assert m_a == pytest.approx(table.mem.sum())


def test_memory_uniform_brute_force():
    cfg = SpaceConfig(1, 2)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 4, (8, 8))
    alpha = np.full((1, 4, 5), 0.2)
    eta = np.full((1, 15), 1 / 15)
    cell = (alpha * table.mem).sum(-1)[0]
    ref = sum((1 / 15) * sum(cell[e] for e in range(4) if j >> e & 1) for j in range(1, 16))
    m_e, _, _ = memory_expected(alpha, eta, table, space)
    assert float(m_e) == pytest.approx(ref, rel=1e-12)


def test_memory_dual_path():
    cfg = SpaceConfig(3, 3)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 8)
    rng = np.random.default_rng(11)
    for _ in range(10):
        rs = relax_all(ArchParams.init(cfg, rng, std=1.5), space)
        m_e, _, _ = memory_expected(rs.alpha, rs.eta, table, space)
        assert float(m_e) == pytest.approx(memory_expected_patterns(rs.alpha, rs.eta, table, space), rel=1e-9)


def test_equal_factors_make_memory_independent_of_alpha():
    cfg = SpaceConfig(2, 2)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 4, (8, 8), factors=[2.0] * 5)
    rng = np.random.default_rng(0)
    eta = rng.dirichlet(np.ones(15), size=2)
    r1 = float(memory_expected(rng.dirichlet(np.ones(5), size=(2, 4)), eta, table, space)[2])
    r2 = float(memory_expected(rng.dirichlet(np.ones(5), size=(2, 4)), eta, table, space)[2])
    assert r1 == pytest.approx(r2, rel=1e-12)


def test_memory_loss_examples():
    assert float(memory_loss(0.3, 0.3)) == 0.0
    assert float(memory_loss(0.9, 0.5)) == pytest.approx(0.4)
    for sigma in (0.2, 0.5, 0.8):
        memory_loss(0.1, sigma)
    with pytest.raises(ValueError):
        memory_loss(0.1, 1.5)


def test_arch_loss_total_ramp():
    losses = {"l_alpha": T.Tensor(0.3), "l_eta": T.Tensor(0.1), "l_tp": T.Tensor(20.0), "l_m": T.Tensor(0.05)}
    assert float(arch_loss_total(T.Tensor(0.7), losses, 0, 10)) == pytest.approx(0.7)
    full = 0.7 + 0.3 + 0.1 + DEFAULT_LAMBDA * 20.0 + 0.05
    assert float(arch_loss_total(T.Tensor(0.7), losses, 10, 10)) == pytest.approx(full)
    assert DEFAULT_LAMBDA == 0.001
    with pytest.raises(ValueError):
        arch_loss_total(T.Tensor(0.7), losses, 11, 10)


def total_fn(space, table, sigma, lam, t=3, t_all=4):
    def f(a_raw, p_raw):
        r = relax_tensors(a_raw, p_raw, space)
        _, _, ratio = memory_expected(r.alpha, r.eta, table, space)
        losses = {"l_alpha": entropy_alpha(r.alpha), "l_eta": entropy_eta(r.eta),
                  "l_tp": topology_loss(r.eta, space), "l_m": memory_loss(ratio, sigma)}
        return arch_loss_total(T.Tensor(0.0), losses, t, t_all, lam)
    return f


def test_arch_grads_finite_differences():
    cfg = SpaceConfig(3, 2)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 4, (8, 8))
    rng = np.random.default_rng(7)
    for _ in range(5):
        params = ArchParams.init(cfg, rng, std=1.0)
        g = arch_grads(params, space, table, sigma=0.2, t=3, t_all=4, lam=0.5)
        rep = T.grad_check(total_fn(space, table, 0.2, 0.5), [params.alpha_raw, params.p_raw],
                           h=1e-5, tol=1e-4, analytic=[g.alpha_raw, g.p_raw])
        assert rep.passed, rep
        r = g.report
        assert min(r.l_alpha, r.l_eta, r.l_tp, r.l_m) >= 0 and r.ramp == 0.75


def test_uniform_alpha_is_critical_point():
    cfg = SpaceConfig(2, 2)
    with T.Tape() as tape:
        a = T.Tensor(np.full((2, 4, 5), 0.7), requires_grad=True)
        loss = entropy_alpha(T.softmax(a, axis=-1))
    np.testing.assert_allclose(tape.backward(loss)[a], 0.0, atol=1e-15)


def test_memory_gradient_flips_at_budget():
    cfg = SpaceConfig(2, 2)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 4, (8, 8))
    params = ArchParams.zeros(cfg)
    ratio = arch_grads(params, space, table, sigma=0.0).report.m_ratio
    below = arch_grads(params, space, table, sigma=ratio + 0.05, lam=0.0)
    above = arch_grads(params, space, table, sigma=ratio - 0.05, lam=0.0)
    at = arch_grads(params, space, table, sigma=ratio, lam=0.0)
    d = below.p_raw - above.p_raw
    assert np.all(np.sign(below.p_raw - at.p_raw) == -np.sign(above.p_raw - at.p_raw))
    assert np.all(d < 0)  # below budget the memory term pushes edges on
    with T.Tape() as tape:
        x = T.Tensor(0.4, requires_grad=True)
        out = memory_loss(x, 0.4)
    assert float(tape.backward(out)[x]) == 0.0


def test_non_finite_gradient_reports_coordinates():
    cfg = SpaceConfig(2, 2)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 4, (8, 8))
    bad = np.zeros((2, 4))
    bad[1, 2] = np.nan

    def hook(alpha, q):
        return T.sum_(T.mul(q, bad))

    with pytest.raises(NonFiniteGradientError, match=r"layer=1, edge=2"):
        arch_grads(ArchParams.zeros(cfg), space, table, sigma=0.5, l_seg_hook=hook)


def test_log_rows(tmp_path):
    cfg = SpaceConfig(2, 2)
    space = SearchSpace(cfg)
    table = build_memory_table(cfg, 4, (8, 8))
    rep = arch_grads(ArchParams.zeros(cfg), space, table, sigma=0.5).report
    path = tmp_path / "log.csv"
    append_log_row(path, 1, rep)
    append_log_row(path, 2, rep)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == LOG_FIELDS
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert float(rows[1][LOG_FIELDS.index("l_tp")]) == rep.l_tp
