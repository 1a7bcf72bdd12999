"""Brute-force reference suites used by the CLI and the test-suite."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .decode import brute_force_decode, layer_sweep_decode, shortest_path_decode
from .relax import normalizer, pattern_probs
from .space import SearchSpace, SpaceConfig
from .supernet import NetConfig, as_leaves, init_weights, pattern_sum_forward, relaxed_forward


@dataclass
class OracleReport:
    suite: str
    cases: int = 0
    failures: list[str] = field(default_factory=list)
    max_err: float = 0.0

    @property
    def passed(self) -> bool:
        return self.cases > 0 and not self.failures

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}: {self.cases} cases, {len(self.failures)} failures, max err {self.max_err:.3g}"


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def subset_probs(p_row) -> np.ndarray:
    """Pattern distribution by explicit enumeration of every edge subset."""
    p_row = np.asarray(p_row, dtype=np.float64)
    E = len(p_row)
    probs = np.zeros(2**E - 1)
    for bits in itertools.product((0, 1), repeat=E):
        if not any(bits):
            continue
        w = 1.0
        for b, p in zip(bits, p_row):
            w *= p if b else 1.0 - p
        probs[sum(b << e for e, b in enumerate(bits)) - 1] = w
    return probs / probs.sum()


def pattern_suite(n: int = 100, D: int = 2, seed: int = 0, tol: float = 1e-9) -> OracleReport:
    rep = OracleReport(f"patterns(D={D})")
    space = SearchSpace(SpaceConfig(1, D))
    rng = np.random.default_rng(seed)
    for k in range(n):
        p = rng.uniform(0.01, 0.99, space.E)
        eta = pattern_probs(p, space.pattern_matrix)
        ref = subset_probs(p)
        err = _rel(eta, ref)
        z_err = abs(normalizer(p) - (1.0 - np.prod(1.0 - p)))
        s_err = abs(eta.sum() - 1.0)
        rep.max_err = max(rep.max_err, err, z_err, s_err)
        if err > tol or z_err > tol or s_err > tol:
            rep.failures.append(f"case {k}: rel {err:.3g}, Z {z_err:.3g}, sum {s_err:.3g}")
        rep.cases += 1
    return rep


def random_eta(rng: np.random.Generator, L: int, M: int) -> np.ndarray:
    """Peaked random distributions, so optima are unique but not obvious."""
    logits = rng.normal(0.0, 2.0, (L, M))
    eta = np.exp(logits - logits.max(axis=1, keepdims=True))
    return eta / eta.sum(axis=1, keepdims=True)


def decode_suite(n: int = 200, D: int = 2, L: int = 3, seed: int = 0, tol: float = 1e-9) -> OracleReport:
    rep = OracleReport(f"decode(D={D}, L={L})")
    space = SearchSpace(SpaceConfig(L, D))
    rng = np.random.default_rng(seed)
    for k in range(n):
        eta = random_eta(rng, L, space.M)
        ref = brute_force_decode(eta, space)
        for name, fn in (("dijkstra", shortest_path_decode), ("sweep", layer_sweep_decode)):
            got = fn(eta, space)
            err = abs(got.total_cost - ref.total_cost) / max(abs(ref.total_cost), 1.0)
            rep.max_err = max(rep.max_err, err)
            if err > tol or not space.is_feasible_sequence(got.I):
                rep.failures.append(f"case {k} {name}: {got.I} cost {got.total_cost} vs {ref.I} cost {ref.total_cost}")
        rep.cases += 1
    return rep


def flow_suite(n: int = 20, D: int = 2, L: int = 2, seed: int = 0, tol: float = 1e-9) -> OracleReport:
    """Marginal-based relaxed forward against the literal pattern sum."""
    rep = OracleReport(f"flow(D={D}, L={L})")
    net = NetConfig(L, D, base_channels=2, patch=(8, 8))
    space = SearchSpace(net.space_cfg)
    rng = np.random.default_rng(seed)
    for k in range(n):
        W = as_leaves(init_weights(net, space, rng))
        p = rng.uniform(0.05, 0.95, (L, space.E))
        eta = pattern_probs(p, space.pattern_matrix)
        q = eta @ space.pattern_matrix
        a = rng.normal(size=(L, space.E, net.N))
        alpha = np.exp(a) / np.exp(a).sum(-1, keepdims=True)
        image = rng.uniform(size=(2, 1, *net.patch))
        fast = relaxed_forward(W, q, alpha, image, net, space).data
        ref = pattern_sum_forward(W, eta, alpha, image, net, space).data
        err = float(np.max(np.abs(fast - ref)) / max(np.max(np.abs(ref)), 1e-300))
        rep.max_err = max(rep.max_err, err)
        if err > tol:
            rep.failures.append(f"case {k}: rel {err:.3g}")
        rep.cases += 1
    return rep


SUITES = {
    "patterns": lambda seed=0: [pattern_suite(100, 2, seed), pattern_suite(30, 3, seed)],
    "decode": lambda seed=0: [decode_suite(200, 2, 3, seed), decode_suite(50, 3, 3, seed)],
    "flow": lambda seed=0: [flow_suite(20, 2, 2, seed)],
}


def run_suite(name: str, seed: int = 0) -> list[OracleReport]:
    if name == "all":
        return [r for key in SUITES for r in SUITES[key](seed)]
    if name not in SUITES:
        raise KeyError(f"unknown oracle suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    return SUITES[name](seed)
