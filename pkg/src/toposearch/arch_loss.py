"""Architecture regularizers: entropy, topology feasibility and memory budget.

All loss functions take :class:`~toposearch.tensor.Tensor` or ndarray inputs and
return scalar Tensors, so they are differentiable when called on a tape and
plain numerics otherwise.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .relax import EPS, ArchParams, relax_tensors
from .space import SearchSpace, SpaceConfig

DEFAULT_LAMBDA = 0.001

# stored activation tensors per op, in units of the edge's output tensor size
DEFAULT_OP_FACTORS = {
    "skip": 1.0,
    "conv3x3": 2.0,
    "p2d_3x1_1x3": 3.0,
    "p2d_1x3_3x1": 3.0,
    "conv3x3_dil2": 2.0,
}


class NonFiniteGradientError(FloatingPointError):
    pass


def _xlogx(x: T.Tensor) -> T.Tensor:
    return T.mul(x, T.log(T.clamp(x, EPS, 1.0)))


def entropy_alpha(alpha) -> T.Tensor:
    alpha = T._tensor(alpha)
    L, E, N = alpha.shape
    return T.scale(T.sum_(_xlogx(alpha)), -1.0 / (L * E * N))


def entropy_eta(eta) -> T.Tensor:
    eta = T._tensor(eta)
    L, M = eta.shape
    return T.scale(T.sum_(_xlogx(eta)), -1.0 / (L * M))


def topology_loss(eta, space: SearchSpace) -> T.Tensor:
    """Binary cross-entropy between activation and feasible-output mass.

    For every layer boundary and activation ``a``: the probability that the
    super node's inputs activate ``a`` against the probability that the next
    layer's pattern sources exactly ``a``.
    """
    eta = T._tensor(eta)
    L = eta.shape[0]
    if L < 2:
        return T.Tensor(0.0)
    p_in = T.getitem(eta, slice(0, L - 1)) @ space.f_in_matrix.T
    p_out = T.getitem(eta, slice(1, L)) @ space.f_out_matrix.T
    pos = T.mul(p_in, T.log(T.clamp(p_out, EPS, 1.0)))
    neg = T.mul(1.0 - p_in, T.log(T.clamp(1.0 - p_out, EPS, 1.0)))
    return T.scale(T.sum_(pos + neg), -1.0)


@dataclass(frozen=True)
class MemoryTable:
    mem: np.ndarray  # [L,E,N]

    def __post_init__(self):
        if np.any(self.mem < 0):
            raise ValueError("memory costs must be nonnegative")

    @property
    def max_memory(self) -> float:
        return float(self.mem.sum())


def build_memory_table(cfg: SpaceConfig, channels_base: int, patch=(32, 32),
                       factors=None) -> MemoryTable:
    """Per-(layer, edge, op) cost = output elements at the edge's target x op factor."""
    if factors is None:
        factors = list(DEFAULT_OP_FACTORS.values())[: cfg.N]
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape != (cfg.N,):
        raise ValueError(f"need {cfg.N} op factors, got {factors.shape}")
    H, W = patch
    out_elems = np.array([channels_base * 2**ed.dst_res * (H // 2**ed.dst_res) * (W // 2**ed.dst_res)
                          for ed in SearchSpace(cfg).edges], dtype=np.float64)
    mem = np.broadcast_to(out_elems[None, :, None] * factors[None, None, :], (cfg.L, cfg.E, cfg.N))
    return MemoryTable(mem.copy())


def memory_expected(alpha, eta, table: MemoryTable, space: SearchSpace):
    """Expected memory over patterns, the all-on maximum, and their ratio.

    Uses the per-edge marginal form ``sum_i sum_e q[i,e] * M[i,e]``.
    """
    alpha, eta = T._tensor(alpha), T._tensor(eta)
    cell = T.sum_(T.mul(alpha, table.mem), axis=-1)
    q = eta @ space.pattern_matrix
    m_e = T.sum_(T.mul(q, cell))
    m_a = table.max_memory
    if m_a <= 0:
        raise ValueError("maximum memory is zero; check the memory table")
    return m_e, m_a, T.scale(m_e, 1.0 / m_a)


def memory_expected_patterns(alpha, eta, table: MemoryTable, space: SearchSpace) -> float:
    """Pattern-sum form of the expected memory (reference path)."""
    alpha, eta = np.asarray(alpha), np.asarray(eta)
    cell = (alpha * table.mem).sum(-1)
    B = space.pattern_matrix
    total = 0.0
    for i in range(eta.shape[0]):
        for j in range(eta.shape[1]):
            total += eta[i, j] * float(np.dot(cell[i], B[j]))
    return total


def memory_loss(m_ratio, sigma: float) -> T.Tensor:
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    return T.abs_(T.sub(m_ratio, sigma))


def arch_loss_total(l_seg, losses, t: float, t_all: float, lam: float = DEFAULT_LAMBDA) -> T.Tensor:
    """``l_seg + (t/t_all) * (l_alpha + l_eta + lam*l_tp + l_m)``.

    ``losses`` is a mapping with keys l_alpha, l_eta, l_tp, l_m.
    """
    if not 0 <= t <= t_all or t_all <= 0:
        raise ValueError(f"need 0 <= t <= t_all and t_all > 0, got t={t}, t_all={t_all}")
    reg = T.add_n([losses["l_alpha"], losses["l_eta"], T.scale(losses["l_tp"], lam), losses["l_m"]])
    return T.add(l_seg, T.scale(reg, t / t_all))


@dataclass
class LossReport:
    l_seg: float
    l_alpha: float
    l_eta: float
    l_tp: float
    l_m: float
    m_ratio: float
    l_arch: float
    ramp: float


@dataclass
class ArchGradients:
    alpha_raw: np.ndarray
    p_raw: np.ndarray
    report: LossReport
    extra: dict = field(default_factory=dict)


SegHook = Callable[[T.Tensor, T.Tensor], T.Tensor]


def arch_grads(params: ArchParams, space: SearchSpace, table: MemoryTable, *, sigma: float,
               t: float = 1.0, t_all: float = 1.0, lam: float = DEFAULT_LAMBDA,
               l_seg_hook: SegHook | None = None) -> ArchGradients:
    """Gradients of the ramped architecture loss w.r.t. the raw logits.

    ``l_seg_hook(alpha, q)`` records the segmentation loss on the same tape
    from the relaxed cell weights and edge marginals; without it L_seg = 0.
    """
    with T.Tape() as tape:
        a_raw = T.Tensor(params.alpha_raw, requires_grad=True)
        p_raw = T.Tensor(params.p_raw, requires_grad=True)
        r = relax_tensors(a_raw, p_raw, space)
        losses = {
            "l_alpha": entropy_alpha(r.alpha),
            "l_eta": entropy_eta(r.eta),
            "l_tp": topology_loss(r.eta, space),
        }
        _, _, ratio = memory_expected(r.alpha, r.eta, table, space)
        losses["l_m"] = memory_loss(ratio, sigma)
        l_seg = l_seg_hook(r.alpha, r.q) if l_seg_hook is not None else T.Tensor(0.0)
        total = arch_loss_total(l_seg, losses, t, t_all, lam)
    grads = tape.backward(total)
    g_alpha, g_p = grads[a_raw], grads[p_raw]
    _check_finite("alpha_raw", g_alpha)
    _check_finite("p_raw", g_p)
    report = LossReport(float(l_seg), *(float(losses[k]) for k in ("l_alpha", "l_eta", "l_tp", "l_m")),
                        float(ratio), float(total), t / t_all)
    return ArchGradients(g_alpha, g_p, report)


def _check_finite(name: str, g: np.ndarray):
    bad = np.argwhere(~np.isfinite(g))
    if len(bad):
        coords = ", ".join(f"(layer={c[0]}, edge={c[1]})" for c in bad[:5])
        raise NonFiniteGradientError(f"non-finite gradient in {name} at {coords}")


LOG_FIELDS = ("iter", "l_seg", "l_alpha", "l_eta", "l_tp", "l_m", "m_ratio", "ramp")


def append_log_row(path, it: int, report: LossReport):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_FIELDS)
        row = asdict(report)
        w.writerow([it] + [repr(row[k]) for k in LOG_FIELDS[1:]])
