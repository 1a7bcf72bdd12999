"""Continuous relaxation of cell operations and connection patterns."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .space import SearchSpace, SpaceConfig

EPS = 1e-12


class DegenerateDistributionError(ValueError):
    pass


@dataclass
class ArchParams:
    """Raw architecture logits: cell logits [L,E,N] and edge logits [L,E]."""

    alpha_raw: np.ndarray
    p_raw: np.ndarray

    def __post_init__(self):
        self.alpha_raw = np.asarray(self.alpha_raw, dtype=np.float64)
        self.p_raw = np.asarray(self.p_raw, dtype=np.float64)
        if self.alpha_raw.ndim != 3 or self.p_raw.shape != self.alpha_raw.shape[:2]:
            raise ValueError(f"inconsistent shapes alpha_raw {self.alpha_raw.shape}, p_raw {self.p_raw.shape}")
        if not (np.all(np.isfinite(self.alpha_raw)) and np.all(np.isfinite(self.p_raw))):
            raise ValueError("architecture logits must be finite")

    @classmethod
    def init(cls, cfg: SpaceConfig, rng: np.random.Generator, alpha_mean=1.0, p_mean=0.0, std=0.01):
        return cls(rng.normal(alpha_mean, std, (cfg.L, cfg.E, cfg.N)),
                   rng.normal(p_mean, std, (cfg.L, cfg.E)))

    @classmethod
    def zeros(cls, cfg: SpaceConfig):
        return cls(np.zeros((cfg.L, cfg.E, cfg.N)), np.zeros((cfg.L, cfg.E)))

    def copy(self) -> "ArchParams":
        return ArchParams(self.alpha_raw.copy(), self.p_raw.copy())

    def check(self, cfg: SpaceConfig):
        want = (cfg.L, cfg.E, cfg.N)
        if self.alpha_raw.shape != want:
            raise ValueError(f"alpha_raw shape {self.alpha_raw.shape} does not match {want}")

    def to_json(self, cfg: SpaceConfig | None = None) -> dict:
        L, E, N = self.alpha_raw.shape
        out = {"shape": {"L": L, "E": E, "N": N},
               "alpha_raw": self.alpha_raw.tolist(), "p_raw": self.p_raw.tolist()}
        if cfg is not None:
            out["space"] = {"L": cfg.L, "D": cfg.D, "N": cfg.N}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ArchParams":
        params = cls(np.array(obj["alpha_raw"]), np.array(obj["p_raw"]))
        shp = obj["shape"]
        if params.alpha_raw.shape != (shp["L"], shp["E"], shp["N"]):
            raise ValueError(f"checkpoint arrays {params.alpha_raw.shape} do not match recorded shape {shp}")
        return params

    def save(self, path, cfg: SpaceConfig | None = None):
        Path(path).write_text(json.dumps(self.to_json(cfg)))

    @classmethod
    def load(cls, path) -> "ArchParams":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class RelaxedState:
    alpha: np.ndarray  # [L,E,N]
    p: np.ndarray  # [L,E]
    eta: np.ndarray  # [L,M]
    q: np.ndarray  # [L,E]


def _softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def squash(params: ArchParams) -> tuple[np.ndarray, np.ndarray]:
    alpha = _softmax(params.alpha_raw, axis=-1)
    p = np.clip(0.5 * (1.0 + np.tanh(0.5 * params.p_raw)), EPS, 1.0 - EPS)
    return alpha, p


def normalizer(p_row) -> float:
    """Mass of the non-empty subsets: 1 - prod(1 - p)."""
    return float(-np.expm1(np.sum(np.log1p(-np.asarray(p_row)))))


def pattern_probs(p_row, patterns: np.ndarray) -> np.ndarray:
    """Pattern distribution induced by independent edge probabilities.

    ``patterns`` is the [M, E] bit matrix; the result is normalized over the
    non-empty patterns only. Works row-wise on a [.., E] batch as well.
    """
    p_row = np.asarray(p_row, dtype=np.float64)
    if p_row.ndim > 1:
        # row by row, so batched and single-row results agree bitwise
        rows = [pattern_probs(r, patterns) for r in p_row.reshape(-1, p_row.shape[-1])]
        return np.stack(rows).reshape(*p_row.shape[:-1], patterns.shape[0])
    for z in np.atleast_1d(_batch_normalizer(p_row)):
        if z < 1e-300:
            raise DegenerateDistributionError("all edge probabilities vanish; no non-empty pattern has mass")
    with np.errstate(divide="ignore"):
        logw = np.log(p_row) @ patterns.T + np.log1p(-p_row) @ (1.0 - patterns).T
    return _softmax(logw, axis=-1)


def _batch_normalizer(p):
    return -np.expm1(np.sum(np.log1p(-p), axis=-1))


def edge_marginals(eta_row, patterns: np.ndarray) -> np.ndarray:
    return np.asarray(eta_row) @ patterns


def relax_all(params: ArchParams, space: SearchSpace) -> RelaxedState:
    params.check(space.cfg)
    alpha, p = squash(params)
    B = space.pattern_matrix
    eta = pattern_probs(p, B)
    return RelaxedState(alpha, p, eta, edge_marginals(eta, B))


# taped counterparts used for architecture gradients


@dataclass
class RelaxedTensors:
    alpha: T.Tensor
    p: T.Tensor
    eta: T.Tensor
    q: T.Tensor


def relax_tensors(alpha_raw: T.Tensor, p_raw: T.Tensor, space: SearchSpace) -> RelaxedTensors:
    """Differentiable relaxation; log-numerators are formed before normalizing."""
    B = space.pattern_matrix
    alpha = T.softmax(alpha_raw, axis=-1)
    p = T.clamp(T.sigmoid(p_raw), EPS, 1.0 - EPS)
    logw = T.log(p) @ B.T + T.log(1.0 - p) @ (1.0 - B).T
    eta = T.softmax(logw, axis=-1)
    q = eta @ B
    return RelaxedTensors(alpha, p, eta, q)
