"""Bi-level search loop, schedules, checkpointing and retraining."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .arch_loss import (
    DEFAULT_OP_FACTORS,
    LOG_FIELDS,
    ArchGradients,
    MemoryTable,
    arch_grads,
    build_memory_table,
)
from .decode import ArchitectureTopology, argmax_decode, gap_metric, shortest_path_decode
from .relax import ArchParams, relax_all
from .space import SearchSpace, SpaceConfig
from .supernet import (
    DiscreteNet,
    NetConfig,
    as_leaves,
    init_weights,
    instantiate_discrete,
    load_weights,
    relaxed_forward,
    save_weights,
)
from .task import Dataset, TaskConfig, dice_scores, seg_loss, split

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


class DivergenceError(FloatingPointError):
    pass


@dataclass
class SearchConfig:
    # search space and network
    L: int = 6
    D: int = 3
    N: int = 5
    base_channels: int = 8
    patch: tuple[int, int] = (32, 32)
    classes: int = 2
    # synthetic data
    n_train: int = 64
    n_val: int = 32
    split_ratio: float = 0.5
    noise: float = 0.05
    data_seed: int | None = None
    # architecture losses
    sigma: float = 0.5
    lam: float = 0.001
    op_factors: tuple[float, ...] = tuple(DEFAULT_OP_FACTORS.values())
    # phases, counted in weight updates
    warmup_w: int = 100
    pretrain_w: int = 400
    joint: int = 2000
    batch_size: int = 4
    # weight optimizer (SGD with momentum)
    lr_w_peak: float = 0.1
    lr_w_floor_ratio: float = 0.125
    lr_decay: float = 0.5
    milestones: tuple[int, ...] = (1600, 2000)
    momentum: float = 0.9
    weight_decay: float = 4e-5
    # architecture optimizer (Adam)
    lr_arch: float = 0.008
    arch_betas: tuple[float, float] = (0.9, 0.999)
    arch_eps: float = 1e-8
    arch_weight_decay: float = 0.0
    # retraining of the decoded network
    retrain_iters: int = 600
    retrain_warmup: int = 60
    retrain_milestones: tuple[int, ...] = (400,)
    retrain_batch_size: int = 8
    channel_multiplier: int = 2
    retrain_restarts: int = 3
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("patch", "op_factors", "milestones", "arch_betas", "retrain_milestones"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        for name in ("warmup_w", "pretrain_w", "joint", "retrain_iters", "retrain_warmup", "retrain_restarts",
                     "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "iteration counts must be >= 0")
        for name in ("batch_size", "retrain_batch_size", "n_train", "n_val", "base_channels", "channel_multiplier"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError("sigma", f"memory budget must lie in [0, 1], got {self.sigma}")
        if self.lam < 0:
            raise ConfigError("lam", "must be >= 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio", "must lie in (0, 1)")
        if self.classes < 2:
            raise ConfigError("classes", "need at least two classes")
        # milestones count weight updates after warm-up and must fall in the joint phase
        for m in self.milestones:
            if not self.pretrain_w <= m <= self.pretrain_w + self.joint:
                raise ConfigError("milestones", f"milestone {m} outside the joint phase "
                                  f"[{self.pretrain_w}, {self.pretrain_w + self.joint}]")
        if len(self.op_factors) != self.N:
            raise ConfigError("op_factors", f"need {self.N} entries, got {len(self.op_factors)}")
        self.space_cfg
        try:
            self.net_cfg
        except ValueError as exc:
            raise ConfigError("patch", str(exc)) from None
        n1 = int(round(self.split_ratio * self.n_train))
        if min(n1, self.n_train - n1) < 1:
            raise ConfigError("n_train", "too few samples to split into train1/train2")

    @property
    def space_cfg(self) -> SpaceConfig:
        for name in ("L", "D", "N"):
            try:
                SpaceConfig(**{"L": 1, "D": 2, "N": 5, name: getattr(self, name)})
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
        return SpaceConfig(self.L, self.D, self.N)

    @property
    def net_cfg(self) -> NetConfig:
        return NetConfig(self.L, self.D, self.N, self.base_channels, self.patch, self.classes)

    @property
    def task_cfg(self) -> TaskConfig:
        return TaskConfig(patch=self.patch, classes=self.classes, noise=self.noise)

    @property
    def t_all(self) -> int:
        return self.joint

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "SearchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for k in obj:
            if k not in names:
                raise ConfigError(k, "unknown configuration field")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None

    def replace(self, **kw) -> "SearchConfig":
        return dataclasses.replace(self, **kw)


def lr_schedule(t: int, peak: float, warmup: int, milestones, floor_ratio: float = 0.125,
                decay: float = 0.5) -> float:
    """Linear warm-up from ``peak*floor_ratio`` to ``peak``, then step decay.

    Milestones count updates after the end of warm-up.
    """
    if t < warmup:
        floor = peak * floor_ratio
        return floor + (peak - floor) * t / warmup
    k = sum(1 for m in milestones if t - warmup >= m)
    return peak * decay**k


def lr_w(t: int, cfg: SearchConfig) -> float:
    return lr_schedule(t, cfg.lr_w_peak, cfg.warmup_w, cfg.milestones, cfg.lr_w_floor_ratio, cfg.lr_decay)


# optimizers -------------------------------------------------------------------------


def sgd_step(weights: dict, grads: dict, buf: dict, lr: float, momentum: float, weight_decay: float):
    for k, w in weights.items():
        g = grads[k] + weight_decay * w
        b = buf.get(k)
        b = g.copy() if b is None else momentum * b + g
        buf[k] = b
        weights[k] = w - lr * b


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, st: AdamState, lr: float, betas, eps: float, weight_decay: float = 0.0):
    st.t += 1
    b1, b2 = betas
    for k in params:
        g = grads[k] + weight_decay * params[k]
        m = b1 * st.m.get(k, np.zeros_like(g)) + (1 - b1) * g
        v = b2 * st.v.get(k, np.zeros_like(g)) + (1 - b2) * g * g
        st.m[k], st.v[k] = m, v
        mhat = m / (1 - b1**st.t)
        vhat = v / (1 - b2**st.t)
        params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)


# state, results, checkpoints ----------------------------------------------------------


@dataclass
class SearchState:
    weights: dict
    momentum: dict
    arch: ArchParams
    adam: AdamState
    w_step: int = 0
    arch_step: int = 0
    log_rows: list = field(default_factory=list)
    gap_trace: list = field(default_factory=list)


@dataclass
class SearchResult:
    params: ArchParams
    topology: ArchitectureTopology
    log: list[dict]
    gap_trace: list[int]
    m_ratio_trace: list[float]
    decoded_m_ratio: float
    wall_clock: float
    completed: bool = True


def topology_memory_ratio(topo: ArchitectureTopology, table: MemoryTable, space: SearchSpace) -> float:
    """Memory of the discrete architecture relative to the all-on maximum."""
    used = sum(table.mem[i, e, topo.ops[(i, e)]] for i, pid in enumerate(topo.I)
               for e in space.pattern(pid).selected)
    return float(used) / table.max_memory


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path):
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def save_checkpoint(out: Path, cfg: SearchConfig, st: SearchState):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1))
    arch = st.arch.to_json(cfg.space_cfg)
    arch["adam"] = {"t": st.adam.t, "m": {k: v.tolist() for k, v in st.adam.m.items()},
                    "v": {k: v.tolist() for k, v in st.adam.v.items()}}
    arch["arch_step"] = st.arch_step
    (out / "arch_params.ckpt").write_text(json.dumps(arch))
    extra = {"w_step": np.array(st.w_step)}
    extra.update({f"momentum/{k}": v for k, v in st.momentum.items()})
    save_weights(out / "weights.ckpt", st.weights, **extra)
    _write_csv(out / "log.csv", LOG_FIELDS, [[r["iter"]] + [repr(r[k]) for k in LOG_FIELDS[1:]] for r in st.log_rows])
    _write_csv(out / "gap_trace.csv", ("iter", "G"), [[i + 1, g] for i, g in enumerate(st.gap_trace)])


def load_checkpoint(out: Path) -> SearchState:
    out = Path(out)
    arch = json.loads((out / "arch_params.ckpt").read_text())
    adam = AdamState({k: np.array(v) for k, v in arch["adam"]["m"].items()},
                     {k: np.array(v) for k, v in arch["adam"]["v"].items()}, int(arch["adam"]["t"]))
    weights, extra = load_weights(out / "weights.ckpt")
    momentum = {k[len("momentum/"):]: v for k, v in extra.items() if k.startswith("momentum/")}
    header, rows = _read_csv(out / "log.csv")
    log_rows = [{"iter": int(r[0]), **{k: float(x) for k, x in zip(header[1:], r[1:])}} for r in rows]
    _, grows = _read_csv(out / "gap_trace.csv")
    return SearchState(weights, momentum, ArchParams.from_json(arch), adam, int(extra["w_step"]),
                       int(arch["arch_step"]), log_rows, [int(r[1]) for r in grows])


# search ----------------------------------------------------------------------------------


def _batch_ids(pool, n: int, seed: int, stream: int, step: int):
    rng = np.random.default_rng([seed, stream, step])
    return [pool[k] for k in rng.choice(len(pool), size=min(n, len(pool)), replace=False)]


def gap_trace_step(eta, space: SearchSpace) -> int:
    return gap_metric(argmax_decode(eta), shortest_path_decode(eta, space).I, space)


class Searcher:
    """Owns the mutable search state; one instance per run."""

    def __init__(self, cfg: SearchConfig, state: SearchState | None = None):
        self.cfg = cfg
        self.space = SearchSpace(cfg.space_cfg)
        self.net = cfg.net_cfg
        self.table = build_memory_table(cfg.space_cfg, cfg.base_channels, cfg.patch, cfg.op_factors)
        data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
        self.data = Dataset(data_seed, cfg.task_cfg)
        self.train1, self.train2 = split(range(cfg.n_train), cfg.split_ratio, data_seed)
        if state is None:
            rng = np.random.default_rng(cfg.seed)
            arch = ArchParams.init(cfg.space_cfg, rng)
            weights = init_weights(self.net, self.space, rng)
            state = SearchState(weights, {}, arch, AdamState())
        self.st = state

    @property
    def total_w_steps(self) -> int:
        c = self.cfg
        return c.warmup_w + c.pretrain_w + c.joint

    def w_step(self):
        c, st = self.cfg, self.st
        img, mask = self.data.batch(_batch_ids(self.train1, c.batch_size, c.seed, 1, st.w_step))
        rs = relax_all(st.arch, self.space)
        with T.Tape() as tape:
            W = as_leaves(st.weights, requires_grad=True)
            loss = seg_loss(relaxed_forward(W, rs.q, rs.alpha, img, self.net, self.space), mask)
        if not np.isfinite(float(loss)):
            raise DivergenceError(f"non-finite segmentation loss at weight step {st.w_step}")
        grads = tape.backward(loss)
        sgd_step(st.weights, {k: grads[t] for k, t in W.items()}, st.momentum,
                 lr_w(st.w_step, c), c.momentum, c.weight_decay)
        st.w_step += 1
        return float(loss)

    def arch_step(self) -> ArchGradients:
        c, st = self.cfg, self.st
        img, mask = self.data.batch(_batch_ids(self.train2, c.batch_size, c.seed, 2, st.arch_step))
        W = as_leaves(st.weights, requires_grad=False)

        def hook(alpha, q):
            return seg_loss(relaxed_forward(W, q, alpha, img, self.net, self.space), mask)

        t = st.arch_step + 1
        g = arch_grads(st.arch, self.space, self.table, sigma=c.sigma, t=t, t_all=c.t_all, lam=c.lam,
                       l_seg_hook=hook)
        if not np.isfinite(g.report.l_arch):
            raise DivergenceError(f"non-finite architecture loss at arch step {t}")
        params = {"alpha_raw": st.arch.alpha_raw, "p_raw": st.arch.p_raw}
        adam_step(params, {"alpha_raw": g.alpha_raw, "p_raw": g.p_raw}, st.adam, c.lr_arch,
                  c.arch_betas, c.arch_eps, c.arch_weight_decay)
        st.arch = ArchParams(params["alpha_raw"], params["p_raw"])
        st.arch_step = t
        st.log_rows.append({"iter": t, **{k: getattr(g.report, k) for k in LOG_FIELDS[1:]}})
        st.gap_trace.append(gap_trace_step(relax_all(st.arch, self.space).eta, self.space))
        return g

    def decode(self) -> ArchitectureTopology:
        rs = relax_all(self.st.arch, self.space)
        return shortest_path_decode(rs.eta, self.space, rs.alpha)

    def result(self, wall: float, completed: bool = True) -> SearchResult:
        topo = self.decode()
        st = self.st
        return SearchResult(st.arch.copy(), topo, list(st.log_rows), list(st.gap_trace),
                            [r["m_ratio"] for r in st.log_rows],
                            topology_memory_ratio(topo, self.table, self.space), wall, completed)


def run_search(cfg: SearchConfig, out_dir=None, resume: bool = False,
               stop_after: int | None = None) -> SearchResult:
    """Warm-up and pretraining of the weights, then alternating weight/arch updates.

    ``stop_after`` halts after that many weight updates (checkpointing first when
    ``out_dir`` is set), which is how interrupted runs are simulated.
    """
    out = Path(out_dir) if out_dir is not None else None
    state = None
    if resume:
        if out is None or not (out / "weights.ckpt").exists():
            raise FileNotFoundError(f"no checkpoint to resume in {out}")
        state = load_checkpoint(out)
    s = Searcher(cfg, state)
    st = s.st
    start = time.perf_counter()
    n_pre = cfg.warmup_w + cfg.pretrain_w
    last = s.total_w_steps if stop_after is None else min(stop_after, s.total_w_steps)
    try:
        while st.w_step < last:
            joint = st.w_step >= n_pre
            s.w_step()
            if joint:
                s.arch_step()
            if out is not None and cfg.checkpoint_every and st.w_step % cfg.checkpoint_every == 0:
                save_checkpoint(out, cfg, st)
    except (DivergenceError, FloatingPointError):
        if out is not None:
            save_checkpoint(out, cfg, st)
        raise
    wall = time.perf_counter() - start
    completed = st.w_step >= s.total_w_steps
    res = s.result(wall, completed)
    if out is not None:
        save_checkpoint(out, cfg, st)
        if completed:
            res.topology.save(out / "architecture.json")
            summary = {"decoded_m_ratio": res.decoded_m_ratio, "I": list(res.topology.I),
                       "final_G": res.gap_trace[-1] if res.gap_trace else None, "wall_clock": wall}
            (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return res


# retraining --------------------------------------------------------------------------------


def all_skip_topology(space: SearchSpace, I=None) -> ArchitectureTopology:
    """The identity op on every selected edge of ``I`` (default: every edge in every layer)."""
    I = (space.M,) * space.L if I is None else tuple(int(j) for j in I)
    ops = {(i, e): 0 for i, j in enumerate(I) for e in space.pattern(j).selected}
    return ArchitectureTopology(I, ops, space.D, 0.0)


def evaluate(net: DiscreteNet, data: Dataset, ids, batch: int = 8) -> np.ndarray:
    preds, masks = [], []
    for k in range(0, len(ids), batch):
        img, mask = data.batch(ids[k:k + batch])
        logits, _ = net.forward(img)
        preds.append(np.argmax(logits.data, axis=1))
        masks.append(mask)
    return dice_scores(np.concatenate(preds), np.concatenate(masks), net.net.classes)


def retrain(topo: ArchitectureTopology, cfg: SearchConfig, seed: int | None = None) -> dict:
    """Train the discrete network from scratch with widened channels; report held-out Dice.

    A diverging run restarts from the same initialization at half the peak
    learning rate, up to ``cfg.retrain_restarts`` times.
    """
    seed = cfg.seed if seed is None else seed
    for attempt in range(cfg.retrain_restarts + 1):
        lr_peak = cfg.lr_w_peak * 0.5**attempt
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                metrics = _retrain_once(topo, cfg, seed, lr_peak)
        except FloatingPointError as exc:
            log.warning("retrain diverged at peak lr %g: %s", lr_peak, exc)
            if attempt == cfg.retrain_restarts:
                raise DivergenceError(f"retraining diverged {attempt + 1} times; last: {exc}") from None
            continue
        return {**metrics, "lr_peak": lr_peak, "restarts": attempt}


def _retrain_once(topo: ArchitectureTopology, cfg: SearchConfig, seed: int, lr_peak: float) -> dict:
    space = SearchSpace(cfg.space_cfg)
    net = dataclasses.replace(cfg.net_cfg, base_channels=cfg.base_channels * cfg.channel_multiplier)
    model = instantiate_discrete(topo, net, np.random.default_rng([seed, 7]), space)
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    data = Dataset(data_seed, cfg.task_cfg)
    train_ids = list(range(cfg.n_train))
    val_ids = list(range(cfg.n_train, cfg.n_train + cfg.n_val))
    buf: dict = {}
    losses = []
    for t in range(cfg.retrain_iters):
        img, mask = data.batch(_batch_ids(train_ids, cfg.retrain_batch_size, seed, 3, t))
        with T.Tape() as tape:
            logits, W = model.forward(img, requires_grad=True)
            loss = seg_loss(logits, mask)
        if not np.isfinite(float(loss)):
            raise DivergenceError(f"non-finite loss at retrain step {t}")
        grads = tape.backward(loss)
        lr = lr_schedule(t, lr_peak, cfg.retrain_warmup, cfg.retrain_milestones, cfg.lr_w_floor_ratio, cfg.lr_decay)
        sgd_step(model.weights, {k: grads[w] for k, w in W.items()}, buf, lr, cfg.momentum, cfg.weight_decay)
        losses.append(float(loss))
    dice = evaluate(model, data, val_ids)
    return {
        "mean_dice": float(dice.mean()),
        "per_class_dice": dice.tolist(),
        "channels": [net.channels(d) for d in range(net.D)],
        "num_params": model.num_params,
        "final_loss": float(np.mean(losses[-20:])) if losses else float("nan"),
    }
