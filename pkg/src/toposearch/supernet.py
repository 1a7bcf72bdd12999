"""Multi-resolution supernet and its discrete instantiation.

Weights are plain ``dict[str, np.ndarray]``; a forward pass wraps them into
:class:`~toposearch.tensor.Tensor` leaves (see :func:`as_leaves`). Layer ``i`` in
code feeds super node ``i + 1``; the stem produces layer 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .decode import ArchitectureTopology
from .space import SearchSpace, SpaceConfig

# (name, [(kh, kw, dilation), ...]); an empty kernel list is the identity
CELL_OPS = (
    ("skip", ()),
    ("conv3x3", ((3, 3, 1),)),
    ("p2d_3x1_1x3", ((3, 1, 1), (1, 3, 1))),
    ("p2d_1x3_3x1", ((1, 3, 1), (3, 1, 1))),
    ("conv3x3_dil2", ((3, 3, 2),)),
)


class NonFiniteActivationError(FloatingPointError):
    pass


class InfeasibleTopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    L: int
    D: int
    N: int = 5
    base_channels: int = 8
    patch: tuple[int, int] = (32, 32)
    classes: int = 2
    in_channels: int = 1

    def __post_init__(self):
        H, W = self.patch
        f = 2 ** (self.D - 1)
        if H % f or W % f:
            raise ValueError(f"patch {self.patch} must be divisible by {f} for D={self.D}")
        if not 1 <= self.N <= len(CELL_OPS):
            raise ValueError(f"N must be in [1, {len(CELL_OPS)}], got {self.N}")

    @classmethod
    def from_space(cls, cfg: SpaceConfig, **kw) -> "NetConfig":
        return cls(cfg.L, cfg.D, cfg.N, **kw)

    @property
    def space_cfg(self) -> SpaceConfig:
        return SpaceConfig(self.L, self.D, self.N)

    def channels(self, d: int) -> int:
        return self.base_channels * 2**d

    def feature_shape(self, d: int) -> tuple[int, int, int]:
        H, W = self.patch
        return self.channels(d), H // 2**d, W // 2**d


# weights -----------------------------------------------------------------------


def _weight_shapes(net: NetConfig, space: SearchSpace, topo: ArchitectureTopology | None = None):
    """Ordered (name, shape, kind) triples; ``topo`` restricts to a discrete net."""
    out = []
    if topo is None:
        stems = range(net.D)
        finals = range(net.D)
        cells = [(i, e, n) for i in range(net.L) for e in range(space.E) for n in range(net.N)]
    else:
        stems = sorted({space.edges[e].src_res for e in space.pattern(topo.I[0]).selected})
        finals = sorted({space.edges[e].dst_res for e in space.pattern(topo.I[-1]).selected})
        cells = [(i, e, topo.ops[(i, e)]) for i, pid in enumerate(topo.I) for e in space.pattern(pid).selected]
    for d in stems:
        out.append((f"stem.{d}.w", (net.channels(d), net.in_channels, 3, 3), "conv"))
        out.append((f"stem.{d}.b", (net.channels(d),), "zero"))
    adapted = sorted({(i, e) for i, e, _ in cells})
    for i, e in adapted:
        ed = space.edges[e]
        if ed.src_res != ed.dst_res:
            out.append((f"adapt.{i}.{e}.w", (net.channels(ed.dst_res), net.channels(ed.src_res), 1, 1), "conv"))
    for i, e, n in cells:
        c = net.channels(space.edges[e].dst_res)
        kernels = CELL_OPS[n][1]
        for m, (kh, kw, _) in enumerate(kernels):
            out.append((f"cell.{i}.{e}.{n}.k{m}", (c, c, kh, kw), "conv"))
        if kernels:
            out.append((f"cell.{i}.{e}.{n}.gamma", (c,), "one"))
            out.append((f"cell.{i}.{e}.{n}.beta", (c,), "zero"))
    for d in finals:
        if d > 0:
            out.append((f"head.proj.{d}.w", (net.channels(0), net.channels(d), 1, 1), "conv"))
    out.append(("head.out.w", (net.classes, net.channels(0), 1, 1), "conv"))
    out.append(("head.out.b", (net.classes,), "zero"))
    return out


def init_weights(net: NetConfig, space: SearchSpace, rng: np.random.Generator,
                 topo: ArchitectureTopology | None = None) -> dict[str, np.ndarray]:
    """He-normal convolutions, unit norm scale, zero shifts and biases."""
    weights = {}
    for name, shape, kind in _weight_shapes(net, space, topo):
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif kind == "one":
            weights[name] = np.ones(shape)
        else:
            weights[name] = np.zeros(shape)
    return weights


def param_count(weights: dict[str, np.ndarray]) -> int:
    return int(sum(w.size for w in weights.values()))


def as_leaves(weights: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v, requires_grad=requires_grad, name=k) for k, v in weights.items()}


def save_weights(path, weights: dict[str, np.ndarray], **extra):
    with open(path, "wb") as fh:
        np.savez(fh, **weights, **{f"__{k}": v for k, v in extra.items()})


def load_weights(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    with np.load(Path(path)) as z:
        w = {k: z[k].copy() for k in z.files if not k.startswith("__")}
        extra = {k[2:]: z[k].copy() for k in z.files if k.startswith("__")}
    return w, extra


# forward pieces ------------------------------------------------------------------


def stem_forward(W: dict[str, T.Tensor], image, net: NetConfig, resolutions=None) -> dict[int, T.Tensor]:
    """Layer-0 features: the image average-pooled ``d`` times then a 3x3 conv."""
    image = T._tensor(image)
    if image.shape[1:] != (net.in_channels, *net.patch):
        raise T.ShapeError(f"image shape {image.shape[1:]} does not match {(net.in_channels, *net.patch)}")
    resolutions = range(net.D) if resolutions is None else resolutions
    out = {}
    x = image
    for d in range(max(resolutions) + 1):
        if d > 0:
            x = T.downsample2x(x)
        if d in resolutions:
            out[d] = T.conv2d(x, W[f"stem.{d}.w"], W[f"stem.{d}.b"])
    return out


def edge_input(W: dict[str, T.Tensor], i: int, e: int, x: T.Tensor, space: SearchSpace) -> T.Tensor:
    """Resample a source feature to the edge's target resolution and width."""
    ed = space.edges[e]
    if ed.src_res == ed.dst_res:
        return x
    x = T.downsample2x(x) if ed.dst_res > ed.src_res else T.upsample2x(x)
    return T.conv2d(x, W[f"adapt.{i}.{e}.w"])


def op_forward(W: dict[str, T.Tensor], i: int, e: int, n: int, x: T.Tensor) -> T.Tensor:
    kernels = CELL_OPS[n][1]
    if not kernels:
        return x
    h = T.relu(x)
    for m, (_, _, dil) in enumerate(kernels):
        h = T.conv2d(h, W[f"cell.{i}.{e}.{n}.k{m}"], dilation=dil)
    return T.instance_norm(h, W[f"cell.{i}.{e}.{n}.gamma"], W[f"cell.{i}.{e}.{n}.beta"])


def cell_forward(W: dict[str, T.Tensor], i: int, e: int, x: T.Tensor, alpha_row) -> T.Tensor:
    """Mixture of all candidate ops weighted by a simplex row."""
    alpha_row = T._tensor(alpha_row)
    outs = [op_forward(W, i, e, n, x) for n in range(alpha_row.shape[0])]
    return T.weighted_sum(outs, alpha_row)


def output_head(W: dict[str, T.Tensor], finals: dict[int, T.Tensor]) -> T.Tensor:
    """Project every final node to full width, upsample, sum, then 1x1 conv."""
    if not finals:
        raise ValueError("output head needs at least one active final node")
    parts = []
    for d in sorted(finals):
        x = finals[d]
        if d > 0:
            x = T.conv2d(x, W[f"head.proj.{d}.w"])
            for _ in range(d):
                x = T.upsample2x(x)
        parts.append(x)
    z = parts[0] if len(parts) == 1 else T.add_n(parts)
    return T.conv2d(z, W["head.out.w"], W["head.out.b"])


def _check(x: T.Tensor, layer: int, d: int, net: NetConfig):
    if x.shape[1:] != net.feature_shape(d):
        raise T.ShapeError(f"layer {layer} resolution {d}: shape {x.shape[1:]}, expected {net.feature_shape(d)}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteActivationError(f"non-finite activation at layer {layer}, resolution {d}")


def relaxed_forward(W: dict[str, T.Tensor], q, alpha, image, net: NetConfig, space: SearchSpace) -> T.Tensor:
    """Relaxed network evaluated through per-edge marginals ``q`` [L,E]."""
    q, alpha = T._tensor(q), T._tensor(alpha)
    nodes = stem_forward(W, image, net)
    for i in range(net.L):
        new = {}
        for d in range(net.D):
            into = space.edges_into(d)
            cells = [cell_forward(W, i, e, edge_input(W, i, e, nodes[space.edges[e].src_res], space),
                                  T.getitem(alpha, (i, e))) for e in into]
            new[d] = T.weighted_sum(cells, T.getitem(q, (i, np.array(into))))
            _check(new[d], i + 1, d, net)
        nodes = new
    return output_head(W, nodes)


def pattern_sum_forward(W: dict[str, T.Tensor], eta, alpha, image, net: NetConfig,
                        space: SearchSpace) -> T.Tensor:
    """Literal pattern-sum evaluation: s_i = sum_j eta[i,j] * c_j(s_{i-1}).

    Reference path for small spaces; cost grows with M.
    """
    eta, alpha = np.asarray(T._tensor(eta).data), T._tensor(alpha)
    nodes = stem_forward(W, image, net)
    B = space.pattern_matrix
    for i in range(net.L):
        cells = {e: cell_forward(W, i, e, edge_input(W, i, e, nodes[space.edges[e].src_res], space),
                                 T.getitem(alpha, (i, e))) for e in range(space.E)}
        zero = {d: T.Tensor(np.zeros((image.shape[0], *net.feature_shape(d)))) for d in range(net.D)}
        new = {d: zero[d] for d in range(net.D)}
        for j in range(space.M):
            for d in range(net.D):
                sel = [cells[e] for e in space.edges_into(d) if B[j, e]]
                c_jd = T.add_n(sel) if sel else zero[d]
                new[d] = T.add(new[d], T.scale(c_jd, eta[i, j]))
        nodes = new
    return output_head(W, nodes)


# discrete network ------------------------------------------------------------------


def discrete_forward(W: dict[str, T.Tensor], topo: ArchitectureTopology, image, net: NetConfig,
                     space: SearchSpace) -> T.Tensor:
    """Forward of the network holding only the selected edges and their ops.

    A node with no incoming edge is absent, and so are its outgoing edges.
    """
    first = {space.edges[e].src_res for e in space.pattern(topo.I[0]).selected}
    nodes = stem_forward(W, image, net, sorted(first))
    for i, pid in enumerate(topo.I):
        incoming: dict[int, list[T.Tensor]] = {}
        for e in space.pattern(pid).selected:
            ed = space.edges[e]
            if ed.src_res not in nodes:
                continue
            x = edge_input(W, i, e, nodes[ed.src_res], space)
            incoming.setdefault(ed.dst_res, []).append(op_forward(W, i, e, topo.ops[(i, e)], x))
        nodes = {d: (xs[0] if len(xs) == 1 else T.add_n(xs)) for d, xs in sorted(incoming.items())}
        for d, x in nodes.items():
            _check(x, i + 1, d, net)
    return output_head(W, nodes)


@dataclass
class DiscreteNet:
    topology: ArchitectureTopology
    net: NetConfig
    space: SearchSpace
    weights: dict[str, np.ndarray]

    def forward(self, image, requires_grad: bool = False):
        W = as_leaves(self.weights, requires_grad)
        return discrete_forward(W, self.topology, image, self.net, self.space), W

    @property
    def num_params(self) -> int:
        return param_count(self.weights)


def instantiate_discrete(topo: ArchitectureTopology, net: NetConfig, rng: np.random.Generator,
                         space: SearchSpace | None = None) -> DiscreteNet:
    space = space or SearchSpace(net.space_cfg)
    if topo.L != net.L or topo.D != net.D:
        raise InfeasibleTopologyError(f"topology (L={topo.L}, D={topo.D}) does not match net (L={net.L}, D={net.D})")
    if not space.is_feasible_sequence(topo.I):
        raise InfeasibleTopologyError(f"pattern sequence {topo.I} is not feasible")
    missing = [(i, e) for i, pid in enumerate(topo.I) for e in space.pattern(pid).selected if (i, e) not in topo.ops]
    if missing:
        raise InfeasibleTopologyError(f"no op chosen for selected edges {missing[:5]}")
    return DiscreteNet(topo, net, space, init_weights(net, space, rng, topo))
