import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toposearch.space import (
    ConnectionPattern,
    FeasibilitySets,
    SearchSpace,
    SpaceConfig,
    SpaceError,
    activation_code,
    activation_of,
    edges,
    enumerate_patterns,
    feasible_sets,
    is_feasible_pair,
    load_or_build_sets,
    num_edges,
    num_patterns,
)

# Frozen from the independent node-level enumeration below (D=2).
D2_FEASIBLE_PAIRS = 15
D2_F_OUT_10 = 3


def node_level_feasible(D, a, out_edges):
    """Node-level rule written from scratch: active nodes need an outgoing edge, inactive ones must have none."""
    has_out = [False] * D
    for src, _dst in out_edges:
        has_out[src] = True
    return all(has_out[d] == bool(a[d]) for d in range(D))


def raw_edges(D):
    return sorted(((dst, src) for dst in range(D) for src in range(D) if abs(src - dst) <= 1))


@pytest.mark.parametrize("D,E,M", [(2, 4, 15), (3, 7, 127), (4, 10, 1023)])
def test_counts(D, E, M):
    assert num_edges(D) == E == 3 * D - 2
    assert num_patterns(D) == M
    assert len(enumerate_patterns(SpaceConfig(1, D))) == M
    kinds = [e.kind for e in edges(D)]
    assert kinds.count("same") == D and kinds.count("down") == D - 1 and kinds.count("up") == D - 1


def test_config_validation():
    with pytest.raises(SpaceError):
        SpaceConfig(1, 5)
    with pytest.raises(SpaceError):
        SpaceConfig(1, 1)
    with pytest.raises(SpaceError):
        SpaceConfig(0, 2)


def test_canonical_edge_order():
    for D in (2, 3, 4):
        got = [(e.dst_res, e.src_res) for e in edges(D)]
        assert got == raw_edges(D)
        assert [e.index for e in edges(D)] == list(range(3 * D - 2))


@given(st.integers(min_value=1, max_value=1023))
def test_id_bits_roundtrip(pid):
    cp = ConnectionPattern.from_id(pid, 10)
    assert ConnectionPattern.from_bits(cp.bits) == cp
    assert int("".join(map(str, reversed(cp.bits))), 2) == pid


def test_empty_pattern_rejected():
    with pytest.raises(SpaceError):
        ConnectionPattern.from_bits([0, 0, 0, 0])
    with pytest.raises(SpaceError):
        ConnectionPattern.from_id(0, 4)


def test_activation_examples():
    cfg2, cfg3 = SpaceConfig(1, 2), SpaceConfig(1, 3)
    e00 = next(e.index for e in edges(2) if (e.src_res, e.dst_res) == (0, 0))
    bits = [0] * 4
    bits[e00] = 1
    assert activation_of(ConnectionPattern.from_bits(bits), cfg2) == (1, 0)
    assert activation_of(ConnectionPattern.from_bits([1, 1, 1, 1]), cfg2) == (1, 1)
    bits3 = [1 if e.dst_res in (0, 2) else 0 for e in edges(3)]
    assert activation_of(ConnectionPattern.from_bits(bits3), cfg3) == (1, 0, 1)


def test_feasible_pair_examples():
    for D in (2, 3, 4):
        cfg = SpaceConfig(1, D)
        same = ConnectionPattern.from_bits([1 if e.kind == "same" else 0 for e in edges(D)])
        assert is_feasible_pair((1,) * D, same, cfg)
        a = (1,) + (0,) * (D - 1)
        for e in edges(D):
            if e.src_res == 1:
                bits = [0] * cfg.E
                bits[e.index] = 1
                assert not is_feasible_pair(a, ConnectionPattern.from_bits(bits), cfg)


def test_d2_frozen_constants():
    D = 2
    E = raw_edges(D)
    pairs = 0
    f_out_10 = 0
    for a in itertools.product((0, 1), repeat=D):
        if not any(a):
            continue
        for bits in itertools.product((0, 1), repeat=len(E)):
            if not any(bits):
                continue
            ok = node_level_feasible(D, a, [(src, dst) for (dst, src), b in zip(E, bits) if b])
            pairs += ok
            f_out_10 += ok and a == (1, 0)
    assert pairs == D2_FEASIBLE_PAIRS
    assert f_out_10 == D2_F_OUT_10
    sets = feasible_sets(SpaceConfig(1, 2))
    assert sum(len(v) for v in sets.F_out.values()) == D2_FEASIBLE_PAIRS
    assert len(sets.F_out[activation_code((1, 0), 2)]) == D2_F_OUT_10
    assert 15 in sets.F_in[activation_code((1, 1), 2)]


@pytest.mark.parametrize("D", [2, 3])
def test_tables_match_node_level_definition(D):
    cfg = SpaceConfig(2, D)
    sets = feasible_sets(cfg)
    E = raw_edges(D)
    for j in range(1, 2 ** len(E)):
        in_edges = [(src, dst) for e, (dst, src) in enumerate(E) if j >> e & 1]
        a = tuple(int(any(dst == d for _, dst in in_edges)) for d in range(D))
        for k in range(1, 2 ** len(E)):
            out_edges = [(src, dst) for e, (dst, src) in enumerate(E) if k >> e & 1]
            assert (k in sets.F[j]) == node_level_feasible(D, a, out_edges)


@pytest.mark.parametrize("D", [2, 3, 4])
def test_partition_and_nonempty(D):
    cfg = SpaceConfig(1, D)
    sets = feasible_sets(cfg)
    ids = sorted(i for v in sets.F_in.values() for i in v)
    assert ids == list(range(1, cfg.M + 1))
    assert len(sets.F_in) == cfg.A == 2**D - 1
    assert all(len(v) > 0 for v in sets.F_out.values())
    for j in (1, cfg.M // 2, cfg.M):
        a = activation_code(activation_of(ConnectionPattern.from_id(j, cfg.E), cfg), D)
        assert sets.F[j] == sets.F_out[a]


def test_sets_json_roundtrip_and_cache(tmp_path):
    cfg = SpaceConfig(1, 3)
    sets = feasible_sets(cfg)
    again = FeasibilitySets.from_json(json.loads(json.dumps(sets.to_json())))
    assert again == sets
    built = load_or_build_sets(cfg, tmp_path)
    assert (tmp_path / "feasible_sets_D3.json").exists()
    assert load_or_build_sets(cfg, tmp_path) == built == sets


def test_search_space_matrices():
    space = SearchSpace(SpaceConfig(3, 2))
    B = space.pattern_matrix
    assert B.shape == (15, 4)
    assert [int(sum(int(b) << e for e, b in enumerate(row))) for row in B] == list(range(1, 16))
    T = space.transition_matrix
    for j in range(1, 16):
        assert set(np.flatnonzero(T[j - 1]) + 1) == set(space.sets.F[j])
    assert space.f_in_matrix.sum(axis=0).tolist() == [1.0] * 15


@settings(max_examples=50)
@given(st.lists(st.integers(min_value=1, max_value=127), min_size=1, max_size=5))
def test_is_feasible_sequence_matches_pairwise(seq):
    space = SearchSpace(SpaceConfig(len(seq), 3))
    want = all(seq[i + 1] in space.sets.F[seq[i]] for i in range(len(seq) - 1))
    assert space.is_feasible_sequence(seq) == want
