import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from privopt import problem as pb


def _doc():
    return pb.fixture_document("paper_sva")


def test_fixture_coefficients(inst):
    assert inst.n == 3 and inst.dims == [2, 2, 2]
    np.testing.assert_array_equal(inst.c, oracles.C)
    np.testing.assert_array_equal(inst.d, oracles.D)
    for i, a in enumerate(inst.agents):
        np.testing.assert_array_equal(a.A_u, oracles.A_U[i])
        np.testing.assert_array_equal(a.A_g, oracles.A_G[i])
        np.testing.assert_array_equal(a.cost.A_q, oracles.A_Q[i])
        np.testing.assert_array_equal(a.cost.A_l, oracles.A_L[i])
        assert a.cost.C_t == oracles.C_T[i]
        np.testing.assert_array_equal(a.lower, [0, 0])
        np.testing.assert_array_equal(a.upper, [1, 1])
    assert inst.lambda_max == 100.0
    assert "paper_sva" in pb.fixture_names()


def test_objective_at_zero(inst):
    assert pb.objective(inst, np.zeros(6)) == pytest.approx(2.5, abs=1e-15)


def test_objective_matches_stacked_oracle(inst):
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.uniform(-1, 2, 6)
        assert pb.objective(inst, x) == pytest.approx(oracles.objective(x), rel=1e-13)
        lam = rng.uniform(0, 3, 2)
        assert pb.lagrangian(inst, x, lam) == pytest.approx(oracles.lagrangian(x, lam), rel=1e-13)


def test_single_agent_without_coupling_or_cost():
    blk = pb.AgentBlock(0, np.zeros((2, 3)), np.zeros((1, 3)), pb.LocalCost(np.zeros((1, 3)), np.zeros(3)),
                        np.zeros(3), np.ones(3))
    inst = pb.ProblemInstance(np.array([3.0, 4.0]), np.array([-1.0]), [blk])
    for x in np.random.default_rng(1).uniform(0, 1, (5, 3)):
        assert pb.objective(inst, x) == 12.5
        np.testing.assert_array_equal(pb.primal_subgradient(inst, 0, inst.c, x, [0.7]), np.zeros(3))


def test_gradient_is_linear_term_when_matrices_vanish():
    cost = pb.LocalCost(np.zeros((2, 2)), np.array([0.3, -0.7]))
    blk = pb.AgentBlock(0, np.zeros((1, 2)), np.zeros((1, 2)), cost, np.zeros(2), np.ones(2))
    inst = pb.ProblemInstance([1.0], [0.0], [blk])
    np.testing.assert_array_equal(pb.primal_subgradient(inst, 0, [5.0], [0.2, 0.9], [2.0]), [0.3, -0.7])


def test_gradient_at_origin(inst):
    x = [np.zeros(2)] * 3
    z_c = pb.coupling_aggregate(inst, x)
    np.testing.assert_array_equal(z_c, inst.c)
    g = pb.primal_subgradient(inst, 0, z_c, x[0], np.zeros(2))
    np.testing.assert_allclose(g, oracles.A_U[0].T @ oracles.C + oracles.A_L[0])
    np.testing.assert_allclose(g, [1.8, 0.5])


def test_gradient_matches_stacked_oracle(inst):
    rng = np.random.default_rng(2)
    _, G, _, _ = oracles.stacked()
    for _ in range(20):
        x = rng.uniform(0, 1, 6)
        lam = rng.uniform(0, 5, 2)
        xs = inst.split(x)
        z_c = pb.coupling_aggregate(inst, xs)
        g = np.concatenate([pb.primal_subgradient(inst, i, z_c, xs[i], lam) for i in range(3)])
        np.testing.assert_allclose(g, oracles.gradient(x) + G.T @ lam, rtol=1e-13, atol=1e-13)


def test_central_differences(inst):
    rng = np.random.default_rng(3)
    h = 1e-5
    for _ in range(20):
        xs = pb.random_feasible_point(inst, rng)
        lam = rng.uniform(0, 5, 2)
        x = inst.stack(xs)
        z_c = pb.coupling_aggregate(inst, xs)
        g = np.concatenate([pb.primal_subgradient(inst, i, z_c, xs[i], lam) for i in range(3)])
        fd = np.array([(oracles.lagrangian(x + h * e, lam) - oracles.lagrangian(x - h * e, lam)) / (2 * h)
                       for e in np.eye(6)])
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_dual_subgradient_is_the_aggregate(inst):
    np.testing.assert_array_equal(pb.dual_subgradient(inst, np.zeros(2)), np.zeros(2))
    z = np.array([0.3, -7.0])
    np.testing.assert_array_equal(pb.dual_subgradient(inst, z), z)
    z0 = pb.constraint_aggregate(inst, [np.zeros(2)] * 3)
    np.testing.assert_array_equal(pb.dual_subgradient(inst, z0), inst.d)
    with pytest.raises(pb.DimensionError):
        pb.dual_subgradient(inst, np.zeros(3))


def test_printed_optimum_beats_random_points(inst):
    f_star = pb.objective(inst, oracles.PRINTED_OPTIMUM)
    rng = np.random.default_rng(4)
    feasible = 0
    while feasible < 100:
        xs = pb.random_feasible_point(inst, rng)
        if np.all(pb.constraint_aggregate(inst, xs) <= 0):
            feasible += 1
            assert f_star <= pb.objective(inst, xs)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.lists(st.floats(0, 1), min_size=6, max_size=6),
       st.floats(0, 1))
def test_convexity(x, y, theta):
    inst = pb.paper_instance()
    x, y = np.array(x), np.array(y)
    lhs = pb.objective(inst, theta * x + (1 - theta) * y)
    assert lhs <= theta * pb.objective(inst, x) + (1 - theta) * pb.objective(inst, y) + 1e-12


# -- views and ownership ------------------------------------------------------------

def test_ownership_map(inst):
    own = inst.ownership()
    assert own["c"] == own["d"] == {pb.SO}
    for k in (1, 2, 3):
        assert own[f"A_u{k}"] == own[f"A_g{k}"] == {pb.SO, f"agent{k}"}
        for name in ("A_q", "A_l", "C_t"):
            assert own[f"{name}{k}"] == {f"agent{k}"}
    assert len(own) == 2 + 3 * 5


def test_agent_view_surface(inst):
    view = inst.agent_view(1)
    public = {name for name in dir(view) if not name.startswith("_")}
    assert public == {"index", "A_u", "A_g", "cost", "lower", "upper", "dim", "role", "midpoint"}
    assert {n for n in dir(view.cost) if not n.startswith("_")} == {"A_q", "A_l", "C_t", "value", "gradient"}
    for arr in (view.A_u, view.A_g, view.cost.A_q, view.lower):
        assert not np.shares_memory(arr, inst.c) and not np.shares_memory(arr, inst.d)
    assert view.role == "agent2"


def test_operator_view_surface(inst):
    view = inst.operator_view()
    public = {name for name in dir(view) if not name.startswith("_")}
    assert public == {"c", "d", "A_u", "A_g", "n"}
    assert view.n == 3


def test_arrays_are_read_only(inst):
    with pytest.raises(ValueError):
        inst.c[0] = 5.0
    with pytest.raises(ValueError):
        inst.agents[0].A_u[0, 0] = 5.0


def test_split_and_stack(inst):
    x = np.arange(6.0)
    blocks = inst.split(x)
    assert [b.tolist() for b in blocks] == [[0, 1], [2, 3], [4, 5]]
    np.testing.assert_array_equal(inst.stack(blocks), x)
    with pytest.raises(pb.DimensionError):
        inst.split(np.zeros(5))
    with pytest.raises(pb.DimensionError):
        pb.objective(inst, [np.zeros(2), np.zeros(3), np.zeros(2)])


# -- documents -------------------------------------------------------------------------

def test_serialization_roundtrip():
    doc = _doc()
    inst = pb.load_instance(doc)
    assert pb.dump_instance(inst) == pb.normalize_document(doc)
    assert pb.dump_instance(pb.load_instance(pb.dump_instance(inst))) == pb.dump_instance(inst)


def test_read_instance_from_path(tmp_path):
    path = tmp_path / "inst.json"
    path.write_text(json.dumps(_doc()))
    assert pb.dump_instance(pb.read_instance(path)) == pb.dump_instance(pb.paper_instance())
    with pytest.raises(pb.InstanceError):
        pb.read_instance("no_such_fixture")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(pb.SchemaError):
        pb.read_instance(bad)


def _mutated(fn):
    doc = copy.deepcopy(_doc())
    fn(doc)
    return doc


@pytest.mark.parametrize("mutate,error", [
    (lambda d: d.pop("c"), pb.SchemaError),
    (lambda d: d.__setitem__("n", 4), pb.SchemaError),
    (lambda d: d["c"].__setitem__(0, 1.0), pb.SchemaError),
    (lambda d: d["c"].__setitem__(0, "one"), pb.SchemaError),
    (lambda d: d["agents"][0].pop("A_q"), pb.SchemaError),
    (lambda d: d.__setitem__("dual", {}), pb.SchemaError),
    (lambda d: d["agents"][1]["A_u"].append(["1", "2"]), pb.DimensionError),
    (lambda d: d["agents"][1]["A_g"][0].append("1"), pb.DimensionError),
    (lambda d: d["agents"][2].__setitem__("A_l", ["1"]), pb.DimensionError),
    (lambda d: d["agents"][0].__setitem__("box_lower", ["2", "0"]), pb.EmptyBoxError),
    (lambda d: d.__setitem__("dual", {"lambda_max": "0"}), pb.EmptyBoxError),
])
def test_schema_errors_are_distinct(mutate, error):
    with pytest.raises(error):
        pb.load_instance(_mutated(mutate))


def test_error_classes_are_distinct():
    assert len({pb.SchemaError, pb.DimensionError, pb.EmptyBoxError}) == 3
    for cls in (pb.SchemaError, pb.DimensionError, pb.EmptyBoxError):
        assert issubclass(cls, pb.InstanceError)
