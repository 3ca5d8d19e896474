import json

import pytest
from hypothesis import given, strategies as st

from sopf.grid import (Bus, Generator, Line, NetworkError, NetworkModel, check_schema,
                       dfs_order, dump_network, duplicate_system, load_network,
                       network_to_dict, parse_network, validate, CostCoefficients)


def chain(n, ref=1):
    buses = [Bus(i, 0.9, 1.1, i == ref, 0.1, 0.05) for i in range(1, n + 1)]
    lines = [Line(i, i + 1, 0.01, 0.02) for i in range(1, n)]
    return NetworkModel(buses, lines, [Generator(1, "DG", 0, 1, 0, 1)])


def test_bundled_feeder_shape(feeder):
    assert len(feeder.buses) == 33
    assert len(feeder.lines) == 32
    assert [g.bus for g in feeder.dgs] == [4, 7, 15]
    assert [g.bus for g in feeder.pvs] == [9, 11, 13, 21, 28, 30]
    assert feeder.reference_buses == [1]
    assert validate(feeder) == []


def test_bundled_feeder_data(feeder):
    dg4 = feeder.dgs[0]
    assert (dg4.p_min, dg4.p_max) == (0.14, 1.4)
    # 0.9 power factor on every load
    for b in feeder.buses:
        if b.load_p_base:
            assert b.load_q_base / b.load_p_base == pytest.approx(0.484322104838, rel=1e-9)
    assert sum(b.load_p_base for b in feeder.buses) == pytest.approx(3.715)


def test_dangling_reference(feeder):
    doc = network_to_dict(feeder)
    doc["lines"][5]["to"] = 99
    with pytest.raises(NetworkError) as err:
        parse_network(doc)
    assert err.value.kind == "dangling-reference"
    assert any("99" in d for d in err.value.diagnostics)


def test_cycle_is_non_tree(feeder):
    doc = network_to_dict(feeder)
    doc["lines"].append({"from": 18, "to": 33, "r": 0.01, "x": 0.01})
    with pytest.raises(NetworkError) as err:
        parse_network(doc)
    assert err.value.kind == "non-tree"


def test_missing_field_and_parse_error(tmp_path, feeder):
    doc = network_to_dict(feeder)
    del doc["lines"][0]["r"]
    with pytest.raises(NetworkError) as err:
        parse_network(doc)
    assert err.value.kind == "missing-field"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(NetworkError) as err:
        load_network(bad)
    assert err.value.kind == "parse"


def test_validate_voltage_bound_diagnostic(feeder):
    buses = list(feeder.buses)
    buses[4] = Bus(5, 1.0, 1.0)
    diags = validate(NetworkModel(buses, feeder.lines, feeder.generators))
    assert len(diags) == 1 and diags[0].startswith("bus 5")


def test_validate_two_references():
    m = chain(3)
    buses = list(m.buses)
    buses[2] = Bus(3, 0.9, 1.1, True)
    diags = validate(NetworkModel(buses, m.lines, m.generators))
    assert len([d for d in diags if "reference" in d]) == 1


def test_validate_inverted_limits_and_orientation():
    m = chain(3)
    gens = [Generator(1, "DG", 1.0, 0.5)]
    assert any("inverted" in d for d in validate(NetworkModel(m.buses, m.lines, gens)))
    lines = [Line(2, 1, 0.01, 0.01), Line(2, 3, 0.01, 0.01)]
    assert any("oriented" in d for d in validate(NetworkModel(m.buses, lines, m.generators)))


def test_line_min_defaults_to_negative_max():
    doc = network_to_dict(chain(2))
    for ln in doc["lines"]:
        del ln["tp_min"], ln["tq_min"]
        ln["tp_max"] = 3.0
    m = parse_network(doc)
    assert m.lines[0].tp_min == -3.0 and m.lines[0].tq_min == -10.0


def test_round_trip(tmp_path, feeder):
    path = tmp_path / "net.json"
    dump_network(feeder, path)
    again = load_network(path)
    assert again == feeder
    assert json.loads(path.read_text()) == network_to_dict(feeder)


def test_schema_accepts_bundled_and_flags_missing(feeder):
    assert check_schema(network_to_dict(feeder)) == []
    assert check_schema({"buses": [{"id": 1, "vmin": 0.9}], "lines": []})


@pytest.mark.parametrize("k", [1, 3, 10, 60])
def test_duplicate_sizes(feeder, k):
    m = duplicate_system(feeder, k)
    assert len(m.buses) == 33 * k
    assert len(m.lines) == 32 * k
    assert len(m.islands) == k
    assert len(m.reference_buses) == k
    assert validate(m) == []


def test_duplicate_identity_and_rejects_zero(feeder):
    assert duplicate_system(feeder, 1) == feeder
    for bad in (0, -1, 2.0):
        with pytest.raises(ValueError):
            duplicate_system(feeder, bad)


def test_cost_coefficients_validation():
    with pytest.raises(ValueError):
        CostCoefficients(c_dg=0.0)
    with pytest.raises(ValueError):
        CostCoefficients(c_loss=-1.0)


@st.composite
def random_tree(draw):
    n = draw(st.integers(1, 25))
    parents = [draw(st.integers(1, i - 1)) for i in range(2, n + 1)]
    buses = [Bus(i, 0.9, 1.1, i == 1) for i in range(1, n + 1)]
    lines = [Line(p, i, draw(st.floats(0, 0.1)), draw(st.floats(0, 0.1)))
             for i, p in zip(range(2, n + 1), parents)]
    gens = [Generator(draw(st.integers(1, n)), "DG", 0.0, 1.0, 0.0, 1.0)]
    return NetworkModel(buses, lines, gens)


@given(random_tree(), st.integers(1, 60))
def test_duplicates_always_validate(model, k):
    m = duplicate_system(model, k)
    assert validate(m) == []
    assert len(m.lines) == len(m.buses) - len(m.islands)


@given(random_tree())
def test_dfs_visits_every_bus_once(model):
    order = dfs_order(model)
    assert sorted(order) == sorted(model.bus_ids)


@given(random_tree())
def test_serialization_round_trip(model):
    assert parse_network(json.loads(json.dumps(network_to_dict(model)))) == model
