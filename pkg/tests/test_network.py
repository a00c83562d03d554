import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oapd.network import (
    Branch,
    Bus,
    BusKind,
    CaseParseError,
    CaseValidationError,
    Generator,
    NetworkCase,
    apply_costs,
    bundled_path,
    load_case,
    parse_cost_file,
    parse_native_case,
    parse_psse_raw_v26,
    scale_load,
    serialize_native_case,
    validate,
)

RAW_HEADER = "0, 100.0\nTITLE ONE\nTITLE TWO\n"


def test_bundled_case_shape(case14):
    assert (case14.n_bus, len(case14.branches), case14.n_gen) == (14, 20, 5)
    assert sum(1 for br in case14.branches if br.tap != 1.0) == 3
    assert sum(1 for b in case14.buses if b.pd > 0) == 11
    assert case14.total_pd == pytest.approx(242.0, abs=1e-9)
    assert validate(case14) == []


def test_table_limits_and_costs(case14):
    np.testing.assert_allclose(case14.gen_array("p_min"), [37.9, 48.1, 5.8, 11.4, 0.3])
    np.testing.assert_allclose(case14.gen_array("p_max"), [245.4, 157.5, 82.5, 110.5, 80.1])
    np.testing.assert_allclose(case14.gen_array("cost_a"), [0.043, 0.25, 0.01, 0.01, 0.01])
    np.testing.assert_allclose(case14.gen_array("cost_b"), [20, 20, 40, 40, 40])
    np.testing.assert_allclose(case14.gen_array("q_min"), [-132.2, -76.9, -0.8, -19.1, -8.0])
    np.testing.assert_allclose(case14.gen_array("q_max"), [76.1, 36.1, 48.5, 19.4, 19.2])


def test_native_round_trip_is_fixed_point(case14):
    text = serialize_native_case(case14)
    again = parse_native_case(text)
    assert again == case14
    assert serialize_native_case(again) == text


def test_single_bus_case_is_valid():
    text = "BASEMVA 100\nBUS\n1 SLACK 1.0 0 0 0 0 0 100\nBRANCH\nGEN\n1 0 0 0 10 -10 10 1.0 0 0\n"
    case = parse_native_case(text)
    assert case.n_bus == 1 and not case.branches


@pytest.mark.parametrize(
    "text, line",
    [
        ("BASEMVA 100\nBUS\n1 SLACK 1.0 0 0 0 0 0\n", 3),
        ("BASEMVA 100\nBUS\n1 SLACK 1.0 zero 0 0 0 0 100\n", 3),
        ("BASEMVA 100\n1 2 3\n", 2),
        ("BASEMVA 100\nBUS\n1 HUB 1.0 0 0 0 0 0 100\n", 3),
    ],
)
def test_native_syntax_errors_name_the_line(text, line):
    with pytest.raises(CaseParseError) as err:
        parse_native_case(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_native_semantic_errors(case14):
    text = serialize_native_case(case14).replace("\n1 SLACK", "\n1 PV")
    with pytest.raises(CaseValidationError, match="SLACK"):
        parse_native_case(text)


def test_raw_matches_native(case14):
    raw = load_case(bundled_path("ieee14.raw"), bundled_path("ieee14_costs.txt"))
    assert raw == case14


def test_raw_carries_no_costs():
    raw = load_case(bundled_path("ieee14.raw"))
    assert not raw.gen_array("cost_a").any() and not raw.gen_array("cost_b").any()


def test_raw_bus_record_echo():
    text = (RAW_HEADER
            + "1, 'BUS1', 132.0, 3, 0.0, 0.0, 1, 1, 1.06, 0.0, 1\n0 / END OF BUS DATA\n"
            + "1, '1', 0.0, 0.0, 10.0, -10.0, 1.06, 0, 100.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1, 100.0, 50.0, 0.0\n"
            + "0\n0\n0\nQ\n")
    case = parse_psse_raw_v26(text)
    bus = case.buses[0]
    assert (bus.id, bus.kind, bus.vm, bus.va, bus.base_kv) == (1, BusKind.SLACK, 1.06, 0.0, 132.0)
    assert case.generators[0].p_max == 50.0


def test_raw_unterminated_bus_section():
    text = RAW_HEADER + "1, 'BUS1', 132.0, 3, 0.0, 0.0, 1, 1, 1.06, 0.0, 1\n"
    with pytest.raises(CaseParseError, match="not terminated"):
        parse_psse_raw_v26(text)


def test_raw_malformed_number_reports_row_and_column():
    text = RAW_HEADER + "1, 'BUS1', 132.0, 3, 0.0, 0.0, 1, 1, 1.o6, 0.0, 1\n0\n0\n0\n0\n"
    with pytest.raises(CaseParseError) as err:
        parse_psse_raw_v26(text)
    assert (err.value.line, err.value.column) == (4, 9)


def test_raw_unsupported_record_in_bus_section():
    text = RAW_HEADER + "1, 'BUS1', 132.0, 3\n0\n0\n0\n0\n"
    with pytest.raises(CaseParseError, match="unsupported record"):
        parse_psse_raw_v26(text)


def test_cost_file():
    costs = parse_cost_file("# idx a b\n1 0.5 10\n2 0.25 20\n")
    assert costs == {1: (0.5, 10.0), 2: (0.25, 20.0)}


def test_apply_costs_rejects_bad_index(case14):
    with pytest.raises(ValueError):
        apply_costs(case14, {9: (1.0, 1.0)})


@pytest.mark.parametrize("factor, total", [(1.0, 242.0), (0.8, 193.6), (1.2, 290.4)])
def test_scale_load_totals(case14, factor, total):
    scaled = scale_load(case14, factor)
    assert scaled.total_pd == pytest.approx(total, abs=1e-9)
    assert case14.total_pd == pytest.approx(242.0, abs=1e-9)
    assert scaled.branches == case14.branches and scaled.generators == case14.generators


def test_scale_load_identity(case14):
    assert scale_load(case14, 1.0) == case14


def test_scale_load_rejects_non_positive(case14):
    with pytest.raises(ValueError):
        scale_load(case14, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=0.05, max_value=20.0))
def test_scale_load_inverse(case14, factor):
    back = scale_load(scale_load(case14, factor), 1.0 / factor)
    for a, b in zip(back.buses, case14.buses):
        assert a.pd == pytest.approx(b.pd, rel=1e-12, abs=1e-12)
        assert a.qd == pytest.approx(b.qd, rel=1e-12, abs=1e-12)


def test_validate_pg_above_pmax(case14):
    gens = list(case14.generators)
    gens[2] = dataclasses.replace(gens[2], pg=gens[2].p_max + 1)
    v = validate(dataclasses.replace(case14, generators=tuple(gens)))
    assert len(v) == 1 and "generators[2]" in v[0].field


def test_validate_dangling_branch(case14):
    branches = list(case14.branches) + [Branch(1, 99, 0.01, 0.1)]
    v = validate(dataclasses.replace(case14, branches=tuple(branches)))
    assert len(v) == 1 and "99" in v[0].rule


# each entry corrupts one field of one record
_MUTATIONS = [
    ("buses", "id", lambda b: -1),
    ("buses", "id", lambda b: 2 if b.id == 1 else 1),
    ("buses", "vm", lambda b: 0.0),
    ("buses", "vm", lambda b: -1.0),
    ("buses", "pd", lambda b: math.nan),
    ("buses", "kind", lambda b: BusKind.SLACK if b.kind is not BusKind.SLACK else BusKind.PQ),
    ("branches", "to_bus", lambda br: br.from_bus),
    ("branches", "to_bus", lambda br: 99),
    ("branches", "tap", lambda br: 0.0),
    ("branches", "x", lambda br: math.inf),
    ("branches", "r", lambda br: 0.0, "x"),
    ("generators", "bus", lambda g: 99),
    ("generators", "pg", lambda g: g.p_max + 1.0),
    ("generators", "pg", lambda g: g.p_min - 1.0),
    ("generators", "p_min", lambda g: g.p_max + 1.0),
    ("generators", "q_min", lambda g: g.q_max + 1.0),
    ("generators", "v_set", lambda g: 0.0),
    ("generators", "cost_a", lambda g: math.nan),
]


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(_MUTATIONS), st.integers(min_value=0, max_value=1000))
def test_every_single_field_corruption_is_reported(case14, mutation, pick):
    group, name, value, *extra = mutation
    records = list(getattr(case14, group))
    k = pick % len(records)
    changes = {name: value(records[k])}
    for other in extra:
        changes[other] = 0.0
    records[k] = dataclasses.replace(records[k], **changes)
    assert len(validate(dataclasses.replace(case14, **{group: tuple(records)}))) >= 1


def test_case_is_immutable(case14):
    with pytest.raises(dataclasses.FrozenInstanceError):
        case14.base_mva = 1.0
