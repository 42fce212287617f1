import json

import numpy as np
import pytest

from regeq.errors import InvariantViolation, MissingColumn, ParseError, SchemaError
from regeq.features import KernelConfig
from regeq.io import (atomic_write, bundled_case, load_case, load_dataset, parse_case,
                      ptdf_from_reactance, read_wind_csv)


def case_doc(name="one_bus"):
    return json.loads(bundled_case(name).read_text())


def test_one_bus_case_parses():
    case = load_case(bundled_case("one_bus"))
    assert case.n_bus == 1 and case.n_farm == 1
    assert case.ptdf.shape == (0, 1)
    assert case.demand[0] == 50.0


def test_rts_case_layout():
    case = load_case(bundled_case("rts24"))
    assert case.n_bus == 24 and case.n_farm == 6
    assert [case.bus_ids[k] for k in case.wind_bus] == [4, 7, 15, 16, 21, 23]
    assert round(100 * case.wind_cap.sum() / case.demand.sum(), 1) == 38.4


def test_three_bus_regulation_factors():
    case = load_case(bundled_case("three_bus"))
    assert np.allclose(case.reg_up_cost, 10.0 * case.gen_cost_lin)
    assert np.allclose(case.reg_dn_cost, 0.05 * case.gen_cost_lin)


def test_cheap_downward_regulation_required():
    doc = case_doc()
    doc["generators"][0]["reg_dn_cost"] = 20.0
    with pytest.raises(InvariantViolation):
        parse_case(doc)


def test_bad_json_reports_position(tmp_path):
    p = tmp_path / "case.json"
    p.write_text('{"schema": "regeq-case/1",\n "buses": [}')
    with pytest.raises(SchemaError, match=r"case\.json:2:"):
        load_case(p)


def test_schema_errors():
    doc = case_doc()
    doc["schema"] = "other/1"
    with pytest.raises(SchemaError):
        parse_case(doc)
    doc = case_doc()
    doc["wind_farms"][0]["bus"] = 9
    with pytest.raises(SchemaError, match="unknown bus"):
        parse_case(doc)
    doc = case_doc()
    doc["generators"].append(dict(doc["generators"][0]))
    with pytest.raises(SchemaError, match="second generator"):
        parse_case(doc)


def test_disconnected_network_rejected():
    doc = case_doc("three_bus")
    doc["lines"] = [ln for ln in doc["lines"] if 3 not in (ln["from"], ln["to"])]
    with pytest.raises(InvariantViolation):
        parse_case(doc)


def test_ptdf_two_bus():
    F = ptdf_from_reactance(2, [(0, 1, 0.1)], slack=0)
    # injecting at bus 2 and withdrawing at the slack sends flow from 2 to 1
    assert np.allclose(F, [[0.0, -1.0]])


def test_ptdf_block_matches_lines():
    doc = case_doc("three_bus")
    ref = parse_case(doc)
    alt = dict(doc)
    alt.pop("lines")
    alt["ptdf"] = {"lines": list(ref.line_ids), "limit": ref.line_limit.tolist(),
                   "matrix": ref.ptdf.tolist()}
    assert np.array_equal(parse_case(alt).ptdf, ref.ptdf)
    alt["lines"] = doc["lines"]
    with pytest.raises(SchemaError):
        parse_case(alt)


CSV = """timestamp,power,wind_speed,wind_direction,pitch_angle
2020-01-01T00:00:00,10.0,5.0,180.0,0.0
2020-01-01T00:10:00,0.0,2.0,90.0,0.0
2020-01-01T00:20:00,95.5,13.0,270.0,3.0
"""


def test_handcrafted_csv(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text(CSV)
    kc = KernelConfig.default()
    data = load_dataset(p, kc, [100.0])
    assert data.n == 3 and data.dim == sum(len(k.centers) for k in kc.kernels)
    assert np.allclose(data.power[:, 0], [0.1, 0.0, 0.955])
    assert data.features[0, 3] == 1.0  # speed center 5 m/s


def test_shared_power_column(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text(CSV)
    data = load_dataset(p, KernelConfig.default(), [100.0, 200.0])
    assert np.allclose(data.power[:, 1], data.power[:, 0] / 2)


def test_missing_column(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text(CSV.replace("pitch_angle", "pitch"))
    with pytest.raises(MissingColumn, match="pitch_angle"):
        read_wind_csv(p, KernelConfig.default())


def test_bad_values(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text(CSV.replace("95.5", "abc"))
    with pytest.raises(ParseError, match=":4:"):
        read_wind_csv(p, KernelConfig.default())
    p.write_text(CSV.replace("95.5", "150.0"))
    with pytest.raises(ParseError, match="capacity"):
        load_dataset(p, KernelConfig.default(), [100.0])


def test_atomic_write(tmp_path):
    p = tmp_path / "sub" / "out.txt"
    atomic_write(p, "a\n")
    atomic_write(p, "b\n")
    assert p.read_text() == "b\n"
    assert [q.name for q in p.parent.iterdir()] == ["out.txt"]
