import copy

import pytest

from geopipe.errors import ScenarioSchemaError
from geopipe.scenario import parse_scenario


def base_doc():
    return {
        "schema": 1,
        "dag": [
            {"name": "in", "kind": "input", "attrs": {"size": 10}},
            {"name": "r", "kind": "relu", "args": ["in"], "attrs": {"size": 10}},
        ],
        "devices": [
            {"id": "a", "peak_flops": 1e9},
            {"id": "b", "peak_flops": 2e9},
        ],
        "links": [{"src": "a", "dst": "b", "alpha": 0.01, "beta": 1e-8}],
        "n_b": 2,
        "micro_batch_size": 4,
    }


def test_minimal_scenario_parses():
    sc = parse_scenario(base_doc(), name="t")
    assert sc.name == "t"
    assert sc.batch_size == 8                  # derived from mbs * n_b
    assert sc.scheduler == "opfence" and sc.compression == "none"
    assert ("b", "a") in sc.network.links      # symmetric row fills reverse


def assert_schema_error(doc, field_substr):
    with pytest.raises(ScenarioSchemaError) as exc:
        parse_scenario(doc)
    assert field_substr in str(exc.value)


def test_missing_schema():
    doc = base_doc()
    del doc["schema"]
    assert_schema_error(doc, "schema")


def test_wrong_schema_version():
    doc = base_doc()
    doc["schema"] = 99
    assert_schema_error(doc, "schema")


def test_missing_link():
    doc = base_doc()
    doc["links"] = []
    assert_schema_error(doc, "link")


def test_asymmetric_link_requires_both_rows():
    doc = base_doc()
    doc["links"][0]["symmetric"] = False
    assert_schema_error(doc, "link")


def test_unknown_device_in_link():
    doc = base_doc()
    doc["links"].append({"src": "a", "dst": "ghost", "alpha": 0.0, "beta": 1e-9})
    assert_schema_error(doc, "ghost")


def test_duplicate_device_ids():
    doc = base_doc()
    doc["devices"].append({"id": "a", "peak_flops": 1e9})
    assert_schema_error(doc, "devices")


def test_batch_size_consistency():
    doc = base_doc()
    doc["batch_size"] = 5
    assert_schema_error(doc, "batch_size")
    doc["batch_size"] = 8
    assert parse_scenario(doc).batch_size == 8


@pytest.mark.parametrize(
    "field,value",
    [("n_b", 0), ("micro_batch_size", 0), ("ratio", 0.5), ("scheduler", "greedy"),
     ("compression", "zip"), ("n_b", "two")],
)
def test_invalid_field_values(field, value):
    doc = base_doc()
    doc[field] = value
    assert_schema_error(doc, field)


def test_non_numeric_alpha():
    doc = base_doc()
    doc["links"][0]["alpha"] = "fast"
    assert_schema_error(doc, "alpha")


def test_error_names_field_path():
    doc = base_doc()
    del doc["devices"][1]["peak_flops"]
    assert_schema_error(doc, "devices[1].peak_flops")
