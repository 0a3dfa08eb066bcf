import copy
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from secchain.harness import expand_variants, load_scenario_document
from secchain.topology import (ConfigError, ConfigReferenceError, GroupKind, NodeId, RangeError,
                               SchemaError, UnknownService, chain_for_service, initial_node_ids,
                               parse_config, serialize_config, validate_topology)

TWO_CHAINS = {
    "groups": [
        {"id": "FW", "kind": "FW", "initial_active": 1, "max_active": 2, "node_capacity": 1000},
        {"id": "WAF", "kind": "WAF", "initial_active": 1, "max_active": 2, "node_capacity": 1000},
        {"id": "AS", "kind": "AS", "initial_active": 1, "max_active": 2, "node_capacity": 1000},
        {"id": "SSLVPN", "kind": "SSLVPN", "initial_active": 1, "max_active": 2,
         "node_capacity": 1000},
    ],
    "chains": [{"id": "web", "hops": ["FW", "WAF"]}, {"id": "email", "hops": ["FW", "AS", "SSLVPN"]}],
    "services": [{"id": "web", "kind": "web", "chain": "web"},
                 {"id": "email", "kind": "email", "chain": "email"}],
}

MINIMAL = {
    "groups": [{"id": "FW", "kind": "FW", "initial_active": 1, "max_active": 1,
                "node_capacity": 100}],
    "chains": [{"id": "open", "hops": []}],
    "services": [{"id": "svc", "kind": "web", "chain": "open"}],
}


def test_minimal_empty_chain_is_valid():
    cfg = parse_config(MINIMAL)
    assert chain_for_service(cfg, "svc").hops == ()


def test_two_chain_lengths():
    cfg = parse_config(TWO_CHAINS)
    assert [len(c.hops) for c in cfg.chains] == [2, 3]


def test_chain_for_service_resolves_hops():
    cfg = parse_config(TWO_CHAINS)
    assert chain_for_service(cfg, "web").hops == ("FW", "WAF")
    assert chain_for_service(cfg, "email").hops == ("FW", "AS", "SSLVPN")
    with pytest.raises(UnknownService):
        chain_for_service(cfg, "dns")


def test_undeclared_group_reports_path():
    doc = copy.deepcopy(TWO_CHAINS)
    doc["chains"][0]["hops"] = ["FW", "DLP"]
    with pytest.raises(ConfigReferenceError) as exc:
        parse_config(doc)
    assert exc.value.path == "chains.web.hops[1]"


def test_all_errors_collected():
    doc = copy.deepcopy(TWO_CHAINS)
    doc["groups"][0]["node_capacity"] = 0
    doc["groups"][1]["kind"] = "DLP"
    doc["chains"][1]["hops"] = ["FW", "NOPE"]
    doc["bogus"] = 1
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    kinds = {type(e) for e in exc.value.errors}
    assert kinds == {SchemaError, RangeError, ConfigReferenceError}
    paths = {e.path for e in exc.value.errors}
    assert {"bogus", "groups.FW.node_capacity", "groups.WAF.kind", "chains.email.hops[1]"} <= paths


@pytest.mark.parametrize("mutate, err", [
    (lambda d: d["groups"][0].update(node_capacity=-5), RangeError),
    (lambda d: d["groups"][0].update(initial_active=3, max_active=2), RangeError),
    (lambda d: d["groups"][0].update(standby_count=2), RangeError),
    (lambda d: d["groups"][0].update(kind="DLP"), SchemaError),
    (lambda d: d["chains"][0].update(hops=["FW", "FW"]), SchemaError),
    (lambda d: d["services"][0].update(chain="nope"), ConfigReferenceError),
    (lambda d: d.update(timers={"rule_install_latency_s": 0}), RangeError),
    (lambda d: d.update(timers={"unknown_timer": 1}), SchemaError),
    (lambda d: d.update(faults=[{"target": "fw-9", "time_s": 1}]), ConfigReferenceError),
    (lambda d: d.update(faults=[{"target": "random-active-in(X)", "time_s": 1}]),
     ConfigReferenceError),
    (lambda d: d.update(workloads=[{"service": "web", "clients": 1, "per_client_rate": 1,
                                    "attack_mix": {"SQLI": 0.7, "XSS": 0.6}}]), RangeError),
])
def test_negative_cases(mutate, err):
    doc = copy.deepcopy(TWO_CHAINS)
    mutate(doc)
    with pytest.raises(err):
        parse_config(doc)


def test_node_ids():
    assert str(NodeId("WAF", 2)) == "waf-2"
    cfg = parse_config(TWO_CHAINS)
    assert initial_node_ids(cfg.group("FW")) == (["fw-1"], "fw-2")


def test_burst_config_has_no_warnings():
    doc = load_scenario_document("burst7a")
    variants = dict(expand_variants(doc))
    assert validate_topology(parse_config(variants["elastic"])) == []


def test_scale_out_disabled_warning():
    cfg = parse_config(MINIMAL | {"chains": [{"id": "open", "hops": ["FW"]}]})
    assert any("scale-out disabled" in w for w in validate_topology(cfg))


def test_unprotected_service_warning():
    assert any("service unprotected" in w for w in validate_topology(parse_config(MINIMAL)))


group_st = st.tuples(st.integers(1, 3), st.integers(0, 2))


@st.composite
def docs(draw):
    n = draw(st.integers(1, 4))
    sizes = draw(st.lists(group_st, min_size=n, max_size=n))
    kinds = draw(st.lists(st.sampled_from([k.value for k in GroupKind]), min_size=n, max_size=n))
    groups = [{"id": f"G{i}", "kind": kinds[i], "initial_active": a, "max_active": a + extra,
               "node_capacity": draw(st.floats(1, 1e5, allow_nan=False))}
              for i, (a, extra) in enumerate(sizes)]
    n_chains = draw(st.integers(1, 3))
    chains = []
    for c in range(n_chains):
        hops = draw(st.lists(st.integers(0, n - 1), unique=True, max_size=n))
        chains.append({"id": f"c{c}", "hops": [f"G{h}" for h in hops]})
    services = [{"id": f"s{c}", "kind": "web", "chain": f"c{c}"} for c in range(n_chains)]
    with_load = draw(st.lists(st.booleans(), min_size=n_chains, max_size=n_chains))
    workloads = [{"service": f"s{c}", "clients": 2, "per_client_rate": 3.0}
                 for c in range(n_chains) if with_load[c]]
    autoscale = draw(st.booleans())
    return {"groups": groups, "chains": chains, "services": services, "workloads": workloads,
            "seed": draw(st.integers(0, 2**31)), "duration_s": 5.0,
            "policy": {"autoscale": autoscale}}


@given(docs())
def test_round_trip(doc):
    cfg = parse_config(doc)
    again = parse_config(json.loads(json.dumps(serialize_config(cfg))))
    assert again == cfg


@given(docs())
def test_warning_triggers_enumerated(doc):
    cfg = parse_config(doc)
    used = {h for c in doc["chains"] for h in c["hops"]}
    expected = 0
    for g in doc["groups"]:
        if g["id"] not in used:
            expected += 1
        elif g["initial_active"] == g["max_active"] and doc["policy"]["autoscale"]:
            expected += 1
    served = {w["service"] for w in doc["workloads"]}
    for c, s in zip(doc["chains"], doc["services"]):
        if not c["hops"]:
            expected += 1
        if doc["workloads"] and s["id"] not in served:
            expected += 1
    assert len(validate_topology(cfg)) == expected


@given(docs())
def test_chain_for_service_is_pure(doc):
    a, b = parse_config(doc), parse_config(copy.deepcopy(doc))
    for s in a.services:
        assert chain_for_service(a, s.id) == chain_for_service(b, s.id)
