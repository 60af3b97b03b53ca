import copy
import json

import pytest

from mcki.cases import (
    PARTITIONS,
    CaseError,
    Partition,
    derive_sequential_chains,
    derive_single_cases,
    load_cases,
    parse_cases,
    parse_order,
)
from mcki.fixtures import generate_case_records, write_case_file


def _records(n_scenarios=2, per_scenario=2, seed=0):
    return generate_case_records(n_scenarios, per_scenario, seed=seed)


def _parse(records):
    return parse_cases([(f"records[{i}]", r) for i, r in enumerate(records)])


def test_load_happy_path(tmp_path):
    records = _records()[:4]
    path = write_case_file(tmp_path / "cases.jsonl", records)
    cases = load_cases(path)
    assert len(cases) == 4
    assert [c.case_id for c in cases] == [r["case_id"] for r in records]


def test_load_reports_line_number_on_bad_json(tmp_path):
    path = tmp_path / "cases.jsonl"
    lines = [json.dumps(r) for r in _records()]
    lines.insert(1, "{not json")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(CaseError, match=r"cases\.jsonl:2"):
        load_cases(path)


def test_missing_partition_names_case_and_partition():
    records = _records()
    del records[0]["qa"]["ar"]
    with pytest.raises(CaseError, match=rf"{records[0]['case_id']}.*'ar'"):
        _parse(records)


def test_generality_ref_crossing_scenario_rejected():
    records = _records()
    # point a case's generality_ref at a case from another scenario
    other = next(r for r in records if r["scenario_id"] != records[0]["scenario_id"])
    records[0]["generality_ref"] = other["case_id"]
    with pytest.raises(CaseError, match="generality reference crosses scenario"):
        _parse(records)


def test_generality_ref_same_image_rejected():
    records = _records()
    records[0]["generality_ref"] = records[0]["case_id"]
    with pytest.raises(CaseError, match="different image"):
        _parse(records)


def test_cross_scenario_ref_same_scenario_rejected():
    records = _records()
    same_scenario = next(
        r
        for r in records[1:]
        if r["scenario_id"] == records[0]["scenario_id"]
    )
    records[0]["cross_scenario_ref"] = same_scenario["case_id"]
    with pytest.raises(CaseError, match="different scenario"):
        _parse(records)


def test_dangling_reference_names_missing_id():
    records = _records()
    records[0]["generality_ref"] = "case-999-999"
    with pytest.raises(CaseError, match="case-999-999"):
        _parse(records)


def test_duplicate_case_id_rejected():
    records = _records()
    records[1] = copy.deepcopy(records[0])
    with pytest.raises(CaseError, match="duplicate case_id"):
        _parse(records)


def test_empty_answer_rejected():
    records = _records()
    records[0]["qa"]["zh"]["answer"] = "   "
    with pytest.raises(CaseError, match="empty question or answer"):
        _parse(records)


def test_derive_single_cases_two_per_raw_case(small_cases):
    singles = derive_single_cases(small_cases)
    assert len(singles) == 2 * len(small_cases)
    targets = [s.target.partition for s in singles[:2]]
    assert targets == [Partition.ZH, Partition.AR]


def test_derive_single_cases_empty():
    assert derive_single_cases(parse_cases([])) == []


def test_single_case_partitions_cover_all(small_cases):
    for single in derive_single_cases(small_cases):
        covered = {single.target.partition} | {
            p.partition for p in single.cross_language_items
        }
        assert covered == set(PARTITIONS)
        assert single.generality_item.image_ref != single.target.image_ref
        assert single.generality_item.partition == single.target.partition
        assert single.cross_scenario_item.partition == single.target.partition


def test_derive_deterministic(tmp_path):
    records = _records(3, 2, seed=5)
    path = write_case_file(tmp_path / "cases.jsonl", records)
    first = derive_single_cases(load_cases(path))
    second = derive_single_cases(load_cases(path))
    assert first == second


def test_chain_count_and_default_order(small_cases):
    chains = derive_sequential_chains(small_cases)
    assert len(chains) == len(small_cases)
    assert chains[0].order == PARTITIONS
    for chain in chains:
        assert {step.sample.image_ref for step in chain.steps} == {chain.image_ref}


def test_chain_reorder_uses_permutation(small_cases):
    chains = derive_sequential_chains(small_cases, parse_order("ar,zh,en"))
    assert chains[0].steps[0].sample.partition == Partition.AR
    assert chains[0].order == (Partition.AR, Partition.ZH, Partition.EN)


def test_chain_reorder_preserves_step_triples(small_cases):
    default = derive_sequential_chains(small_cases)
    reordered = derive_sequential_chains(small_cases, parse_order("ar,zh,en"))
    for a, b in zip(default, reordered):
        assert set(a.steps) == set(b.steps)


def test_invalid_order_rejected(small_cases):
    with pytest.raises(CaseError, match="permutation"):
        parse_order("en,en,ar")
    with pytest.raises(CaseError, match="invalid partition"):
        parse_order("en,zz,ar")
    with pytest.raises(CaseError, match="permutation"):
        derive_sequential_chains(
            small_cases, (Partition.EN, Partition.EN, Partition.AR)
        )
