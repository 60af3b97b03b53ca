"""Deterministic synthetic case fixtures.

Generates self-contained case files for desk-scale runs and tests: per
partition the questions and answers use that partition's script, every
answer carries a unique tag so overlap scores are meaningful, and the
companion references stay inside the generated set.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .cases import TopicGroup

_TOPICS = (TopicGroup.SOCIAL, TopicGroup.RELIGIOUS, TopicGroup.ETHICAL)

_EN_NOUNS = (
    "greeting", "meal", "visit", "gift", "gesture", "dress", "toast", "invitation",
)
_EN_ADJS = (
    "formal", "modest", "warm", "reserved", "generous", "quiet", "festive", "polite",
)
_ZH_CHARS = "礼俗敬谢茶饭家客仪节庆传统信愿和"
_AR_WORDS = (
    "عادة", "ضيافة", "تحية", "احترام", "تقليد", "قهوة", "مجلس", "كرم",
)
_AR_VERBS = ("تتطلب", "تستحب", "تقتضي", "تفضل")


def _digest(seed: int, *parts) -> bytes:
    material = json.dumps([seed, *parts], ensure_ascii=False).encode("utf-8")
    return hashlib.blake2b(material, digest_size=16).digest()


def _pick(seed: int, bank, *parts):
    return bank[_digest(seed, *parts)[0] % len(bank)]


def _tag(seed: int, *parts) -> str:
    return _digest(seed, *parts).hex()[:6]


def _qa(seed: int, scenario: int, case: int, partition: str) -> dict:
    if partition == "en":
        noun = _pick(seed, _EN_NOUNS, scenario, case, "en", "noun")
        adj = _pick(seed, _EN_ADJS, scenario, case, "en", "adj")
        tag = _tag(seed, scenario, case, "en")
        return {
            "question": f"What does this {noun} scene call for here (item {scenario:03d}-{case:03d})?",
            "answer": f"it calls for a {adj} {noun} marked {tag}",
        }
    if partition == "zh":
        chars = _digest(seed, scenario, case, "zh")
        body = "".join(_ZH_CHARS[b % len(_ZH_CHARS)] for b in chars[:5])
        tag = _tag(seed, scenario, case, "zh")
        return {
            "question": f"这个场景{scenario:03d}-{case:03d}需要注意什么",
            "answer": f"此处应当{body}标记{tag}",
        }
    verb = _pick(seed, _AR_VERBS, scenario, case, "ar", "verb")
    noun = _pick(seed, _AR_WORDS, scenario, case, "ar", "noun")
    tag = _tag(seed, scenario, case, "ar")
    return {
        "question": f"ماذا يتطلب هذا الموقف {scenario:03d}-{case:03d}؟",
        "answer": f"هذا الموقف {verb} {noun} رمز {tag}",
    }


def generate_case_records(
    n_scenarios: int,
    cases_per_scenario: int,
    *,
    seed: int = 0,
    scenario_offset: int = 0,
) -> list[dict]:
    """Generate one self-contained set of raw case records.

    Generality references point at the next case of the same scenario;
    cross-scenario references at the same index in the next scenario, so the
    set validates only when n_scenarios >= 2 and cases_per_scenario >= 2.
    """
    if n_scenarios < 2 or cases_per_scenario < 2:
        raise ValueError("need at least 2 scenarios and 2 cases per scenario")
    records = []
    for s in range(n_scenarios):
        sid = scenario_offset + s
        scenario_id = f"scen-{sid:03d}"
        topic = _TOPICS[s % len(_TOPICS)]
        for c in range(cases_per_scenario):
            gen_c = (c + 1) % cases_per_scenario
            scen_s = scenario_offset + (s + 1) % n_scenarios
            records.append(
                {
                    "case_id": f"case-{sid:03d}-{c:03d}",
                    "scenario_id": scenario_id,
                    "topic_group": topic.value,
                    "image_ref": f"img-{sid:03d}-{c:03d}",
                    "qa": {p: _qa(seed, sid, c, p) for p in ("en", "zh", "ar")},
                    "generality_ref": f"case-{sid:03d}-{gen_c:03d}",
                    "cross_scenario_ref": f"case-{scen_s:03d}-{c:03d}",
                }
            )
    return records


def write_case_file(path: str | Path, records: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path
