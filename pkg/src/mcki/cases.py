"""Domain types for benchmark cases and validated ingestion of case files.

A case file is UTF-8 JSON-lines. Each record carries one raw multilingual
case: a shared image, one question/answer pair per language-culture
partition, and explicit references to the companion cases used for the
generality and cross-scenario probes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator


class Partition(str, Enum):
    """Language-culture partition codes."""

    EN = "en"
    ZH = "zh"
    AR = "ar"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


#: Canonical partition order used everywhere a deterministic order is needed.
PARTITIONS: tuple[Partition, Partition, Partition] = (
    Partition.EN,
    Partition.ZH,
    Partition.AR,
)

#: Partitions that serve as single-insert targets.
SINGLE_INSERT_TARGETS: tuple[Partition, Partition] = (Partition.ZH, Partition.AR)


class TopicGroup(str, Enum):
    SOCIAL = "social"
    RELIGIOUS = "religious"
    ETHICAL = "ethical"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


class CaseError(ValueError):
    """Raised for malformed or inconsistent case data."""


@dataclass(frozen=True)
class InsertionSample:
    """One culture-conditioned (image, question, answer) triple."""

    image_ref: str
    partition: Partition
    question: str
    answer: str

    def __post_init__(self) -> None:
        if not self.image_ref:
            raise CaseError("image_ref must be non-empty")
        if not self.question.strip():
            raise CaseError("question must be non-empty")
        if not self.answer.strip():
            raise CaseError("answer must be non-empty")


@dataclass(frozen=True)
class QaPair:
    question: str
    answer: str


@dataclass(frozen=True)
class RawCase:
    """One raw multilingual case as stored in a case file."""

    case_id: str
    scenario_id: str
    topic_group: TopicGroup
    image_ref: str
    qa: dict[Partition, QaPair]
    generality_ref: str
    cross_scenario_ref: str

    def sample(self, partition: Partition) -> InsertionSample:
        pair = self.qa[partition]
        return InsertionSample(
            image_ref=self.image_ref,
            partition=partition,
            question=pair.question,
            answer=pair.answer,
        )


class CaseSet:
    """Validated, immutable collection of raw cases in file order."""

    def __init__(self, cases: list[RawCase]):
        self._cases = tuple(cases)
        self._by_id = {c.case_id: c for c in self._cases}

    def __len__(self) -> int:
        return len(self._cases)

    def __iter__(self) -> Iterator[RawCase]:
        return iter(self._cases)

    def __getitem__(self, index: int) -> RawCase:
        return self._cases[index]

    def get(self, case_id: str) -> RawCase:
        return self._by_id[case_id]

    def scenario_ids(self) -> list[str]:
        return sorted({c.scenario_id for c in self._cases})

    def image_scenarios(self) -> dict[str, str]:
        """Map from image_ref to its scenario."""
        return {c.image_ref: c.scenario_id for c in self._cases}


@dataclass(frozen=True)
class LocalityProbe:
    """A question that must leave base behavior unchanged."""

    image_ref: str
    question: str
    partition: Partition


@dataclass(frozen=True)
class SingleInsertCase:
    """One single-insert evaluation unit with its companion probes."""

    case_id: str
    scenario_id: str
    topic_group: TopicGroup
    target: InsertionSample
    generality_item: InsertionSample
    cross_language_items: tuple[LocalityProbe, LocalityProbe]
    cross_scenario_item: LocalityProbe


@dataclass(frozen=True)
class ChainStep:
    sample: InsertionSample
    generality_item: InsertionSample
    locality_item: LocalityProbe


@dataclass(frozen=True)
class SequentialChain:
    """Three insertions on one image, applied to a single method state."""

    chain_id: str
    scenario_id: str
    topic_group: TopicGroup
    image_ref: str
    order: tuple[Partition, Partition, Partition]
    steps: tuple[ChainStep, ChainStep, ChainStep]


_REQUIRED_KEYS = (
    "case_id",
    "scenario_id",
    "topic_group",
    "image_ref",
    "qa",
    "generality_ref",
    "cross_scenario_ref",
)


def _parse_record(obj: dict, where: str) -> RawCase:
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise CaseError(f"{where}: missing key '{key}'")
    case_id = obj["case_id"]
    if not isinstance(case_id, str) or not case_id:
        raise CaseError(f"{where}: case_id must be a non-empty string")
    try:
        topic = TopicGroup(obj["topic_group"])
    except ValueError:
        raise CaseError(
            f"{where}: case '{case_id}' has unknown topic_group '{obj['topic_group']}'"
        ) from None
    qa_obj = obj["qa"]
    if not isinstance(qa_obj, dict):
        raise CaseError(f"{where}: case '{case_id}' qa must be an object")
    qa: dict[Partition, QaPair] = {}
    for partition in PARTITIONS:
        entry = qa_obj.get(partition.value)
        if entry is None:
            raise CaseError(
                f"{where}: case '{case_id}' is missing qa entry for partition "
                f"'{partition.value}'"
            )
        question = entry.get("question", "")
        answer = entry.get("answer", "")
        if not str(question).strip() or not str(answer).strip():
            raise CaseError(
                f"{where}: case '{case_id}' has an empty question or answer for "
                f"partition '{partition.value}'"
            )
        qa[partition] = QaPair(question=str(question), answer=str(answer))
    unknown = set(qa_obj) - {p.value for p in PARTITIONS}
    if unknown:
        raise CaseError(
            f"{where}: case '{case_id}' has unknown qa partitions {sorted(unknown)}"
        )
    return RawCase(
        case_id=case_id,
        scenario_id=str(obj["scenario_id"]),
        topic_group=topic,
        image_ref=str(obj["image_ref"]),
        qa=qa,
        generality_ref=str(obj["generality_ref"]),
        cross_scenario_ref=str(obj["cross_scenario_ref"]),
    )


def parse_cases(records: Iterable[tuple[str, dict]]) -> CaseSet:
    """Validate pre-parsed (location, record) pairs into a CaseSet.

    Shared by the file loader and the service, which receives records over
    the wire. Raises CaseError on the first violation.
    """
    cases: list[RawCase] = []
    seen: set[str] = set()
    for where, obj in records:
        case = _parse_record(obj, where)
        if case.case_id in seen:
            raise CaseError(f"{where}: duplicate case_id '{case.case_id}'")
        if not case.image_ref:
            raise CaseError(f"{where}: case '{case.case_id}' has empty image_ref")
        seen.add(case.case_id)
        cases.append(case)

    by_id = {c.case_id: c for c in cases}
    for case in cases:
        gen = by_id.get(case.generality_ref)
        if gen is None:
            raise CaseError(
                f"case '{case.case_id}': generality_ref '{case.generality_ref}' "
                f"does not resolve"
            )
        if gen.scenario_id != case.scenario_id:
            raise CaseError(
                f"case '{case.case_id}': generality reference crosses scenario "
                f"('{gen.scenario_id}' != '{case.scenario_id}')"
            )
        if gen.image_ref == case.image_ref:
            raise CaseError(
                f"case '{case.case_id}': generality_ref must use a different image"
            )
        scen = by_id.get(case.cross_scenario_ref)
        if scen is None:
            raise CaseError(
                f"case '{case.case_id}': cross_scenario_ref "
                f"'{case.cross_scenario_ref}' does not resolve"
            )
        if scen.scenario_id == case.scenario_id:
            raise CaseError(
                f"case '{case.case_id}': cross_scenario_ref must point to a "
                f"different scenario"
            )
    return CaseSet(cases)


def load_cases(path: str | Path) -> CaseSet:
    """Load and validate a JSON-lines case file."""
    path = Path(path)
    records: list[tuple[str, dict]] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CaseError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CaseError(f"{where}: record must be an object")
            records.append((where, obj))
    return parse_cases(records)


def derive_single_cases(cases: CaseSet) -> list[SingleInsertCase]:
    """Expand each raw case into its zh-target and ar-target evaluation units."""
    out: list[SingleInsertCase] = []
    for case in cases:
        gen_case = cases.get(case.generality_ref)
        scen_case = cases.get(case.cross_scenario_ref)
        for target_partition in SINGLE_INSERT_TARGETS:
            others = tuple(p for p in PARTITIONS if p is not target_partition)
            cross_language = tuple(
                LocalityProbe(
                    image_ref=case.image_ref,
                    question=case.qa[p].question,
                    partition=p,
                )
                for p in others
            )
            out.append(
                SingleInsertCase(
                    case_id=f"{case.case_id}:{target_partition.value}",
                    scenario_id=case.scenario_id,
                    topic_group=case.topic_group,
                    target=case.sample(target_partition),
                    generality_item=gen_case.sample(target_partition),
                    cross_language_items=cross_language,  # type: ignore[arg-type]
                    cross_scenario_item=LocalityProbe(
                        image_ref=scen_case.image_ref,
                        question=scen_case.qa[target_partition].question,
                        partition=target_partition,
                    ),
                )
            )
    return out


def parse_order(text: str) -> tuple[Partition, Partition, Partition]:
    """Parse an order spec like "en,zh,ar" into a partition permutation."""
    parts = [p.strip() for p in text.split(",")]
    try:
        order = tuple(Partition(p) for p in parts)
    except ValueError:
        raise CaseError(f"invalid partition in order '{text}'") from None
    if len(order) != 3 or set(order) != set(PARTITIONS):
        raise CaseError(
            f"order '{text}' must be a permutation of en,zh,ar"
        )
    return order  # type: ignore[return-value]


def derive_sequential_chains(
    cases: CaseSet,
    order: tuple[Partition, Partition, Partition] = PARTITIONS,
) -> list[SequentialChain]:
    """Build one three-step chain per raw case, in the given partition order."""
    if len(order) != 3 or set(order) != set(PARTITIONS):
        raise CaseError(f"order {[str(p) for p in order]} must be a permutation of en,zh,ar")
    chains: list[SequentialChain] = []
    for case in cases:
        gen_case = cases.get(case.generality_ref)
        scen_case = cases.get(case.cross_scenario_ref)
        steps = tuple(
            ChainStep(
                sample=case.sample(p),
                generality_item=gen_case.sample(p),
                locality_item=LocalityProbe(
                    image_ref=scen_case.image_ref,
                    question=scen_case.qa[p].question,
                    partition=p,
                ),
            )
            for p in order
        )
        chains.append(
            SequentialChain(
                chain_id=case.case_id,
                scenario_id=case.scenario_id,
                topic_group=case.topic_group,
                image_ref=case.image_ref,
                order=tuple(order),  # type: ignore[arg-type]
                steps=steps,  # type: ignore[arg-type]
            )
        )
    return chains
