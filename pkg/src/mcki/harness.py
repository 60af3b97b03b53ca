"""Evaluation harness: single-insert and sequential-insert runs, metric
aggregation, retention trajectories, efficiency timing, and report files.

Locality references are base-model outputs cached once per (image, question,
partition); generations are shared across score kinds so both kinds rate the
identical answer text.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backends import Backend, BackendError, GenRequest
from .cases import Partition, SequentialChain, SingleInsertCase
from .methods import InsertionMethod, Mcki
from .router import Adam, FeatureCache, RouterHyper, RouterParams, case_batch, loss_gradient
from .scoring import Scorer, ScoringError

log = logging.getLogger(__name__)

SINGLE_DIMS = (
    "reliability",
    "generality",
    "cross_language_locality",
    "cross_scenario_locality",
)
SEQUENTIAL_DIMS = ("final_reliability", "final_generality", "final_locality")


class HarnessError(Exception):
    pass


def overall_single(dims: dict[str, float]) -> float:
    """Equal-weight mean of the four single-insert dimensions."""
    return sum(dims[d] for d in SINGLE_DIMS) / 4.0


def overall_sequential(dims: dict[str, float]) -> float:
    """Equal-weight mean of the three sequential finals."""
    return sum(dims[d] for d in SEQUENTIAL_DIMS) / 3.0


@dataclass
class SingleReport:
    metrics: dict[str, dict[str, float]]
    groupings: dict[str, dict[str, dict[str, float]]]
    per_case: list[dict]
    skipped: dict[str, int]
    dropped: dict[str, list[str]]
    generation_failures: int
    n_cases: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": "single",
            "metrics": self.metrics,
            "groupings": self.groupings,
            "per_case": self.per_case,
            "skipped": self.skipped,
            "dropped": self.dropped,
            "generation_failures": self.generation_failures,
            "n_cases": self.n_cases,
            "config": self.config,
        }


@dataclass
class SequentialReport:
    metrics: dict[str, dict[str, float]]
    retention: dict[str, dict[str, list[float]]]
    order: list[str]
    per_chain: list[dict]
    skipped: dict[str, int]
    dropped: dict[str, list[str]]
    generation_failures: int
    n_chains: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": "sequential",
            "metrics": self.metrics,
            "retention": self.retention,
            "order": self.order,
            "per_chain": self.per_chain,
            "skipped": self.skipped,
            "dropped": self.dropped,
            "generation_failures": self.generation_failures,
            "n_chains": self.n_chains,
            "config": self.config,
        }


@dataclass
class EfficiencyReport:
    method: str
    train_per_case_ms: float
    insert_per_case_ms: float
    request_per_sample_ms: float
    n_train: int
    n_eval: int
    train_samples_ms: list[float]
    insert_samples_ms: list[float]
    request_samples_ms: list[float]
    peak_memory_bytes: int | None = None
    parameter_count: int | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": "bench",
            "method": self.method,
            "train_per_case_ms": self.train_per_case_ms,
            "insert_per_case_ms": self.insert_per_case_ms,
            "request_per_sample_ms": self.request_per_sample_ms,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "train_samples_ms": self.train_samples_ms,
            "insert_samples_ms": self.insert_samples_ms,
            "request_samples_ms": self.request_samples_ms,
            "peak_memory_bytes": self.peak_memory_bytes,
            "parameter_count": self.parameter_count,
            "config": self.config,
        }


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


class _ItemScorer:
    """Scores one generated answer under every requested kind.

    Judge failures are recorded per kind and surface as None values plus a
    skipped tally; they never raise past this point.
    """

    def __init__(self, scorer: Scorer):
        self._scorer = scorer
        self.skipped = {kind: 0 for kind in scorer.kinds}
        self._lock = threading.Lock()

    def score(
        self, candidate: str, reference: str, *, language: Partition, question: str
    ) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for kind in self._scorer.kinds:
            try:
                out[kind] = self._scorer.score(
                    kind, candidate, reference, language=language, question=question
                ).value
            except ScoringError as exc:
                log.warning("scoring failure (%s): %s", kind, exc)
                with self._lock:
                    self.skipped[kind] += 1
                out[kind] = None
        return out


def _combine(parts: list[dict[str, float | None]], kinds: tuple[str, ...]) -> dict[str, float | None]:
    """Per-kind mean over item scores; None if any part is missing."""
    out: dict[str, float | None] = {}
    for kind in kinds:
        values = [p[kind] for p in parts]
        out[kind] = None if any(v is None for v in values) else float(np.mean(values))
    return out


def _run_cases(
    items: list,
    worker: Callable[[object, InsertionMethod], dict],
    method: InsertionMethod,
    workers: int,
) -> list[dict]:
    if workers <= 1:
        return [worker(item, method) for item in items]
    local = threading.local()

    def run(item):
        m = getattr(local, "method", None)
        if m is None:
            m = method.clone()  # type: ignore[attr-defined]
            local.method = m
        return worker(item, m)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


def eval_single(
    cases: list[SingleInsertCase],
    method: InsertionMethod,
    backend: Backend,
    scorer: Scorer,
    *,
    system_prompts: dict[Partition, str] | None = None,
    workers: int = 1,
    accumulate_memory: bool = False,
    config: dict | None = None,
) -> SingleReport:
    """Evaluate the single-insert setting and aggregate all four dimensions."""
    prompts = system_prompts or {}
    item_scorer = _ItemScorer(scorer)
    cache = method.base_cache  # type: ignore[attr-defined]
    generation_failures = [0]
    fail_lock = threading.Lock()
    if accumulate_memory:
        workers = 1
        method.reset()

    def gen_failed() -> None:
        with fail_lock:
            generation_failures[0] += 1

    def score_one(case: SingleInsertCase, m: InsertionMethod) -> dict:
        if not accumulate_memory:
            m.reset()
        target = case.target
        record: dict = {
            "case_id": case.case_id,
            "scenario_id": case.scenario_id,
            "topic_group": case.topic_group.value,
            "partition": target.partition.value,
            "decisions": {},
            "scores": {},
        }
        # Locality references come from the base model, cached write-once.
        try:
            xlang_refs = [
                cache.get_or_generate(
                    backend, p.image_ref, p.question, p.partition, prompts.get(p.partition, "")
                )
                for p in case.cross_language_items
            ]
            scen_probe = case.cross_scenario_item
            scen_ref = cache.get_or_generate(
                backend,
                scen_probe.image_ref,
                scen_probe.question,
                scen_probe.partition,
                prompts.get(scen_probe.partition, ""),
            )
            m.insert(target)
        except BackendError as exc:
            log.warning("case %s dropped: %s", case.case_id, exc)
            gen_failed()
            record["scores"] = {
                kind: dict.fromkeys(SINGLE_DIMS) for kind in scorer.kinds
            }
            return record

        def answer(image_ref: str, question: str, partition: Partition):
            return m.answer(
                GenRequest(
                    image_ref=image_ref,
                    question=question,
                    partition=partition,
                    system_prompt=prompts.get(partition, ""),
                )
            )

        scores: dict[str, dict[str, float | None]] = {
            kind: dict.fromkeys(SINGLE_DIMS) for kind in scorer.kinds
        }
        try:
            rel_answer, rel_decision = answer(
                target.image_ref, target.question, target.partition
            )
            record["decisions"]["reliability"] = rel_decision.to_dict()
            rel = item_scorer.score(
                rel_answer,
                target.answer,
                language=target.partition,
                question=target.question,
            )
            for kind in scorer.kinds:
                scores[kind]["reliability"] = rel[kind]
        except BackendError as exc:
            log.warning("case %s reliability failed: %s", case.case_id, exc)
            gen_failed()
            record["scores"] = scores
            return record

        gen_item = case.generality_item
        try:
            gen_answer, gen_decision = answer(
                gen_item.image_ref, gen_item.question, gen_item.partition
            )
            record["decisions"]["generality"] = gen_decision.to_dict()
            gen = item_scorer.score(
                gen_answer,
                gen_item.answer,
                language=gen_item.partition,
                question=gen_item.question,
            )
            for kind in scorer.kinds:
                scores[kind]["generality"] = gen[kind]
        except BackendError as exc:
            log.warning("case %s generality failed: %s", case.case_id, exc)
            gen_failed()

        try:
            parts = []
            xl_decisions = []
            for probe, ref in zip(case.cross_language_items, xlang_refs):
                xl_answer, xl_decision = answer(
                    probe.image_ref, probe.question, probe.partition
                )
                xl_decisions.append(xl_decision.to_dict())
                parts.append(
                    item_scorer.score(
                        xl_answer, ref, language=probe.partition, question=probe.question
                    )
                )
            record["decisions"]["cross_language"] = xl_decisions
            combined = _combine(parts, scorer.kinds)
            for kind in scorer.kinds:
                scores[kind]["cross_language_locality"] = combined[kind]
        except BackendError as exc:
            log.warning("case %s cross-language failed: %s", case.case_id, exc)
            gen_failed()

        try:
            scen_answer, scen_decision = answer(
                scen_probe.image_ref, scen_probe.question, scen_probe.partition
            )
            record["decisions"]["cross_scenario"] = scen_decision.to_dict()
            scen = item_scorer.score(
                scen_answer,
                scen_ref,
                language=scen_probe.partition,
                question=scen_probe.question,
            )
            for kind in scorer.kinds:
                scores[kind]["cross_scenario_locality"] = scen[kind]
        except BackendError as exc:
            log.warning("case %s cross-scenario failed: %s", case.case_id, exc)
            gen_failed()

        record["scores"] = scores
        return record

    records = _run_cases(cases, score_one, method, workers)

    metrics: dict[str, dict[str, float]] = {}
    groupings: dict[str, dict[str, dict[str, float]]] = {}
    dropped: dict[str, list[str]] = {}
    for kind in scorer.kinds:
        # A case whose reliability item failed is dropped from all four means.
        valid = [r for r in records if r["scores"][kind]["reliability"] is not None]
        dropped[kind] = [
            r["case_id"] for r in records if r["scores"][kind]["reliability"] is None
        ]
        dims: dict[str, float] = {}
        for dim in SINGLE_DIMS:
            values = [
                r["scores"][kind][dim]
                for r in valid
                if r["scores"][kind][dim] is not None
            ]
            dims[dim] = _mean(values)
        dims["overall"] = overall_single(dims)
        metrics[kind] = dims

        by_topic: dict[str, float] = {}
        by_partition: dict[str, float] = {}
        for key in sorted({r["topic_group"] for r in valid}):
            by_topic[key] = _mean(
                [r["scores"][kind]["reliability"] for r in valid if r["topic_group"] == key]
            )
        for key in sorted({r["partition"] for r in valid}):
            by_partition[key] = _mean(
                [r["scores"][kind]["reliability"] for r in valid if r["partition"] == key]
            )
        groupings[kind] = {"topic_group": by_topic, "partition": by_partition}

    return SingleReport(
        metrics=metrics,
        groupings=groupings,
        per_case=records,
        skipped=item_scorer.skipped,
        dropped=dropped,
        generation_failures=generation_failures[0],
        n_cases=len(cases),
        config=dict(config or {}),
    )


def eval_sequential(
    chains: list[SequentialChain],
    method: InsertionMethod,
    backend: Backend,
    scorer: Scorer,
    *,
    measure_retention: bool = False,
    system_prompts: dict[Partition, str] | None = None,
    workers: int = 1,
    config: dict | None = None,
) -> SequentialReport:
    """Evaluate sequential chains under the final state, optionally scoring
    every earlier step's reliability after each insertion."""
    if not chains:
        raise HarnessError("no chains to evaluate")
    order = chains[0].order
    prompts = system_prompts or {}
    item_scorer = _ItemScorer(scorer)
    cache = method.base_cache  # type: ignore[attr-defined]
    generation_failures = [0]
    fail_lock = threading.Lock()

    def gen_failed() -> None:
        with fail_lock:
            generation_failures[0] += 1

    def score_one(chain: SequentialChain, m: InsertionMethod) -> dict:
        m.reset()
        record: dict = {
            "chain_id": chain.chain_id,
            "scenario_id": chain.scenario_id,
            "topic_group": chain.topic_group.value,
            "order": [p.value for p in chain.order],
            "decisions": {},
            "scores": {
                kind: {dim: [None] * 3 for dim in SEQUENTIAL_DIMS}
                for kind in scorer.kinds
            },
            # retention[s][t] holds step s scored after step t (1-based, t>=s)
            "retention": {kind: {} for kind in scorer.kinds},
        }

        def answer(image_ref: str, question: str, partition: Partition):
            return m.answer(
                GenRequest(
                    image_ref=image_ref,
                    question=question,
                    partition=partition,
                    system_prompt=prompts.get(partition, ""),
                )
            )

        def score_reliability(step_idx: int) -> dict[str, float | None] | None:
            step = chain.steps[step_idx]
            sample = step.sample
            try:
                text, decision = answer(
                    sample.image_ref, sample.question, sample.partition
                )
            except BackendError as exc:
                log.warning(
                    "chain %s step %d reliability failed: %s",
                    chain.chain_id,
                    step_idx + 1,
                    exc,
                )
                gen_failed()
                return None
            record["decisions"].setdefault("reliability", {})[str(step_idx + 1)] = (
                decision.to_dict()
            )
            return item_scorer.score(
                text, sample.answer, language=sample.partition, question=sample.question
            )

        try:
            locality_refs = [
                cache.get_or_generate(
                    backend,
                    step.locality_item.image_ref,
                    step.locality_item.question,
                    step.locality_item.partition,
                    prompts.get(step.locality_item.partition, ""),
                )
                for step in chain.steps
            ]
        except BackendError as exc:
            log.warning("chain %s dropped: %s", chain.chain_id, exc)
            gen_failed()
            return record

        final_reliability: list[dict[str, float | None] | None] = [None] * 3
        for t, step in enumerate(chain.steps):
            try:
                m.insert(step.sample)
            except BackendError as exc:
                log.warning("chain %s insert %d failed: %s", chain.chain_id, t + 1, exc)
                gen_failed()
                return record
            if measure_retention:
                for s in range(t + 1):
                    scored = score_reliability(s)
                    if scored is None:
                        continue
                    for kind in scorer.kinds:
                        record["retention"][kind].setdefault(str(s + 1), {})[
                            str(t + 1)
                        ] = scored[kind]
                    if t == 2:
                        final_reliability[s] = scored
        if not measure_retention:
            for s in range(3):
                final_reliability[s] = score_reliability(s)

        for kind in scorer.kinds:
            record["scores"][kind]["final_reliability"] = [
                None if scored is None else scored[kind] for scored in final_reliability
            ]

        for t, step in enumerate(chain.steps):
            gen_item = step.generality_item
            try:
                text, decision = answer(
                    gen_item.image_ref, gen_item.question, gen_item.partition
                )
                record["decisions"].setdefault("generality", {})[str(t + 1)] = (
                    decision.to_dict()
                )
                scored = item_scorer.score(
                    text,
                    gen_item.answer,
                    language=gen_item.partition,
                    question=gen_item.question,
                )
                for kind in scorer.kinds:
                    record["scores"][kind]["final_generality"][t] = scored[kind]
            except BackendError as exc:
                log.warning("chain %s generality %d failed: %s", chain.chain_id, t + 1, exc)
                gen_failed()

            probe = step.locality_item
            try:
                text, decision = answer(probe.image_ref, probe.question, probe.partition)
                record["decisions"].setdefault("locality", {})[str(t + 1)] = (
                    decision.to_dict()
                )
                scored = item_scorer.score(
                    text,
                    locality_refs[t],
                    language=probe.partition,
                    question=probe.question,
                )
                for kind in scorer.kinds:
                    record["scores"][kind]["final_locality"][t] = scored[kind]
            except BackendError as exc:
                log.warning("chain %s locality %d failed: %s", chain.chain_id, t + 1, exc)
                gen_failed()
        return record

    records = _run_cases(chains, score_one, method, workers)

    metrics: dict[str, dict[str, float]] = {}
    dropped: dict[str, list[str]] = {}
    retention: dict[str, dict[str, list[float]]] = {}
    for kind in scorer.kinds:
        valid = [
            r
            for r in records
            if all(v is not None for v in r["scores"][kind]["final_reliability"])
        ]
        valid_ids = {r["chain_id"] for r in valid}
        dropped[kind] = [r["chain_id"] for r in records if r["chain_id"] not in valid_ids]
        dims: dict[str, float] = {}
        for dim in SEQUENTIAL_DIMS:
            values = [
                v for r in valid for v in r["scores"][kind][dim] if v is not None
            ]
            dims[dim] = _mean(values)
        dims["overall"] = overall_sequential(dims)
        metrics[kind] = dims

        grid: dict[str, list[float]] = {}
        if measure_retention:
            for s in range(1, 4):
                rows = []
                for t in range(s, 4):
                    values = [
                        r["retention"][kind].get(str(s), {}).get(str(t))
                        for r in valid
                    ]
                    values = [v for v in values if v is not None]
                    rows.append(_mean(values))
                grid[str(s)] = rows
        retention[kind] = grid

    return SequentialReport(
        metrics=metrics,
        retention=retention,
        order=[p.value for p in order],
        per_chain=records,
        skipped=item_scorer.skipped,
        dropped=dropped,
        generation_failures=generation_failures[0],
        n_chains=len(chains),
        config=dict(config or {}),
    )


def measure_efficiency(
    method: InsertionMethod,
    backend: Backend,
    cases: list[SingleInsertCase],
    *,
    n_train: int,
    n_eval: int,
    hyper: RouterHyper | None = None,
    system_prompts: dict[Partition, str] | None = None,
    config: dict | None = None,
) -> EfficiencyReport:
    """Wall-clock means per training step, per insert, and per full request."""
    if n_eval <= 0:
        raise HarnessError("empty sample: n_eval must be positive")
    if n_train < 0:
        raise HarnessError("n_train must be non-negative")
    if len(cases) < max(n_train, n_eval):
        raise HarnessError(
            f"need at least {max(n_train, n_eval)} cases, have {len(cases)}"
        )
    prompts = system_prompts or {}

    train_samples: list[float] = []
    if isinstance(method, Mcki) and n_train > 0:
        train_hyper = hyper or RouterHyper()
        features = FeatureCache(backend)
        batches = [case_batch(c, features, train_hyper) for c in cases[:n_train]]
        params = RouterParams.init(
            method.router.d_model, method.router.d_route, train_hyper.seed
        )
        optimizer = Adam(params.tensors(), train_hyper.learning_rate)
        for batch in batches:
            start = time.perf_counter()
            _, grads = loss_gradient(params, batch, train_hyper)
            optimizer.step(params.tensors(), grads)
            train_samples.append((time.perf_counter() - start) * 1e3)

    insert_samples: list[float] = []
    for case in cases[:n_eval]:
        method.reset()
        start = time.perf_counter()
        method.insert(case.target)
        insert_samples.append((time.perf_counter() - start) * 1e3)

    request_samples: list[float] = []
    for case in cases[:n_eval]:
        method.reset()
        method.insert(case.target)
        target = case.target
        start = time.perf_counter()
        method.answer(
            GenRequest(
                image_ref=target.image_ref,
                question=target.question,
                partition=target.partition,
                system_prompt=prompts.get(target.partition, ""),
            )
        )
        request_samples.append((time.perf_counter() - start) * 1e3)

    return EfficiencyReport(
        method=method.name,
        train_per_case_ms=float(np.mean(train_samples)) if train_samples else 0.0,
        insert_per_case_ms=float(np.mean(insert_samples)),
        request_per_sample_ms=float(np.mean(request_samples)),
        n_train=n_train,
        n_eval=n_eval,
        train_samples_ms=train_samples,
        insert_samples_ms=insert_samples,
        request_samples_ms=request_samples,
        config=dict(config or {}),
    )


# ---------------------------------------------------------------------------
# Report files


def _fmt(value: float | None) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    return f"{value:.2f}"


def render_report_text(report: dict) -> str:
    """Plain-text table for a report dictionary."""
    mode = report.get("mode")
    out = io.StringIO()
    config = report.get("config", {})
    header = f"{mode}-insert report" if mode in ("single", "sequential") else "efficiency report"
    out.write(header + "\n")
    for key in ("run_id", "method", "backend", "data", "seed", "order"):
        if key in config:
            out.write(f"{key}: {config[key]}\n")
    out.write("\n")

    if mode == "single":
        cols = ["Reliability", "Generality", "Cross-Lang Loc", "Cross-Scen Loc", "Overall"]
        keys = [*SINGLE_DIMS, "overall"]
        out.write(f"{'score kind':<12}" + "".join(f"{c:>17}" for c in cols) + "\n")
        for kind, dims in report["metrics"].items():
            out.write(
                f"{kind:<12}" + "".join(f"{_fmt(dims[k]):>17}" for k in keys) + "\n"
            )
        out.write("\n")
        for kind, groups in report.get("groupings", {}).items():
            for axis in ("topic_group", "partition"):
                entries = groups.get(axis, {})
                if entries:
                    line = ", ".join(f"{k}: {_fmt(v)}" for k, v in entries.items())
                    out.write(f"reliability by {axis} ({kind}): {line}\n")
        out.write("\n")
        out.write(f"cases: {report['n_cases']}\n")
        for kind, ids in report.get("dropped", {}).items():
            out.write(f"dropped ({kind}): {len(ids)}\n")
        for kind, count in report.get("skipped", {}).items():
            out.write(f"skipped scores ({kind}): {count}\n")
        out.write(f"generation failures: {report.get('generation_failures', 0)}\n")
    elif mode == "sequential":
        cols = ["Final Rel.", "Final Gen.", "Final Loc.", "Overall"]
        keys = [*SEQUENTIAL_DIMS, "overall"]
        out.write(f"{'score kind':<12}" + "".join(f"{c:>14}" for c in cols) + "\n")
        for kind, dims in report["metrics"].items():
            out.write(
                f"{kind:<12}" + "".join(f"{_fmt(dims[k]):>14}" for k in keys) + "\n"
            )
        out.write("\n")
        for kind, grid in report.get("retention", {}).items():
            if not grid:
                continue
            out.write(f"retention ({kind}), rows = inserted step, cols = measured after:\n")
            for s in sorted(grid, key=int):
                values = ", ".join(_fmt(v) for v in grid[s])
                out.write(f"  step {s} (after {s}..3): {values}\n")
        out.write("\n")
        out.write(f"chains: {report['n_chains']}\n")
        for kind, ids in report.get("dropped", {}).items():
            out.write(f"dropped ({kind}): {len(ids)}\n")
        for kind, count in report.get("skipped", {}).items():
            out.write(f"skipped scores ({kind}): {count}\n")
        out.write(f"generation failures: {report.get('generation_failures', 0)}\n")
    else:
        out.write(f"method: {report['method']}\n")
        out.write(f"train / case: {_fmt(report['train_per_case_ms'])} ms\n")
        out.write(f"insert / case: {_fmt(report['insert_per_case_ms'])} ms\n")
        out.write(f"request / sample: {_fmt(report['request_per_sample_ms'])} ms\n")
        out.write(f"n_train: {report['n_train']}  n_eval: {report['n_eval']}\n")
    return out.getvalue()


def emit_report(report_dict: dict, out_dir: str | Path, run_id: str) -> list[Path]:
    """Write <run_id>.report (JSON), <run_id>.txt (table), and, when
    retention data is present, <run_id>.retention (CSV rows). Emission is
    deterministic: identical reports produce byte-identical files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    report_path = out_dir / f"{run_id}.report"
    report_path.write_text(
        json.dumps(report_dict, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    paths.append(report_path)

    text_path = out_dir / f"{run_id}.txt"
    text_path.write_text(render_report_text(report_dict), encoding="utf-8")
    paths.append(text_path)

    retention = report_dict.get("retention") or {}
    if any(grid for grid in retention.values()):
        retention_path = out_dir / f"{run_id}.retention"
        with retention_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["inserted_step", "measured_after", "score_kind", "value"])
            for kind in sorted(retention):
                grid = retention[kind]
                for s in sorted(grid, key=int):
                    for offset, value in enumerate(grid[s]):
                        writer.writerow([s, int(s) + offset, kind, f"{value:.6f}"])
        paths.append(retention_path)
    return paths
