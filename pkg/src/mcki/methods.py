"""Insertion methods: memory-gated conditioning, base passthrough, and the
unconditional prepend baseline.

A method owns the per-case mutable state (memory entries or demonstrations).
The base-answer cache is shared across methods and cases so that locality
references and abstain-branch outputs are the identical cached strings.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .backends import Backend, GenRequest, PooledFeatures
from .cases import InsertionSample, Partition
from .router import RouterParams, cosine_sim, route_vector

METHOD_MCKI = "mcki"
METHOD_BASE = "base"
METHOD_IKE_LITE = "ike-lite"
METHOD_NAMES = (METHOD_MCKI, METHOD_BASE, METHOD_IKE_LITE)

DEFAULT_WRAP_TEMPLATE = "Reference - Q: {question} A: {answer}\n\n"
DEFAULT_MAX_DEMOS = 3

ABSTAIN = "abstain"
ACTIVATE = "activate"


class MethodError(Exception):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    key: np.ndarray
    sample: InsertionSample
    entry_index: int


@dataclass(frozen=True)
class RouteDecision:
    outcome: str
    entry_index: int | None = None
    similarity: float | None = None

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "entry_index": self.entry_index,
            "similarity": self.similarity,
        }


def render_wrap(template: str, sample: InsertionSample) -> str:
    return template.format(question=sample.question, answer=sample.answer)


def validate_wrap_template(template: str) -> str:
    if "{question}" not in template or "{answer}" not in template:
        raise MethodError(
            "wrap template must contain {question} and {answer} placeholders"
        )
    return template


class BaseAnswerCache:
    """Write-once map (image_ref, question, partition) -> base model answer.

    Shared across workers behind a lock; the first generation wins and every
    later read returns the identical string.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._answers: dict[tuple[str, str, str], str] = {}

    def get_or_generate(
        self,
        backend: Backend,
        image_ref: str,
        question: str,
        partition: Partition,
        system_prompt: str = "",
    ) -> str:
        key = (image_ref, question, partition.value)
        with self._lock:
            cached = self._answers.get(key)
        if cached is not None:
            return cached
        answer = backend.generate(
            GenRequest(
                image_ref=image_ref,
                question=question,
                partition=partition,
                system_prompt=system_prompt,
            )
        )
        with self._lock:
            return self._answers.setdefault(key, answer)

    def __len__(self) -> int:
        return len(self._answers)


class InsertionMethod(Protocol):
    name: str
    base_cache: BaseAnswerCache

    def reset(self) -> None: ...  # pragma: no cover

    def insert(self, sample: InsertionSample) -> None: ...  # pragma: no cover

    def answer(self, request: GenRequest) -> tuple[str, RouteDecision]: ...  # pragma: no cover

    def clone(self) -> "InsertionMethod": ...  # pragma: no cover


class BasePassthrough:
    """No insertion: every request takes the cached base branch."""

    name = METHOD_BASE

    def __init__(self, backend: Backend, base_cache: BaseAnswerCache | None = None):
        self._backend = backend
        self.base_cache = base_cache if base_cache is not None else BaseAnswerCache()

    def reset(self) -> None:
        pass

    def insert(self, sample: InsertionSample) -> None:
        pass

    def clone(self) -> "BasePassthrough":
        return BasePassthrough(self._backend, base_cache=self.base_cache)

    def answer(self, request: GenRequest) -> tuple[str, RouteDecision]:
        text = self.base_cache.get_or_generate(
            self._backend,
            request.image_ref,
            request.question,
            request.partition,
            request.system_prompt,
        )
        return text, RouteDecision(outcome=ABSTAIN)


class Mcki:
    """Similarity-gated memory conditioning over a frozen backend.

    Inserting writes (route key, sample) into memory. Answering routes the
    request; at or above the calibrated threshold the best entry is rendered
    through the wrap template and prepended, below it the cached base answer
    is returned.
    """

    name = METHOD_MCKI

    def __init__(
        self,
        router: RouterParams,
        tau: float,
        backend: Backend,
        *,
        wrap_template: str = DEFAULT_WRAP_TEMPLATE,
        base_cache: BaseAnswerCache | None = None,
    ):
        if not -1.0 <= tau <= 2.0:
            raise MethodError(f"tau {tau} outside [-1, 2]")
        self.router = router
        self.tau = tau
        self.wrap_template = validate_wrap_template(wrap_template)
        self._backend = backend
        self.base_cache = base_cache if base_cache is not None else BaseAnswerCache()
        self.memory: list[MemoryEntry] = []

    def reset(self) -> None:
        self.memory = []

    def clone(self) -> "Mcki":
        return Mcki(
            self.router,
            self.tau,
            self._backend,
            wrap_template=self.wrap_template,
            base_cache=self.base_cache,
        )

    def insert(self, sample: InsertionSample) -> None:
        feats = self._backend.embed(sample.image_ref, sample.question, sample.partition)
        key = route_vector(self.router, feats)
        self.memory.append(
            MemoryEntry(key=key, sample=sample, entry_index=len(self.memory))
        )

    def lookup(self, feats: PooledFeatures) -> RouteDecision:
        if not self.memory:
            return RouteDecision(outcome=ABSTAIN)
        request_vec = route_vector(self.router, feats)
        sims = [cosine_sim(request_vec, entry.key) for entry in self.memory]
        best = int(np.argmax(sims))  # first index wins ties
        similarity = float(sims[best])
        if similarity >= self.tau:
            return RouteDecision(
                outcome=ACTIVATE, entry_index=best, similarity=similarity
            )
        return RouteDecision(outcome=ABSTAIN, entry_index=best, similarity=similarity)

    def answer(self, request: GenRequest) -> tuple[str, RouteDecision]:
        feats = self._backend.embed(
            request.image_ref, request.question, request.partition
        )
        decision = self.lookup(feats)
        if decision.outcome == ACTIVATE:
            assert decision.entry_index is not None
            entry = self.memory[decision.entry_index]
            wrapped = render_wrap(self.wrap_template, entry.sample)
            text = self._backend.generate(
                GenRequest(
                    image_ref=request.image_ref,
                    question=request.question,
                    partition=request.partition,
                    system_prompt=request.system_prompt,
                    wrapped_context=wrapped,
                )
            )
            return text, decision
        text = self.base_cache.get_or_generate(
            self._backend,
            request.image_ref,
            request.question,
            request.partition,
            request.system_prompt,
        )
        return text, decision


class IkeLite:
    """Unconditional in-context baseline: prepend stored demonstrations,
    most recent first, truncated to a configured count. No learned retriever,
    hence the -lite name in reports."""

    name = METHOD_IKE_LITE

    def __init__(
        self,
        backend: Backend,
        *,
        max_demos: int = DEFAULT_MAX_DEMOS,
        wrap_template: str = DEFAULT_WRAP_TEMPLATE,
        base_cache: BaseAnswerCache | None = None,
    ):
        if max_demos < 1:
            raise MethodError("max_demos must be at least 1")
        self._backend = backend
        self.max_demos = max_demos
        self.wrap_template = validate_wrap_template(wrap_template)
        self.base_cache = base_cache if base_cache is not None else BaseAnswerCache()
        self.demos: list[InsertionSample] = []

    def reset(self) -> None:
        self.demos = []

    def clone(self) -> "IkeLite":
        return IkeLite(
            self._backend,
            max_demos=self.max_demos,
            wrap_template=self.wrap_template,
            base_cache=self.base_cache,
        )

    def insert(self, sample: InsertionSample) -> None:
        self.demos.append(sample)

    def answer(self, request: GenRequest) -> tuple[str, RouteDecision]:
        if not self.demos:
            text = self.base_cache.get_or_generate(
                self._backend,
                request.image_ref,
                request.question,
                request.partition,
                request.system_prompt,
            )
            return text, RouteDecision(outcome=ABSTAIN)
        selected = list(reversed(self.demos))[: self.max_demos]
        wrapped = "".join(render_wrap(self.wrap_template, demo) for demo in selected)
        text = self._backend.generate(
            GenRequest(
                image_ref=request.image_ref,
                question=request.question,
                partition=request.partition,
                system_prompt=request.system_prompt,
                wrapped_context=wrapped,
            )
        )
        # No similarity gate exists here; the decision records only that
        # conditioning was applied.
        return text, RouteDecision(outcome=ACTIVATE, entry_index=len(self.demos) - 1)
