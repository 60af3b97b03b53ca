"""The frozen-model boundary.

A backend produces pooled hidden features for (image, question) requests and
greedy generations for optionally context-wrapped prompts. Two
implementations: a deterministic synthetic stand-in for desk-scale runs and
an HTTP client for a model sidecar.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np

from .cases import PARTITIONS, CaseSet, Partition

#: Decoding contract: greedy, at most this many new tokens, batch size 1.
MAX_NEW_TOKENS = 64

_PARTITION_OFFSET_NORM = 1.0
_CENTROID_ATTEMPTS = 1000


class BackendError(Exception):
    """A backend request failed or returned malformed data."""


@dataclass(frozen=True)
class PooledFeatures:
    """Mean-pooled final-layer features for the question and visual tokens."""

    q_pooled: np.ndarray
    v_pooled: np.ndarray

    @property
    def d_model(self) -> int:
        return int(self.q_pooled.shape[0])

    def __post_init__(self) -> None:
        if self.q_pooled.shape != self.v_pooled.shape or self.q_pooled.ndim != 1:
            raise BackendError("pooled feature vectors must share one dimension")
        if not (np.isfinite(self.q_pooled).all() and np.isfinite(self.v_pooled).all()):
            raise BackendError("pooled features contain non-finite entries")


@dataclass(frozen=True)
class GenRequest:
    image_ref: str
    question: str
    partition: Partition
    system_prompt: str = ""
    wrapped_context: str | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise BackendError("question must be non-empty")


class Backend(Protocol):
    @property
    def d_model(self) -> int: ...  # pragma: no cover

    def embed(
        self, image_ref: str, question: str, partition: Partition
    ) -> PooledFeatures: ...  # pragma: no cover

    def generate(self, request: GenRequest) -> str: ...  # pragma: no cover


def _stream(seed: int, *parts: str) -> np.random.Generator:
    """Deterministic RNG keyed by the seed and the given string parts."""
    material = json.dumps([seed, *parts], ensure_ascii=False).encode("utf-8")
    digest = hashlib.blake2b(material, digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


def _stream_hex(seed: int, *parts: str, n: int = 8) -> str:
    material = json.dumps([seed, *parts], ensure_ascii=False).encode("utf-8")
    return hashlib.blake2b(material, digest_size=16).hexdigest()[:n]


@dataclass
class SyntheticWorld:
    """Seeded geometry for synthetic features.

    Scenarios get unit centroid vectors kept pairwise-separated in cosine;
    partitions get fixed offset vectors shared across scenarios. Regeneration
    from the same seed and scenario set reproduces both exactly.
    """

    seed: int
    d_model: int
    scenario_centroids: dict[str, np.ndarray]
    partition_offsets: dict[Partition, np.ndarray]
    noise_scale: float
    cross_scenario_min_separation: float

    @classmethod
    def build(
        cls,
        scenario_ids: list[str],
        *,
        seed: int,
        d_model: int = 64,
        noise_scale: float = 0.05,
        cross_scenario_min_separation: float = 0.8,
    ) -> "SyntheticWorld":
        if not 0.0 < cross_scenario_min_separation < 2.0:
            raise BackendError("cross_scenario_min_separation must be in (0, 2)")
        max_cos = 1.0 - cross_scenario_min_separation
        rng = _stream(seed, "centroids")
        centroids: dict[str, np.ndarray] = {}
        accepted: list[np.ndarray] = []
        for sid in sorted(scenario_ids):
            for _ in range(_CENTROID_ATTEMPTS):
                vec = rng.standard_normal(d_model)
                vec /= np.linalg.norm(vec)
                if all(float(vec @ other) <= max_cos for other in accepted):
                    break
            else:
                raise BackendError(
                    f"could not place centroid for '{sid}' at separation "
                    f"{cross_scenario_min_separation} in {d_model} dimensions"
                )
            centroids[sid] = vec
            accepted.append(vec)
        offsets: dict[Partition, np.ndarray] = {}
        for partition in PARTITIONS:
            vec = _stream(seed, "offset", partition.value).standard_normal(d_model)
            offsets[partition] = vec / np.linalg.norm(vec) * _PARTITION_OFFSET_NORM
        return cls(
            seed=seed,
            d_model=d_model,
            scenario_centroids=centroids,
            partition_offsets=offsets,
            noise_scale=float(noise_scale),
            cross_scenario_min_separation=float(cross_scenario_min_separation),
        )

    def validate(self) -> None:
        max_cos = 1.0 - self.cross_scenario_min_separation
        sids = sorted(self.scenario_centroids)
        for i, a in enumerate(sids):
            for b in sids[i + 1 :]:
                cos = float(self.scenario_centroids[a] @ self.scenario_centroids[b])
                if cos > max_cos + 1e-9:
                    raise BackendError(
                        f"centroids '{a}' and '{b}' violate separation: cos={cos:.4f}"
                    )


class SyntheticBackend:
    """Deterministic feature and generation oracle over a case set.

    Features are centroid + partition offset + keyed noise. Generation is an
    answer oracle: it returns the stored reference answer when the wrapped
    context carries that item's exact question-answer pair, otherwise a
    stable canned base answer. This makes end-to-end metric values
    analytically predictable.
    """

    def __init__(self, world: SyntheticWorld, cases: CaseSet):
        self.world = world
        self._image_scenarios = cases.image_scenarios()
        self._answers: dict[tuple[str, str], str] = {}
        for case in cases:
            for partition in PARTITIONS:
                pair = case.qa[partition]
                self._answers[(case.image_ref, pair.question)] = pair.answer
        missing = [s for s in set(self._image_scenarios.values()) if s not in world.scenario_centroids]
        if missing:
            raise BackendError(f"world has no centroids for scenarios {sorted(missing)}")

    @classmethod
    def for_cases(
        cls,
        cases: CaseSet,
        *,
        seed: int,
        d_model: int = 64,
        noise_scale: float = 0.05,
        cross_scenario_min_separation: float = 0.8,
    ) -> "SyntheticBackend":
        world = SyntheticWorld.build(
            cases.scenario_ids(),
            seed=seed,
            d_model=d_model,
            noise_scale=noise_scale,
            cross_scenario_min_separation=cross_scenario_min_separation,
        )
        return cls(world, cases)

    @property
    def d_model(self) -> int:
        return self.world.d_model

    @property
    def model_name(self) -> str:
        return f"synthetic-{self.world.seed}"

    def embed(self, image_ref: str, question: str, partition: Partition) -> PooledFeatures:
        scenario = self._image_scenarios.get(image_ref)
        if scenario is None:
            raise BackendError(f"unknown image_ref '{image_ref}'")
        world = self.world
        centroid = world.scenario_centroids[scenario]
        offset = world.partition_offsets[partition]
        q_noise = _stream(world.seed, "q", image_ref, question).standard_normal(world.d_model)
        v_noise = _stream(world.seed, "v", image_ref, question).standard_normal(world.d_model)
        q_pooled = centroid + offset + world.noise_scale * q_noise
        v_pooled = centroid + world.noise_scale * v_noise
        return PooledFeatures(q_pooled=q_pooled, v_pooled=v_pooled)

    def base_answer(self, image_ref: str, question: str, partition: Partition) -> str:
        tag = _stream_hex(self.world.seed, "base", image_ref, question, partition.value)
        return f"base answer {partition.value} {tag}"

    def generate(self, request: GenRequest) -> str:
        reference = self._answers.get((request.image_ref, request.question))
        if (
            request.wrapped_context
            and reference is not None
            and request.question in request.wrapped_context
            and reference in request.wrapped_context
        ):
            return reference
        return self.base_answer(request.image_ref, request.question, request.partition)


class RemoteBackend:
    """HTTP client for the sidecar wire protocol.

    Performs a /meta handshake on construction to learn d_model, validates
    every response shape, and bounds in-flight requests.
    """

    def __init__(
        self,
        base_url: str,
        *,
        max_retries: int = 3,
        timeout_s: float = 120.0,
        max_in_flight: int = 4,
        token: str = "",
        system_prompts: dict[Partition, str] | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {}
        if token:
            headers["X-Sidecar-Token"] = token
        self._system_prompts = system_prompts or {}
        self._client = httpx.Client(
            base_url=base_url, timeout=timeout_s, headers=headers, transport=transport
        )
        self._max_retries = max_retries
        self._slots = threading.Semaphore(max_in_flight)
        meta = self._request("GET", "/meta")
        if not isinstance(meta.get("d_model"), int) or meta["d_model"] <= 0:
            raise BackendError(f"/meta returned invalid d_model: {meta!r}")
        self._d_model = meta["d_model"]
        self.model_name = str(meta.get("model_name", "unknown"))

    def close(self) -> None:
        self._client.close()

    @property
    def d_model(self) -> int:
        return self._d_model

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        attempts = 0
        with self._slots:
            while True:
                try:
                    response = self._client.request(method, path, json=body)
                    if response.status_code >= 500:
                        raise httpx.TransportError(f"status {response.status_code}")
                    break
                except httpx.TransportError as exc:
                    attempts += 1
                    if attempts > self._max_retries:
                        raise BackendError(
                            f"backend {method} {path} failed after "
                            f"{self._max_retries} retries: {exc}"
                        ) from exc
        if response.status_code != 200:
            raise BackendError(
                f"backend {method} {path} returned {response.status_code}: "
                f"{response.text[:200]}"
            )
        try:
            payload = response.json()
        except json.JSONDecodeError:
            raise BackendError(f"backend {method} {path} reply is not JSON") from None
        if not isinstance(payload, dict):
            raise BackendError(f"backend {method} {path} reply is not an object")
        return payload

    def _vector(self, payload: dict, key: str) -> np.ndarray:
        values = payload.get(key)
        if not isinstance(values, list) or len(values) != self._d_model:
            raise BackendError(
                f"'{key}' must be a list of length {self._d_model}, "
                f"got {type(values).__name__}"
                + (f" of length {len(values)}" if isinstance(values, list) else "")
            )
        vec = np.asarray(values, dtype=np.float64)
        if not np.isfinite(vec).all():
            raise BackendError(f"'{key}' contains non-finite entries")
        return vec

    def embed(self, image_ref: str, question: str, partition: Partition) -> PooledFeatures:
        payload = self._request(
            "POST",
            "/embed",
            {
                "image_ref": image_ref,
                "question": question,
                "partition": partition.value,
                "system_prompt": self._system_prompts.get(partition, ""),
            },
        )
        if payload.get("d_model") != self._d_model:
            raise BackendError(
                f"/embed d_model {payload.get('d_model')} disagrees with /meta "
                f"{self._d_model}"
            )
        return PooledFeatures(
            q_pooled=self._vector(payload, "q_pooled"),
            v_pooled=self._vector(payload, "v_pooled"),
        )

    def generate(self, request: GenRequest) -> str:
        body = {
            "image_ref": request.image_ref,
            "question": request.question,
            "partition": request.partition.value,
            "system_prompt": request.system_prompt,
            "max_new_tokens": MAX_NEW_TOKENS,
            "decoding": "greedy",
        }
        if request.wrapped_context is not None:
            body["wrapped_context"] = request.wrapped_context
        payload = self._request("POST", "/generate", body)
        answer = payload.get("answer")
        if not isinstance(answer, str):
            raise BackendError("'answer' missing or not a string in /generate reply")
        return answer
