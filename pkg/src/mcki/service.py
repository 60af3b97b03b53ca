"""HTTP service wrapping the engine: train the router, run evaluations, and
time efficiency over the wire.

The service is stateless across requests: case records, router checkpoints,
and every knob arrive in the request body, and reports return in the
response. File handling stays with the client.
"""

from __future__ import annotations

import os
from typing import Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .backends import Backend, BackendError, RemoteBackend, SyntheticBackend
from .cases import (
    CaseError,
    CaseSet,
    Partition,
    derive_sequential_chains,
    derive_single_cases,
    parse_cases,
    parse_order,
)
from .harness import (
    HarnessError,
    eval_sequential,
    eval_single,
    measure_efficiency,
)
from .judge import JUDGE_URL_VAR, JudgeClient, JudgeConfig
from .methods import (
    DEFAULT_MAX_DEMOS,
    DEFAULT_WRAP_TEMPLATE,
    METHOD_BASE,
    METHOD_IKE_LITE,
    METHOD_MCKI,
    BasePassthrough,
    IkeLite,
    Mcki,
    MethodError,
)
from .router import (
    RouterError,
    RouterHyper,
    activation_accuracy,
    calibrate_threshold,
    checkpoint_from_dict,
    checkpoint_to_dict,
    train_router,
)
from .scoring import JUDGE, ROUGE_L, Scorer, StubJudge


class BackendSpec(BaseModel):
    kind: Literal["synthetic", "remote"] = "synthetic"
    seed: int = 0
    d_model: int = 64
    noise_scale: float = 0.05
    separation: float = 0.8
    url: str | None = None


class HyperSpec(BaseModel):
    gamma: float = 20.0
    lambda_neg: float = 1.0
    w_cross_language: float = 1.0
    w_cross_scenario: float = 1.5
    learning_rate: float = 1e-3
    epochs: int = 1
    seed: int = 0
    d_route: int = 1024

    def to_hyper(self) -> RouterHyper:
        return RouterHyper(
            gamma=self.gamma,
            lambda_neg=self.lambda_neg,
            w_cross_language=self.w_cross_language,
            w_cross_scenario=self.w_cross_scenario,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.seed,
        )


class JudgeSpec(BaseModel):
    retries: int = 3
    max_tokens: int = 256


class TrainRouterRequest(BaseModel):
    records: list[dict]
    backend: BackendSpec = Field(default_factory=BackendSpec)
    hyper: HyperSpec = Field(default_factory=HyperSpec)


class TrainRouterResponse(BaseModel):
    checkpoint: dict
    tau: float
    accuracy: float
    score_summary: dict


class EvalRequest(BaseModel):
    mode: Literal["single", "sequential"]
    records: list[dict]
    method: Literal["mcki", "base", "ike-lite"]
    scorers: list[Literal["rouge_l", "judge"]] = Field(default_factory=lambda: [ROUGE_L])
    backend: BackendSpec = Field(default_factory=BackendSpec)
    checkpoint: dict | None = None
    tau_override: float | None = None
    wrap_template: str = DEFAULT_WRAP_TEMPLATE
    max_demos: int = DEFAULT_MAX_DEMOS
    order: str = "en,zh,ar"
    retention: bool = False
    workers: int = 1
    accumulate_memory: bool = False
    system_prompts: dict[str, str] = Field(default_factory=dict)
    judge: JudgeSpec = Field(default_factory=JudgeSpec)
    config_echo: dict = Field(default_factory=dict)


class EvalResponse(BaseModel):
    report: dict


class BenchRequest(BaseModel):
    records: list[dict]
    method: Literal["mcki", "base", "ike-lite"]
    backend: BackendSpec = Field(default_factory=BackendSpec)
    checkpoint: dict | None = None
    n_train: int = 100
    n_eval: int = 100
    wrap_template: str = DEFAULT_WRAP_TEMPLATE
    max_demos: int = DEFAULT_MAX_DEMOS
    system_prompts: dict[str, str] = Field(default_factory=dict)
    config_echo: dict = Field(default_factory=dict)


class BenchResponse(BaseModel):
    report: dict


app = FastAPI(title="mcki", version=__version__)

# Config/validation problems map to 400 (client exits with usage error);
# failures while driving the backend map to 500 (evaluation failure).
_CONFIG_ERRORS = (CaseError, RouterError, MethodError, HarnessError, ValueError)
_RUNTIME_ERRORS = (BackendError,)


def _case_set(records: list[dict]) -> CaseSet:
    return parse_cases([(f"records[{i}]", obj) for i, obj in enumerate(records)])


def _build_backend(spec: BackendSpec, cases: CaseSet) -> Backend:
    if spec.kind == "synthetic":
        return SyntheticBackend.for_cases(
            cases,
            seed=spec.seed,
            d_model=spec.d_model,
            noise_scale=spec.noise_scale,
            cross_scenario_min_separation=spec.separation,
        )
    url = spec.url or os.environ.get("BACKEND_URL", "")
    if not url:
        raise CaseError("remote backend requested but no url given (BACKEND_URL)")
    return RemoteBackend(url)


def _build_scorer(kinds: list[str], judge_spec: JudgeSpec) -> Scorer:
    judge = None
    if JUDGE in kinds:
        url = os.environ.get(JUDGE_URL_VAR, "")
        if not url:
            raise CaseError(f"judge scoring requested but {JUDGE_URL_VAR} is not set")
        if url.startswith("stub:"):
            judge = StubJudge()
        else:
            judge = JudgeClient(
                JudgeConfig.from_env(
                    max_retries=judge_spec.retries, max_tokens=judge_spec.max_tokens
                )
            )
    return Scorer(tuple(dict.fromkeys(kinds)), judge=judge)


def _build_method(request, backend: Backend):
    if request.method == METHOD_MCKI:
        if request.checkpoint is None:
            raise CaseError("method 'mcki' requires a router checkpoint")
        params, _hyper, tau = checkpoint_from_dict(request.checkpoint)
        if getattr(request, "tau_override", None) is not None:
            tau = request.tau_override
        return Mcki(params, tau, backend, wrap_template=request.wrap_template)
    if request.method == METHOD_BASE:
        return BasePassthrough(backend)
    if request.method == METHOD_IKE_LITE:
        return IkeLite(
            backend, max_demos=request.max_demos, wrap_template=request.wrap_template
        )
    raise CaseError(f"unknown method '{request.method}'")


def _system_prompts(raw: dict[str, str]) -> dict[Partition, str]:
    try:
        return {Partition(k): v for k, v in raw.items()}
    except ValueError:
        raise CaseError(f"unknown partition in system_prompts: {sorted(raw)}") from None


@app.get("/healthz")
def healthz() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/train-router", response_model=TrainRouterResponse)
def train_router_endpoint(request: TrainRouterRequest) -> TrainRouterResponse:
    try:
        cases = _case_set(request.records)
        singles = derive_single_cases(cases)
        backend = _build_backend(request.backend, cases)
        hyper = request.hyper.to_hyper()
        params, scores = train_router(
            singles, backend, hyper, d_route=request.hyper.d_route
        )
        tau = calibrate_threshold(scores)
        accuracy = activation_accuracy(scores, tau)
    except _CONFIG_ERRORS as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    except _RUNTIME_ERRORS as exc:
        raise HTTPException(status_code=500, detail=str(exc))
    return TrainRouterResponse(
        checkpoint=checkpoint_to_dict(params, hyper, tau),
        tau=tau,
        accuracy=accuracy,
        score_summary=scores.summary(),
    )


@app.post("/eval", response_model=EvalResponse)
def eval_endpoint(request: EvalRequest) -> EvalResponse:
    try:
        cases = _case_set(request.records)
        backend = _build_backend(request.backend, cases)
        scorer = _build_scorer(list(request.scorers), request.judge)
        method = _build_method(request, backend)
        prompts = _system_prompts(request.system_prompts)
        if request.mode == "single":
            report = eval_single(
                derive_single_cases(cases),
                method,
                backend,
                scorer,
                system_prompts=prompts,
                workers=request.workers,
                accumulate_memory=request.accumulate_memory,
                config=request.config_echo,
            )
        else:
            order = parse_order(request.order)
            report = eval_sequential(
                derive_sequential_chains(cases, order),
                method,
                backend,
                scorer,
                measure_retention=request.retention,
                system_prompts=prompts,
                workers=request.workers,
                config=request.config_echo,
            )
    except _CONFIG_ERRORS as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    except _RUNTIME_ERRORS as exc:
        raise HTTPException(status_code=500, detail=str(exc))
    return EvalResponse(report=report.to_dict())


@app.post("/bench", response_model=BenchResponse)
def bench_endpoint(request: BenchRequest) -> BenchResponse:
    try:
        cases = _case_set(request.records)
        backend = _build_backend(request.backend, cases)
        method = _build_method(request, backend)
        hyper = None
        if request.checkpoint is not None:
            _params, hyper, _tau = checkpoint_from_dict(request.checkpoint)
        report = measure_efficiency(
            method,
            backend,
            derive_single_cases(cases),
            n_train=request.n_train,
            n_eval=request.n_eval,
            hyper=hyper,
            system_prompts=_system_prompts(request.system_prompts),
            config=request.config_echo,
        )
    except _CONFIG_ERRORS as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    except _RUNTIME_ERRORS as exc:
        raise HTTPException(status_code=500, detail=str(exc))
    return BenchResponse(report=report.to_dict())
