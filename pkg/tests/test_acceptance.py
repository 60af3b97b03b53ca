"""Acceptance suite.

One test per release criterion, each enforcing its stated tolerance and
runtime budget. The whole module runs offline: synthetic backend, stub
judge, no sidecar, no model weights. Absolute published-table numbers for
real model backbones are intentionally not reproduced here; the arithmetic
that aggregates them is (P1), and the behavioral properties are covered by
the synthetic end-to-end suites (P5-P7).
"""

import random
import time

import numpy as np
import pytest

from mcki.backends import SyntheticBackend
from mcki.cases import derive_sequential_chains, derive_single_cases, parse_cases, parse_order
from mcki.fixtures import generate_case_records
from mcki.harness import (
    SEQUENTIAL_DIMS,
    SINGLE_DIMS,
    eval_sequential,
    eval_single,
    overall_sequential,
    overall_single,
)
from mcki.methods import BasePassthrough, Mcki
from mcki.router import (
    FeatureCache,
    RouterHyper,
    RouterParams,
    ScoreSets,
    TrainingBatch,
    activation_accuracy,
    batch_loss,
    calibrate_threshold,
    collect_scores,
    contrastive_loss,
    loss_gradient,
    train_router,
)
from mcki.scoring import ROUGE_L, Scorer, StubJudge, rouge_l, tokenize

SEED = 0
_PIPELINE: dict = {}


def _pipeline() -> dict:
    """Train-and-calibrate once at the stated scale; share across criteria.

    20 scenarios x 10 cases, d_model 64, separation 0.8, noise 0.05, and the
    default recipe (d_route 1024, logit scale 20, negative weights 1.0/1.5,
    LR 1e-3, one epoch). Scenarios split 10/10 into train and held-out sets.
    """
    if _PIPELINE:
        return _PIPELINE
    start = time.perf_counter()
    train_records = generate_case_records(10, 10, seed=SEED, scenario_offset=0)
    eval_records = generate_case_records(10, 10, seed=SEED, scenario_offset=10)
    train_cases = parse_cases([(f"t{i}", r) for i, r in enumerate(train_records)])
    eval_cases = parse_cases([(f"e{i}", r) for i, r in enumerate(eval_records)])
    world = dict(d_model=64, noise_scale=0.05, cross_scenario_min_separation=0.8)
    train_backend = SyntheticBackend.for_cases(train_cases, seed=SEED, **world)
    eval_backend = SyntheticBackend.for_cases(eval_cases, seed=SEED, **world)
    hyper = RouterHyper(
        gamma=20.0,
        lambda_neg=1.0,
        w_cross_language=1.0,
        w_cross_scenario=1.5,
        learning_rate=1e-3,
        epochs=1,
        seed=SEED,
    )
    train_singles = derive_single_cases(train_cases)
    params, train_scores = train_router(
        train_singles, train_backend, hyper, d_route=1024
    )
    tau = calibrate_threshold(train_scores)
    eval_singles = derive_single_cases(eval_cases)
    held_scores = collect_scores(
        params, eval_singles, FeatureCache(eval_backend), hyper
    )
    _PIPELINE.update(
        train_cases=train_cases,
        eval_cases=eval_cases,
        eval_backend=eval_backend,
        eval_singles=eval_singles,
        params=params,
        tau=tau,
        hyper=hyper,
        held_scores=held_scores,
        build_seconds=time.perf_counter() - start,
    )
    return _PIPELINE


def test_p1_aggregation_fidelity():
    """Published per-dimension means reproduce the published overall columns."""
    start = time.perf_counter()
    rouge_dims = dict(zip(SINGLE_DIMS, (79.83, 22.20, 100.00, 89.66)))
    assert overall_single(rouge_dims) == pytest.approx(72.92, abs=0.01)
    judge_dims = dict(zip(SINGLE_DIMS, (8.86, 5.71, 9.99, 9.47)))
    assert overall_single(judge_dims) == pytest.approx(8.51, abs=0.01)
    seq_dims = dict(zip(SEQUENTIAL_DIMS, (85.57, 28.61, 83.44)))
    assert overall_sequential(seq_dims) == pytest.approx(65.87, abs=0.01)
    assert time.perf_counter() - start < 1.0


def _brute_force_lcs(a: list[str], b: list[str]) -> int:
    if len(a) > len(b):
        a, b = b, a
    best = 0
    for mask in range(1 << len(a)):
        sub = [a[i] for i in range(len(a)) if mask >> i & 1]
        it = iter(b)
        if all(tok in it for tok in sub):
            best = max(best, len(sub))
    return best


def test_p2_rouge_matches_brute_force_oracle():
    """Exact agreement with subsequence enumeration on 1,000 random pairs."""
    start = time.perf_counter()
    rng = random.Random(12345)
    vocab = ["a", "b", "c", "ab", "x1", "谢", "好", "ع"]
    for _ in range(1000):
        c_tokens = rng.choices(vocab, k=rng.randint(0, 8))
        r_tokens = rng.choices(vocab, k=rng.randint(0, 8))
        candidate = " ".join(c_tokens)
        reference = " ".join(r_tokens)
        c, r = tokenize(candidate), tokenize(reference)
        if not c or not r:
            expected = 0.0
        else:
            lcs = _brute_force_lcs(c, r)
            if lcs == 0:
                expected = 0.0
            else:
                p, q = lcs / len(c), lcs / len(r)
                expected = 100.0 * 2.0 * p * q / (p + q)
        assert rouge_l(candidate, reference) == expected
    assert rouge_l("the cat sat", "the cat sat") == 100.0
    assert rouge_l("a b", "c d") == 0.0
    assert time.perf_counter() - start < 10.0


def test_p3_loss_identities_and_gradients():
    """Closed-form loss values and exact gradients against central differences."""
    start = time.perf_counter()
    # identity: lambda = 1 with no negatives is exactly zero
    rng = np.random.default_rng(777)
    for _ in range(20):
        sims = rng.uniform(-1, 1, size=int(rng.integers(1, 6)))
        loss = contrastive_loss(
            sims, np.empty(0), np.empty(0), RouterHyper(gamma=float(rng.uniform(1, 30)))
        )
        assert abs(loss) <= 1e-12

    hyper = RouterHyper(gamma=1.0, lambda_neg=1.0)
    first = contrastive_loss(np.array([1.0]), np.array([0.0]), np.array([1.0]), hyper)
    assert first == pytest.approx(0.313262, abs=1e-6)
    second = contrastive_loss(np.array([1.0]), np.array([0.0]), np.array([2.0]), hyper)
    assert second == pytest.approx(0.551445, abs=1e-6)

    h = 1e-4
    for _ in range(50):
        d_model = int(rng.integers(3, 9))
        d_route = int(rng.integers(2, 7))
        params = RouterParams.init(d_model, d_route, seed=int(rng.integers(10_000)))
        batch = TrainingBatch(
            entry=_feats(rng, d_model),
            positives=[_feats(rng, d_model) for _ in range(int(rng.integers(1, 4)))],
            negatives=[
                (_feats(rng, d_model), float(rng.uniform(0.5, 2.0)))
                for _ in range(int(rng.integers(0, 4)))
            ],
        )
        case_hyper = RouterHyper(
            gamma=float(rng.uniform(1, 20)), lambda_neg=float(rng.uniform(0.3, 1.5))
        )
        _, grads = loss_gradient(params, batch, case_hyper)
        for name, tensor in params.tensors().items():
            fd = np.zeros_like(tensor)
            flat, fd_flat = tensor.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = batch_loss(params, batch, case_hyper)
                flat[i] = orig - h
                down = batch_loss(params, batch, case_hyper)
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * h)
            scale = max(float(np.abs(fd).max()), float(np.abs(grads[name]).max()), 1e-12)
            assert float(np.abs(grads[name] - fd).max()) / scale <= 1e-4
    assert time.perf_counter() - start < 30.0


def _feats(rng, d_model):
    from mcki.backends import PooledFeatures

    return PooledFeatures(
        q_pooled=rng.normal(size=d_model), v_pooled=rng.normal(size=d_model)
    )


def test_p4_calibration_matches_grid_scan():
    """Calibrated accuracy equals a 1e-4-step scan of [-1, 1] plus the
    all-abstain operating point; the worked examples reproduce exactly."""
    start = time.perf_counter()
    grid = np.arange(-1.0, 1.0 + 1e-9, 1e-4)

    def grid_best(pos: np.ndarray, neg: np.ndarray) -> int:
        hits = (pos[None, :] >= grid[:, None]).sum(axis=1) + (
            neg[None, :] < grid[:, None]
        ).sum(axis=1)
        best = int(hits.max()) if hits.size else 0
        return max(best, int((neg < 2.0).sum()))  # abstain-on-everything point

    rng = np.random.default_rng(4242)
    for _ in range(100):
        # scores live on a 1e-3 lattice so every accuracy plateau is wider
        # than the grid step
        pos = rng.integers(-999, 1000, size=int(rng.integers(1, 51))) / 1000.0
        neg = rng.integers(-999, 1000, size=int(rng.integers(0, 51))) / 1000.0
        scores = ScoreSets(positives=pos.tolist(), negatives=neg.tolist())
        tau = calibrate_threshold(scores)
        achieved = activation_accuracy(scores, tau) * (pos.size + neg.size)
        assert round(achieved) == grid_best(pos, neg)

    assert calibrate_threshold(ScoreSets([0.9, 0.8], [0.1, 0.2])) == pytest.approx(0.5)
    assert activation_accuracy(ScoreSets([0.9, 0.8], [0.1, 0.2]), 0.5) == 1.0
    assert calibrate_threshold(ScoreSets([0.3], [0.7])) == pytest.approx(0.3)
    assert activation_accuracy(ScoreSets([0.3], [0.7]), 0.3) == 0.5
    assert calibrate_threshold(ScoreSets([0.5], [0.5])) == pytest.approx(0.5)
    assert time.perf_counter() - start < 10.0


def test_p5_end_to_end_synthetic_pipeline():
    """Trained + calibrated routing reaches 0.99 held-out accuracy; with the
    oracle generation backend reliability is exactly 100 on routed items and
    both locality dimensions stay above 99."""
    start = time.perf_counter()
    pipe = _pipeline()
    accuracy = activation_accuracy(pipe["held_scores"], pipe["tau"])
    assert accuracy >= 0.99

    method = Mcki(pipe["params"], pipe["tau"], pipe["eval_backend"])
    report = eval_single(
        pipe["eval_singles"], method, pipe["eval_backend"], Scorer((ROUGE_L,))
    )
    routed = [
        r
        for r in report.per_case
        if r["decisions"]["reliability"]["outcome"] == "activate"
    ]
    assert routed
    for record in routed:
        assert record["scores"][ROUGE_L]["reliability"] == 100.0
    assert report.metrics[ROUGE_L]["cross_language_locality"] >= 99.0
    assert report.metrics[ROUGE_L]["cross_scenario_locality"] >= 99.0
    elapsed = pipe["build_seconds"] + (time.perf_counter() - start)
    assert elapsed < 120.0


def test_p6_locality_exactness():
    """Base passthrough and an all-abstaining router leave every locality
    dimension at exactly 100.00 under both score types."""
    start = time.perf_counter()
    pipe = _pipeline()
    backend = pipe["eval_backend"]
    scorer = Scorer((ROUGE_L, "judge"), judge=StubJudge())
    chains = derive_sequential_chains(pipe["eval_cases"])

    for method_factory in (
        lambda: BasePassthrough(backend),
        lambda: Mcki(pipe["params"], 2.0, backend),  # forced abstention
    ):
        single = eval_single(pipe["eval_singles"], method_factory(), backend, scorer)
        assert single.metrics[ROUGE_L]["cross_language_locality"] == 100.0
        assert single.metrics[ROUGE_L]["cross_scenario_locality"] == 100.0
        assert single.metrics["judge"]["cross_language_locality"] == 10.0
        assert single.metrics["judge"]["cross_scenario_locality"] == 10.0
        sequential = eval_sequential(chains, method_factory(), backend, scorer)
        assert sequential.metrics[ROUGE_L]["final_locality"] == 100.0
        assert sequential.metrics["judge"]["final_locality"] == 10.0
    assert time.perf_counter() - start < 60.0


def test_p7_retention_shape():
    """Retention grids are flat at 100 for the gated method, defined only for
    measured-after >= inserted-step, and reordered chains carry permuted
    step labels."""
    pipe = _pipeline()
    backend = pipe["eval_backend"]
    scorer = Scorer((ROUGE_L,))

    chains = derive_sequential_chains(pipe["eval_cases"])
    report = eval_sequential(
        chains,
        Mcki(pipe["params"], pipe["tau"], backend),
        backend,
        scorer,
        measure_retention=True,
    )
    grid = report.retention[ROUGE_L]
    assert sorted(grid) == ["1", "2", "3"]
    for s, row in grid.items():
        assert len(row) == 4 - int(s)
        assert all(value == 100.0 for value in row)

    reordered = derive_sequential_chains(pipe["eval_cases"], parse_order("ar,zh,en"))
    reordered_report = eval_sequential(
        reordered,
        Mcki(pipe["params"], pipe["tau"], backend),
        backend,
        scorer,
        measure_retention=True,
    )
    assert reordered_report.order == ["ar", "zh", "en"]
    for chain in reordered:
        assert chain.steps[0].sample.partition.value == "ar"
    for s, row in reordered_report.retention[ROUGE_L].items():
        assert len(row) == 4 - int(s)
        assert all(value == 100.0 for value in row)


def test_p8_runs_without_external_services(monkeypatch):
    """The primary suite needs no sidecar, judge endpoint, or model weights.

    Published absolute results for real MLLM backbones require their
    checkpoints and GPU hardware and are out of scope at desk scale; they are
    covered by P1's arithmetic closure plus the P5/P6 property suites. This
    criterion re-runs a miniature of the full path with every external
    integration variable unset.
    """
    monkeypatch.delenv("JUDGE_URL", raising=False)
    monkeypatch.delenv("JUDGE_API_KEY", raising=False)
    monkeypatch.delenv("BACKEND_URL", raising=False)
    monkeypatch.delenv("MCKI_SERVICE_URL", raising=False)

    records = generate_case_records(2, 2, seed=99)
    cases = parse_cases([(f"r{i}", r) for i, r in enumerate(records)])
    backend = SyntheticBackend.for_cases(cases, seed=99, d_model=16)
    singles = derive_single_cases(cases)
    params, scores = train_router(singles, backend, RouterHyper(seed=99), d_route=8)
    tau = calibrate_threshold(scores)
    scorer = Scorer((ROUGE_L, "judge"), judge=StubJudge())
    report = eval_single(singles, Mcki(params, tau, backend), backend, scorer)
    assert set(report.metrics) == {ROUGE_L, "judge"}
    assert isinstance(backend, SyntheticBackend)
