import math

import numpy as np
import pytest

from mcki.backends import PooledFeatures, SyntheticBackend
from mcki.cases import parse_cases, derive_single_cases
from mcki.fixtures import generate_case_records
from mcki.router import (
    FeatureCache,
    RouterError,
    RouterHyper,
    RouterParams,
    ScoreSets,
    TrainingBatch,
    activation_accuracy,
    batch_loss,
    calibrate_threshold,
    checkpoint_from_dict,
    checkpoint_to_dict,
    collect_scores,
    contrastive_loss,
    cosine_sim,
    load_checkpoint,
    loss_gradient,
    route_vector,
    save_checkpoint,
    train_router,
)


def random_feats(rng, d_model):
    return PooledFeatures(
        q_pooled=rng.normal(size=d_model), v_pooled=rng.normal(size=d_model)
    )


def random_batch(rng, d_model, n_pos=None, n_neg=None):
    n_pos = n_pos if n_pos is not None else int(rng.integers(1, 4))
    n_neg = n_neg if n_neg is not None else int(rng.integers(0, 4))
    return TrainingBatch(
        entry=random_feats(rng, d_model),
        positives=[random_feats(rng, d_model) for _ in range(n_pos)],
        negatives=[
            (random_feats(rng, d_model), float(rng.uniform(0.5, 2.0)))
            for _ in range(n_neg)
        ],
    )


def finite_difference_grads(params, batch, hyper, h=1e-4):
    fd = {}
    for name, tensor in params.tensors().items():
        grad = np.zeros_like(tensor)
        flat, grad_flat = tensor.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(params, batch, hyper)
            flat[i] = orig - h
            down = batch_loss(params, batch, hyper)
            flat[i] = orig
            grad_flat[i] = (up - down) / (2 * h)
        fd[name] = grad
    return fd


def max_relative_error(analytic, numeric):
    worst = 0.0
    for name, fd in numeric.items():
        scale = max(float(np.abs(fd).max()), float(np.abs(analytic[name]).max()), 1e-12)
        worst = max(worst, float(np.abs(analytic[name] - fd).max()) / scale)
    return worst


class TestRouteVector:
    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        params = RouterParams.init(6, 4, seed=1)
        for _ in range(20):
            vec = route_vector(params, random_feats(rng, 6))
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        params = RouterParams.init(5, 3, seed=2)
        feats = random_feats(rng, 5)
        assert np.array_equal(route_vector(params, feats), route_vector(params, feats))

    def test_degenerate_returns_zero_vector(self):
        params = RouterParams.init(4, 3, seed=0)
        # Kill every projection so the fusion output is exactly zero.
        for name in ("w_q", "b_q", "w_v", "b_v", "w_f", "b_f"):
            getattr(params, name)[:] = 0.0
        feats = PooledFeatures(q_pooled=np.ones(4), v_pooled=np.ones(4))
        vec = route_vector(params, feats)
        assert np.array_equal(vec, np.zeros(3))

    def test_dimension_mismatch(self):
        params = RouterParams.init(4, 3, seed=0)
        feats = PooledFeatures(q_pooled=np.ones(5), v_pooled=np.ones(5))
        with pytest.raises(RouterError, match="does not match"):
            route_vector(params, feats)

    def test_hand_evaluated_composition(self):
        # Identity norms, zero biases, W_f = [I | I] scaled: the output is the
        # normalized sum of the two projected (normalized) streams.
        d = 2
        params = RouterParams.init(d, d, seed=0)
        params.text_gain[:] = 1.0
        params.text_bias[:] = 0.0
        params.visual_gain[:] = 1.0
        params.visual_bias[:] = 0.0
        params.w_q[:] = np.array([[2.0, 0.0], [0.0, 3.0]])
        params.b_q[:] = 0.0
        params.w_v[:] = np.array([[1.0, -1.0], [0.5, 0.5]])
        params.b_v[:] = 0.0
        params.w_f[:] = 0.7 * np.concatenate([np.eye(d), np.eye(d)], axis=1)
        params.b_f[:] = 0.0

        q = np.array([1.0, 3.0])
        v = np.array([-2.0, 0.0])
        feats = PooledFeatures(q_pooled=q, v_pooled=v)

        def norm(x):
            return (x - x.mean()) / math.sqrt(x.var() + 1e-5)

        expected = params.w_q @ norm(q) + params.w_v @ norm(v)
        expected = expected / np.linalg.norm(expected)
        assert np.allclose(route_vector(params, feats), expected, atol=1e-12)


class TestCosine:
    def test_identity(self):
        v = np.array([0.6, 0.8])
        assert cosine_sim(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_analytic_value(self):
        u = np.array([1.0, 0.0])
        v = np.array([1.0, 1.0]) / math.sqrt(2)
        assert cosine_sim(u, v) == pytest.approx(math.sqrt(0.5), abs=1e-9)

    def test_zero_vector_forces_abstention(self):
        assert cosine_sim(np.zeros(3), np.ones(3)) == -1.0

    def test_dimension_mismatch(self):
        with pytest.raises(RouterError):
            cosine_sim(np.ones(2), np.ones(3))


class TestContrastiveLoss:
    def test_zero_without_negatives(self):
        rng = np.random.default_rng(0)
        hyper = RouterHyper(gamma=7.0, lambda_neg=1.0)
        for _ in range(20):
            sims = rng.uniform(-1, 1, size=rng.integers(1, 5))
            loss = contrastive_loss(sims, np.empty(0), np.empty(0), hyper)
            assert loss == 0.0

    def test_hand_derived_value_weight_one(self):
        hyper = RouterHyper(gamma=1.0, lambda_neg=1.0)
        loss = contrastive_loss(np.array([1.0]), np.array([0.0]), np.array([1.0]), hyper)
        assert loss == pytest.approx(-1.0 + math.log(math.e + 1.0), abs=1e-6)
        assert loss == pytest.approx(0.313262, abs=1e-6)

    def test_hand_derived_value_weight_two(self):
        hyper = RouterHyper(gamma=1.0, lambda_neg=1.0)
        loss = contrastive_loss(np.array([1.0]), np.array([0.0]), np.array([2.0]), hyper)
        assert loss == pytest.approx(-1.0 + math.log(math.e + 2.0), abs=1e-6)
        assert loss == pytest.approx(0.551445, abs=1e-6)

    def test_monotone_in_similarities(self):
        # Non-increasing in each positive, non-decreasing in each negative.
        rng = np.random.default_rng(3)
        hyper = RouterHyper(gamma=5.0, lambda_neg=1.0)
        eps = 1e-3
        for _ in range(50):
            pos = rng.uniform(-0.9, 0.9, size=rng.integers(1, 4))
            neg = rng.uniform(-0.9, 0.9, size=rng.integers(1, 4))
            w = rng.uniform(0.5, 2.0, size=neg.size)
            base = contrastive_loss(pos, neg, w, hyper)
            for i in range(pos.size):
                bumped = pos.copy()
                bumped[i] += eps
                assert contrastive_loss(bumped, neg, w, hyper) <= base + 1e-12
            for i in range(neg.size):
                bumped = neg.copy()
                bumped[i] += eps
                assert contrastive_loss(pos, bumped, w, hyper) >= base - 1e-12

    def test_empty_positives_rejected(self):
        with pytest.raises(RouterError):
            contrastive_loss(np.empty(0), np.array([0.1]), np.array([1.0]), RouterHyper())

    def test_large_logits_stable(self):
        hyper = RouterHyper(gamma=200.0, lambda_neg=1.0)
        loss = contrastive_loss(
            np.array([1.0]), np.array([0.99]), np.array([1.0]), hyper
        )
        assert np.isfinite(loss)


class TestLossGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            d_model = int(rng.integers(3, 9))
            d_route = int(rng.integers(2, 7))
            params = RouterParams.init(d_model, d_route, seed=int(rng.integers(1000)))
            batch = random_batch(rng, d_model)
            hyper = RouterHyper(
                gamma=float(rng.uniform(1, 20)), lambda_neg=float(rng.uniform(0.3, 1.5))
            )
            _, grads = loss_gradient(params, batch, hyper)
            fd = finite_difference_grads(params, batch, hyper)
            assert max_relative_error(grads, fd) <= 1e-4

    def test_gamma_doubling_still_matches(self):
        rng = np.random.default_rng(8)
        params = RouterParams.init(5, 4, seed=3)
        batch = random_batch(rng, 5, n_pos=2, n_neg=2)
        for gamma in (4.0, 8.0):
            hyper = RouterHyper(gamma=gamma, lambda_neg=1.0)
            _, grads = loss_gradient(params, batch, hyper)
            fd = finite_difference_grads(params, batch, hyper)
            assert max_relative_error(grads, fd) <= 1e-4

    def test_no_negatives_zero_gradient(self):
        rng = np.random.default_rng(9)
        params = RouterParams.init(4, 3, seed=1)
        batch = random_batch(rng, 4, n_pos=2, n_neg=0)
        loss, grads = loss_gradient(params, batch, RouterHyper(lambda_neg=1.0))
        assert loss == 0.0
        for tensor in grads.values():
            assert np.allclose(tensor, 0.0, atol=1e-12)

    def test_entry_shared_with_positive(self):
        # The usual construction: the first positive is the entry itself.
        rng = np.random.default_rng(10)
        params = RouterParams.init(4, 3, seed=2)
        entry = random_feats(rng, 4)
        batch = TrainingBatch(
            entry=entry,
            positives=[entry, random_feats(rng, 4)],
            negatives=[(random_feats(rng, 4), 1.5)],
        )
        hyper = RouterHyper(gamma=10.0)
        _, grads = loss_gradient(params, batch, hyper)
        fd = finite_difference_grads(params, batch, hyper)
        assert max_relative_error(grads, fd) <= 1e-4


@pytest.fixture(scope="module")
def world():
    records = generate_case_records(6, 4, seed=5)
    cases = parse_cases([(f"r{i}", r) for i, r in enumerate(records)])
    backend = SyntheticBackend.for_cases(cases, seed=5, d_model=32)
    return derive_single_cases(cases), backend


class TestTraining:
    def test_training_improves_loss_and_separates(self, world):
        singles, backend = world
        hyper = RouterHyper(seed=4)
        features = FeatureCache(backend)
        init_params = RouterParams.init(backend.d_model, 64, hyper.seed)
        init_scores = collect_scores(init_params, singles, features, hyper)
        params, scores = train_router(singles, backend, hyper, d_route=64, features=features)
        tau = calibrate_threshold(scores)
        assert activation_accuracy(scores, tau) >= activation_accuracy(
            init_scores, calibrate_threshold(init_scores)
        )
        assert min(scores.positives) > float(
            np.percentile(np.asarray(scores.negatives), 99)
        )

    def test_zero_epochs_keeps_initialization(self, world):
        singles, backend = world
        hyper = RouterHyper(seed=4, epochs=0)
        params, scores = train_router(singles, backend, hyper, d_route=16)
        init = RouterParams.init(backend.d_model, 16, hyper.seed)
        for name, tensor in params.tensors().items():
            assert np.array_equal(tensor, init.tensors()[name])
        assert scores.positives  # score sets still computed under init

    def test_same_seed_bitwise_identical(self, world):
        singles, backend = world
        hyper = RouterHyper(seed=11)
        _, first = train_router(singles, backend, hyper, d_route=16)
        _, second = train_router(singles, backend, hyper, d_route=16)
        assert first.positives == second.positives
        assert first.negatives == second.negatives

    def test_empty_dataset_rejected(self, world):
        _, backend = world
        with pytest.raises(RouterError, match="empty"):
            train_router([], backend, RouterHyper())

    def test_score_sets_within_bounds(self, world):
        singles, backend = world
        _, scores = train_router(singles, backend, RouterHyper(seed=2), d_route=16)
        scores.validate()


class TestCalibration:
    def grid_accuracy(self, scores: ScoreSets) -> float:
        pos = np.asarray(scores.positives)
        neg = np.asarray(scores.negatives)
        best = -1
        for t in np.arange(-1.0, 1.0 + 1e-9, 1e-4):
            acc = int((pos >= t).sum() + (neg < t).sum())
            best = max(best, acc)
        # the all-abstain operating point sits above every score
        best = max(best, int((neg < 2.0).sum()))
        return best / (pos.size + neg.size)

    def test_worked_example_separable(self):
        scores = ScoreSets(positives=[0.9, 0.8], negatives=[0.1, 0.2])
        tau = calibrate_threshold(scores)
        assert tau == pytest.approx(0.5)
        assert activation_accuracy(scores, tau) == 1.0

    def test_worked_example_inverted(self):
        scores = ScoreSets(positives=[0.3], negatives=[0.7])
        tau = calibrate_threshold(scores)
        assert tau == pytest.approx(0.3)
        assert activation_accuracy(scores, tau) == 0.5

    def test_worked_example_tied(self):
        scores = ScoreSets(positives=[0.5], negatives=[0.5])
        tau = calibrate_threshold(scores)
        assert tau == pytest.approx(0.5)
        assert activation_accuracy(scores, tau) == 0.5

    def test_matches_grid_scan(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            # scores on a 1e-3 lattice so the 1e-4 grid resolves every plateau
            pos = (rng.integers(-999, 1000, size=rng.integers(1, 50)) / 1000.0).tolist()
            neg = (rng.integers(-999, 1000, size=rng.integers(0, 50)) / 1000.0).tolist()
            scores = ScoreSets(positives=pos, negatives=neg)
            tau = calibrate_threshold(scores)
            assert activation_accuracy(scores, tau) == pytest.approx(
                self.grid_accuracy(scores)
            )

    def test_empty_positives_rejected(self):
        with pytest.raises(RouterError):
            calibrate_threshold(ScoreSets(positives=[], negatives=[0.1]))

    def test_all_abstain_candidate_can_win(self):
        scores = ScoreSets(positives=[0.1], negatives=[0.5, 0.6, 0.7])
        tau = calibrate_threshold(scores)
        assert tau > 1.0  # midpoint between 2.0 and the largest score
        assert activation_accuracy(scores, tau) == 0.75


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = RouterParams.init(6, 4, seed=9)
        hyper = RouterHyper(seed=9, gamma=12.5)
        path = tmp_path / "router.ckpt"
        save_checkpoint(path, params, hyper, tau=0.42)
        loaded, loaded_hyper, tau = load_checkpoint(path)
        assert tau == 0.42
        assert loaded_hyper == hyper
        for name, tensor in params.tensors().items():
            assert np.array_equal(tensor, loaded.tensors()[name])

    def test_version_checked(self):
        params = RouterParams.init(4, 3, seed=0)
        obj = checkpoint_to_dict(params, RouterHyper(), 0.5)
        obj["version"] = "mcki-router-v0"
        with pytest.raises(RouterError, match="version"):
            checkpoint_from_dict(obj)

    def test_version_string(self):
        params = RouterParams.init(4, 3, seed=0)
        obj = checkpoint_to_dict(params, RouterHyper(), 0.5)
        assert obj["version"] == "mcki-router-v1"
        assert obj["tau"] == 0.5
        assert obj["seed"] == 0
