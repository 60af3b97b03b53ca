"""The trainable routing head: forward map, contrastive loss, exact
gradients, the training loop, and threshold calibration.

The router maps pooled (question, visual) features to a unit route vector:
per-stream mean-variance normalization with learned gain/bias, per-stream
linear projections, concatenation, one fusion projection, then L2
normalization. Memory keys are router outputs of entry features, so they are
recomputed under the current parameters at every training step and receive
gradient through the key branch.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import Backend, PooledFeatures
from .cases import SingleInsertCase

CHECKPOINT_VERSION = "mcki-router-v1"

_NORM_EPS = 1e-5
_ZERO_NORM_EPS = 1e-12
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class RouterError(Exception):
    pass


@dataclass
class RouterHyper:
    """Training knobs. Defaults follow the standard recipe for this head."""

    gamma: float = 20.0
    lambda_neg: float = 1.0
    w_cross_language: float = 1.0
    w_cross_scenario: float = 1.5
    learning_rate: float = 1e-3
    epochs: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise RouterError("gamma must be positive")
        if self.lambda_neg < 0:
            raise RouterError("lambda_neg must be non-negative")
        if self.w_cross_language <= 0 or self.w_cross_scenario <= 0:
            raise RouterError("negative-item weights must be positive")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "lambda_neg": self.lambda_neg,
            "w_cross_language": self.w_cross_language,
            "w_cross_scenario": self.w_cross_scenario,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
        }


@dataclass
class RouterParams:
    """All trainable tensors of the routing head."""

    d_model: int
    d_route: int
    text_gain: np.ndarray
    text_bias: np.ndarray
    visual_gain: np.ndarray
    visual_bias: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_f: np.ndarray
    b_f: np.ndarray

    _FIELDS = (
        "text_gain",
        "text_bias",
        "visual_gain",
        "visual_bias",
        "w_q",
        "b_q",
        "w_v",
        "b_v",
        "w_f",
        "b_f",
    )

    @classmethod
    def init(cls, d_model: int, d_route: int, seed: int) -> "RouterParams":
        rng = np.random.default_rng(seed)

        def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            d_model=d_model,
            d_route=d_route,
            text_gain=np.ones(d_model),
            text_bias=np.zeros(d_model),
            visual_gain=np.ones(d_model),
            visual_bias=np.zeros(d_model),
            w_q=uniform((d_route, d_model), d_model),
            b_q=uniform((d_route,), d_model),
            w_v=uniform((d_route, d_model), d_model),
            b_v=uniform((d_route,), d_model),
            w_f=uniform((d_route, 2 * d_route), 2 * d_route),
            b_f=uniform((d_route,), 2 * d_route),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self._FIELDS}

    def copy(self) -> "RouterParams":
        return RouterParams(
            d_model=self.d_model,
            d_route=self.d_route,
            **{name: getattr(self, name).copy() for name in self._FIELDS},
        )

    def validate(self) -> None:
        shapes = {
            "text_gain": (self.d_model,),
            "text_bias": (self.d_model,),
            "visual_gain": (self.d_model,),
            "visual_bias": (self.d_model,),
            "w_q": (self.d_route, self.d_model),
            "b_q": (self.d_route,),
            "w_v": (self.d_route, self.d_model),
            "b_v": (self.d_route,),
            "w_f": (self.d_route, 2 * self.d_route),
            "b_f": (self.d_route,),
        }
        for name, shape in shapes.items():
            tensor = getattr(self, name)
            if tensor.shape != shape:
                raise RouterError(f"{name} has shape {tensor.shape}, expected {shape}")
            if not np.isfinite(tensor).all():
                raise RouterError(f"{name} contains non-finite entries")


@dataclass
class _Forward:
    """Intermediates of a batched forward pass kept for backprop."""

    xq_hat: np.ndarray  # (B, d_model) normalized question features
    xv_hat: np.ndarray
    tq: np.ndarray  # (B, d_model) post gain/bias
    tv: np.ndarray
    u: np.ndarray  # (B, 2*d_route) concatenated projections
    w: np.ndarray  # (B, d_route) pre-normalization fusion output
    norms: np.ndarray  # (B,)
    r: np.ndarray  # (B, d_route) unit route vectors (zero rows if degenerate)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + _NORM_EPS)


def _forward(params: RouterParams, q: np.ndarray, v: np.ndarray) -> _Forward:
    xq_hat = _normalize_rows(q)
    xv_hat = _normalize_rows(v)
    tq = xq_hat * params.text_gain + params.text_bias
    tv = xv_hat * params.visual_gain + params.visual_bias
    zq = tq @ params.w_q.T + params.b_q
    zv = tv @ params.w_v.T + params.b_v
    u = np.concatenate([zq, zv], axis=1)
    w = u @ params.w_f.T + params.b_f
    norms = np.linalg.norm(w, axis=1)
    r = np.zeros_like(w)
    ok = norms >= _ZERO_NORM_EPS
    r[ok] = w[ok] / norms[ok, None]
    return _Forward(xq_hat=xq_hat, xv_hat=xv_hat, tq=tq, tv=tv, u=u, w=w, norms=norms, r=r)


def route_vector(params: RouterParams, feats: PooledFeatures) -> np.ndarray:
    """Unit route vector for one feature pair (zero vector if degenerate)."""
    if feats.d_model != params.d_model:
        raise RouterError(
            f"feature dimension {feats.d_model} does not match router d_model "
            f"{params.d_model}"
        )
    fwd = _forward(params, feats.q_pooled[None, :], feats.v_pooled[None, :])
    return fwd.r[0].copy()


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; -1 if either vector is zero."""
    if u.shape != v.shape:
        raise RouterError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _ZERO_NORM_EPS or nv < _ZERO_NORM_EPS:
        return -1.0
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


def contrastive_loss(
    positive_sims: np.ndarray,
    negative_sims: np.ndarray,
    negative_weights: np.ndarray,
    hyper: RouterHyper,
) -> float:
    """Entry loss over positive and weighted negative similarities.

    Per positive p: -l_p + lambda * log(exp(l_p) + sum_n exp(l_n)), averaged
    over positives, with l_p = gamma*sim_p and l_n = gamma*sim_n + log(w_n).
    Computed with a max-shifted log-sum-exp.
    """
    loss, _, _ = _loss_and_logit_grads(
        np.asarray(positive_sims, dtype=float),
        np.asarray(negative_sims, dtype=float),
        np.asarray(negative_weights, dtype=float),
        hyper,
    )
    return loss


def _loss_and_logit_grads(
    positive_sims: np.ndarray,
    negative_sims: np.ndarray,
    negative_weights: np.ndarray,
    hyper: RouterHyper,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus d(loss)/d(sim) for positives and negatives."""
    if positive_sims.size == 0:
        raise RouterError("positives must be non-empty")
    if negative_sims.size != negative_weights.size:
        raise RouterError("each negative similarity needs a weight")
    if negative_sims.size and (negative_weights <= 0).any():
        raise RouterError("negative weights must be positive")

    gamma, lam = hyper.gamma, hyper.lambda_neg
    lp = gamma * positive_sims  # (P,)
    ln = gamma * negative_sims + np.log(negative_weights) if negative_sims.size else np.empty(0)

    n_pos = lp.size
    d_sim_pos = np.zeros(n_pos)
    d_sim_neg = np.zeros(ln.size)
    total = 0.0
    for i in range(n_pos):
        logits = np.concatenate([[lp[i]], ln])
        m = logits.max()
        exps = np.exp(logits - m)
        denom = exps.sum()
        lse = m + np.log(denom)
        total += -lp[i] + lam * lse
        softmax = exps / denom
        d_sim_pos[i] = gamma * (-1.0 + lam * softmax[0]) / n_pos
        if ln.size:
            d_sim_neg += gamma * lam * softmax[1:] / n_pos
    return total / n_pos, d_sim_pos, d_sim_neg


@dataclass
class TrainingBatch:
    """Feature views for one memory entry: the entry itself, its positive
    items, and its weighted negative items."""

    entry: PooledFeatures
    positives: list[PooledFeatures]
    negatives: list[tuple[PooledFeatures, float]]

    def __post_init__(self) -> None:
        if not self.positives:
            raise RouterError("positives must be non-empty")


def _stack(batch: TrainingBatch) -> tuple[np.ndarray, np.ndarray, int, int, np.ndarray]:
    rows = [batch.entry, *batch.positives, *[f for f, _ in batch.negatives]]
    q = np.stack([r.q_pooled for r in rows])
    v = np.stack([r.v_pooled for r in rows])
    weights = np.asarray([w for _, w in batch.negatives], dtype=float)
    return q, v, len(batch.positives), len(batch.negatives), weights


def batch_loss(params: RouterParams, batch: TrainingBatch, hyper: RouterHyper) -> float:
    loss, _ = _batch_loss_and_grads(params, batch, hyper, want_grads=False)
    return loss


def loss_gradient(
    params: RouterParams, batch: TrainingBatch, hyper: RouterHyper
) -> tuple[float, dict[str, np.ndarray]]:
    """Exact gradient of the entry loss with respect to every parameter,
    including the memory-key branch."""
    loss, grads = _batch_loss_and_grads(params, batch, hyper, want_grads=True)
    assert grads is not None
    return loss, grads


def _batch_loss_and_grads(
    params: RouterParams,
    batch: TrainingBatch,
    hyper: RouterHyper,
    want_grads: bool,
) -> tuple[float, dict[str, np.ndarray] | None]:
    q, v, n_pos, n_neg, weights = _stack(batch)
    fwd = _forward(params, q, v)
    key = fwd.r[0]
    items = fwd.r[1:]
    key_zero = fwd.norms[0] < _ZERO_NORM_EPS
    item_zero = fwd.norms[1:] < _ZERO_NORM_EPS
    sims = items @ key
    sims[item_zero] = -1.0
    if key_zero:
        sims[:] = -1.0
    sims = np.clip(sims, -1.0, 1.0)

    loss, d_pos, d_neg = _loss_and_logit_grads(
        sims[:n_pos], sims[n_pos:], weights, hyper
    )
    if not want_grads:
        return loss, None

    d_sims = np.concatenate([d_pos, d_neg])
    # Degenerate (zero-norm) route vectors contribute a constant similarity.
    d_sims = np.where(item_zero | key_zero, 0.0, d_sims)

    # sim_i = r_i . r_0 with r = w / |w|: pull gradients back to pre-norm w.
    g_w = np.zeros_like(fwd.w)
    if not key_zero:
        live = ~item_zero
        g_w[1:][live] = (
            d_sims[live, None]
            * (key[None, :] - sims[live, None] * items[live])
            / fwd.norms[1:][live, None]
        )
        g_w[0] = (
            d_sims[live, None] * (items[live] - sims[live, None] * key[None, :])
        ).sum(axis=0) / fwd.norms[0]

    # Fusion projection.
    g_wf = g_w.T @ fwd.u
    g_bf = g_w.sum(axis=0)
    g_u = g_w @ params.w_f
    g_zq = g_u[:, : params.d_route]
    g_zv = g_u[:, params.d_route :]

    # Per-stream projections.
    g_wq = g_zq.T @ fwd.tq
    g_bq = g_zq.sum(axis=0)
    g_wv = g_zv.T @ fwd.tv
    g_bv = g_zv.sum(axis=0)

    # Normalization gain/bias (inputs are data, not parameters).
    g_tq = g_zq @ params.w_q
    g_tv = g_zv @ params.w_v
    grads = {
        "text_gain": (g_tq * fwd.xq_hat).sum(axis=0),
        "text_bias": g_tq.sum(axis=0),
        "visual_gain": (g_tv * fwd.xv_hat).sum(axis=0),
        "visual_bias": g_tv.sum(axis=0),
        "w_q": g_wq,
        "b_q": g_bq,
        "w_v": g_wv,
        "b_v": g_bv,
        "w_f": g_wf,
        "b_f": g_bf,
    }
    return loss, grads


@dataclass
class ScoreSets:
    """Router similarities observed on positive and negative pairs."""

    positives: list[float]
    negatives: list[float]

    def validate(self) -> None:
        for value in (*self.positives, *self.negatives):
            if not -1.0 <= value <= 1.0:
                raise RouterError(f"similarity {value} outside [-1, 1]")

    def summary(self) -> dict:
        def stats(values: list[float]) -> dict:
            if not values:
                return {"count": 0}
            arr = np.asarray(values)
            return {
                "count": int(arr.size),
                "min": float(arr.min()),
                "mean": float(arr.mean()),
                "max": float(arr.max()),
            }

        return {"positives": stats(self.positives), "negatives": stats(self.negatives)}


class Adam:
    def __init__(self, tensors: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.step_count = 0
        self.m = {k: np.zeros_like(t) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t) for k, t in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - _ADAM_BETA1**t
        bias2 = 1.0 - _ADAM_BETA2**t
        for name, tensor in tensors.items():
            g = grads[name]
            self.m[name] = _ADAM_BETA1 * self.m[name] + (1 - _ADAM_BETA1) * g
            self.v[name] = _ADAM_BETA2 * self.v[name] + (1 - _ADAM_BETA2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            tensor -= self.lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


class FeatureCache:
    """Memoizes backend.embed calls keyed by (image_ref, question, partition)."""

    def __init__(self, backend: Backend):
        self._backend = backend
        self._cache: dict[tuple[str, str, str], PooledFeatures] = {}

    def get(self, image_ref: str, question: str, partition) -> PooledFeatures:
        key = (image_ref, question, partition.value)
        feats = self._cache.get(key)
        if feats is None:
            feats = self._backend.embed(image_ref, question, partition)
            self._cache[key] = feats
        return feats


def case_batch(
    case: SingleInsertCase, features: FeatureCache, hyper: RouterHyper
) -> TrainingBatch:
    """Training batch for one case: entry from the target, positives from the
    target and its generality item, negatives from the locality items."""
    target = features.get(case.target.image_ref, case.target.question, case.target.partition)
    gen = features.get(
        case.generality_item.image_ref,
        case.generality_item.question,
        case.generality_item.partition,
    )
    negatives: list[tuple[PooledFeatures, float]] = []
    for probe in case.cross_language_items:
        negatives.append(
            (features.get(probe.image_ref, probe.question, probe.partition), hyper.w_cross_language)
        )
    scen = case.cross_scenario_item
    negatives.append(
        (features.get(scen.image_ref, scen.question, scen.partition), hyper.w_cross_scenario)
    )
    return TrainingBatch(entry=target, positives=[target, gen], negatives=negatives)


def collect_scores(
    params: RouterParams,
    cases: list[SingleInsertCase],
    features: FeatureCache,
    hyper: RouterHyper,
) -> ScoreSets:
    """Similarities of every positive and negative pair under fixed params."""
    positives: list[float] = []
    negatives: list[float] = []
    for case in cases:
        batch = case_batch(case, features, hyper)
        q, v, n_pos, _, _ = _stack(batch)
        fwd = _forward(params, q, v)
        key = fwd.r[0]
        for i, row in enumerate(fwd.r[1:]):
            sim = cosine_sim(row, key)
            (positives if i < n_pos else negatives).append(sim)
    return ScoreSets(positives=positives, negatives=negatives)


def train_router(
    cases: list[SingleInsertCase],
    backend: Backend,
    hyper: RouterHyper,
    *,
    d_route: int = 1024,
    features: FeatureCache | None = None,
) -> tuple[RouterParams, ScoreSets]:
    """Train the routing head and return final params plus training-score sets.

    One Adam step per memory entry, iterating entries in seeded shuffled
    order for the configured number of epochs. Score sets are computed under
    the final parameters.
    """
    if not cases:
        raise RouterError("training dataset is empty")
    if features is None:
        features = FeatureCache(backend)
    params = RouterParams.init(backend.d_model, d_route, hyper.seed)
    optimizer = Adam(params.tensors(), hyper.learning_rate)
    rng = np.random.default_rng(hyper.seed)
    batches = [case_batch(case, features, hyper) for case in cases]
    for _epoch in range(hyper.epochs):
        for index in rng.permutation(len(batches)):
            batch = batches[int(index)]
            loss, grads = loss_gradient(params, batch, hyper)
            if not np.isfinite(loss):
                raise RouterError(
                    f"non-finite loss {loss} at entry {int(index)} "
                    f"(step {optimizer.step_count + 1})"
                )
            optimizer.step(params.tensors(), grads)
    scores = collect_scores(params, cases, features, hyper)
    return params, scores


def calibrate_threshold(scores: ScoreSets) -> float:
    """Threshold maximizing activation accuracy on the training score sets.

    Candidates are the distinct observed scores plus 2.0 (abstain on
    everything). Accuracy counts positives at or above t plus negatives below
    t. The smallest maximizing candidate wins; the returned threshold is the
    midpoint between it and the largest score strictly below it, or the
    candidate itself when no score lies below.
    """
    if not scores.positives:
        raise RouterError("cannot calibrate with empty positive scores")
    pos = np.asarray(scores.positives)
    neg = np.asarray(scores.negatives)
    all_scores = np.concatenate([pos, neg])
    candidates = np.unique(np.append(all_scores, 2.0))
    best_acc = -1
    best = 2.0
    for t in candidates:
        acc = int((pos >= t).sum() + (neg < t).sum())
        if acc > best_acc:
            best_acc = acc
            best = float(t)
    below = all_scores[all_scores < best]
    if below.size == 0:
        return best
    return (best + float(below.max())) / 2.0


def activation_accuracy(scores: ScoreSets, tau: float) -> float:
    """Fraction of scores routed correctly at threshold tau."""
    pos = np.asarray(scores.positives)
    neg = np.asarray(scores.negatives)
    total = pos.size + neg.size
    if total == 0:
        raise RouterError("no scores to evaluate")
    correct = int((pos >= tau).sum() + (neg < tau).sum())
    return correct / total


# ---------------------------------------------------------------------------
# Checkpoint container


def _encode(tensor: np.ndarray) -> dict:
    data = np.ascontiguousarray(tensor, dtype=np.float64)
    return {
        "shape": list(data.shape),
        "dtype": "float64",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(obj["shape"]).copy()


def checkpoint_to_dict(
    params: RouterParams, hyper: RouterHyper, tau: float
) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "d_model": params.d_model,
        "d_route": params.d_route,
        "hyper": hyper.to_dict(),
        "tau": tau,
        "seed": hyper.seed,
        "params": {name: _encode(t) for name, t in params.tensors().items()},
    }


def checkpoint_from_dict(obj: dict) -> tuple[RouterParams, RouterHyper, float]:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise RouterError(
            f"unsupported checkpoint version {obj.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION!r}"
        )
    tensors = {name: _decode(t) for name, t in obj["params"].items()}
    params = RouterParams(d_model=int(obj["d_model"]), d_route=int(obj["d_route"]), **tensors)
    params.validate()
    hyper = RouterHyper(**obj["hyper"])
    return params, hyper, float(obj["tau"])


def save_checkpoint(
    path: str | Path, params: RouterParams, hyper: RouterHyper, tau: float
) -> None:
    Path(path).write_text(
        json.dumps(checkpoint_to_dict(params, hyper, tau)), encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> tuple[RouterParams, RouterHyper, float]:
    return checkpoint_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
