"""Negative-impact scoring and reranking of instances and features.

Instances are ranked by influence (approximate leave-one-out impact on the
worst validation points) or by predictive uncertainty under the latent
summary. Features of the selected instances are ranked by influence under
input perturbations, attention variance, or the counterfactual prediction
shift from switching a single attention cell off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .errors import PreconditionError, ValidationError
from .gradients import CGResult, cg_solve, gradient, hvp
from .model import AttentionNetwork, weight_decay_penalty
from .nap import AnnotationStore, NeuralAttentionProcess
from .params import ParamVector
from .tensor import Tensor

INSTANCE_SCORERS = ("influence", "uncertainty", "random")
FEATURE_SCORERS = ("influence", "uncertainty", "counterfactual", "random")

SCORER_NAMES = {
    ("instance", "influence"): "inst-influence",
    ("instance", "uncertainty"): "inst-uncertainty",
    ("feature", "influence"): "feat-influence",
    ("feature", "uncertainty"): "feat-uncertainty",
    ("feature", "counterfactual"): "feat-counterfactual",
}


@dataclass
class ScoreRecord:
    subject: object                 # instance_id or (instance_id, t, d)
    scorer: str
    value: float
    components: dict | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValidationError(f"score for {self.subject} is not finite")


@dataclass
class FeatureEntry:
    t: int
    d: int
    score: float


@dataclass
class InstanceEntry:
    instance_id: str
    score: float
    features: list[FeatureEntry] = field(default_factory=list)
    flags: tuple[str, ...] = ()


@dataclass
class RerankReport:
    round: int
    P: int
    K: int
    F: int
    inst_scorer: str
    feat_scorer: str
    validation_ids: list[str] = field(default_factory=list)
    entries: list[InstanceEntry] = field(default_factory=list)
    schema: str = "rerank-report/v1"

    def to_record(self) -> dict:
        return {
            "schema": self.schema, "round": self.round,
            "P": self.P, "K": self.K, "F": self.F,
            "inst_scorer": self.inst_scorer, "feat_scorer": self.feat_scorer,
            "validation_ids": list(self.validation_ids),
            "entries": [
                {"instance_id": e.instance_id, "score": e.score,
                 "flags": list(e.flags),
                 "features": [[f.t, f.d, f.score] for f in e.features]}
                for e in self.entries
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RerankReport":
        if rec.get("schema") != "rerank-report/v1":
            raise ValidationError(f"unknown report schema {rec.get('schema')!r}")
        report = cls(round=rec["round"], P=rec["P"], K=rec["K"], F=rec["F"],
                     inst_scorer=rec["inst_scorer"], feat_scorer=rec["feat_scorer"],
                     validation_ids=list(rec["validation_ids"]))
        for e in rec["entries"]:
            report.entries.append(InstanceEntry(
                instance_id=e["instance_id"], score=e["score"],
                flags=tuple(e.get("flags", ())),
                features=[FeatureEntry(int(t), int(d), float(s))
                          for t, d, s in e["features"]]))
        return report


@dataclass
class ScoringContext:
    """Frozen snapshot everything in a reranking pass reads from."""
    net: AttentionNetwork
    nap: NeuralAttentionProcess
    train_set: object            # Dataset
    valid_set: object            # Dataset
    store: AnnotationStore
    params: ParamVector
    seed: int = 0
    damping: float = 0.01
    mc_samples: int = 30
    weight_decay: float = 0.0
    cg_max_iter: int = 100
    cg_tol: float = 1e-6

    def instances(self) -> dict[str, np.ndarray]:
        return {inst.id: inst.x for inst in self.train_set}

    def summary(self):
        return self.nap.summary_from_store(self.instances(), self.store,
                                           self.params, mode="mean")


# -- conditioned losses -------------------------------------------------------------

def _traced_latent_mean(ctx: ScoringContext, p) -> Tensor | None:
    """Mean-mode latent as a traced tensor (None when the store is empty)."""
    entries = sorted(ctx.store, key=lambda e: (e[1].instance_id, e[0]))
    masks = [m for _, m in entries]
    if not masks:
        return None
    instances = ctx.instances()
    x = np.stack([instances[m.instance_id] for m in masks])
    r_steps = ctx.nap.encode_core(x, masks, p)
    r_bar = tt.concat([s.mean(axis=0, keepdims=True) for s in r_steps], axis=0)
    mu, _ = ctx.nap.latent_core(r_bar, p)
    return mu


def point_loss_fn(ctx: ScoringContext):
    """Per-instance conditioned task loss, differentiable through the latent."""
    def f(p, point):
        x, y = point
        z = _traced_latent_mean(ctx, p)
        return ctx.net.batch_loss(p, (x[None], y[None]), z=z)
    return f


def empirical_risk_fn(ctx: ScoringContext):
    """Mean conditioned loss over the training split plus the trained penalty."""
    x_all = ctx.train_set.x_array()
    y_all = ctx.train_set.y_array()

    def f(p, _batch):
        z = _traced_latent_mean(ctx, p)
        loss = ctx.net.batch_loss(p, (x_all, y_all), z=z)
        return loss + weight_decay_penalty(p, ctx.weight_decay)
    return f


# -- validation subset ---------------------------------------------------------------

def per_instance_losses(ctx: ScoringContext, dataset) -> np.ndarray:
    """Deterministic per-instance loss under the mean latent."""
    summary = ctx.summary()
    with tt.no_grad():
        p = ctx.params.as_tensors()
        x = dataset.x_array()
        preds = ctx.net.predict_core(ctx.net._steps(ctx.net.check_inputs(x)), p,
                                     z=summary.z)
        losses = []
        for i in range(len(dataset)):
            li = ctx.net.task_loss(
                tt.narrow(preds, 0, i, 1), dataset[i].y[None])
            losses.append(float(li.data))
    return np.asarray(losses)


def select_validation_subset(ctx: ScoringContext, P: int) -> list[str]:
    """Ids of the P highest-loss validation instances (index tie-break)."""
    M = len(ctx.valid_set)
    if M == 0:
        raise PreconditionError("validation set is empty")
    if not (1 <= P <= M):
        raise PreconditionError(f"P must be in [1, {M}], got {P}")
    losses = per_instance_losses(ctx, ctx.valid_set)
    order = sorted(range(M), key=lambda i: (-losses[i], i))
    return [ctx.valid_set[i].id for i in order[:P]]


# -- influence ---------------------------------------------------------------------

class InfluenceEngine:
    """Shared machinery for influence scores against a fixed validation subset.

    One damped CG solve against the summed validation gradient serves every
    training point; the Hessian is symmetric, so scoring a point reduces to a
    dot product with its gradient. Works for any per-point differentiable
    loss; ``for_context`` wires it to the conditioned attention model.
    """

    def __init__(self, risk_fn, point_loss, params: ParamVector,
                 top_p_points: Sequence, damping: float = 0.01,
                 cg_max_iter: int = 100, cg_tol: float = 1e-6):
        self.risk = risk_fn
        self.point_loss = point_loss
        self.params = params
        self.top_p_points = list(top_p_points)
        self.damping = damping
        self.cg_max_iter = cg_max_iter
        self.cg_tol = cg_tol
        self._s_val: ParamVector | None = None
        self._solve: CGResult | None = None

    @classmethod
    def for_context(cls, ctx: ScoringContext,
                    top_p_points: Sequence) -> "InfluenceEngine":
        return cls(empirical_risk_fn(ctx), point_loss_fn(ctx), ctx.params,
                   top_p_points, ctx.damping, ctx.cg_max_iter, ctx.cg_tol)

    def point_grad(self, point) -> ParamVector:
        return gradient(self.point_loss, self.params, point)

    def validation_gradient(self) -> ParamVector:
        total = self.params.zeros_like()
        for point in self.top_p_points:
            total = total.axpy(1.0, self.point_grad(point))
        return total

    def hvp_fn(self, v: ParamVector) -> ParamVector:
        return hvp(self.risk, self.params, None, v)

    @property
    def s_val(self) -> ParamVector:
        if self._s_val is None:
            g_val = self.validation_gradient()
            self._solve = cg_solve(self.hvp_fn, g_val, damping=self.damping,
                                   max_iter=self.cg_max_iter, tol=self.cg_tol)
            self._s_val = self._solve.x
        return self._s_val

    def solve_flags(self) -> tuple[str, ...]:
        if self._solve is not None and self._solve.stagnated:
            return ("cg-stagnated",)
        return ()

    def influence_of(self, point) -> float:
        """I(u) = -sum_p grad_val_p . (H+damping)^-1 grad(u)."""
        return -self.s_val.dot(self.point_grad(point))


def instance_influence_score(ctx: ScoringContext, point,
                             top_p_points: Sequence) -> ScoreRecord:
    """Literal per-point form: solve (H+damping)s_i = grad(u_i), then
    I = -grad_val . s_i. Equal to the engine's value up to CG tolerance."""
    engine = InfluenceEngine.for_context(ctx, top_p_points)
    g_i = engine.point_grad(point)
    solve = cg_solve(engine.hvp_fn, g_i, damping=ctx.damping,
                     max_iter=ctx.cg_max_iter, tol=ctx.cg_tol)
    value = -engine.validation_gradient().dot(solve.x)
    flags = ("cg-stagnated",) if solve.stagnated else ()
    return ScoreRecord(subject=None, scorer="inst-influence", value=value,
                       flags=flags)


# -- uncertainty -----------------------------------------------------------------------

def _latent_draws(ctx: ScoringContext, S: int, seed: int) -> np.ndarray:
    """(S, T, d_z) latent samples from the store summary (prior if empty)."""
    summary = ctx.summary()
    rng = np.random.default_rng(seed)
    draws = [ctx.nap.sample_latent(summary.mu, summary.sigma, "sample", rng=rng)
             for _ in range(S)]
    return np.stack(draws)


def batched_prediction_samples(ctx: ScoringContext, x: np.ndarray,
                               draws: np.ndarray) -> np.ndarray:
    """(S, B, L) predictions of ``x`` under each latent draw."""
    preds = []
    with tt.no_grad():
        p = ctx.params.as_tensors()
        steps = ctx.net._steps(ctx.net.check_inputs(x))
        for z in draws:
            preds.append(ctx.net.predict_core(steps, p, z=z).data)
    return np.stack(preds)


def instance_uncertainty_scores(ctx: ScoringContext, x: np.ndarray,
                                S: int | None = None,
                                seed: int | None = None) -> np.ndarray:
    """Per-instance mean output variance over latent samples."""
    S = S or ctx.mc_samples
    if S < 2:
        raise PreconditionError("uncertainty needs at least 2 samples")
    draws = _latent_draws(ctx, S, ctx.seed if seed is None else seed)
    preds = batched_prediction_samples(ctx, x, draws)
    return preds.var(axis=0, ddof=0).mean(axis=-1)


def instance_uncertainty_score(ctx: ScoringContext, x: np.ndarray,
                               S: int | None = None,
                               seed: int | None = None) -> float:
    return float(instance_uncertainty_scores(ctx, x[None] if x.ndim == 2 else x,
                                             S=S, seed=seed)[0])


def feature_uncertainty_grid(ctx: ScoringContext, x: np.ndarray,
                             S: int | None = None,
                             seed: int | None = None) -> np.ndarray:
    """(T, D) variance of the effective attention beta*gamma over samples."""
    S = S or ctx.mc_samples
    if S < 2:
        raise PreconditionError("uncertainty needs at least 2 samples")
    draws = _latent_draws(ctx, S, ctx.seed if seed is None else seed)
    effs = []
    with tt.no_grad():
        p = ctx.params.as_tensors()
        steps = ctx.net._steps(ctx.net.check_inputs(x))
        for z in draws:
            beta, gammas, _ = ctx.net.attention_core(steps, p, z=z)
            gam = np.stack([g.data for g in gammas], axis=1)  # (1, T, D)
            effs.append(beta.data[0][:, None] * gam[0])
    return np.stack(effs).var(axis=0, ddof=0)


def feature_uncertainty_score(ctx: ScoringContext, x: np.ndarray,
                              cell: tuple[int, int],
                              S: int | None = None,
                              seed: int | None = None) -> float:
    t, d = cell
    return float(feature_uncertainty_grid(ctx, x, S=S, seed=seed)[t, d])


# -- counterfactual ---------------------------------------------------------------------

def counterfactual_score(ctx: ScoringContext, x: np.ndarray,
                         cell: tuple[int, int]) -> tuple[float, np.ndarray]:
    """Prediction shift from zeroing one attention cell (mean latent mode).

    Returns (L2 norm of the delta, delta vector). No retraining, no gradients.
    """
    summary = ctx.summary()
    base = ctx.net.predict(x, ctx.params, z=summary.z)
    off = ctx.net.predict_with_override(x, ctx.params, [cell], z=summary.z)
    delta = base - off
    return float(np.linalg.norm(delta)), delta


def counterfactual_grid(ctx: ScoringContext, x: np.ndarray) -> np.ndarray:
    """(T, D) counterfactual scores from one forward pass.

    The context vector is a sum of per-cell terms, so removing cell (t, d)
    shifts the logits by exactly its contribution. Cells with beta or gamma
    at zero score exactly zero.
    """
    summary = ctx.summary()
    attn = ctx.net.forward_attention(x, ctx.params, z=summary.z)
    w = ctx.params["out.w"]                      # (D, L)
    contrib = attn.beta[:, None, None] * attn.gamma[:, :, None] \
        * attn.v[:, :, None] * w[None, :, :]     # (T, D, L)
    ctx_vec = (attn.beta[:, None] * attn.gamma * attn.v).sum(axis=0)
    logits = ctx_vec @ w + ctx.params["out.b"]   # (L,)
    cf_logits = logits[None, None, :] - contrib
    task = ctx.net.config.task
    if task == "binary":
        base = 1.0 / (1.0 + np.exp(-logits))
        cf = 1.0 / (1.0 + np.exp(-cf_logits))
    elif task == "multiclass":
        base = np.exp(logits - logits.max())
        base = base / base.sum()
        shifted = cf_logits - cf_logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        cf = e / e.sum(axis=-1, keepdims=True)
    else:
        base, cf = logits, cf_logits
    return np.linalg.norm(base[None, None, :] - cf, axis=-1)


# -- feature influence --------------------------------------------------------------------

@dataclass
class FeatureStats:
    """Per-feature mean/std pooled over instances and timesteps."""
    mean: np.ndarray  # (D,)
    std: np.ndarray   # (D,)

    @classmethod
    def from_dataset(cls, dataset) -> "FeatureStats":
        x = dataset.x_array()
        return cls(mean=x.mean(axis=(0, 1)), std=x.std(axis=(0, 1)))


def feature_influence_score(engine: InfluenceEngine, point,
                            cell: tuple[int, int],
                            stats: FeatureStats) -> ScoreRecord:
    """Mean |influence change| over perturbations of one input cell.

    Perturbs x[t, d] by {-2, -1, +1, +2} train-split standard deviations and
    averages the magnitude of the influence shift.
    """
    t, d = cell
    x, y = point
    sd = float(stats.std[d])
    if sd == 0.0:
        return ScoreRecord(subject=None, scorer="feat-influence", value=0.0,
                           flags=("constant-feature",))
    base = engine.influence_of(point)
    deltas = {}
    for mult in (-2.0, -1.0, 1.0, 2.0):
        xp = x.copy()
        xp[t, d] += mult * sd
        deltas[mult] = engine.influence_of((xp, y)) - base
    value = float(np.mean([abs(v) for v in deltas.values()]))
    return ScoreRecord(subject=None, scorer="feat-influence", value=value,
                       components={str(k): v for k, v in deltas.items()},
                       flags=engine.solve_flags())


# -- rerank -----------------------------------------------------------------------------------

def _ordered_topk(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, descending, index tie-break."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def rerank(ctx: ScoringContext, P: int, K: int, F: int,
           inst_scorer: str = "uncertainty",
           feat_scorer: str = "counterfactual",
           round_s: int = 1,
           exclude_ids: Iterable[str] = ()) -> RerankReport:
    """Full reranking pass: top-P validation losers -> instance scores over
    the training split -> top-K instances -> per-instance feature scores ->
    top-F cells each. Deterministic given the context seed."""
    if inst_scorer not in INSTANCE_SCORERS:
        raise ValidationError(f"unknown instance scorer {inst_scorer!r}")
    if feat_scorer not in FEATURE_SCORERS:
        raise ValidationError(f"unknown feature scorer {feat_scorer!r}")
    N = len(ctx.train_set)
    TD = ctx.net.config.T * ctx.net.config.D
    if not (1 <= K <= N):
        raise PreconditionError(f"K must be in [1, {N}]")
    if not (1 <= F <= TD):
        raise PreconditionError(f"F must be in [1, {TD}]")

    exclude = set(exclude_ids)
    validation_ids = select_validation_subset(ctx, P)
    val_by_id = {inst.id: inst for inst in ctx.valid_set}
    top_p_points = [(val_by_id[i].x, val_by_id[i].y) for i in validation_ids]

    rng = np.random.default_rng(ctx.seed)
    flags_by_idx: dict[int, tuple[str, ...]] = {}

    if inst_scorer == "influence":
        engine = InfluenceEngine.for_context(ctx, top_p_points)
        scores = np.array([engine.influence_of((inst.x, inst.y))
                           for inst in ctx.train_set])
        if engine.solve_flags():
            flags_by_idx = {i: engine.solve_flags() for i in range(N)}
    elif inst_scorer == "uncertainty":
        engine = None
        scores = instance_uncertainty_scores(ctx, ctx.train_set.x_array())
    else:  # random: uniform draws decide the ordering
        engine = None
        scores = rng.random(N)

    candidates = [i for i in range(N) if ctx.train_set[i].id not in exclude]
    ranked = sorted(candidates, key=lambda i: (-scores[i], i))[:K]

    stats = FeatureStats.from_dataset(ctx.train_set) \
        if feat_scorer == "influence" else None
    if feat_scorer == "influence" and engine is None:
        engine = InfluenceEngine.for_context(ctx, top_p_points)

    entries = []
    for idx in ranked:
        inst = ctx.train_set[idx]
        if feat_scorer == "counterfactual":
            grid = counterfactual_grid(ctx, inst.x)
        elif feat_scorer == "uncertainty":
            grid = feature_uncertainty_grid(ctx, inst.x)
        elif feat_scorer == "influence":
            grid = np.zeros((ctx.net.config.T, ctx.net.config.D))
            for t in range(ctx.net.config.T):
                for d in range(ctx.net.config.D):
                    rec = feature_influence_score(
                        engine, (inst.x, inst.y), (t, d), stats)
                    grid[t, d] = rec.value
        else:  # random
            grid = rng.random((ctx.net.config.T, ctx.net.config.D))

        flat = grid.ravel()
        top_cells = _ordered_topk(flat, F)
        features = [FeatureEntry(t=c // ctx.net.config.D, d=c % ctx.net.config.D,
                                 score=float(flat[c])) for c in top_cells]
        entries.append(InstanceEntry(
            instance_id=inst.id, score=float(scores[idx]), features=features,
            flags=flags_by_idx.get(idx, ())))

    return RerankReport(round=round_s, P=P, K=K, F=F,
                        inst_scorer=inst_scorer, feat_scorer=feat_scorer,
                        validation_ids=validation_ids, entries=entries)
