"""Round-based interactive training: pretrain, rerank, annotate, recondition.

Round 0 trains the predictor with an empty annotation context. Each later
round reranks instances and features, collects ternary masks from an
annotator (simulated or interactive), and appends them to the store. Only
round 1 runs the one-time adaptation training; afterwards parameters are
frozen and new masks act purely through the latent summary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.metrics import roc_auc_score

from . import tensor as tt
from .data import Dataset
from .errors import PreconditionError, TrainingDiverged, UndefinedMetricError
from .gradients import gradient
from .model import AttentionNetwork, ModelConfig, weight_decay_penalty
from .nap import (AdaptConfig, AnnotationStore, AttentionMask,
                  NeuralAttentionProcess, adapt_train)
from .optim import Adam
from .params import ParamVector
from .rerank import RerankReport, ScoringContext, rerank

Annotator = Callable[[RerankReport, Mapping], list[AttentionMask]]


@dataclass
class TrainConfig:
    epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class TrainLog:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1


def pretrain(net: AttentionNetwork, train_set: Dataset, valid_set: Dataset,
             config: TrainConfig) -> tuple[ParamVector, TrainLog]:
    """Gradient-descent training without any annotation conditioning."""
    if len(train_set) == 0:
        raise PreconditionError("training set is empty")
    params = net.init_params(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.lr)
    base = net.base_segments()
    x_all, y_all = train_set.x_array(), train_set.y_array()
    x_val = valid_set.x_array() if len(valid_set) else None
    y_val = valid_set.y_array() if len(valid_set) else None

    def objective(p, batch):
        return net.batch_loss(p, batch) \
            + weight_decay_penalty(p, config.weight_decay, base)

    log = TrainLog()
    best = params
    best_val = np.inf
    since_best = 0
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = (x_all[idx], y_all[idx])
            with tt.no_grad():
                step_loss = float(objective(params.as_tensors(), batch).data)
            if not np.isfinite(step_loss):
                raise TrainingDiverged("training loss is non-finite",
                                       last_params=best)
            losses.append(step_loss)
            g = gradient(objective, params, batch)
            params = opt.step(params, g)
        log.train_losses.append(float(np.mean(losses)))

        if x_val is None:
            best, log.best_epoch = params, epoch
            continue
        with tt.no_grad():
            val_loss = float(net.batch_loss(params.as_tensors(),
                                            (x_val, y_val)).data)
        log.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val, best, log.best_epoch = val_loss, params, epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return best, log


# -- evaluation -----------------------------------------------------------------

def auroc(labels: np.ndarray, scores: np.ndarray) -> float:
    labels = np.asarray(labels).ravel()
    if len(np.unique(labels)) < 2:
        raise UndefinedMetricError("AUROC needs both classes present")
    return float(roc_auc_score(labels, np.asarray(scores).ravel()))


def evaluate_model(net: AttentionNetwork, nap: NeuralAttentionProcess,
                   params: ParamVector, store: AnnotationStore,
                   dataset: Dataset, task: str,
                   context_instances: Mapping[str, np.ndarray]) -> dict:
    """Deterministic metrics under the mean latent summary."""
    summary = nap.summary_from_store(context_instances, store, params,
                                     mode="mean")
    preds = net.predict(dataset.x_array(), params, z=summary.z)
    y = dataset.y_array()
    with tt.no_grad():
        loss = float(net.task_loss(tt.Tensor(preds), y).data)
    out = {"task": task, "n": len(dataset), "loss": loss,
           "context_size": summary.context_size}
    if task == "binary":
        out["metric"] = "auroc"
        out["value"] = auroc(y[:, 0], preds[:, 0])
    elif task == "multiclass":
        out["metric"] = "accuracy"
        out["value"] = float((preds.argmax(axis=1) == y.argmax(axis=1)).mean())
    else:
        denom = np.maximum(np.abs(y), 1e-8)
        out["metric"] = "mape"
        out["value"] = float((np.abs(preds - y) / denom).mean())
    return out


# -- simulated annotator -----------------------------------------------------------

@dataclass(frozen=True)
class OracleConfig:
    noise_rate: float = 0.0
    idk_rate: float = 0.0
    scope: str = "requested-features-only"  # or "full-grid"

    def __post_init__(self):
        if not (0 <= self.noise_rate <= 1 and 0 <= self.idk_rate <= 1):
            raise PreconditionError("rates must be in [0, 1]")
        if self.noise_rate + self.idk_rate > 1:
            raise PreconditionError("noise_rate + idk_rate must be <= 1")
        if self.scope not in ("requested-features-only", "full-grid"):
            raise PreconditionError(f"unknown scope {self.scope!r}")


def oracle_annotate(report: RerankReport, instances: Mapping,
                    config: OracleConfig, seed: int = 0) -> list[AttentionMask]:
    """Masks derived from ground-truth relevance with noise and abstention.

    Each queried cell abstains (-1) with probability idk_rate, otherwise
    reports the relevance bit flipped with probability noise_rate. The time
    axis of a presented instance is always annotated in full (marking T
    per-step toggles is cheap next to judging feature cells), under the same
    noise process.
    """
    rng = np.random.default_rng(seed)
    masks = []
    for entry in report.entries:
        inst = instances[entry.instance_id]
        if inst.relevance is None or inst.relevance_time is None:
            raise PreconditionError(
                f"instance {entry.instance_id} lacks ground-truth relevance")
        T, D = inst.relevance.shape
        fm = np.full((T, D), -1, dtype=np.int8)
        tm = np.full(T, -1, dtype=np.int8)
        steps = list(range(T))
        if config.scope == "full-grid":
            cells = [(t, d) for t in range(T) for d in range(D)]
        else:
            cells = [(f.t, f.d) for f in entry.features]

        def answer(truth: int) -> int:
            u = rng.random()
            if u < config.idk_rate:
                return -1
            flip = rng.random() < config.noise_rate
            return int(1 - truth) if flip else int(truth)

        for t, d in cells:
            fm[t, d] = answer(int(inst.relevance[t, d]))
        for t in steps:
            tm[t] = answer(int(inst.relevance_time[t]))
        masks.append(AttentionMask(entry.instance_id, fm, tm))
    return masks


# -- rounds -------------------------------------------------------------------------

@dataclass
class CERConfig:
    P: int
    K: int
    F: int
    inst_scorer: str = "uncertainty"
    feat_scorer: str = "counterfactual"
    mc_samples: int = 30
    damping: float = 0.01
    weight_decay: float = 0.0


@dataclass
class RoundState:
    s: int = 0
    report: RerankReport | None = None
    pending: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    params_hash: str = ""


def run_round(state: RoundState, net: AttentionNetwork,
              nap: NeuralAttentionProcess, train_set: Dataset,
              valid_set: Dataset, eval_set: Dataset, store: AnnotationStore,
              params: ParamVector, cer_config: CERConfig,
              annotator: Annotator, adapt_config: AdaptConfig,
              seed: int = 0) -> tuple[RoundState, ParamVector]:
    """One interaction round; appends to ``store`` and returns the new state.

    Parameters change only when the incoming state is the pretrained round
    (the one-time adaptation); afterwards the digest must stay fixed.
    """
    s = state.s + 1
    ctx = ScoringContext(net=net, nap=nap, train_set=train_set,
                         valid_set=valid_set, store=store, params=params,
                         seed=seed, damping=cer_config.damping,
                         mc_samples=cer_config.mc_samples,
                         weight_decay=cer_config.weight_decay)
    report = rerank(ctx, cer_config.P, cer_config.K, cer_config.F,
                    cer_config.inst_scorer, cer_config.feat_scorer,
                    round_s=s, exclude_ids=store.instance_ids())
    train_index = train_set.by_id()
    masks = annotator(report, train_index)
    for mask in masks:
        store.append(s, mask)
    if s == 1:
        params, _ = adapt_train(nap, train_set, store, params, adapt_config,
                                valid_set=valid_set)
    context_instances = {i.id: i.x for i in train_set}
    metrics = evaluate_model(net, nap, params, store, eval_set,
                             net.config.task, context_instances)
    new_state = RoundState(s=s, report=report, pending=[],
                           metrics=metrics, params_hash=params.digest())
    return new_state, params


@dataclass
class ExperimentResult:
    metrics_by_round: list[dict] = field(default_factory=list)
    params_digests: list[str] = field(default_factory=list)
    reports: list[RerankReport] = field(default_factory=list)
    params: ParamVector | None = None
    store: AnnotationStore | None = None


def run_experiment(net: AttentionNetwork, train_set: Dataset,
                   valid_set: Dataset, eval_set: Dataset,
                   train_config: TrainConfig, adapt_config: AdaptConfig,
                   cer_config: CERConfig, oracle_config: OracleConfig,
                   rounds: int, seed: int = 0,
                   params: ParamVector | None = None) -> ExperimentResult:
    """Headless multi-round run with the simulated annotator.

    ``params`` may carry a pretrained checkpoint to share across arms; when
    omitted, pretraining runs first.
    """
    nap = NeuralAttentionProcess(net)
    if params is None:
        params, _ = pretrain(net, train_set, valid_set, train_config)
    store = AnnotationStore()
    context_instances = {i.id: i.x for i in train_set}
    result = ExperimentResult(params=params, store=store)
    result.metrics_by_round.append(
        evaluate_model(net, nap, params, store, eval_set, net.config.task,
                       context_instances))
    result.params_digests.append(params.digest())
    state = RoundState(s=0, params_hash=params.digest())
    train_index = train_set.by_id()
    for s in range(1, rounds + 1):
        def annotator(report, _index, _s=s):
            return oracle_annotate(report, train_index, oracle_config,
                                   seed=seed * 100_003 + _s)
        state, params = run_round(state, net, nap, train_set, valid_set,
                                  eval_set, store, params, cer_config,
                                  annotator, adapt_config, seed=seed * 7 + s)
        result.metrics_by_round.append(state.metrics)
        result.params_digests.append(state.params_hash)
        result.reports.append(state.report)
    result.params = params
    return result
