"""Single-process annotation service: queue, masks, what-if, round control.

A thin veneer over the library: every numeric in a response comes from the
model/scoring modules under the session's frozen (params, store) snapshot.
Mutations (advance, submit) are serialized by one lock; long jobs (rerank,
adaptation) run on a background thread with a pollable status.
"""

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, annotation_append, mask_to_sparse, sparse_to_mask
from .errors import AttnLoopError, DuplicateError, ValidationError
from .loop import evaluate_model
from .model import AttentionNetwork
from .nap import (AdaptConfig, AnnotationStore, AttentionMask,
                  NeuralAttentionProcess, adapt_train)
from .params import ParamVector
from .rerank import ScoringContext, rerank

SCHEMA = "gateway/v1"


class ConflictError(AttnLoopError):
    """The request is valid but the session is in the wrong state (409)."""


class NotFoundError(AttnLoopError):
    """The referenced instance or resource does not exist (404)."""


@dataclass
class QueueEntry:
    instance_id: str
    rank: int
    score: float
    scorer: str
    features: list[tuple[int, int, float]]
    status: str = "pending"  # pending | done
    payload: dict = field(default_factory=dict)


class AnnotationSession:
    """Engine state shared by the HTTP endpoints and the interactive CLI."""

    def __init__(self, net: AttentionNetwork, train_set: Dataset,
                 valid_set: Dataset, eval_set: Dataset, params: ParamVector,
                 store: AnnotationStore | None = None,
                 store_path: str | None = None,
                 adapt_config: AdaptConfig | None = None,
                 start_round: int = 0, seed: int = 0,
                 cer_defaults: dict | None = None):
        self.net = net
        self.nap = NeuralAttentionProcess(net)
        self.train_set = train_set
        self.valid_set = valid_set
        self.eval_set = eval_set
        self.params = params
        self.store = store if store is not None else AnnotationStore()
        self.store_path = store_path
        self.adapt_config = adapt_config or AdaptConfig(seed=seed)
        self.seed = seed
        self.cer_defaults = cer_defaults or {}

        self.round = max([start_round, *self.store.rounds()]) \
            if len(self.store) else start_round
        self.state = "idle"  # idle | reranking | open | adapting | error
        self.error: str | None = None
        self.queue: list[QueueEntry] = []
        self.report = None
        self.metrics_records: list[dict] = []
        self._lock = threading.RLock()
        self._adapted = self.round >= 1

    # -- helpers ------------------------------------------------------------------
    def _instances(self) -> dict[str, np.ndarray]:
        return {i.id: i.x for i in self.train_set}

    def _mean_z(self) -> np.ndarray:
        summary = self.nap.summary_from_store(self._instances(), self.store,
                                              self.params, mode="mean")
        return summary.z

    def _instance_payload(self, inst, z, features: Sequence, scorer: str) -> dict:
        attn = self.net.forward_attention(inst.x, self.params, z=z)
        pred = self.net.predict(inst.x, self.params, z=z)
        contrib = self.net.contribution(inst.x, self.params, z=z)
        return {
            "instance_id": inst.id,
            "x": inst.x.tolist(),
            "y": inst.y.tolist(),
            "prediction": pred.tolist(),
            "contribution": np.asarray(contrib).tolist(),
            "attention": {"beta": attn.beta.tolist(),
                          "gamma": attn.gamma.tolist()},
            "features": [[int(t), int(d), float(s), scorer]
                         for t, d, s in features],
        }

    # -- round control -------------------------------------------------------------
    def advance_round(self, P: int, K: int, F: int,
                      inst_scorer: str = "uncertainty",
                      feat_scorer: str = "counterfactual",
                      block: bool = False) -> dict:
        with self._lock:
            if self.state in ("reranking", "open", "adapting"):
                raise ConflictError(f"cannot advance while {self.state}")
            self.state = "reranking"
            self.error = None
            target_round = self.round + 1

        def job():
            try:
                ctx = ScoringContext(
                    net=self.net, nap=self.nap, train_set=self.train_set,
                    valid_set=self.valid_set, store=self.store,
                    params=self.params,
                    seed=self.seed * 7 + target_round,
                    **self.cer_defaults)
                report = rerank(ctx, P, K, F, inst_scorer, feat_scorer,
                                round_s=target_round,
                                exclude_ids=self.store.instance_ids())
                z = self._mean_z()
                index = self.train_set.by_id()
                entries = []
                for rank, e in enumerate(report.entries):
                    feats = [(f.t, f.d, f.score) for f in e.features]
                    entries.append(QueueEntry(
                        instance_id=e.instance_id, rank=rank, score=e.score,
                        scorer=feat_scorer, features=feats,
                        payload=self._instance_payload(
                            index[e.instance_id], z, feats, feat_scorer)))
                with self._lock:
                    self.report = report
                    self.queue = entries
                    self.state = "open"
            except Exception as exc:  # surfaced via /api/round/status
                with self._lock:
                    self.state = "error"
                    self.error = str(exc)

        if block:
            job()
        else:
            threading.Thread(target=job, daemon=True).start()
        return {"round": target_round, "state": "reranking"}

    def _close_round(self, block: bool) -> None:
        """All masks are in: bump the round, adapt once, record metrics."""
        target_round = self.round + 1

        def job():
            try:
                if target_round == 1 and not self._adapted:
                    with self._lock:
                        self.state = "adapting"
                    new_params, _ = adapt_train(
                        self.nap, self.train_set, self.store, self.params,
                        self.adapt_config, valid_set=self.valid_set)
                    self.params = new_params
                    self._adapted = True
                metrics = evaluate_model(
                    self.net, self.nap, self.params, self.store,
                    self.eval_set, self.net.config.task, self._instances())
                with self._lock:
                    self.round = target_round
                    self.metrics_records.append(
                        {"schema": "metrics/v1", "round": target_round,
                         **metrics})
                    self.state = "idle"
            except Exception as exc:
                with self._lock:
                    self.state = "error"
                    self.error = str(exc)

        if block:
            job()
        else:
            threading.Thread(target=job, daemon=True).start()

    def status(self) -> dict:
        with self._lock:
            done = sum(1 for e in self.queue if e.status == "done")
            return {"schema": SCHEMA, "state": self.state,
                    "round": self.round,
                    "open_round": self.round + 1 if self.state == "open" else None,
                    "queue_done": done, "queue_total": len(self.queue),
                    "params_digest": self.params.digest(),
                    "store_size": len(self.store),
                    "error": self.error}

    # -- reads ------------------------------------------------------------------------
    def get_queue(self) -> list[dict]:
        with self._lock:
            if self.state not in ("open",):
                raise ConflictError("no open round")
            return [{"instance_id": e.instance_id, "rank": e.rank,
                     "score": e.score, "status": e.status,
                     **e.payload} for e in self.queue]

    def instance_payload(self, instance_id: str) -> dict:
        index = self.train_set.by_id()
        if instance_id not in index:
            raise NotFoundError(f"unknown instance {instance_id!r}")
        with self._lock:
            for e in self.queue:
                if e.instance_id == instance_id and self.state == "open":
                    return dict(e.payload, status=e.status)
            z = self._mean_z()
            return self._instance_payload(index[instance_id], z, [], "none")

    # -- mutations ---------------------------------------------------------------------
    def submit_annotation(self, instance_id: str, feature_sparse, time_sparse,
                          block: bool = False) -> dict:
        cfg = self.net.config
        with self._lock:
            if self.state != "open":
                raise ConflictError("no open round accepting annotations")
            entry = next((e for e in self.queue
                          if e.instance_id == instance_id), None)
            if entry is None:
                raise NotFoundError(
                    f"instance {instance_id!r} is not in the open round")
            if entry.status == "done":
                raise DuplicateError(
                    f"instance {instance_id!r} already annotated this round")
            feature_mask = sparse_to_mask(feature_sparse, (cfg.T, cfg.D))
            time_mask = sparse_to_mask(time_sparse, (cfg.T,))
            mask = AttentionMask(instance_id, feature_mask, time_mask)
            round_s = self.round + 1
            self.store.append(round_s, mask)
            if self.store_path:
                annotation_append(self.store_path, instance_id, round_s,
                                  feature_mask, time_mask, annotator="ui")
            entry.status = "done"
            remaining = sum(1 for e in self.queue if e.status == "pending")
            if remaining == 0:
                self.state = "closing"
        if remaining == 0:
            self._close_round(block=block)
        return {"schema": SCHEMA, "instance_id": instance_id,
                "round": self.round + 1, "remaining": remaining,
                "store_size": len(self.store)}

    # -- counterfactual ----------------------------------------------------------------
    def whatif(self, instance_id: str, off: Sequence[Sequence[int]]) -> dict:
        index = self.train_set.by_id()
        if instance_id not in index:
            raise NotFoundError(f"unknown instance {instance_id!r}")
        cfg = self.net.config
        cells = []
        for pair in off:
            t, d = int(pair[0]), int(pair[1])
            if not (0 <= t < cfg.T and 0 <= d < cfg.D):
                raise ValidationError(f"cell ({t}, {d}) out of range")
            cells.append((t, d))
        inst = index[instance_id]
        z = self._mean_z()
        y_base = self.net.predict(inst.x, self.params, z=z)
        y_cf = self.net.predict_with_override(inst.x, self.params, cells, z=z)
        contrib_base = self.net.contribution(inst.x, self.params, z=z)
        contrib_cf = self.net.contribution(inst.x, self.params, z=z, off=cells)
        delta = y_base - y_cf
        return {"schema": SCHEMA, "instance_id": instance_id,
                "off": [[t, d] for t, d in cells],
                "y_base": y_base.tolist(), "y_cf": y_cf.tolist(),
                "delta": delta.tolist(),
                "delta_norm": float(np.linalg.norm(delta)),
                "contribution_delta":
                    (np.asarray(contrib_base) - np.asarray(contrib_cf)).tolist()}

    def metrics(self) -> list[dict]:
        with self._lock:
            return list(self.metrics_records)


def create_app(session: AnnotationSession):
    """FastAPI wiring; every handler delegates to the session."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import JSONResponse
    from pydantic import BaseModel

    app = FastAPI(title="attnloop annotation gateway")

    class AdvanceBody(BaseModel):
        P: int
        K: int
        F: int
        inst_scorer: str = "uncertainty"
        feat_scorer: str = "counterfactual"

    class AnnotationBody(BaseModel):
        instance_id: str
        feature_mask: list[list[int]] = []
        time_mask: list[list[int]] = []

    class WhatifBody(BaseModel):
        instance_id: str
        off: list[list[int]] = []

    def _wrap(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConflictError as exc:
            raise HTTPException(409, str(exc))
        except NotFoundError as exc:
            raise HTTPException(404, str(exc))
        except DuplicateError as exc:
            raise HTTPException(409, str(exc))
        except (ValidationError, ValueError) as exc:
            raise HTTPException(422, str(exc))

    @app.get("/api/round")
    def get_round():
        return session.status()

    @app.post("/api/round/advance")
    def advance(body: AdvanceBody):
        out = _wrap(session.advance_round, body.P, body.K, body.F,
                    body.inst_scorer, body.feat_scorer)
        return JSONResponse({"schema": SCHEMA, **out}, status_code=202)

    @app.get("/api/round/status")
    def round_status():
        return session.status()

    @app.get("/api/queue")
    def queue():
        return {"schema": SCHEMA, "entries": _wrap(session.get_queue)}

    @app.get("/api/instances/{instance_id}")
    def instance(instance_id: str):
        return {"schema": SCHEMA,
                **_wrap(session.instance_payload, instance_id)}

    @app.post("/api/annotations")
    def submit(body: AnnotationBody):
        return _wrap(session.submit_annotation, body.instance_id,
                     body.feature_mask, body.time_mask)

    @app.post("/api/whatif")
    def whatif(body: WhatifBody):
        return _wrap(session.whatif, body.instance_id, body.off)

    @app.get("/api/metrics")
    def metrics():
        return {"schema": SCHEMA, "records": session.metrics()}

    return app
