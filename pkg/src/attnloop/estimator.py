"""Scikit-learn style front door for the interactive attention model.

``InteractiveAttentionEstimator`` wraps pretraining behind ``fit`` and
conditioned inference behind ``predict``/``predict_proba``, so the model
drops into sklearn pipelines and model-selection tooling. The interactive
machinery (annotation stores, adaptation, reranking) remains available
through ``condition_on``/``adapt`` and the library modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Dataset, TimeSeriesInstance
from .loop import TrainConfig, auroc, pretrain
from .model import AttentionNetwork, ModelConfig
from .nap import AdaptConfig, AnnotationStore, NeuralAttentionProcess, adapt_train
from .validation import check_label_array, check_series_array


class InteractiveAttentionEstimator(BaseEstimator):
    """Recurrent two-axis attention predictor with annotation conditioning.

    Parameters follow sklearn conventions: everything configurable sits in
    ``__init__`` with defaults, so ``get_params``/``set_params``/``clone``
    work out of the box.
    """

    def __init__(self, task: str = "binary", hidden_beta: int = 32,
                 hidden_gamma: int = 32, latent_dim: int = 16, r_dim: int = 32,
                 epochs: int = 200, patience: int = 10, batch_size: int = 32,
                 lr: float = 1e-3, weight_decay: float = 1e-4,
                 validation_fraction: float = 0.1, random_state: int = 0):
        self.task = task
        self.hidden_beta = hidden_beta
        self.hidden_gamma = hidden_gamma
        self.latent_dim = latent_dim
        self.r_dim = r_dim
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    # -- fitting ------------------------------------------------------------------
    def fit(self, X, y, validation_data: tuple | None = None):
        X = check_series_array(X)
        y = check_label_array(y, self.task, X.shape[0])
        self.net_ = AttentionNetwork(ModelConfig(
            T=X.shape[1], D=X.shape[2], L=y.shape[1], task=self.task,
            hidden_beta=self.hidden_beta, hidden_gamma=self.hidden_gamma,
            latent_dim=self.latent_dim, r_dim=self.r_dim))
        self.nap_ = NeuralAttentionProcess(self.net_)

        if validation_data is not None:
            Xv = check_series_array(validation_data[0], X.shape[1], X.shape[2])
            yv = check_label_array(validation_data[1], self.task, Xv.shape[0],
                                   y.shape[1])
            X_tr, y_tr = X, y
        else:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(X.shape[0])
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            val_idx, tr_idx = order[:n_val], order[n_val:]
            X_tr, y_tr = X[tr_idx], y[tr_idx]
            Xv, yv = X[val_idx], y[val_idx]

        train_set = _as_dataset(X_tr, y_tr, prefix="train")
        valid_set = _as_dataset(Xv, yv, prefix="valid")
        config = TrainConfig(epochs=self.epochs, patience=self.patience,
                             batch_size=self.batch_size, lr=self.lr,
                             weight_decay=self.weight_decay,
                             seed=self.random_state)
        self.params_, self.train_log_ = pretrain(self.net_, train_set,
                                                 valid_set, config)
        self.train_set_ = train_set
        self.store_ = AnnotationStore()
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before using the estimator")

    def _z(self):
        instances = {i.id: i.x for i in self.train_set_}
        return self.nap_.summary_from_store(instances, self.store_,
                                            self.params_, mode="mean").z

    # -- inference ----------------------------------------------------------------
    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        cfg = self.net_.config
        X = check_series_array(X, cfg.T, cfg.D)
        if self.task == "regression":
            raise ValueError("predict_proba is undefined for regression")
        probs = self.net_.predict(X, self.params_, z=self._z())
        if self.task == "binary":
            return np.hstack([1 - probs, probs])
        return probs

    def predict(self, X) -> np.ndarray:
        self._require_fitted()
        cfg = self.net_.config
        X = check_series_array(X, cfg.T, cfg.D)
        out = self.net_.predict(X, self.params_, z=self._z())
        if self.task == "binary":
            return (out[:, 0] > 0.5).astype(float)
        if self.task == "multiclass":
            return out.argmax(axis=1).astype(float)
        return out

    def attention(self, X):
        """(beta, gamma) under the current annotation conditioning."""
        self._require_fitted()
        cfg = self.net_.config
        X = check_series_array(X, cfg.T, cfg.D)
        attn = self.net_.forward_attention(X, self.params_, z=self._z())
        return attn.beta, attn.gamma

    def score(self, X, y) -> float:
        """AUROC (binary), accuracy (multiclass), or negative MAPE."""
        self._require_fitted()
        y = check_label_array(y, self.task, np.asarray(X).shape[0])
        if self.task == "binary":
            return auroc(y[:, 0], self.predict_proba(X)[:, 1])
        if self.task == "multiclass":
            return float((self.predict(X) == y.argmax(axis=1)).mean())
        preds = self.predict(X)
        denom = np.maximum(np.abs(y), 1e-8)
        return -float((np.abs(preds - y) / denom).mean())

    # -- interactive hooks -------------------------------------------------------------
    def condition_on(self, store: AnnotationStore):
        """Swap in an annotation store; no parameters change."""
        self._require_fitted()
        self.store_ = store
        return self

    def adapt(self, store: AnnotationStore, steps: int = 300,
              lr: float = 1e-3) -> "InteractiveAttentionEstimator":
        """One-time adaptation training on collected annotations."""
        self._require_fitted()
        config = AdaptConfig(steps=steps, lr=lr, seed=self.random_state,
                             weight_decay=self.weight_decay)
        self.params_, self.adapt_log_ = adapt_train(
            self.nap_, self.train_set_, store, self.params_, config)
        self.store_ = store
        return self


def _as_dataset(X: np.ndarray, y: np.ndarray, prefix: str) -> Dataset:
    return Dataset([TimeSeriesInstance(id=f"{prefix}-{i:05d}", x=X[i], y=y[i])
                    for i in range(X.shape[0])])
