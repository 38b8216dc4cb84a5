"""Recurrent two-axis attention model for fixed-length time series.

The network embeds each timestep, runs two gated recurrent encoders, and
produces a simplex attention over timesteps (beta) plus a signed per-feature
attention in (-1, 1) (gamma). Predictions apply both attentions to the
embedded inputs and feed the weighted sum through an affine output head.

Attention heads accept an optional per-timestep latent summary ``z`` that is
concatenated to the recurrent state before the affine maps; passing no ``z``
is identical to conditioning on zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tt
from .errors import ShapeError, ValidationError
from .params import ParamVector
from .tensor import Tensor

TASKS = ("binary", "multiclass", "regression")


@dataclass(frozen=True)
class ModelConfig:
    T: int
    D: int
    L: int = 1
    task: str = "binary"
    hidden_beta: int = 32
    hidden_gamma: int = 32
    latent_dim: int = 16
    r_dim: int = 32
    cell: str = "gru"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if min(self.T, self.D, self.L) < 1:
            raise ValidationError("T, D, L must be positive")

    def to_dict(self) -> dict:
        return {
            "T": self.T, "D": self.D, "L": self.L, "task": self.task,
            "hidden_beta": self.hidden_beta, "hidden_gamma": self.hidden_gamma,
            "latent_dim": self.latent_dim, "r_dim": self.r_dim, "cell": self.cell,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in (
            "T", "D", "L", "task", "hidden_beta", "hidden_gamma",
            "latent_dim", "r_dim", "cell")})


@dataclass
class AttentionMap:
    """Attention for one instance (or a batch, with a leading axis).

    beta: (T,) or (B, T) on the probability simplex per row.
    gamma: (T, D) or (B, T, D), entries strictly inside (-1, 1).
    v: embedded inputs with the same shape as gamma.
    """
    beta: np.ndarray
    gamma: np.ndarray
    v: np.ndarray

    def validate(self, atol: float = 1e-6) -> None:
        ssum = self.beta.sum(axis=-1)
        if not np.all(np.abs(ssum - 1.0) <= atol):
            raise ValidationError("beta rows must sum to 1")
        if np.any(self.beta < 0):
            raise ValidationError("beta must be nonnegative")
        if np.any(np.abs(self.gamma) >= 1.0):
            raise ValidationError("gamma must lie strictly inside (-1, 1)")


def _gru_segments(prefix: str, in_dim: int, hidden: int, rng) -> dict[str, np.ndarray]:
    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(rows)

    seg = {}
    for gate in ("z", "r", "h"):
        seg[f"{prefix}.w_{gate}"] = mat(in_dim, hidden)
        seg[f"{prefix}.u_{gate}"] = mat(hidden, hidden)
        seg[f"{prefix}.b_{gate}"] = np.zeros(hidden)
    return seg


def run_gru(p: Mapping[str, Tensor], prefix: str, inputs: Sequence[Tensor],
            hidden: int) -> list[Tensor]:
    """Run a GRU over a list of (B, in_dim) steps; returns per-step states.

    The input-side projections of all steps and gates are fused into a
    single matmul (per-element dot products are unchanged, so results are
    bit-identical to the per-gate form).
    """
    T = len(inputs)
    B = inputs[0].shape[0]
    w_all = tt.concat([p[f"{prefix}.w_z"], p[f"{prefix}.w_r"],
                       p[f"{prefix}.w_h"]], axis=1)
    b_all = tt.concat([p[f"{prefix}.b_z"], p[f"{prefix}.b_r"],
                       p[f"{prefix}.b_h"]], axis=0)
    pre = tt.concat(list(inputs), axis=0) @ w_all + b_all  # (T*B, 3H)

    h = Tensor(np.zeros((B, hidden)))
    states = []
    for t in range(T):
        row = tt.narrow(pre, 0, t * B, B)
        zg = tt.sigmoid(tt.narrow(row, 1, 0, hidden)
                        + h @ p[f"{prefix}.u_z"])
        rg = tt.sigmoid(tt.narrow(row, 1, hidden, hidden)
                        + h @ p[f"{prefix}.u_r"])
        cand = tt.tanh(tt.narrow(row, 1, 2 * hidden, hidden)
                       + (rg * h) @ p[f"{prefix}.u_h"])
        h = (Tensor(1.0) - zg) * h + zg * cand
        states.append(h)
    return states


class AttentionNetwork:
    """Stateless forward passes; parameters travel as explicit mappings."""

    def __init__(self, config: ModelConfig):
        self.config = config

    # -- parameters ------------------------------------------------------------
    def init_params(self, seed: int = 0) -> ParamVector:
        cfg = self.config
        rng = np.random.default_rng(seed)
        seg: dict[str, np.ndarray] = {}
        # near-identity embedding keeps v_d tied to feature d at init, which
        # the per-cell attention semantics (and contribution grids) lean on
        seg["emb.w"] = np.eye(cfg.D) \
            + 0.1 * rng.standard_normal((cfg.D, cfg.D)) / np.sqrt(cfg.D)
        seg.update(_gru_segments("rnn_beta", cfg.D, cfg.hidden_beta, rng))
        seg.update(_gru_segments("rnn_gamma", cfg.D, cfg.hidden_gamma, rng))
        hb = cfg.hidden_beta + cfg.latent_dim
        hg = cfg.hidden_gamma + cfg.latent_dim
        seg["head_beta.w"] = rng.standard_normal((hb, 1)) / np.sqrt(hb)
        seg["head_beta.b"] = np.zeros(1)
        seg["head_gamma.w"] = rng.standard_normal((hg, cfg.D)) / np.sqrt(hg)
        # the annotation-conditioning pathway starts inert: with zero latent
        # columns the pretrained model is exactly the unconditioned model,
        # and the adaptation round learns the modulation from zero
        seg["head_beta.w"][cfg.hidden_beta:] = 0.0
        seg["head_gamma.w"][cfg.hidden_gamma:] = 0.0
        # open the feature gate at init (gamma ~ 0.5): with gamma near zero no
        # signal reaches the output head and training stalls on a plateau
        seg["head_gamma.b"] = np.full(cfg.D, np.arctanh(0.5))
        seg["out.w"] = rng.standard_normal((cfg.D, cfg.L)) / np.sqrt(cfg.D)
        seg["out.b"] = np.zeros(cfg.L)
        # annotation encoder: consumes [v, feature_mask, time_mask] per step
        enc_in = 2 * cfg.D + 1
        seg.update(_gru_segments("nap_rnn", enc_in, cfg.r_dim, rng))
        seg["latent_mu.w"] = rng.standard_normal((cfg.r_dim, cfg.latent_dim)) / np.sqrt(cfg.r_dim)
        seg["latent_mu.b"] = np.zeros(cfg.latent_dim)
        seg["latent_sigma.w"] = rng.standard_normal((cfg.r_dim, cfg.latent_dim)) / np.sqrt(cfg.r_dim)
        # softplus(b) == 1 at init so an untrained scale head matches the prior
        seg["latent_sigma.b"] = np.full(cfg.latent_dim, float(np.log(np.e - 1.0)))
        return ParamVector(seg, validate=False)

    def base_segments(self) -> list[str]:
        """Segments trained during pretraining (no annotation machinery)."""
        drop = ("nap_rnn.", "latent_mu.", "latent_sigma.")
        return [n for n in self._segment_names() if not n.startswith(drop)]

    def _segment_names(self) -> list[str]:
        return self.init_params(seed=0).names

    # -- input plumbing -----------------------------------------------------------
    def check_inputs(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != cfg.T or x.shape[2] != cfg.D:
            raise ShapeError(f"expected (B, {cfg.T}, {cfg.D}) inputs, got {x.shape}")
        return x

    def _steps(self, x: np.ndarray) -> list[Tensor]:
        return [Tensor(np.ascontiguousarray(x[:, t, :])) for t in range(self.config.T)]

    @staticmethod
    def _z_step(z, t: int, B: int) -> Tensor:
        """Latent row for timestep t, broadcast across the batch."""
        if isinstance(z, Tensor):
            if z.ndim == 2:
                return tt.broadcast_to(tt.narrow(z, 0, t, 1), (B, z.shape[1]))
            return tt.narrow(z, 1, t, 1).reshape(B, z.shape[2])
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            return Tensor(np.broadcast_to(z[t], (B, z.shape[1])))
        return Tensor(np.ascontiguousarray(z[:, t, :]))

    # -- forward pieces -------------------------------------------------------------
    def embed_steps(self, steps: Sequence[Tensor], p: Mapping[str, Tensor]) -> list[Tensor]:
        return [s @ p["emb.w"] for s in steps]

    def embed_inputs(self, x: np.ndarray, params: ParamVector) -> np.ndarray:
        """Per-timestep linear embedding; output dimension equals D."""
        squeeze = np.asarray(x).ndim == 2
        x = self.check_inputs(x)
        with tt.no_grad():
            p = params.as_tensors()
            v = self.embed_steps(self._steps(x), p)
        out = np.stack([s.data for s in v], axis=1)
        return out[0] if squeeze else out

    def attention_core(self, steps: Sequence[Tensor], p: Mapping[str, Tensor],
                       z=None) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        """Returns (beta (B,T), gammas per-step list of (B,D), v per-step list)."""
        cfg = self.config
        B = steps[0].shape[0]
        v = self.embed_steps(steps, p)
        o = run_gru(p, "rnn_beta", v, cfg.hidden_beta)
        h = run_gru(p, "rnn_gamma", v, cfg.hidden_gamma)
        if z is None:
            z = np.zeros((cfg.T, cfg.latent_dim))
        logits = []
        gammas = []
        for t in range(cfg.T):
            z_t = self._z_step(z, t, B)
            ob = tt.concat([o[t], z_t], axis=1)
            hb = tt.concat([h[t], z_t], axis=1)
            logits.append(ob @ p["head_beta.w"] + p["head_beta.b"])
            gammas.append(tt.tanh(hb @ p["head_gamma.w"] + p["head_gamma.b"]))
        beta = tt.softmax(tt.concat(logits, axis=1), axis=1)
        return beta, gammas, v

    def forward_attention(self, x: np.ndarray, params: ParamVector,
                          z: np.ndarray | None = None) -> AttentionMap:
        squeeze = np.asarray(x).ndim == 2
        x = self.check_inputs(x)
        self._check_z(z)
        with tt.no_grad():
            p = params.as_tensors()
            beta, gammas, v = self.attention_core(self._steps(x), p, z)
        gamma = np.stack([g.data for g in gammas], axis=1)
        vv = np.stack([s.data for s in v], axis=1)
        if squeeze:
            return AttentionMap(beta=beta.data[0], gamma=gamma[0], v=vv[0])
        return AttentionMap(beta=beta.data, gamma=gamma, v=vv)

    def _check_z(self, z) -> None:
        if z is None:
            return
        cfg = self.config
        z = np.asarray(z)
        if z.shape[-2:] != (cfg.T, cfg.latent_dim) and z.shape != (cfg.T, cfg.latent_dim):
            raise ShapeError(
                f"z must end in ({cfg.T}, {cfg.latent_dim}), got {z.shape}")

    def context_core(self, beta: Tensor, gammas: Sequence[Tensor],
                     v: Sequence[Tensor],
                     off: Iterable[tuple[int, int]] = ()) -> Tensor:
        """Weighted sum over timesteps with optional attention knockouts."""
        cfg = self.config
        off_by_t: dict[int, set[int]] = {}
        for t, d in off:
            if not (0 <= t < cfg.T and 0 <= d < cfg.D):
                raise ValidationError(f"override cell ({t}, {d}) out of range")
            off_by_t.setdefault(t, set()).add(d)
        ctx = None
        for t in range(cfg.T):
            g = gammas[t]
            if t in off_by_t:
                keep = np.ones(cfg.D)
                keep[sorted(off_by_t[t])] = 0.0
                g = g * Tensor(keep)
            b_t = tt.narrow(beta, 1, t, 1)  # (B, 1)
            term = b_t * (g * v[t])
            ctx = term if ctx is None else ctx + term
        return ctx

    def head(self, ctx: Tensor, p: Mapping[str, Tensor]) -> Tensor:
        logits = ctx @ p["out.w"] + p["out.b"]
        task = self.config.task
        if task == "binary":
            return tt.sigmoid(logits)
        if task == "multiclass":
            return tt.softmax(logits, axis=1)
        return logits

    def predict_core(self, steps, p, z=None, off=()) -> Tensor:
        beta, gammas, v = self.attention_core(steps, p, z)
        return self.head(self.context_core(beta, gammas, v, off), p)

    def predict_with_override(self, x: np.ndarray, params: ParamVector,
                              off: Iterable[tuple[int, int]] = (),
                              z: np.ndarray | None = None) -> np.ndarray:
        """Prediction with the gamma attention forced to zero on ``off`` cells."""
        squeeze = np.asarray(x).ndim == 2
        x = self.check_inputs(x)
        self._check_z(z)
        with tt.no_grad():
            out = self.predict_core(self._steps(x), params.as_tensors(), z, tuple(off))
        return out.data[0] if squeeze else out.data

    def predict(self, x: np.ndarray, params: ParamVector,
                z: np.ndarray | None = None) -> np.ndarray:
        return self.predict_with_override(x, params, (), z)

    # -- contribution ------------------------------------------------------------
    CONTRIBUTION_SCHEME = "linear-decomposition/v1"

    def contribution(self, x: np.ndarray, params: ParamVector,
                     z: np.ndarray | None = None,
                     target_class: int | None = None,
                     off: Iterable[tuple[int, int]] = ()) -> np.ndarray:
        """Per-cell additive share of the output pre-activation.

        Scheme ``linear-decomposition/v1``: cell (t, d) contributes
        beta[t] * gamma[t, d] * v[t, d] * out.w[d, l]; the cells plus the
        output bias reconstruct the logit exactly for the affine head. This
        is the natural decomposition available because the embedding keeps
        dimension d aligned with input feature d.

        Returns (T, D) for L == 1 or a chosen target class, else (T, D, L).
        Batched input returns a leading batch axis.
        """
        squeeze = np.asarray(x).ndim == 2
        x = self.check_inputs(x)
        attn = self.forward_attention(x, params, z)
        beta = attn.beta.reshape(x.shape[0], self.config.T)
        gamma = attn.gamma.reshape(x.shape[0], self.config.T, self.config.D).copy()
        v = attn.v.reshape(gamma.shape)
        for t, d in off:
            gamma[:, t, d] = 0.0
        w = params["out.w"]  # (D, L)
        grid = beta[:, :, None, None] * gamma[:, :, :, None] * v[:, :, :, None] \
            * w[None, None, :, :]
        if self.config.L == 1:
            grid = grid[..., 0]
        elif target_class is not None:
            grid = grid[..., target_class]
        return grid[0] if squeeze else grid

    # -- losses ------------------------------------------------------------------
    def check_labels(self, y: np.ndarray) -> np.ndarray:
        cfg = self.config
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None] if cfg.L == 1 else y
        if y.ndim != 2 or y.shape[1] != cfg.L:
            raise ShapeError(f"expected (B, {cfg.L}) labels, got {y.shape}")
        if cfg.task == "binary" and not np.all(np.isin(y, (0.0, 1.0))):
            raise ValidationError("binary labels must be 0/1")
        if cfg.task == "multiclass":
            ok = np.all(np.isin(y, (0.0, 1.0))) and np.allclose(y.sum(axis=1), 1.0)
            if not ok:
                raise ValidationError("multiclass labels must be one-hot")
        return y

    def task_loss(self, y_hat: Tensor, y: np.ndarray) -> Tensor:
        """Mean per-instance loss: CE for classification, MSE for regression."""
        task = self.config.task
        yt = Tensor(self.check_labels(y))
        if task == "binary":
            p = tt.clip(y_hat, 1e-7, 1 - 1e-7)
            per = -(yt * tt.log(p) + (Tensor(1.0) - yt) * tt.log(Tensor(1.0) - p))
            return per.sum() * Tensor(1.0 / yt.shape[0])
        if task == "multiclass":
            p = tt.clip(y_hat, 1e-7, 1.0)
            return -(yt * tt.log(p)).sum() * Tensor(1.0 / yt.shape[0])
        return tt.square(y_hat - yt).sum() * Tensor(1.0 / yt.data.size)

    def batch_loss(self, p: Mapping[str, Tensor], batch, z=None) -> Tensor:
        """Task loss of a (x, y) array batch under optional conditioning."""
        x, y = batch
        x = self.check_inputs(x)
        return self.task_loss(self.predict_core(self._steps(x), p, z), y)


def weight_decay_penalty(p: Mapping[str, Tensor], coeff: float,
                         segments: Iterable[str] | None = None) -> Tensor:
    total = Tensor(0.0)
    if coeff == 0.0:
        return total
    names = list(segments) if segments is not None else list(p)
    for name in names:
        total = total + tt.square(p[name]).sum()
    return Tensor(coeff) * total
