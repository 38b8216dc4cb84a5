"""Latent annotation summaries that recondition attention without retraining.

Ternary masks collected from annotators are encoded per instance by a
recurrent encoder, averaged per timestep into a permutation-invariant
summary, and mapped to a per-timestep Gaussian latent. The latent rides
along as an extra input to the attention heads, so appending a mask changes
the generated attention while every parameter stays frozen.

One round of adaptation training teaches the network to consume the latent;
after that, new annotations act through the summary alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tt
from .errors import (DuplicateError, EmptyContextError, MissingInstanceError,
                     NonFiniteError, PreconditionError, ValidationError)
from .model import AttentionMap, AttentionNetwork, run_gru, weight_decay_penalty
from .optim import Adam
from .params import ParamVector
from .tensor import Tensor


@dataclass
class AttentionMask:
    """Ternary grid over (t, d) plus a ternary time-axis vector.

    1 = attend, 0 = do not attend, -1 = no annotation for that cell.
    """
    instance_id: str
    feature_mask: np.ndarray  # (T, D) int8
    time_mask: np.ndarray     # (T,) int8

    def __post_init__(self):
        self.feature_mask = np.asarray(self.feature_mask, dtype=np.int8)
        self.time_mask = np.asarray(self.time_mask, dtype=np.int8)
        for grid in (self.feature_mask, self.time_mask):
            if not np.all(np.isin(grid, (-1, 0, 1))):
                raise ValidationError("mask values must be in {-1, 0, 1}")
        if self.feature_mask.ndim != 2 or self.time_mask.ndim != 1:
            raise ValidationError("feature_mask must be 2-D, time_mask 1-D")
        if self.feature_mask.shape[0] != self.time_mask.shape[0]:
            raise ValidationError("mask time axes disagree")


class AnnotationStore:
    """Append-only collection of (round, mask) pairs."""

    def __init__(self, entries: Iterable[tuple[int, AttentionMask]] = ()):
        self._entries: list[tuple[int, AttentionMask]] = []
        for round_s, mask in entries:
            self.append(round_s, mask)

    def append(self, round_s: int, mask: AttentionMask) -> None:
        for r, m in self._entries:
            if r == round_s and m.instance_id == mask.instance_id:
                raise DuplicateError(
                    f"instance {mask.instance_id} already annotated in round {round_s}")
        self._entries.append((round_s, mask))

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def masks(self) -> list[AttentionMask]:
        return [m for _, m in self._entries]

    def rounds(self) -> list[int]:
        return sorted({r for r, _ in self._entries})

    def for_round(self, round_s: int) -> list[AttentionMask]:
        return [m for r, m in self._entries if r == round_s]

    def instance_ids(self) -> list[str]:
        return [m.instance_id for _, m in self._entries]

    def subset(self, indices: Iterable[int]) -> "AnnotationStore":
        picked = [self._entries[i] for i in indices]
        out = AnnotationStore()
        out._entries = list(picked)
        return out

    def copy(self) -> "AnnotationStore":
        out = AnnotationStore()
        out._entries = list(self._entries)
        return out


@dataclass
class LatentSummary:
    """Per-timestep Gaussian over the annotation summary.

    ``z`` holds the realization actually used for conditioning; in
    deterministic (mean) mode it equals ``mu``. ``context_size`` records how
    many masks were summarized (0 = prior).
    """
    mu: np.ndarray      # (T, d_z)
    sigma: np.ndarray   # (T, d_z), strictly positive
    z: np.ndarray       # (T, d_z)
    context_size: int

    def __post_init__(self):
        if np.any(self.sigma <= 0):
            raise ValidationError("sigma must be strictly positive")


class NeuralAttentionProcess:
    """Encoder + summarizer + latent heads around an attention network."""

    def __init__(self, net: AttentionNetwork):
        self.net = net
        self.config = net.config

    # -- encoding -------------------------------------------------------------
    def _mask_steps(self, masks: Sequence[AttentionMask]) -> list[np.ndarray]:
        """Per-timestep [feature_mask | time_mask] blocks, fed as-is."""
        cfg = self.config
        fm = np.stack([m.feature_mask for m in masks]).astype(np.float64)
        tm = np.stack([m.time_mask for m in masks]).astype(np.float64)
        return [np.concatenate([fm[:, t, :], tm[:, t:t + 1]], axis=1)
                for t in range(cfg.T)]

    def encode_core(self, x: np.ndarray, masks: Sequence[AttentionMask],
                    p: Mapping[str, Tensor]) -> list[Tensor]:
        """Per-timestep encodings (K, r_dim) of annotated instances."""
        steps = self.net._steps(x)
        v = self.net.embed_steps(steps, p)
        mask_steps = self._mask_steps(masks)
        enc_in = [tt.concat([v[t], Tensor(mask_steps[t])], axis=1)
                  for t in range(self.config.T)]
        return run_gru(p, "nap_rnn", enc_in, self.config.r_dim)

    def _gather_x(self, instances: Mapping[str, np.ndarray],
                  masks: Sequence[AttentionMask]) -> np.ndarray:
        rows = []
        for m in masks:
            if m.instance_id not in instances:
                raise MissingInstanceError(f"unknown instance {m.instance_id!r}")
            rows.append(np.asarray(instances[m.instance_id], dtype=np.float64))
        return np.stack(rows)

    def encode_annotations(self, instances: Mapping[str, np.ndarray],
                           masks: Sequence[AttentionMask],
                           params: ParamVector) -> np.ndarray:
        """(K, T, r_dim) intermediate representations, one row per mask."""
        if len(masks) < 1:
            raise PreconditionError("need at least one mask")
        x = self._gather_x(instances, masks)
        with tt.no_grad():
            r = self.encode_core(x, masks, params.as_tensors())
        return np.stack([step.data for step in r], axis=1)

    # -- summary --------------------------------------------------------------------
    @staticmethod
    def summarize(r: np.ndarray) -> np.ndarray:
        """Arithmetic mean over the annotation axis, per timestep."""
        r = np.asarray(r, dtype=np.float64)
        if r.ndim != 3 or r.shape[0] < 1:
            raise EmptyContextError("summarize needs at least one encoded mask")
        return r.mean(axis=0)

    def latent_params(self, r_bar: np.ndarray | None,
                      params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma); the standard-Gaussian prior when no context exists."""
        cfg = self.config
        if r_bar is None:
            shape = (cfg.T, cfg.latent_dim)
            return np.zeros(shape), np.ones(shape)
        with tt.no_grad():
            mu, sigma = self.latent_core(Tensor(r_bar), params.as_tensors())
        return mu.data, sigma.data

    @staticmethod
    def latent_core(r_bar: Tensor, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
        mu = r_bar @ p["latent_mu.w"] + p["latent_mu.b"]
        sigma = tt.softplus(r_bar @ p["latent_sigma.w"] + p["latent_sigma.b"])
        return mu, sigma

    @staticmethod
    def sample_latent(mu: np.ndarray, sigma: np.ndarray, mode: str = "mean",
                      seed: int | None = None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        if np.any(np.asarray(sigma) <= 0):
            raise ValidationError("sigma must be strictly positive")
        if mode == "mean":
            return np.asarray(mu, dtype=np.float64).copy()
        if mode != "sample":
            raise ValidationError(f"mode must be 'sample' or 'mean', got {mode!r}")
        if rng is None:
            rng = np.random.default_rng(seed)
        eps = rng.standard_normal(np.shape(mu))
        return np.asarray(mu) + np.asarray(sigma) * eps

    # -- conditioning ---------------------------------------------------------------
    def summary_from_store(self, instances: Mapping[str, np.ndarray],
                           store: AnnotationStore, params: ParamVector,
                           mode: str = "mean", seed: int | None = None,
                           rng: np.random.Generator | None = None) -> LatentSummary:
        # canonical (instance, round) order so any store permutation yields a
        # bit-identical summary despite float accumulation
        entries = sorted(store, key=lambda e: (e[1].instance_id, e[0]))
        masks = [m for _, m in entries]
        if not masks:
            mu, sigma = self.latent_params(None, params)
        else:
            r = self.encode_annotations(instances, masks, params)
            mu, sigma = self.latent_params(self.summarize(r), params)
        z = self.sample_latent(mu, sigma, mode=mode, seed=seed, rng=rng)
        return LatentSummary(mu=mu, sigma=sigma, z=z, context_size=len(masks))

    def conditioned_attention(self, x: np.ndarray,
                              instances: Mapping[str, np.ndarray],
                              store: AnnotationStore, params: ParamVector,
                              mode: str = "mean",
                              seed: int | None = None) -> AttentionMap:
        """Attention under the dataset-level summary of the full store."""
        summary = self.summary_from_store(instances, store, params, mode, seed)
        return self.net.forward_attention(x, params, z=summary.z)

    # -- training objective ------------------------------------------------------------
    # attention magnitudes that already satisfy an annotation get no pull:
    # corrections repair disagreements without re-weighting a fitted model
    GAMMA_ATTEND_MARGIN = 0.5     # "attend" satisfied once |gamma| >= 0.5
    GAMMA_OFF_MARGIN = 0.2        # "not attend" satisfied once |gamma| <= 0.2

    def mask_supervision_core(self, beta: Tensor, gammas: Sequence[Tensor],
                              masks: Sequence[AttentionMask]) -> Tensor:
        """Margin-gated cross-entropy pull of attention toward annotations.

        Feature axis: BCE between |gamma| and the 0/1 cells, active only
        while the magnitude is on the wrong side of its margin. "Attend"
        raises |gamma| to at least the attend margin; "not attend" drives it
        under the off margin (toward the zero the counterfactual tool uses);
        the sign stays free for the task loss. Time axis: -log beta on attend
        steps below the uniform weight, -log(1-beta) on non-attend steps
        above half-uniform. Cells marked -1 contribute nothing; empty sets
        contribute zero terms.
        """
        cfg = self.config
        fm = np.stack([m.feature_mask for m in masks]).astype(np.float64)  # (K,T,D)
        tm = np.stack([m.time_mask for m in masks]).astype(np.float64)    # (K,T)

        total = Tensor(0.0)
        # feature axis
        known = (fm != -1)
        n_known = int(known.sum())
        if n_known:
            acc = Tensor(0.0)
            for t in range(cfg.T):
                target = np.where(known[:, t, :], fm[:, t, :], 0.0)
                mag = np.abs(gammas[t].data)
                unsatisfied = np.where(target == 1.0,
                                       mag < self.GAMMA_ATTEND_MARGIN,
                                       mag > self.GAMMA_OFF_MARGIN)
                sel = (known[:, t, :] & unsatisfied).astype(np.float64)
                gam_abs = gammas[t] * Tensor(np.sign(gammas[t].data))
                prob = tt.clip(gam_abs, 1e-7, 1 - 1e-7)
                ce = -(Tensor(target) * tt.log(prob)
                       + Tensor(1.0 - target) * tt.log(Tensor(1.0) - prob))
                acc = acc + (ce * Tensor(sel)).sum()
            total = total + acc * Tensor(1.0 / n_known)
        # time axis
        uniform = 1.0 / cfg.T
        bc = tt.clip(beta, 1e-7, 1 - 1e-7)
        pos = ((tm == 1) & (beta.data < uniform)).astype(np.float64)
        neg = ((tm == 0) & (beta.data > 0.5 * uniform)).astype(np.float64)
        n_pos = (tm == 1).sum()
        n_neg = (tm == 0).sum()
        if n_pos > 0:
            total = total + -(tt.log(bc) * Tensor(pos)).sum() * Tensor(1.0 / n_pos)
        if n_neg > 0:
            total = total + -(tt.log(Tensor(1.0) - bc) * Tensor(neg)).sum() \
                * Tensor(1.0 / n_neg)
        return total

    @staticmethod
    def kl_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
        """Closed-form KL( N(mu, sigma^2) || N(0, I) ), summed over all entries."""
        var = tt.square(sigma)
        return (Tensor(0.5) * (var + tt.square(mu) - Tensor(1.0))
                - tt.log(sigma)).sum()

    def nap_loss_core(self, p: Mapping[str, Tensor], batch,
                      x_context: np.ndarray, masks_context: Sequence[AttentionMask],
                      x_target: np.ndarray, masks_target: Sequence[AttentionMask],
                      eps: np.ndarray | None,
                      lambda_mask: float = 1.0,
                      lambda_kl: float = 0.1) -> tuple[Tensor, dict[str, Tensor]]:
        """Traced loss; ``eps`` of shape (T, d_z) selects the latent draw
        (None = mean mode)."""
        r_steps = self.encode_core(x_context, masks_context, p)
        r_bar = tt.concat([s.mean(axis=0, keepdims=True) for s in r_steps], axis=0)
        mu, sigma = self.latent_core(r_bar, p)
        z = mu if eps is None else mu + sigma * Tensor(eps)

        task = self.net.batch_loss(p, batch, z=z)

        beta, gammas, _ = self.net.attention_core(
            self.net._steps(x_target), p, z)
        mask_term = self.mask_supervision_core(beta, gammas, masks_target)

        kl = self.kl_standard_normal(mu, sigma)
        total = task + Tensor(lambda_mask) * mask_term + Tensor(lambda_kl) * kl
        return total, {"task": task, "mask": mask_term, "kl": kl}

    def nap_loss(self, batch, store_context: AnnotationStore,
                 store_target: AnnotationStore,
                 instances: Mapping[str, np.ndarray], params: ParamVector,
                 seed: int | None = None, mode: str = "sample",
                 lambda_mask: float = 1.0, lambda_kl: float = 0.1
                 ) -> tuple[float, dict[str, float]]:
        """Evaluate the adaptation objective; see ``nap_loss_core``."""
        ctx_ids = set(store_context.instance_ids())
        tgt_ids = set(store_target.instance_ids())
        if not ctx_ids <= tgt_ids:
            raise PreconditionError("context annotations must be a subset of targets")
        if len(store_context) == 0:
            raise EmptyContextError("context must contain at least one mask")
        masks_c = store_context.masks()
        masks_t = store_target.masks()
        x_c = self._gather_x(instances, masks_c)
        x_t = self._gather_x(instances, masks_t)
        eps = None
        if mode == "sample":
            rng = np.random.default_rng(seed)
            eps = rng.standard_normal((self.config.T, self.config.latent_dim))
        with tt.no_grad():
            total, parts = self.nap_loss_core(
                params.as_tensors(), batch, x_c, masks_c, x_t, masks_t, eps,
                lambda_mask, lambda_kl)
        return float(total.data), {k: float(v.data) for k, v in parts.items()}


@dataclass
class AdaptConfig:
    steps: int = 1200
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: bool = True  # linear decay to zero settles the endpoint
    weight_decay: float = 0.0
    lambda_mask: float = 1.0
    lambda_kl: float = 0.1
    seed: int = 0
    eval_every: int = 100  # validation-loss logging cadence


@dataclass
class AdaptLog:
    losses: list[float] = field(default_factory=list)
    components: list[dict[str, float]] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_step: int = -1


def adapt_train(nap: NeuralAttentionProcess, train_set, store: AnnotationStore,
                params: ParamVector, config: AdaptConfig,
                valid_set=None) -> tuple[ParamVector, AdaptLog]:
    """One-time adaptation: teach the network to consume annotation summaries.

    Each step draws a random context subset of the store (size uniform over
    {1..K}), targets every annotated instance, and adds the task loss of a
    train minibatch under the sampled latent. Runs a fixed horizon and
    returns the final iterate: mask supervision deliberately trades
    probability calibration for attention/ranking quality, so small
    validation splits mis-rank iterates. A validation set, when given, is
    only used to log the conditioned loss trajectory.
    """
    if len(store) == 0:
        raise PreconditionError("adapt_train requires a nonempty annotation store")

    from .gradients import gradient

    rng = np.random.default_rng(config.seed)
    instances = {inst.id: inst.x for inst in train_set}
    x_all = train_set.x_array()
    y_all = train_set.y_array()
    masks = store.masks()
    K = len(masks)
    x_target = nap._gather_x(instances, masks)
    opt = Adam(lr=config.lr)
    log = AdaptLog()
    current = params

    x_val = valid_set.x_array() if valid_set is not None and len(valid_set) else None
    y_val = valid_set.y_array() if x_val is not None else None

    def val_loss(p: ParamVector) -> float:
        summary = nap.summary_from_store(instances, store, p, mode="mean")
        with tt.no_grad():
            return float(nap.net.batch_loss(p.as_tensors(), (x_val, y_val),
                                            z=summary.z).data)

    for step in range(config.steps):
        c = int(rng.integers(1, K + 1))
        ctx_idx = np.sort(rng.choice(K, size=c, replace=False))
        masks_c = [masks[i] for i in ctx_idx]
        x_c = x_target[ctx_idx]
        batch_idx = rng.choice(len(train_set), size=min(config.batch_size,
                                                        len(train_set)),
                               replace=False)
        batch = (x_all[batch_idx], y_all[batch_idx])
        eps = rng.standard_normal((nap.config.T, nap.config.latent_dim))
        parts_box: dict = {}

        def objective(p, b):
            total, parts = nap.nap_loss_core(
                p, b, x_c, masks_c, x_target, masks, eps,
                config.lambda_mask, config.lambda_kl)
            parts_box["total"] = total
            parts_box.update(parts)
            return total + weight_decay_penalty(p, config.weight_decay)

        g = gradient(objective, current, batch)
        if config.lr_decay:
            opt.lr = config.lr * (1.0 - step / config.steps)
        current = opt.step(current, g)
        log.losses.append(float(parts_box["total"].data))
        log.components.append({k: float(parts_box[k].data)
                               for k in ("task", "mask", "kl")})
        if x_val is not None and ((step + 1) % config.eval_every == 0
                                  or step + 1 == config.steps):
            log.val_losses.append(val_loss(current))

    if not all(np.isfinite(log.losses)):
        raise NonFiniteError("adaptation training diverged")
    log.best_step = config.steps
    return current, log
