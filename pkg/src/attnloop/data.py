"""Synthetic datasets with known relevance plus file persistence.

Datasets and annotations are stored as line-delimited JSON records; model
checkpoints use a small binary container (magic, version, JSON manifest,
float32 payload with a digest).
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (CorruptError, DuplicateError, FormatError, ParseError,
                     SchemaError, ValidationError)
from .model import ModelConfig
from .params import ParamVector

CHECKPOINT_MAGIC = b"IALCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TimeSeriesInstance:
    id: str
    x: np.ndarray                       # (T, D)
    y: np.ndarray                       # (L,)
    relevance: np.ndarray | None = None       # binary (T, D)
    relevance_time: np.ndarray | None = None  # binary (T,)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        if not np.all(np.isfinite(self.x)):
            raise ValidationError(f"instance {self.id}: x contains non-finite values")
        if self.relevance is not None:
            self.relevance = np.asarray(self.relevance, dtype=np.int8)
        if self.relevance_time is not None:
            self.relevance_time = np.asarray(self.relevance_time, dtype=np.int8)


@dataclass
class Dataset:
    instances: list[TimeSeriesInstance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[TimeSeriesInstance]:
        return iter(self.instances)

    def __getitem__(self, i) -> TimeSeriesInstance:
        return self.instances[i]

    @property
    def T(self) -> int | None:
        return None if not self.instances else self.instances[0].x.shape[0]

    @property
    def D(self) -> int | None:
        return None if not self.instances else self.instances[0].x.shape[1]

    @property
    def L(self) -> int | None:
        return None if not self.instances else self.instances[0].y.shape[0]

    def x_array(self) -> np.ndarray:
        return np.stack([inst.x for inst in self.instances])

    def y_array(self) -> np.ndarray:
        return np.stack([inst.y for inst in self.instances])

    def by_id(self) -> dict[str, TimeSeriesInstance]:
        return {inst.id: inst for inst in self.instances}

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.instances[i] for i in indices])


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    t: int
    d: int
    task: str = "binary"
    sparsity: int = 8
    noise_std: float = 0.1
    seed: int = 0
    n_classes: int = 3  # multiclass only

    def __post_init__(self):
        if not (1 <= self.sparsity <= self.t * self.d):
            raise ValidationError("sparsity must be in [1, T*D]")
        if self.task not in ("binary", "multiclass", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw standard-normal series whose target depends on a sparse cell set.

    The truly relevant cells (and per-row relevance flags) ship with every
    instance, which is what lets a simulated annotator answer mask queries.
    """
    rng = np.random.default_rng(spec.seed)
    x = rng.standard_normal((spec.n, spec.t, spec.d))
    flat_cells = rng.choice(spec.t * spec.d, size=spec.sparsity, replace=False)
    cells = [(int(c) // spec.d, int(c) % spec.d) for c in flat_cells]

    relevance = np.zeros((spec.t, spec.d), dtype=np.int8)
    for t, d in cells:
        relevance[t, d] = 1
    relevance_time = (relevance.sum(axis=1) > 0).astype(np.int8)

    signal = np.zeros(spec.n)
    if spec.task == "multiclass":
        w = rng.uniform(0.5, 1.5, (spec.n_classes, spec.sparsity)) \
            * rng.choice([-1.0, 1.0], (spec.n_classes, spec.sparsity))
        scores = np.zeros((spec.n, spec.n_classes))
        for j, (t, d) in enumerate(cells):
            scores += np.outer(x[:, t, d], w[:, j])
        scores += spec.noise_std * rng.standard_normal(scores.shape)
        labels = np.argmax(scores, axis=1)
        y = np.eye(spec.n_classes)[labels]
    else:
        w = rng.uniform(0.5, 1.5, spec.sparsity) * rng.choice([-1.0, 1.0], spec.sparsity)
        for j, (t, d) in enumerate(cells):
            signal += w[j] * x[:, t, d]
        noisy = signal + spec.noise_std * rng.standard_normal(spec.n)
        if spec.task == "binary":
            # threshold at the median so classes stay balanced
            y = (noisy > np.median(noisy)).astype(np.float64)[:, None]
        else:
            y = noisy[:, None]

    instances = [
        TimeSeriesInstance(
            id=f"i{idx:05d}", x=x[idx], y=y[idx],
            relevance=relevance.copy(), relevance_time=relevance_time.copy())
        for idx in range(spec.n)
    ]
    return Dataset(instances)


def split_dataset(dataset: Dataset, seed: int = 0,
                  ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
                  ) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle into train/valid/test splits."""
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    train = dataset.subset(order[:n_train])
    valid = dataset.subset(order[n_train:n_train + n_valid])
    test = dataset.subset(order[n_train + n_valid:])
    return train, valid, test


# -- dataset persistence -----------------------------------------------------------

def dataset_save(dataset: Dataset, path: str) -> None:
    with open(path, "w") as fh:
        for inst in dataset:
            rec = {"id": inst.id, "x": inst.x.tolist(), "y": inst.y.tolist()}
            if inst.relevance is not None:
                rec["relevance"] = inst.relevance.tolist()
            if inst.relevance_time is not None:
                rec["relevance_time"] = inst.relevance_time.tolist()
            fh.write(json.dumps(rec) + "\n")


def dataset_load(path: str) -> Dataset:
    instances: list[TimeSeriesInstance] = []
    shape = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                inst = TimeSeriesInstance(
                    id=rec["id"], x=np.asarray(rec["x"], dtype=np.float64),
                    y=np.asarray(rec["y"], dtype=np.float64),
                    relevance=np.asarray(rec["relevance"], dtype=np.int8)
                    if "relevance" in rec else None,
                    relevance_time=np.asarray(rec["relevance_time"], dtype=np.int8)
                    if "relevance_time" in rec else None)
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"line {lineno}: {exc}", line=lineno) from exc
            if inst.x.ndim != 2:
                raise SchemaError(f"instance {inst.id}: x must be 2-D")
            if shape is None:
                shape = inst.x.shape
            elif inst.x.shape != shape:
                raise SchemaError(
                    f"instance {inst.id}: shape {inst.x.shape} != {shape}")
            instances.append(inst)
    return Dataset(instances)


# -- checkpoint persistence -------------------------------------------------------------

def checkpoint_save(path: str, params: ParamVector, config: ModelConfig,
                    round_s: int = 0, extra: Mapping | None = None) -> None:
    names = params.names
    payload = b"".join(
        np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in names)
    manifest = {
        "segments": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "dtype": "float32-le",
        "cell": config.cell,
        "model_config": config.to_dict(),
        "round": round_s,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest["extra"] = dict(extra)
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        fh.write(payload)


def checkpoint_load(path: str) -> tuple[ParamVector, ModelConfig, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    version = blob[off]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off += 1
    (mlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        manifest = json.loads(blob[off:off + mlen])
    except ValueError as exc:
        raise CorruptError(f"manifest is not valid JSON: {exc}") from exc
    off += mlen
    payload = blob[off:]

    expected = sum(int(np.prod(seg["shape"])) for seg in manifest["segments"]) * 4
    if len(payload) != expected:
        raise CorruptError(
            f"payload length {len(payload)} != expected {expected}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CorruptError("payload digest mismatch")

    segments = {}
    pos = 0
    for seg in manifest["segments"]:
        shape = tuple(seg["shape"])
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload[pos:pos + size], dtype="<f4").reshape(shape)
        segments[seg["name"]] = arr.astype(np.float64)
        pos += size
    config = ModelConfig.from_dict(manifest["model_config"])
    meta = {"round": manifest.get("round", 0), "extra": manifest.get("extra", {})}
    return ParamVector(segments, validate=False), config, meta


# -- annotation persistence ------------------------------------------------------------

def mask_to_sparse(grid: np.ndarray) -> list[list[int]]:
    """Non-(-1) cells of a ternary grid as [t, d, value] triples."""
    out = []
    it = np.argwhere(grid != -1)
    for idx in it:
        val = int(grid[tuple(idx)])
        out.append([int(i) for i in idx] + [val])
    return out


def sparse_to_mask(entries: Iterable[Iterable[int]], shape: tuple[int, ...]) -> np.ndarray:
    grid = np.full(shape, -1, dtype=np.int8)
    for entry in entries:
        *idx, val = entry
        if val not in (-1, 0, 1):
            raise ValidationError(f"mask value {val} at {tuple(idx)} not in {{-1,0,1}}")
        grid[tuple(int(i) for i in idx)] = val
    return grid


def annotation_append(path: str, instance_id: str, round_s: int,
                      feature_mask: np.ndarray, time_mask: np.ndarray,
                      annotator: str = "oracle") -> None:
    feature_mask = np.asarray(feature_mask)
    time_mask = np.asarray(time_mask)
    for grid in (feature_mask, time_mask):
        if not np.all(np.isin(grid, (-1, 0, 1))):
            raise ValidationError("mask values must be in {-1, 0, 1}")
    for rec in annotation_iter(path):
        if rec["instance_id"] == instance_id and rec["round"] == round_s:
            raise DuplicateError(
                f"instance {instance_id} already annotated in round {round_s}")
    rec = {
        "instance_id": instance_id,
        "round": round_s,
        "annotator": annotator,
        "feature_mask": mask_to_sparse(feature_mask),
        "time_mask": mask_to_sparse(time_mask),
        "ts": time.time(),
    }
    with open(path, "a") as fh:
        fh.write(json.dumps(rec) + "\n")


def annotation_iter(path: str) -> Iterator[dict]:
    try:
        fh = open(path)
    except FileNotFoundError:
        return
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}", line=lineno) from exc


def annotation_query(path: str, shape: tuple[int, int],
                     round_s: int | None = None,
                     instance_id: str | None = None) -> list[dict]:
    """Records with dense masks reconstructed; filter by round or instance."""
    out = []
    for rec in annotation_iter(path):
        if round_s is not None and rec["round"] != round_s:
            continue
        if instance_id is not None and rec["instance_id"] != instance_id:
            continue
        dense = dict(rec)
        dense["feature_mask"] = sparse_to_mask(rec["feature_mask"], shape)
        dense["time_mask"] = sparse_to_mask(rec["time_mask"], (shape[0],))
        out.append(dense)
    return out
