"""Training loop, Adam optimizer, evaluation metrics, and checkpoints.

Training iterates balanced (one positive, one negative) bag pairs,
backpropagates the weighted objective, and applies bias-corrected Adam
updates. Runs are bitwise deterministic given the store bytes, the
config, and the seed.

Checkpoint format: magic "FRML", one version byte, a little-endian uint32
header length, a JSON header carrying the config and named parameter
shapes/offsets, then the raw little-endian float32 parameter blobs.
"""

from __future__ import annotations

import copy
import csv
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .bagdata import BagStore, SingleClassError, balanced_batches
from .model import (
    ComparatorParams,
    ModelParams,
    bag_forward,
    comparator_forward,
    init_comparator,
    init_params,
)
from .objectives import LossWeights, bce_loss, total_loss

CHECKPOINT_MAGIC = b"FRML"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A run configuration is malformed (unknown key, bad value, ...)."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss, gradient, or parameter."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointValueError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    """Every knob of a training run, with the stock defaults."""

    tau: float = 8.48
    gammas: Tuple[float, float, float] = (0.33, 0.33, 0.33)
    lr: float = 1e-4
    epochs: int = 100
    heads: int = 8
    dropout: float = 0.2
    dim: Optional[int] = None       # taken from the store when unset
    seed: int = 0
    mu_squared: bool = True         # magnitude convention of the baseline
    fm_squared: bool = False        # norm convention of the margin loss
    pem_residual: bool = True
    use_max_loss: bool = True       # ablation switches
    use_fm_loss: bool = True
    threshold: float = 0.5

    def validate(self) -> None:
        if self.tau <= 0 or not np.isfinite(self.tau):
            raise ConfigError(f"tau must be finite and positive, got {self.tau}")
        if len(self.gammas) != 3 or any(g < 0 for g in self.gammas):
            raise ConfigError(f"gammas must be three non-negative reals, "
                              f"got {self.gammas}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.dim is not None and self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["gammas"] = list(self.gammas)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "gammas" in kwargs:
            kwargs["gammas"] = tuple(float(g) for g in kwargs["gammas"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def loss_weights(self) -> LossWeights:
        g1, g2, g3 = self.gammas
        return LossWeights(gamma_bag=g1,
                           gamma_max=g2 if self.use_max_loss else 0.0,
                           gamma_fm=g3 if self.use_fm_loss else 0.0,
                           tau=self.tau)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the step count."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named: Dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(t.data) for k, t in named.items()},
                   v={k: np.zeros_like(t.data) for k, t in named.items()})


def adam_step(named: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    Aborts on any non-finite gradient or resulting parameter, naming the
    offender.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, tensor in named.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if g.shape != tensor.data.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter "
                                f"{name} shape {tensor.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name} "
                                f"at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        tensor.data = tensor.data - update.astype(tensor.data.dtype)
        if not np.isfinite(tensor.data).all():
            raise TrainingError(f"non-finite parameter {name} after step {t}")


# ---------------------------------------------------------------------------
# metrics


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-statistic area under the ROC curve, midranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        missing = "positive" if n_pos == 0 else "negative"
        raise SingleClassError(f"AUC undefined: no {missing} labels")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    split: str
    accuracy: float
    auc: Optional[float]            # None when only one class is present
    rows: List[Tuple[str, int, float]]  # (bag_id, label, probability)
    mean_bce: float


def evaluate(store: BagStore, ids: Sequence[str], params: ModelParams,
             threshold: float = 0.5, pem_residual: bool = True,
             split: str = "") -> EvalReport:
    """Evaluation-mode forwards over the given bags."""
    if not ids:
        raise ValueError("evaluate needs at least one bag id")
    rows = []
    bces = []
    for bag_id in ids:
        bag = store.bag(bag_id)
        trace = bag_forward(bag, params, training=False,
                            pem_residual=pem_residual)
        p = trace.bag_prob.item()
        rows.append((bag_id, bag.label, p))
        bces.append(bce_loss(p, bag.label).item())
    labels = [r[1] for r in rows]
    probs = [r[2] for r in rows]
    correct = sum(int((p >= threshold) == (lab == 1))
                  for _, lab, p in rows)
    try:
        area = auc(probs, labels)
    except SingleClassError:
        area = None
    return EvalReport(split=split, accuracy=correct / len(rows), auc=area,
                      rows=rows, mean_bce=float(np.mean(bces)))


def _metric_cell(value) -> str:
    if value is None:
        return "nan"
    return f"{value:.6f}"


def write_metrics_csv(history: Sequence[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "loss_bag", "loss_max",
                         "loss_fm", "acc", "auc"])
        for row in history:
            writer.writerow([row["epoch"], row["split"],
                             _metric_cell(row["loss"]),
                             _metric_cell(row["loss_bag"]),
                             _metric_cell(row["loss_max"]),
                             _metric_cell(row["loss_fm"]),
                             _metric_cell(row["acc"]),
                             _metric_cell(row["auc"])])


def write_scores_csv(report: EvalReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "label", "probability"])
        for bag_id, label, prob in report.rows:
            writer.writerow([bag_id, label, f"{prob:.6f}"])


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: ModelParams
    history: List[dict] = field(default_factory=list)
    best_params: Optional[ModelParams] = None
    best_val_auc: Optional[float] = None
    best_epoch: Optional[int] = None


def _resolve_dim(store: BagStore, config: TrainConfig) -> int:
    dim = store.dim if config.dim is None else config.dim
    if config.dim is not None and config.dim != store.dim:
        raise ConfigError(f"config dim {config.dim} != store dim {store.dim}")
    if dim % config.heads != 0:
        raise ConfigError(f"store dim {dim} not divisible by "
                          f"{config.heads} heads")
    return dim


def _epoch_rows(epoch, parts_mean, weights, train_report, val_report):
    g1, g2, g3 = weights.gamma_bag, weights.gamma_max, weights.gamma_fm
    loss_bag = g1 * parts_mean["bag"]
    loss_max = g2 * parts_mean["max"]
    loss_fm = g3 * parts_mean["fm"]
    rows = [{
        "epoch": epoch, "split": "train",
        "loss": loss_bag + loss_max + loss_fm,
        "loss_bag": loss_bag, "loss_max": loss_max, "loss_fm": loss_fm,
        "acc": train_report.accuracy, "auc": train_report.auc,
    }]
    if val_report is not None:
        rows.append({
            "epoch": epoch, "split": "val",
            "loss": val_report.mean_bce, "loss_bag": val_report.mean_bce,
            "loss_max": 0.0, "loss_fm": 0.0,
            "acc": val_report.accuracy, "auc": val_report.auc,
        })
    return rows


def _collect_grads(named: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in named.items()}


def train(store: BagStore, split: Dict[str, List[str]],
          config: TrainConfig) -> TrainResult:
    """Train the full model on the train split, tracking val each epoch."""
    config.validate()
    dim = _resolve_dim(store, config)
    train_ids = split["train"]
    val_ids = split.get("val", [])
    labeled = store.labels(train_ids)
    params = init_params(dim, config.heads, config.seed)
    state = AdamState.for_params(params.named())
    drop_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    weights = config.loss_weights()
    result = TrainResult(params=params)
    for epoch in range(config.epochs):
        sums = {"bag": 0.0, "max": 0.0, "fm": 0.0}
        pairs = balanced_batches(labeled, config.seed, epoch)
        for pos_id, neg_id in pairs:
            tp = bag_forward(store.bag(pos_id), params, training=True,
                             rng=drop_rng, dropout=config.dropout,
                             pem_residual=config.pem_residual)
            tn = bag_forward(store.bag(neg_id), params, training=True,
                             rng=drop_rng, dropout=config.dropout,
                             pem_residual=config.pem_residual)
            loss, parts = total_loss(tp, tn, (1, 0), weights,
                                     fm_squared=config.fm_squared)
            if not np.isfinite(parts["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch} on "
                                    f"batch ({pos_id}, {neg_id})")
            for t in params.named().values():
                t.grad = None
            backward(loss)
            adam_step(params.named(), _collect_grads(params.named()),
                      state, config.lr)
            for key in sums:
                sums[key] += parts[key]
        parts_mean = {k: v / len(pairs) for k, v in sums.items()}
        train_report = evaluate(store, train_ids, params,
                                threshold=config.threshold,
                                pem_residual=config.pem_residual, split="train")
        val_report = None
        if val_ids:
            val_report = evaluate(store, val_ids, params,
                                  threshold=config.threshold,
                                  pem_residual=config.pem_residual, split="val")
            if val_report.auc is not None and (
                    result.best_val_auc is None
                    or val_report.auc > result.best_val_auc):
                result.best_val_auc = val_report.auc
                result.best_epoch = epoch
                result.best_params = copy.deepcopy(params)
        result.history.extend(
            _epoch_rows(epoch, parts_mean, weights, train_report, val_report))
    return result


@dataclass
class ComparatorResult:
    params: ComparatorParams
    history: List[dict] = field(default_factory=list)


def evaluate_comparator(store: BagStore, ids: Sequence[str],
                        cparams: ComparatorParams, threshold: float = 0.5,
                        split: str = "") -> EvalReport:
    if not ids:
        raise ValueError("evaluate needs at least one bag id")
    rows = []
    bces = []
    for bag_id in ids:
        bag = store.bag(bag_id)
        p = comparator_forward(cparams, bag).item()
        rows.append((bag_id, bag.label, p))
        bces.append(bce_loss(p, bag.label).item())
    labels = [r[1] for r in rows]
    probs = [r[2] for r in rows]
    correct = sum(int((p >= threshold) == (lab == 1)) for _, lab, p in rows)
    try:
        area = auc(probs, labels)
    except SingleClassError:
        area = None
    return EvalReport(split=split, accuracy=correct / len(rows), auc=area,
                      rows=rows, mean_bce=float(np.mean(bces)))


def train_comparator(store: BagStore, split: Dict[str, List[str]],
                     config: TrainConfig, kind: str) -> ComparatorResult:
    """Train a mean- or max-pooling head with plain bag cross-entropy."""
    config.validate()
    dim = _resolve_dim(store, config)
    labeled = store.labels(split["train"])
    cparams = init_comparator(kind, dim, config.seed)
    state = AdamState.for_params(cparams.named())
    result = ComparatorResult(params=cparams)
    for epoch in range(config.epochs):
        total = 0.0
        pairs = balanced_batches(labeled, config.seed, epoch)
        for pos_id, neg_id in pairs:
            p_pos = comparator_forward(cparams, store.bag(pos_id))
            p_neg = comparator_forward(cparams, store.bag(neg_id))
            loss = ad.scale(ad.add(bce_loss(p_pos, 1), bce_loss(p_neg, 0)), 0.5)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite comparator loss at epoch "
                                    f"{epoch} on batch ({pos_id}, {neg_id})")
            for t in cparams.named().values():
                t.grad = None
            backward(loss)
            adam_step(cparams.named(), _collect_grads(cparams.named()),
                      state, config.lr)
            total += loss.item()
        report = evaluate_comparator(store, split["train"], cparams,
                                     threshold=config.threshold, split="train")
        result.history.append({
            "epoch": epoch, "split": "train",
            "loss": total / len(pairs), "loss_bag": total / len(pairs),
            "loss_max": 0.0, "loss_fm": 0.0,
            "acc": report.accuracy, "auc": report.auc,
        })
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, config: TrainConfig, path) -> None:
    named = params.named()
    blobs = []
    entries = []
    offset = 0
    for name, tensor in named.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.data.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": config.to_dict(),
        "dim": params.dim,
        "heads": params.heads,
        "params": entries,
    }).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Tuple[ModelParams, TrainConfig]:
    """Validate and reconstruct a saved model plus its config."""
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic "
                                   f"{data[:4]!r} (expected {CHECKPOINT_MAGIC!r})")
    version = data[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    header_len = struct.unpack("<I", data[5:9])[0]
    if len(data) < 9 + header_len:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    header = json.loads(data[9:9 + header_len].decode("utf-8"))
    blob = data[9 + header_len:]
    config = TrainConfig.from_dict(header["config"])
    dim = int(header["dim"])
    heads = int(header["heads"])
    reference = init_params(dim, heads, seed=0)
    expected_shapes = {k: t.data.shape for k, t in reference.named().items()}
    loaded: Dict[str, Tensor] = {}
    for entry in header["params"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if name not in expected_shapes:
            raise CheckpointShapeError(f"{path}: unexpected parameter {name!r}")
        if shape != expected_shapes[name]:
            raise CheckpointShapeError(
                f"{path}: parameter {name} has shape {shape}, expected "
                f"{expected_shapes[name]}")
        if off + nbytes > len(blob) or nbytes != int(np.prod(shape)) * 4:
            raise CheckpointTruncatedError(f"{path}: parameter {name} blob "
                                           f"out of bounds")
        arr = np.frombuffer(blob[off:off + nbytes], dtype="<f4").reshape(shape)
        if not np.isfinite(arr).all():
            raise CheckpointValueError(f"{path}: non-finite values in {name}")
        loaded[name] = Tensor(arr.copy(), requires_grad=True)
    missing = set(expected_shapes) - set(loaded)
    if missing:
        raise CheckpointShapeError(f"{path}: missing parameters {sorted(missing)}")
    params = ModelParams(dim=dim, heads=heads, **loaded)
    return params, config
