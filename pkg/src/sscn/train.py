"""SGD training, multi-view evaluation and IoU scoring."""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .data import PointCloud, collate, prepare, project_predictions
from .network import Network, NetworkSpec, build_network
from .seeding import stream

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def learning_rate(lr0, epoch, decay=0.04):
    """``lr0 * exp(-decay * epoch)``."""
    return lr0 * math.exp(-decay * epoch)


def sgd_step(params, state: OptimizerState):
    """One Nesterov momentum step with L2 weight decay folded into the gradient.

    ``params`` is a list of ``(name, Parameter)``.  Parameters flagged
    ``decay=False`` (batch-norm scale and shift) skip weight decay.
    """
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    for name, p in params:
        g = p.grad
        if p.decay and state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g
        state.velocity[name] = v
        step = g + state.momentum * v if state.nesterov else v
        p.data -= (state.lr * step).astype(p.data.dtype, copy=False)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    lr_decay: float = 0.04
    S: int = 16
    grid_multiplier: int = 4
    augment: str = "rotation"
    affine_eps: float = 0.1
    feature_mode: str = "count"
    seed: int = 0
    views: int = 1

    @property
    def grid_size(self):
        return self.S * self.grid_multiplier


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_iou: float
    seconds: float

    def line(self):
        return (f"{self.epoch},{self.lr:.8g},{self.train_loss:.8g},{self.train_acc:.8g},"
                f"{self.val_iou:.8g},{self.seconds:.3f}")


LOG_HEADER = "epoch,lr,train_loss,train_acc,val_iou,seconds"


def _voxelize_all(clouds, cfg: TrainConfig, purpose, epoch):
    out = []
    for pc in clouds:
        rng = stream(cfg.seed, purpose, pc.name, epoch)
        out.append(prepare(pc, cfg.S, cfg.grid_size, rng, cfg.augment, cfg.affine_eps,
                           cfg.feature_mode))
    return out


def train_epoch(net: Network, clouds: List[PointCloud], cfg: TrainConfig, opt: OptimizerState,
                epoch):
    order = stream(cfg.seed, "shuffle", epoch).permutation(len(clouds))
    losses, correct, total = [], 0, 0
    for start in range(0, len(order), cfg.batch_size):
        chunk = [clouds[i] for i in order[start:start + cfg.batch_size]]
        batch = collate(_voxelize_all(chunk, cfg, "augment", epoch))
        if batch.tensor.a == 0:
            continue
        net.zero_grad()
        out = net.forward(batch.tensor, train=True)
        loss, grad = ops.masked_softmax_nll(out.features, batch.labels)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at epoch {epoch}")
        net.backward(grad)
        sgd_step(net.parameters(), opt)
        losses.append(loss * batch.tensor.a)
        correct += int((out.features.argmax(axis=1) == batch.labels).sum())
        total += batch.tensor.a
    return (sum(losses) / max(total, 1)), correct / max(total, 1)


def train(spec: NetworkSpec, clouds: List[PointCloud], cfg: TrainConfig,
          val_clouds: Optional[List[PointCloud]] = None, net: Optional[Network] = None,
          log_path=None, on_epoch=None, opt: Optional[OptimizerState] = None, start_epoch=0):
    """Train ``spec`` on ``clouds``; returns ``(net, optimizer, records)``.

    Every random draw comes from a named stream of ``cfg.seed``: weight init,
    per-epoch shuffling and per-sample augmentation/placement.  Passing the
    ``net`` and ``opt`` of a checkpoint with ``start_epoch`` resumes a run
    exactly where it stopped.
    """
    if net is None:
        net = build_network(spec, stream(cfg.seed, "init"), grid_size=cfg.grid_size)
    if opt is None:
        opt = OptimizerState(cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
    records = []
    fh = open(log_path, "a" if start_epoch else "w") if log_path else None
    try:
        if fh and fh.tell() == 0:
            fh.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            opt.lr = learning_rate(cfg.lr, epoch, cfg.lr_decay)
            loss, acc = train_epoch(net, clouds, cfg, opt, epoch)
            val_iou = float("nan")
            if val_clouds:
                val_iou = evaluate_multiview(net, val_clouds, cfg, K=1).weighted_iou
            rec = EpochRecord(epoch, opt.lr, loss, acc, val_iou, time.perf_counter() - t0)
            records.append(rec)
            log.info("epoch %s", rec.line())
            if fh:
                fh.write(rec.line() + "\n")
                fh.flush()
            if on_epoch is not None:
                on_epoch(net, opt, rec)
    finally:
        if fh:
            fh.close()
    return net, opt, records


def iou(preds, labels, parts):
    """Per-part IoU for one example; a part absent from both scores 1.

    Returns ``(per_part, category_iou)`` where ``category_iou`` is the mean
    over ``parts``.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot score an empty example")
    per_part = {}
    for p in sorted(parts):
        pp, gp = preds == p, labels == p
        union = np.logical_or(pp, gp).sum()
        per_part[p] = 1.0 if union == 0 else np.logical_and(pp, gp).sum() / union
    return per_part, float(np.mean(list(per_part.values())))


@dataclass
class EvalReport:
    per_category_iou: Dict[int, float]
    weighted_iou: float
    per_class_iou: Dict[int, float]
    pixel_accuracy: float
    n_points: int = 0

    @property
    def mean_class_iou(self):
        return float(np.mean(list(self.per_class_iou.values()))) if self.per_class_iou else 0.0

    def to_dict(self):
        return {"per_category_iou": {str(k): v for k, v in self.per_category_iou.items()},
                "weighted_iou": self.weighted_iou,
                "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
                "mean_class_iou": self.mean_class_iou,
                "pixel_accuracy": self.pixel_accuracy, "n_points": self.n_points}


def predict_points(net: Network, clouds, cfg: TrainConfig, K=1, view_seeds=None):
    """Per-point class distributions averaged over ``K`` augmented views."""
    if K < 1:
        raise ValueError("K must be at least 1")
    view_seeds = list(range(K)) if view_seeds is None else list(view_seeds)
    sums = [None] * len(clouds)
    for view in view_seeds:
        for start in range(0, len(clouds), cfg.batch_size):
            chunk = list(range(start, min(start + cfg.batch_size, len(clouds))))
            samples = [prepare(clouds[i], cfg.S, cfg.grid_size,
                               stream(cfg.seed, "eval", clouds[i].name, view),
                               cfg.augment, cfg.affine_eps, cfg.feature_mode) for i in chunk]
            batch = collate(samples)
            logits = net.forward(batch.tensor, train=False).features
            probs = ops.softmax(logits.astype(np.float64))
            for b, i in enumerate(chunk):
                pts, _ = project_predictions(samples[b], probs[batch.rows_of(b)])
                sums[i] = pts if sums[i] is None else sums[i] + pts
    return [s / len(view_seeds) for s in sums]


def apply_mask(probs, allowed):
    """Zero the classes outside ``allowed`` and renormalize each row."""
    keep = np.zeros(probs.shape[1], dtype=bool)
    keep[sorted(allowed)] = True
    out = np.where(keep, probs, 0.0)
    z = out.sum(axis=1, keepdims=True)
    uniform = keep / keep.sum()
    return np.where(z > 0, out / np.where(z > 0, z, 1), uniform)


def score(point_probs, clouds, manifest=None, mask=True, category_weights=None, n_classes=None):
    """Turn averaged per-point distributions into an ``EvalReport``."""
    n_classes = n_classes or point_probs[0].shape[1]
    cat_scores: Dict[int, List[float]] = {}
    inter = np.zeros(n_classes)
    union = np.zeros(n_classes)
    correct = total = 0
    for probs, pc in zip(point_probs, clouds):
        cat = pc.category if pc.category is not None else 0
        if manifest is not None and pc.name in manifest.sample_category:
            cat = manifest.sample_category[pc.name]
        parts = manifest.parts_of(cat) if manifest is not None else None
        if parts is None:
            parts = set(range(n_classes))
        if mask:
            probs = apply_mask(probs, parts)
        pred = probs.argmax(axis=1)
        _, cat_iou = iou(pred, pc.labels, parts)
        cat_scores.setdefault(cat, []).append(cat_iou)
        for c in range(n_classes):
            pp, gp = pred == c, pc.labels == c
            inter[c] += np.logical_and(pp, gp).sum()
            union[c] += np.logical_or(pp, gp).sum()
        correct += int((pred == pc.labels).sum())
        total += len(pred)
    per_cat = {c: float(np.mean(v)) for c, v in sorted(cat_scores.items())}
    if category_weights is None:
        category_weights = {c: len(v) for c, v in cat_scores.items()}
    wsum = sum(category_weights.get(c, 0) for c in per_cat)
    weighted = sum(per_cat[c] * category_weights.get(c, 0) for c in per_cat) / wsum if wsum else 0.0
    per_class = {c: float(inter[c] / union[c]) for c in range(n_classes) if union[c] > 0}
    return EvalReport(per_cat, float(weighted), per_class, correct / max(total, 1), total)


def evaluate_multiview(net: Network, clouds, cfg: TrainConfig, K=1, mask=True, manifest=None,
                       category_weights=None, view_seeds=None):
    probs = predict_points(net, clouds, cfg, K, view_seeds)
    return score(probs, clouds, manifest, mask, category_weights, net.spec.n_classes)


def category_weights_from(clouds, manifest=None):
    """Fraction of training examples per category."""
    counts: Dict[int, int] = {}
    for pc in clouds:
        cat = pc.category if pc.category is not None else 0
        if manifest is not None and pc.name in manifest.sample_category:
            cat = manifest.sample_category[pc.name]
        counts[cat] = counts.get(cat, 0) + 1
    n = sum(counts.values())
    return {c: k / n for c, k in counts.items()}
