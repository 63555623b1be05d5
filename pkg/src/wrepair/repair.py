"""The orig-ft baseline and the five weighted-regularization repairs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (LabeledDataset, SamplerConfig, TargetSpec, WeightedSampler,
                   SINGLE_LABEL, CONFUSION_PAIRS, BIAS_TRIPLETS)
from .layers import (Model, SGD, TrainConfig, lr_at_epoch, MethodInapplicableError,
                     TRAIN, WEIGHTED_TRAIN)
from .metrics import PredictionSet, DECISION_THRESHOLD

RETRAIN_METHODS = ("orig-ft", "w-aug", "w-bn", "w-loss", "w-dbr")
ALL_METHODS = RETRAIN_METHODS + ("w-os",)

_COMPANION_SEED_OFFSET = 104729  # keeps companion draws off the regular stream


@dataclass
class RepairConfig:
    method: str
    rho: float
    target: TargetSpec | None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ValueError(f"unknown repair method {self.method!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0,1], got {self.rho}")
        if self.method != "orig-ft" and self.target is None:
            raise ValueError(f"{self.method} requires a target spec")


@dataclass
class RepairOutcome:
    model: Model
    loss_trace: list[float]
    seconds: float


def _batch_loss(model: Model, x, y, mode=TRAIN, companion=None, rho=1.0, weights=None):
    logits, rep = model.forward(x, mode, companion=companion, rho=rho)
    if model.task == SINGLE_LABEL:
        loss = T.softmax_cross_entropy(logits, y, weights)
    else:
        loss = T.sigmoid_bce(logits, y, weights)
    return loss, logits, rep


def _finetune(model: Model, ds: LabeledDataset, cfg: RepairConfig, step_fn):
    tc = cfg.train
    opt = SGD(model.params(), tc.momentum)
    steps = max(1, ds.n // tc.batch_size)
    trace = []
    start = time.perf_counter()
    for epoch in range(tc.epochs):
        lr = lr_at_epoch(tc, epoch)
        total = 0.0
        for _ in range(steps):
            loss = step_fn()
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            total += loss.item()
        trace.append(total / steps)
    return RepairOutcome(model, trace, time.perf_counter() - start)


def finetune_orig(model: Model, ds: LabeledDataset, cfg: RepairConfig) -> RepairOutcome:
    """Continue SGD on the unmodified loss: the orig-ft baseline."""
    sampler = WeightedSampler(ds, None, SamplerConfig(rho=1.0, seed=cfg.train.seed))

    def step():
        idx = sampler.draw(cfg.train.batch_size)
        loss, _, _ = _batch_loss(model, ds.features[idx], ds.labels[idx])
        return loss

    return _finetune(model, ds, cfg, step)


def repair_waug(model: Model, ds: LabeledDataset, cfg: RepairConfig) -> RepairOutcome:
    """orig-ft over a stream reweighted toward the target classes."""
    sampler = WeightedSampler(ds, cfg.target,
                              SamplerConfig(rho=cfg.rho, seed=cfg.train.seed))

    def step():
        idx = sampler.draw(cfg.train.batch_size)
        loss, _, _ = _batch_loss(model, ds.features[idx], ds.labels[idx])
        return loss

    return _finetune(model, ds, cfg, step)


def repair_wbn(model: Model, ds: LabeledDataset, cfg: RepairConfig) -> RepairOutcome:
    """Blend batch-norm statistics with a target-class companion batch."""
    if not model.has_batchnorm():
        raise MethodInapplicableError("w-bn requires a model with batch norm layers")
    sampler = WeightedSampler(ds, None, SamplerConfig(rho=1.0, seed=cfg.train.seed))
    comp = WeightedSampler(ds, cfg.target,
                           SamplerConfig(rho=0.0, seed=cfg.train.seed + _COMPANION_SEED_OFFSET))

    def step():
        idx = sampler.draw(cfg.train.batch_size)
        cidx = comp.draw(cfg.train.batch_size)
        loss, _, _ = _batch_loss(model, ds.features[idx], ds.labels[idx],
                                 mode=WEIGHTED_TRAIN, companion=ds.features[cidx],
                                 rho=cfg.rho)
        return loss

    return _finetune(model, ds, cfg, step)


def _confused_masks(logits: np.ndarray, labels: np.ndarray, target: TargetSpec,
                    task: str) -> list[np.ndarray]:
    """Per targeted pair, the boolean mask of currently-confused batch rows."""
    masks = []
    if task == SINGLE_LABEL:
        pred = logits.argmax(axis=1)
        for a, b in target.pairs():
            masks.append(((labels == a) & (pred == b)) | ((labels == b) & (pred == a)))
    else:
        pred = T._sigmoid(logits.astype(np.float64)) >= DECISION_THRESHOLD
        for a, b in target.pairs():
            both = pred[:, a] & pred[:, b]
            masks.append(((labels[:, a] == 1) & (labels[:, b] == 0) & both)
                         | ((labels[:, b] == 1) & (labels[:, a] == 0) & both))
    return masks


def repair_wloss(model: Model, ds: LabeledDataset, cfg: RepairConfig) -> RepairOutcome:
    """Mix the plain loss with the mean loss over currently-confused samples."""
    sampler = WeightedSampler(ds, None, SamplerConfig(rho=1.0, seed=cfg.train.seed))
    rho = cfg.rho

    def step():
        idx = sampler.draw(cfg.train.batch_size)
        x, y = ds.features[idx], ds.labels[idx]
        logits, _ = model.forward(x, TRAIN)
        if rho == 1.0:
            weights = None
        else:
            # membership comes from the same forward pass used for the loss
            masks = _confused_masks(logits.data, y, cfg.target, model.task)
            n = len(idx)
            weights = np.full(n, rho / n)
            npairs = len(masks)
            for mask in masks:
                cnt = int(mask.sum())
                if cnt:
                    weights[mask] += (1.0 - rho) / (npairs * cnt)
        if model.task == SINGLE_LABEL:
            return T.softmax_cross_entropy(logits, y, weights)
        return T.sigmoid_bce(logits, y, weights)

    return _finetune(model, ds, cfg, step)


def _abs_node(t):
    return T.add(T.relu(t), T.relu(T.neg(t)))


def _centroid(rep, rows):
    return T.mean0(T.gather_rows(rep, rows))


def _class_rows(labels: np.ndarray, k: int, task: str) -> np.ndarray:
    if task == SINGLE_LABEL:
        return np.nonzero(labels == k)[0]
    return np.nonzero(labels[:, k] == 1)[0]


def repair_wdbr(model: Model, ds: LabeledDataset, cfg: RepairConfig) -> RepairOutcome:
    """Centroid-distance regularization in representation space.

    Confusion targets subtract the pair centroid distance (pushing the two
    classes apart); bias targets penalize the anchor-distance gap. Classes
    absent from a batch drop their term for that batch.
    """
    sampler = WeightedSampler(ds, None, SamplerConfig(rho=1.0, seed=cfg.train.seed))
    rho = cfg.rho
    target = cfg.target

    def step():
        idx = sampler.draw(cfg.train.batch_size)
        x, y = ds.features[idx], ds.labels[idx]
        loss, _, rep = _batch_loss(model, x, y)
        if rho == 1.0:
            return loss
        terms = []
        if target.kind == CONFUSION_PAIRS:
            for a, b in target.groups:
                ra, rb = _class_rows(y, a, model.task), _class_rows(y, b, model.task)
                if len(ra) == 0 or len(rb) == 0:
                    continue
                d = T.l2norm(T.sub(_centroid(rep, ra), _centroid(rep, rb)))
                terms.append(T.neg(d))
        else:
            for a, b, c in target.groups:
                rows = [_class_rows(y, k, model.task) for k in (a, b, c)]
                if any(len(r) == 0 for r in rows):
                    continue
                pa, pb, pc = (_centroid(rep, r) for r in rows)
                dac = T.l2norm(T.sub(pa, pc))
                dbc = T.l2norm(T.sub(pb, pc))
                terms.append(_abs_node(T.sub(dac, dbc)))
        total = T.scale(loss, rho)
        if terms:
            reg = terms[0]
            for t in terms[1:]:
                reg = T.add(reg, t)
            total = T.add(total, T.scale(reg, (1.0 - rho) / len(target.groups)))
        return total

    return _finetune(model, ds, cfg, step)


def postprocess_wos(preds: PredictionSet, target: TargetSpec, rho: float,
                    scale_predicted_only: bool = False) -> PredictionSet:
    """Scale target-class scores by rho for rows matching the confusion/bias
    pattern, then re-decide. Scores are not re-normalized.

    ``scale_predicted_only`` switches single-label scaling to the predicted
    target entry only (the alternative reading of the smoothing rule).
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0,1], got {rho}")
    scores = preds.scores.copy()
    n = preds.n
    scale_mask = np.zeros_like(scores, dtype=bool)
    if preds.task == SINGLE_LABEL:
        argmax = preds.predicted
        for group in target.groups:
            rows = np.isin(argmax, group)
            if scale_predicted_only:
                scale_mask[np.nonzero(rows)[0], argmax[rows]] = True
            else:
                scale_mask[np.ix_(rows, np.array(group))] = True
    else:
        pred = preds.predicted
        if target.kind == CONFUSION_PAIRS:
            conditions = [(g, g) for g in target.groups]
        else:
            conditions = []
            for a, b, c in target.groups:
                conditions += [((a, c), (a, c)), ((b, c), (b, c))]
        for need, entries in conditions:
            rows = np.all(pred[:, list(need)] == 1, axis=1)
            scale_mask[np.ix_(np.nonzero(rows)[0], np.array(entries))] = True
    scores[scale_mask] *= rho
    return PredictionSet.from_scores(scores, preds.truth, preds.task)


def run_repair(model: Model, ds: LabeledDataset, cfg: RepairConfig) -> RepairOutcome:
    """Dispatch a fine-tuning repair on a clone of the model."""
    fns = {"orig-ft": finetune_orig, "w-aug": repair_waug, "w-bn": repair_wbn,
           "w-loss": repair_wloss, "w-dbr": repair_wdbr}
    if cfg.method not in fns:
        raise ValueError(f"{cfg.method} is not a fine-tuning method")
    work = model.clone()
    return fns[cfg.method](work, ds, cfg)
