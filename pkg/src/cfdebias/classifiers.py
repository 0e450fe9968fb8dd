"""Disease classifiers (ERM and Group-DRO) and the artifact detector."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from .forge import SUBGROUPS, ImageRecord
from .nets import build_backbone, parameter_checksum

logger = logging.getLogger(__name__)


class ChecksumError(RuntimeError):
    """A model's parameters no longer match the checksum recorded for them."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    eta_q: float = 0.1
    seed: int = 0
    threshold: float = 0.5
    patience: int = 8
    noise_std: float = 0.0
    arch: dict = field(default_factory=lambda: {"name": "small_cnn", "width": 16, "depth": 4})
    groups: tuple = SUBGROUPS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.lr <= 0 or self.eta_q < 0 or self.weight_decay < 0 or self.noise_std < 0:
            raise ValueError("lr must be positive, eta_q, weight_decay and noise_std non-negative")
        self.groups = tuple(self.groups)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class BinaryClassifier(nn.Module):
    """Image -> logit model with a fixed decision threshold."""

    def __init__(self, arch: dict, threshold: float = 0.5, input_side: Optional[int] = None):
        super().__init__()
        self.arch = dict(arch)
        self.threshold = threshold
        self.input_side = input_side
        self.backbone = build_backbone(self.arch)

    def forward(self, x):
        return self.backbone(x)

    def checksum(self) -> str:
        return parameter_checksum(self)

    def freeze(self) -> "BinaryClassifier":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def records_to_tensors(records: Sequence[ImageRecord], target: str = "disease"):
    """Stack records into (images[N,1,H,W], labels[N], group indices[N])."""
    x = torch.from_numpy(np.stack([r.image for r in records]).astype(np.float32)).unsqueeze(1)
    if target == "disease":
        y = torch.tensor([r.label for r in records], dtype=torch.float32)
    elif target == "artifact":
        y = torch.tensor([float(r.artifact_present) for r in records], dtype=torch.float32)
    else:
        raise ValueError(f"unknown target {target!r}")
    g = torch.tensor([SUBGROUPS.index(r.subgroup) for r in records], dtype=torch.long)
    return x, y, g


def _as_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=torch.float32)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected images shaped (N,H,W) or (N,1,H,W), got {tuple(x.shape)}")
    return x


@torch.no_grad()
def predict_logits(classifier: BinaryClassifier, images, batch_size: int = 256) -> np.ndarray:
    x = _as_batch(images)
    side = classifier.input_side
    if side is not None and tuple(x.shape[-2:]) != (side, side):
        raise ValueError(f"classifier expects {side}x{side} images, got {tuple(x.shape[-2:])}")
    was_training = classifier.training
    classifier.eval()
    out = [classifier(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    classifier.train(was_training)
    return torch.cat(out).double().numpy() if out else np.zeros(0)


def predict_proba(classifier: BinaryClassifier, images, batch_size: int = 256) -> np.ndarray:
    logits = predict_logits(classifier, images, batch_size)
    return 1.0 / (1.0 + np.exp(-logits))


def dro_weight_update(q, group_losses, eta_q: float, present=None) -> np.ndarray:
    """Exponentiated-gradient step on the group weights.

    q'_g is proportional to q_g * exp(eta_q * L_g). Groups flagged absent in
    ``present`` keep their probability mass; the remaining mass is
    redistributed among the present groups only.
    """
    q = np.asarray(q, dtype=np.float64)
    losses = np.asarray(group_losses, dtype=np.float64)
    if q.shape != losses.shape:
        raise ValueError("q and group_losses must have the same length")
    if not np.all(np.isfinite(losses)):
        raise ValueError(f"non-finite group loss: {losses}")
    mask = np.ones_like(q, dtype=bool) if present is None else np.asarray(present, dtype=bool)
    if not mask.any():
        return q.copy()
    # shift by the max for numerical stability; cancels on normalization
    z = eta_q * (losses[mask] - losses[mask].max())
    w = q[mask] * np.exp(z)
    out = q.copy()
    out[mask] = q[mask].sum() * w / w.sum()
    return out


def group_mean_losses(per_sample: torch.Tensor, groups: torch.Tensor, n_groups: int):
    """Per-group mean of per-sample losses; absent groups get 0 and a False flag."""
    onehot = F.one_hot(groups, n_groups).to(per_sample.dtype)
    counts = onehot.sum(0)
    sums = onehot.t() @ per_sample
    present = counts > 0
    return sums / counts.clamp_min(1), present


def _worst_group_accuracy(logits, y, g, n_groups):
    correct = ((logits >= 0).float() == y).float()
    accs = [float(correct[g == k].mean()) for k in range(n_groups) if (g == k).any()]
    return min(accs)


def _batches(n, batch_size, generator):
    perm = torch.randperm(n, generator=generator)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def fit(
    model: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    config: TrainConfig,
    groups: Optional[torch.Tensor] = None,
    n_groups: int = 0,
    dro: bool = False,
    score_fn: Optional[Callable[[nn.Module], float]] = None,
    history: Optional[list] = None,
) -> nn.Module:
    """Minibatch Adam on mean BCE (ERM) or the online Group-DRO objective.

    With ``dro=True`` each step forms per-group mean losses, updates the group
    weights q by an exponentiated-gradient step and descends on sum_g q_g L_g.
    ``score_fn`` is called after every epoch; the best-scoring state is
    restored at the end (ties keep the earlier epoch). ``config.noise_std``
    adds Gaussian noise to every training batch.
    """
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    q = np.full(n_groups, 1.0 / n_groups) if dro else None
    best, best_state, stale = -math.inf, None, 0
    for epoch in range(config.epochs):
        model.train()
        total = 0.0
        for idx in _batches(len(x), config.batch_size, gen):
            xb = x[idx]
            if config.noise_std > 0:
                xb = xb + config.noise_std * torch.randn(xb.shape, generator=gen)
            logits = model(xb)
            per_sample = F.binary_cross_entropy_with_logits(logits, y[idx], reduction="none")
            if dro:
                gl, present = group_mean_losses(per_sample, groups[idx], n_groups)
                q = dro_weight_update(q, gl.detach().numpy(), config.eta_q, present.numpy())
                loss = (torch.as_tensor(q, dtype=gl.dtype) * gl).sum()
            else:
                loss = per_sample.mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        entry = {"epoch": epoch, "train_loss": total / len(x)}
        if dro:
            entry["q"] = q.tolist()
        if score_fn is not None:
            model.eval()
            score = score_fn(model)
            entry["val_score"] = score
            if score > best:
                best, best_state, stale = score, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
        if history is not None:
            history.append(entry)
        logger.debug("epoch %d %s", epoch, entry)
        if score_fn is not None and stale >= config.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def _new_classifier(config: TrainConfig, side: int) -> BinaryClassifier:
    torch.manual_seed(config.seed)
    return BinaryClassifier(config.arch, config.threshold, input_side=side)


def _require_both_classes(y: torch.Tensor, what: str):
    if len(y) == 0 or y.min() == y.max():
        raise ValueError(f"training set for {what} needs both classes")


def train_erm(train: Sequence[ImageRecord], val: Sequence[ImageRecord], config: TrainConfig,
              history: Optional[list] = None) -> BinaryClassifier:
    """Mean-BCE training; the checkpoint with the lowest validation BCE is kept.

    Validation accuracy is a poor selector here: it reaches the artifact-rule
    plateau while the logits are still near zero, and a near-constant f gives
    the counterfactual generator nothing to follow.
    """
    x, y, _ = records_to_tensors(train)
    _require_both_classes(y, "ERM")
    xv, yv, _ = records_to_tensors(val)

    def score(m):
        with torch.no_grad():
            return -float(F.binary_cross_entropy_with_logits(m(xv), yv))

    model = _new_classifier(config, x.shape[-1])
    return fit(model, x, y, config, score_fn=score, history=history)


def train_group_dro(train: Sequence[ImageRecord], val: Sequence[ImageRecord], config: TrainConfig,
                    history: Optional[list] = None) -> BinaryClassifier:
    """Group-DRO training; model selection by worst-group validation accuracy."""
    x, y, g_all = records_to_tensors(train)
    _require_both_classes(y, "Group-DRO")
    if len(config.groups) < 2:
        raise ValueError("Group-DRO needs at least two groups")
    # remap the configured groups to 0..k-1
    lookup = {SUBGROUPS.index(name): k for k, name in enumerate(config.groups)}
    keep = torch.tensor([int(v) in lookup for v in g_all])
    x, y = x[keep], y[keep]
    g = torch.tensor([lookup[int(v)] for v in g_all[keep]], dtype=torch.long)
    counts = torch.bincount(g, minlength=len(config.groups))
    missing = [name for name, c in zip(config.groups, counts) if c == 0]
    if missing:
        raise ValueError(f"configured groups absent from training data: {missing}")

    xv, yv, gv_all = records_to_tensors(val)
    vkeep = torch.tensor([int(v) in lookup for v in gv_all])
    xv, yv = xv[vkeep], yv[vkeep]
    gv = torch.tensor([lookup[int(v)] for v in gv_all[vkeep]], dtype=torch.long)

    def score(m):
        with torch.no_grad():
            return _worst_group_accuracy(m(xv), yv, gv, len(config.groups))

    model = _new_classifier(config, x.shape[-1])
    return fit(model, x, y, config, groups=g, n_groups=len(config.groups), dro=True,
               score_fn=score, history=history)


def train_artifact_detector(train: Sequence[ImageRecord], val: Sequence[ImageRecord], config: TrainConfig,
                            history: Optional[list] = None) -> BinaryClassifier:
    """Classifier d predicting p(artifact | image).

    Selection uses validation cross-entropy rather than AUC: AUC saturates
    early on a deterministic artifact while the probabilities are still far
    from 0/1, and the latching score is computed on probabilities.
    """
    x, y, _ = records_to_tensors(train, target="artifact")
    _require_both_classes(y, "the artifact detector")
    xv, yv, _ = records_to_tensors(val, target="artifact")

    def score(m):
        with torch.no_grad():
            return -float(F.binary_cross_entropy_with_logits(m(xv), yv))

    model = _new_classifier(config, x.shape[-1])
    return fit(model, x, y, config, score_fn=score, history=history)


def detector_auc(detector: BinaryClassifier, records: Sequence[ImageRecord]) -> float:
    x, y, _ = records_to_tensors(records, target="artifact")
    return float(roc_auc_score(y.numpy(), predict_logits(detector, x)))


@dataclass
class SubgroupPerformance:
    per_group: dict
    overall_accuracy: float
    overall_auc: Optional[float]
    worst_group_accuracy: Optional[float]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _rates(pred: np.ndarray, y: np.ndarray) -> Optional[dict]:
    if len(y) == 0:
        return None
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / len(y),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": int(len(y)),
        "tp": tp, "fp": fp, "tn": tn, "fn": fn,
    }


def performance_from_probabilities(
    probs: np.ndarray, labels: np.ndarray, subgroups: Sequence[str], threshold: float = 0.5
) -> SubgroupPerformance:
    """Per-subgroup confusion-matrix metrics from precomputed probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    subgroups = np.asarray(subgroups)
    pred = (probs >= threshold).astype(int)
    per_group = {name: _rates(pred[subgroups == name], y[subgroups == name]) for name in SUBGROUPS}
    accs = [m["accuracy"] for m in per_group.values() if m is not None]
    auc = float(roc_auc_score(y, probs)) if len(np.unique(y)) == 2 else None
    return SubgroupPerformance(
        per_group=per_group,
        overall_accuracy=float(np.mean(pred == y)) if len(y) else 0.0,
        overall_auc=auc,
        worst_group_accuracy=min(accs) if accs else None,
        n=int(len(y)),
    )


def evaluate_by_subgroup(classifier: BinaryClassifier, records: Sequence[ImageRecord]) -> SubgroupPerformance:
    probs = predict_proba(classifier, np.stack([r.image for r in records]))
    return performance_from_probabilities(
        probs, [r.label for r in records], [r.subgroup for r in records], classifier.threshold
    )


def save_classifier(path: str | Path, classifier: BinaryClassifier, config: Optional[TrainConfig] = None,
                    extra: Optional[dict] = None):
    torch.save(
        {
            "kind": "binary_classifier",
            "arch": classifier.arch,
            "threshold": classifier.threshold,
            "input_side": classifier.input_side,
            "state_dict": classifier.state_dict(),
            "checksum": classifier.checksum(),
            "config": asdict(config) if config is not None else None,
            "extra": extra or {},
        },
        path,
    )


def load_classifier(path: str | Path) -> BinaryClassifier:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "binary_classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    clf = BinaryClassifier(ckpt["arch"], ckpt["threshold"], ckpt["input_side"])
    clf.load_state_dict(ckpt["state_dict"])
    if clf.checksum() != ckpt["checksum"]:
        raise ChecksumError(f"{path}: parameter checksum mismatch")
    clf.eval()
    return clf
