"""Training loop, frame/video evaluation, and report assembly.

The fake class is positive throughout. Rates follow the spoofing convention:
FRR is the fraction of real items classified fake, FAR the fraction of fake
items classified real, and HTER their mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .capsnet import CapsuleModel, loss as bce_loss, save_checkpoint
from .data import DataError, Sample, SampleManifest, grouped_probabilities, load_image, preprocess
from .tensor import Tensor


class NumericalError(Exception):
    """Training divergence or a failed numerical check."""


def seed_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Named deterministic RNG sub-streams derived from one seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
        for k, name in enumerate(("init", "noise", "shuffle", "data"))
    }


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 25
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0           # epochs between checkpoints; 0 = none
    checkpoint_dir: Optional[str] = None
    stop_at_train_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        for name in ("batch_size", "learning_rate", "beta1", "beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


class Adam:
    """Adaptive-moment estimation over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)
            p.data = p.data - update


def extract_features(model: CapsuleModel, manifest: SampleManifest,
                     samples: Sequence[Sample], batch_size: int = 16) -> np.ndarray:
    """Preprocess and run the frozen extractor over samples; [N,C,16,16]."""
    dtype = model.dtype
    mean, std = model.input_norm
    chunks = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        images = [
            preprocess(load_image(manifest.resolve(s)), (mean, std), dtype=dtype).data
            for s in batch
        ]
        feats = model.extractor.extract(Tensor(np.stack(images)))
        chunks.append(feats.data)
    return np.concatenate(chunks, axis=0)


def model_scores(model: CapsuleModel, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode fake-class probabilities for a block of cached features."""
    probs = []
    with T.no_grad():
        for start in range(0, len(features), batch_size):
            pred = model.forward(Tensor(features[start:start + batch_size]))
            probs.append(np.atleast_1d(pred.y_hat.data))
    return np.concatenate(probs)


@dataclass
class TrainResult:
    model: CapsuleModel
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def train(manifest: SampleManifest, model: CapsuleModel, cfg: TrainConfig,
          features: Optional[np.ndarray] = None, verbose: bool = False) -> TrainResult:
    """Optimize the capsule parameters on the manifest's train split.

    The frozen extractor runs once per sample; features are cached for the
    whole run. Weight noise is active (train mode) at the model's configured
    sigma. Deterministic for a fixed config seed. Raises DataError for an
    unusable split and NumericalError if the loss stops being finite.
    """
    samples = manifest.split("train")
    if not samples:
        raise DataError("train split is empty")
    labels = np.array([s.label for s in samples], dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        raise DataError("train split needs both classes, found only one")

    streams = seed_streams(cfg.seed)
    noise_rng, shuffle_rng = streams["noise"], streams["shuffle"]

    if features is None:
        features = extract_features(model, manifest, samples)
    features = features.astype(model.dtype, copy=False)

    params = [p for _, p in model.trainable_parameters()]
    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.adam_eps)

    result = TrainResult(model=model)
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Tensor(features[idx])
            pred = model.forward(batch, train=True, rng=noise_rng)
            batch_loss = bce_loss(labels[idx], pred.y_hat).mean()
            value = float(batch_loss.data)
            if not np.isfinite(value):
                raise NumericalError(
                    f"loss became non-finite at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            epoch_loss += value * len(idx)
        epoch_loss /= n

        train_scores = model_scores(model, features)
        train_acc = float(np.mean((train_scores >= 0.5) == (labels == 1)))
        result.history.append(
            {"epoch": float(epoch), "loss": epoch_loss, "train_accuracy": train_acc})
        if verbose:
            print(f"epoch {epoch}: loss={epoch_loss:.6f} train_accuracy={train_acc:.4f}")

        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"checkpoint_epoch{epoch + 1}.wa"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, model)

        if cfg.stop_at_train_accuracy is not None and train_acc >= cfg.stop_at_train_accuracy:
            break
    return result


# -- evaluation ------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class EvalReport:
    level: str
    counts: ConfusionCounts
    frr: Optional[float]
    far: Optional[float]
    hter: Optional[float]
    accuracy: float
    threshold: float


def confusion_from_scores(labels: np.ndarray, scores: np.ndarray,
                          threshold: float) -> ConfusionCounts:
    """Fake (label 1) is positive; a score >= threshold classifies fake."""
    labels = np.asarray(labels)
    decided_fake = np.asarray(scores) >= threshold
    return ConfusionCounts(
        tp=int(np.sum((labels == 1) & decided_fake)),
        tn=int(np.sum((labels == 0) & ~decided_fake)),
        fp=int(np.sum((labels == 0) & decided_fake)),
        fn=int(np.sum((labels == 1) & ~decided_fake)),
    )


def report_from_counts(counts: ConfusionCounts, level: str, threshold: float) -> EvalReport:
    real = counts.tn + counts.fp
    fake = counts.tp + counts.fn
    frr = counts.fp / real if real else None
    far = counts.fn / fake if fake else None
    hter = (frr + far) / 2.0 if frr is not None and far is not None else None
    accuracy = (counts.tp + counts.tn) / counts.total if counts.total else 0.0
    return EvalReport(level=level, counts=counts, frr=frr, far=far,
                      hter=hter, accuracy=accuracy, threshold=threshold)


def aggregate_video(grouped: Dict[str, Sequence[float]],
                    max_frames: Optional[int] = None) -> Dict[str, float]:
    """Per-group probability: mean over the first ``max_frames`` frame scores."""
    out: Dict[str, float] = {}
    for group, probs in grouped.items():
        if len(probs) == 0:
            raise DataError(f"group {group} has no frames")
        selected = list(probs[:max_frames]) if max_frames is not None else list(probs)
        out[group] = float(np.mean(selected))
    return out


def evaluate(manifest: SampleManifest, model: CapsuleModel, threshold: float = 0.5,
             split: str = "test", level: str = "frame",
             max_frames: Optional[int] = None,
             features: Optional[np.ndarray] = None) -> EvalReport:
    """Eval-mode scoring of a split at frame or group (video) level."""
    if level not in ("frame", "group"):
        raise ValueError(f"level must be 'frame' or 'group', got {level!r}")
    samples = manifest.split(split)
    if not samples:
        raise DataError(f"{split} split is empty")
    if features is None:
        features = extract_features(model, manifest, samples)
    scores = model_scores(model, features.astype(model.dtype, copy=False))

    if level == "frame":
        labels = np.array([s.label for s in samples])
        counts = confusion_from_scores(labels, scores, threshold)
        return report_from_counts(counts, "frame", threshold)

    grouped_scores = grouped_probabilities(samples, scores)
    group_labels: Dict[str, int] = {}
    for s in samples:
        if s.group in group_labels and group_labels[s.group] != s.label:
            raise DataError(f"group {s.group} mixes labels and cannot be scored as one video")
        group_labels[s.group] = s.label
    means = aggregate_video(grouped_scores, max_frames=max_frames)
    groups = sorted(means)
    labels = np.array([group_labels[g] for g in groups])
    counts = confusion_from_scores(labels, np.array([means[g] for g in groups]), threshold)
    return report_from_counts(counts, "group", threshold)


def format_report(report: EvalReport) -> str:
    """Human-readable table followed by machine-readable key=value lines."""
    def rate(x: Optional[float]) -> str:
        return "undefined" if x is None else f"{x:.4f}"

    c = report.counts
    table = [
        f"evaluation level: {report.level}   threshold: {report.threshold}",
        "            classified real   classified fake",
        f"real        {c.tn:>15d}   {c.fp:>15d}",
        f"fake        {c.fn:>15d}   {c.tp:>15d}",
        f"FRR={rate(report.frr)}  FAR={rate(report.far)}  "
        f"HTER={rate(report.hter)}  accuracy={report.accuracy:.4f}",
    ]
    kv = [
        f"report.level={report.level}",
        f"report.threshold={report.threshold}",
        f"report.tp={c.tp}", f"report.tn={c.tn}",
        f"report.fp={c.fp}", f"report.fn={c.fn}",
        f"report.frr={'nan' if report.frr is None else repr(report.frr)}",
        f"report.far={'nan' if report.far is None else repr(report.far)}",
        f"report.hter={'nan' if report.hter is None else repr(report.hter)}",
        f"report.accuracy={report.accuracy!r}",
    ]
    return "\n".join(table + kv)
