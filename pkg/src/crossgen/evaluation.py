"""Classifier-scored generation accuracy, latent masking sweeps and image grids."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from PIL import Image

from .autodiff import no_grad
from .checkpoint import ModelCheckpoint, to_model
from .dataset import N_CLASSES, PairSet, derive_rng
from .models import Lenet5Model, Network, pad_to_32
from .training import predict

GENERATIVE = ("aivae", "aivaegan")
SEPARATOR = 255
EVAL_BATCH = 500


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    dataset: str
    model: str
    accuracy: float
    confusion: np.ndarray  # [true, predicted]
    n_examples: int
    seed: int
    alpha: Optional[float] = None
    sampling: str = "sample"

    @classmethod
    def from_predictions(cls, labels, predicted, **meta) -> "EvalReport":
        labels = np.asarray(labels, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        np.add.at(confusion, (labels, predicted), 1)
        n = len(labels)
        return cls(accuracy=float(np.trace(confusion)) / n if n else float("nan"),
                   confusion=confusion, n_examples=n, **meta)

    def to_text(self) -> str:
        """``key: value`` lines followed by the confusion matrix (rows = true class)."""
        lines = [
            f"dataset: {self.dataset}",
            f"model: {self.model}",
            f"alpha: {'' if self.alpha is None else self.alpha}",
            f"sampling: {self.sampling}",
            f"seed: {self.seed}",
            f"n_examples: {self.n_examples}",
            f"accuracy: {self.accuracy:.6f}",
        ]
        for c, row in enumerate(self.confusion):
            lines.append(f"confusion_{c}: {' '.join(str(int(v)) for v in row)}")
        return "\n".join(lines) + "\n"


@dataclass
class MaskSweepResult:
    ks: list
    accuracy: list
    trials: int
    seed: int
    per_trial: list = field(default_factory=list)

    def at(self, k: int) -> float:
        return self.accuracy[self.ks.index(k)]

    def to_tsv(self) -> str:
        return "k\taccuracy\n" + "".join(f"{k}\t{a:.6f}\n" for k, a in zip(self.ks, self.accuracy))


@dataclass
class GeneratedSet:
    images: np.ndarray  # float32 [N, 1, 28, 28]
    labels: np.ndarray  # int64 [N]

    def __len__(self) -> int:
        return len(self.labels)


ModelLike = Union[Network, ModelCheckpoint]


def _model(obj: ModelLike, allowed: tuple) -> Network:
    model = to_model(obj) if isinstance(obj, ModelCheckpoint) else obj
    if model.arch not in allowed:
        raise EvaluationError(f"expected a {' or '.join(allowed)} model, got {model.arch!r}")
    return model.eval()


def latent_features(model: ModelLike, pairset: PairSet, seed: int, use_mean: bool = False) -> np.ndarray:
    """Reparametrized features ``mu + sigma * eps`` per test pair (or ``mu`` with ``use_mean``).

    ``eps`` is drawn once per example from the evaluation seed, so every
    consumer of the features sees the same stream.
    """
    model = _model(model, GENERATIVE)
    eps = derive_rng(seed, "eval-eps").standard_normal((len(pairset), model.latent_dim)).astype(np.float32)
    out = np.empty((len(pairset), model.latent_dim), dtype=np.float32)
    with no_grad():
        for i in range(0, len(pairset), EVAL_BATCH):
            idx = np.arange(i, min(i + EVAL_BATCH, len(pairset)))
            spec, _, _ = pairset.batch(idx)
            mu, log_var = model.encode(spec)
            out[idx] = mu.data if use_mean else mu.data + np.exp(0.5 * log_var.data) * eps[idx]
    return out


def decode_features(model: ModelLike, features: np.ndarray) -> np.ndarray:
    model = _model(model, GENERATIVE)
    if features.ndim != 2 or features.shape[1] != model.latent_dim:
        raise EvaluationError(f"features must be [N, {model.latent_dim}], got {features.shape}")
    out = np.empty((len(features), 1, 28, 28), dtype=np.float32)
    with no_grad():
        for i in range(0, len(features), EVAL_BATCH):
            out[i : i + EVAL_BATCH] = model.decode(features[i : i + EVAL_BATCH]).data
    return out


def generate_test_images(model: ModelLike, pairset: PairSet, seed: int = 0, use_mean: bool = False) -> GeneratedSet:
    """One generated image per test pair, labelled with the pair's true class."""
    model = _model(model, GENERATIVE)
    images = decode_features(model, latent_features(model, pairset, seed, use_mean))
    return GeneratedSet(images, pairset.labels.astype(np.int64))


def _classifier(obj: ModelLike) -> Lenet5Model:
    return _model(obj, ("lenet5",))


def classify_images(classifier: ModelLike, images: np.ndarray) -> np.ndarray:
    """Predicted class for ``[N, 1, 28, 28]`` images in [0, 1]."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    return predict(_classifier(classifier), pad_to_32(images))


def classify_generated(classifier: ModelLike, generated: GeneratedSet, dataset: str = "", model: str = "",
                       seed: int = 0, alpha: Optional[float] = None, sampling: str = "sample") -> EvalReport:
    predicted = classify_images(classifier, generated.images)
    return EvalReport.from_predictions(generated.labels, predicted, dataset=dataset, model=model,
                                       seed=seed, alpha=alpha, sampling=sampling)


def random_masks(n: int, dim: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``[n, dim]`` with exactly ``k`` True entries per row, uniformly placed."""
    if not 0 <= k <= dim:
        raise ValueError(f"k must lie in [0, {dim}], got {k}")
    ranks = np.argsort(rng.random((n, dim)), axis=1)
    mask = np.zeros((n, dim), dtype=bool)
    np.put_along_axis(mask, ranks[:, :k], True, axis=1)
    return mask


def mask_sweep(model: ModelLike, pairset: PairSet, classifier: ModelLike, seed: int = 0,
               ks: Optional[Iterable[int]] = None, trials: int = 1, use_mean: bool = False) -> MaskSweepResult:
    """Accuracy after zeroing ``k`` random latent components per example, for each ``k``.

    Masks come from their own stream per (k, trial), separate from the
    sampling noise, so ``k = 0`` reproduces the unmasked accuracy exactly.
    """
    model = _model(model, GENERATIVE)
    classifier = _classifier(classifier)
    ks = list(range(model.latent_dim + 1)) if ks is None else [int(k) for k in ks]
    if trials < 1:
        raise ValueError("trials must be >= 1")
    features = latent_features(model, pairset, seed, use_mean)
    labels = pairset.labels.astype(np.int64)
    accuracy, per_trial = [], []
    for k in ks:
        runs = []
        for t in range(trials if k else 1):
            f = features
            if k:
                f = np.where(random_masks(len(f), f.shape[1], k, derive_rng(seed, f"eval-mask-{k}-{t}")), 0, f)
                f = f.astype(np.float32)
            runs.append(float(np.mean(classify_images(classifier, decode_features(model, f)) == labels)))
        per_trial.append(runs)
        accuracy.append(float(np.mean(runs)))
    return MaskSweepResult(ks, accuracy, trials, seed, per_trial)


def to_bytes(images: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with 1.0 -> 255."""
    return np.round(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def grid_array(images, cols: int) -> np.ndarray:
    """Row-major grid of ``[N, 28, 28]`` (or ``[N, 1, 28, 28]``) images with 2-pixel separators."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    if images.ndim != 3 or len(images) == 0:
        raise EvaluationError("need a nonempty stack of 2-D images")
    if cols < 1:
        raise EvaluationError("cols must be >= 1")
    n, h, w = images.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    grid = np.full((rows * h + (rows - 1) * 2, cols * w + (cols - 1) * 2), SEPARATOR, dtype=np.uint8)
    tiles = to_bytes(images)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * (h + 2) : r * (h + 2) + h, c * (w + 2) : c * (w + 2) + w] = tiles[i]
    return grid


def emit_image_grid(images, cols: int, path) -> Path:
    """Write an 8-bit grayscale PNG grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(grid_array(images, cols), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise EvaluationError(f"cannot write {path}: {exc}") from exc
    return path


def emit_comparison_grid(real, generated, path, cols: int = 8, rows: int = 4) -> Path:
    """Alternating rows of real images and the matching generated images."""
    real, generated = np.asarray(real)[: cols * rows], np.asarray(generated)[: cols * rows]
    tiles = []
    for i in range(0, len(real), cols):
        tiles.extend(real[i : i + cols])
        tiles.extend(generated[i : i + cols])
    return emit_image_grid(np.stack(tiles), cols, path)


def compare_error_rates(report_a: Union[EvalReport, float], report_b: Union[EvalReport, float]) -> float:
    """Relative error-rate change ``(err_a - err_b) / err_a``; NaN when ``err_a`` is zero."""
    acc_a = report_a.accuracy if isinstance(report_a, EvalReport) else float(report_a)
    acc_b = report_b.accuracy if isinstance(report_b, EvalReport) else float(report_b)
    err_a = 1.0 - acc_a
    if err_a == 0:
        return math.nan
    return (err_a - (1.0 - acc_b)) / err_a


def intra_class_variance(images: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes of the per-pixel variance across that class's images."""
    images = np.asarray(images, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels)
    per_class = [images[labels == c].var(axis=0).mean() for c in np.unique(labels)]
    return float(np.mean(per_class))
