"""Losses and training loops for AIVAE, AIVAEGAN and the LeNet5 scorer."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import NonFiniteError, Tensor, accumulate, adam_step, backward, no_grad
from .autodiff import functional as F
from .checkpoint import ModelCheckpoint, capture, load_checkpoint, restore, save_checkpoint
from .dataset import ImageSet, PairSet, derive_rng
from .models import AivaeganModel, AivaeModel, Lenet5Model, Network, pad_to_32

log = logging.getLogger(__name__)

LOSS_MODES = ("non_saturating", "minimax")
PROB_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    latent_dim: int = 64
    epochs: int = 100
    batch_size: int = 128
    lr_aivae: float = 1e-3
    lr_gan: float = 2e-4
    lr_lenet: float = 1e-3
    alpha: float = 1.0
    seed: int = 0
    dataset: str = ""
    generator_loss_mode: str = "non_saturating"
    checkpoint_every: int = 10
    collapse_threshold: float = 1e-3
    collapse_patience: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("latent_dim", "epochs", "batch_size", "checkpoint_every", "collapse_patience"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_aivae", "lr_gan", "lr_lenet", "alpha"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")
        if self.generator_loss_mode not in LOSS_MODES:
            raise ValueError(f"generator_loss_mode must be one of {LOSS_MODES}, got {self.generator_loss_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    values: dict
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def add(self, epoch: int, values: dict, seconds: float) -> EpochRecord:
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            raise TrainingError(f"epoch {epoch}: non-finite log values {bad}")
        rec = EpochRecord(epoch, dict(values), seconds)
        self.records.append(rec)
        return rec

    def column(self, key: str) -> list:
        return [r.values[key] for r in self.records]

    def to_tsv(self) -> str:
        keys = list(self.records[0].values) if self.records else []
        lines = ["\t".join(["epoch", *keys, "seconds"])]
        for r in self.records:
            lines.append("\t".join([str(r.epoch), *(f"{r.values[k]:.6f}" for k in keys), f"{r.seconds:.2f}"]))
        lines += [f"# warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def kl_divergence(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over the last axis."""
    term = mu * mu + F.exp(log_var) - log_var - 1.0
    return term.sum(axis=-1) * 0.5


def reconstruction_loss(predicted: Tensor, target) -> Tensor:
    """Pixelwise Bernoulli NLL summed per image; scalar for one image, ``[B]`` for a batch."""
    elem = F.binary_cross_entropy(predicted, target, eps=PROB_EPS, reduction="none")
    if predicted.ndim <= 3:
        return elem.sum()
    return elem.sum(axis=tuple(range(1, predicted.ndim)))


@dataclass
class VaeLoss:
    total: Tensor
    reconstruction: float
    kl: float


def aivae_loss(model, spectrograms, images, eps) -> VaeLoss:
    """Batch mean of reconstruction + KL, differentiable through the sampled features."""
    recon, mu, log_var, _ = model.forward(spectrograms, eps)
    rec = reconstruction_loss(recon, images).mean()
    kl = kl_divergence(mu, log_var).mean()
    return VaeLoss(rec + kl, float(rec.data), float(kl.data))


def _clamped_log(p: Tensor) -> Tensor:
    """``log`` of ``p`` clamped to ``[PROB_EPS, 1 - PROB_EPS]``.

    The gradient is ``1 / clamp(p)`` everywhere (straight-through), so a
    saturated discriminator still passes a signal.
    """
    clipped = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)

    def _bw(g):
        accumulate(p, g / clipped)

    return Tensor._make(np.log(clipped).astype(p.dtype), (p,), _bw)


def discriminator_loss(model: AivaeganModel, real_images, fake_images) -> Tensor:
    """``-mean log D(real) - mean log(1 - D(fake))``; sees images only."""
    d_real = model.discriminate(real_images)
    d_fake = model.discriminate(fake_images)
    return -_clamped_log(d_real).mean() - _clamped_log(1.0 - d_fake).mean()


def adversarial_generator_term(d_fake: Tensor, mode: str = "non_saturating") -> Tensor:
    if mode == "non_saturating":
        return -_clamped_log(d_fake).mean()
    if mode == "minimax":
        return _clamped_log(1.0 - d_fake).mean()
    raise ValueError(f"unknown generator loss mode {mode!r}")


@dataclass
class GanLoss:
    d_loss: Tensor
    g_loss: Tensor
    adversarial: float
    reconstruction: float
    kl: float


def aivaegan_losses(model: AivaeganModel, spectrograms, images, eps, alpha: float,
                    mode: str = "non_saturating") -> GanLoss:
    """Discriminator and generator objectives evaluated against the same discriminator.

    ``g_loss = adversarial + alpha * reconstruction + KL`` with batch means;
    alpha weights the reconstruction term only.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    fake, mu, log_var, _ = model.forward(spectrograms, eps)
    d_loss = discriminator_loss(model, images, fake.detach())
    adv = adversarial_generator_term(model.discriminate(fake), mode)
    rec = reconstruction_loss(fake, images).mean()
    kl = kl_divergence(mu, log_var).mean()
    g_loss = adv + rec * alpha + kl
    return GanLoss(d_loss, g_loss, float(adv.data), float(rec.data), float(kl.data))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled index batches; a trailing batch smaller than 2 is dropped (batch norm needs 2)."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size) if len(perm[i : i + batch_size]) >= 2]


def _guarded_backward(loss: Tensor, params, epoch: int, batch: int, detail: str) -> None:
    if not np.all(np.isfinite(loss.data)):
        raise TrainingError(f"non-finite loss at epoch {epoch} batch {batch}: {detail}")
    try:
        backward(loss, params=params)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite gradient at epoch {epoch} batch {batch}: {exc}") from exc


EpochHook = Callable[[ModelCheckpoint, EpochRecord], None]


def _setup(model: Network, config: TrainConfig, stage: str, resume: Optional[ModelCheckpoint]):
    if resume is None:
        return derive_rng(config.seed, stage), 0
    restore(model, resume)
    return resume.restore_rng(), resume.epoch


def _end_epoch(model, config, epoch, rng, record, ckpt_path, on_epoch, extra=None) -> ModelCheckpoint:
    ckpt = capture(model, config.to_dict(), epoch + 1, rng, extra)
    if ckpt_path is not None and ((epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs):
        save_checkpoint(ckpt_path, ckpt)
    if on_epoch is not None:
        on_epoch(ckpt, record)
    return ckpt


def _require_pairs(pairset: PairSet, config: TrainConfig) -> None:
    if len(pairset) < 2:
        raise TrainingError("pair set needs at least 2 pairs")
    if pairset.split != "train":
        log.warning("training on a %r split pair set", pairset.split)


def train_aivae(config: TrainConfig, pairset: PairSet, checkpoint_path=None,
                resume: Optional[ModelCheckpoint] = None, on_epoch: Optional[EpochHook] = None):
    """Adam over shuffled batches; returns (final checkpoint, TrainLog).

    When ``checkpoint_path`` is given a checkpoint is written every
    ``checkpoint_every`` epochs and at the end, so an abort leaves the last good one.
    """
    _require_pairs(pairset, config)
    model = AivaeModel(config.latent_dim, seed=config.seed)
    rng, start = _setup(model, config, "train-aivae", resume)
    params = list(model.params)
    tlog = TrainLog()
    ckpt = resume
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(2)
        count = 0
        for b, idx in enumerate(epoch_batches(len(pairset), config.batch_size, rng)):
            spec, img, _ = pairset.batch(idx)
            eps = rng.standard_normal((len(idx), config.latent_dim)).astype(np.float32)
            loss = aivae_loss(model, spec, img, eps)
            _guarded_backward(loss.total, params, epoch, b, f"reconstruction={loss.reconstruction} kl={loss.kl}")
            adam_step(model.params, config.lr_aivae)
            sums += (loss.reconstruction * len(idx), loss.kl * len(idx))
            count += len(idx)
        rec, kl = sums / count
        record = tlog.add(epoch + 1, {"reconstruction": rec, "kl": kl, "loss": rec + kl}, time.perf_counter() - t0)
        log.info("aivae epoch %d: reconstruction %.3f kl %.3f", epoch + 1, rec, kl)
        ckpt = _end_epoch(model, config, epoch, rng, record, checkpoint_path, on_epoch)
    if ckpt is None:
        ckpt = capture(model, config.to_dict(), start, rng)
    return ckpt, tlog


def train_aivaegan(config: TrainConfig, pairset: PairSet, checkpoint_path=None,
                   resume: Optional[ModelCheckpoint] = None, on_epoch: Optional[EpochHook] = None):
    """One discriminator step then one generator step per batch, Adam on both."""
    _require_pairs(pairset, config)
    model = AivaeganModel(config.latent_dim, seed=config.seed)
    rng, start = _setup(model, config, "train-aivaegan", resume)
    g_params, d_params = list(model.generator), list(model.discriminator)
    tlog = TrainLog()
    ckpt = resume
    low_variance_epochs = int(resume.extra.get("low_variance_epochs", 0)) if resume else 0
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(5)
        count = 0
        for b, idx in enumerate(epoch_batches(len(pairset), config.batch_size, rng)):
            spec, img, _ = pairset.batch(idx)
            eps = rng.standard_normal((len(idx), config.latent_dim)).astype(np.float32)
            fake, mu, log_var, _ = model.forward(spec, eps)

            d_loss = discriminator_loss(model, img, fake.detach())
            _guarded_backward(d_loss, d_params, epoch, b, f"d_loss={float(d_loss.data)}")
            adam_step(model.discriminator, config.lr_gan)

            adv = adversarial_generator_term(model.discriminate(fake), config.generator_loss_mode)
            rec = reconstruction_loss(fake, img).mean()
            kl = kl_divergence(mu, log_var).mean()
            g_loss = adv + rec * config.alpha + kl
            detail = f"adversarial={float(adv.data)} reconstruction={float(rec.data)} kl={float(kl.data)}"
            _guarded_backward(g_loss, g_params, epoch, b, detail)
            adam_step(model.generator, config.lr_gan)
            model.discriminator.zero_grad()

            n = len(idx)
            sums += np.array([float(d_loss.data), float(g_loss.data), float(rec.data), float(kl.data),
                              float(fake.data.var(axis=0).mean())]) * n
            count += n
        d, g, rec_m, kl_m, variance = sums / count
        values = {"d_loss": d, "g_loss": g, "reconstruction": rec_m, "kl": kl_m, "generated_variance": variance}
        record = tlog.add(epoch + 1, values, time.perf_counter() - t0)
        log.info("aivaegan epoch %d: d %.4f g %.3f reconstruction %.3f", epoch + 1, d, g, rec_m)
        low_variance_epochs = low_variance_epochs + 1 if variance < config.collapse_threshold else 0
        if low_variance_epochs == config.collapse_patience:
            msg = (f"possible mode collapse: generated-batch pixel variance below "
                   f"{config.collapse_threshold} for {low_variance_epochs} epochs (epoch {epoch + 1})")
            log.warning(msg)
            tlog.warnings.append(msg)
        ckpt = _end_epoch(model, config, epoch, rng, record, checkpoint_path, on_epoch,
                          {"low_variance_epochs": low_variance_epochs})
    if ckpt is None:
        ckpt = capture(model, config.to_dict(), start, rng)
    return ckpt, tlog


def lenet_inputs(images: ImageSet) -> np.ndarray:
    """uint8 ``[N, 28, 28]`` -> float32 ``[N, 1, 32, 32]`` in [0, 1]."""
    return pad_to_32(images.float_images()[:, None])


def predict(model: Lenet5Model, inputs: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Argmax class for padded ``[N, 1, 32, 32]`` inputs, evaluated in chunks."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            out.append(np.argmax(model.logits(inputs[i : i + batch_size]).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_lenet5(config: TrainConfig, train: ImageSet, test: ImageSet, checkpoint_path=None,
                 resume: Optional[ModelCheckpoint] = None, on_epoch: Optional[EpochHook] = None):
    """Cross-entropy training with Adam; returns (best-test-accuracy checkpoint, TrainLog)."""
    model = Lenet5Model(seed=config.seed)
    rng, start = _setup(model, config, "train-lenet5", resume)
    x_train, x_test = lenet_inputs(train), lenet_inputs(test)
    y_train, y_test = train.labels.astype(np.int64), test.labels.astype(np.int64)
    params = list(model.params)
    tlog = TrainLog()
    best, best_acc = resume, -1.0
    if resume is not None:
        best_acc = float(resume.extra.get("best_accuracy", -1.0))
        if resume.extra.get("test_accuracy") != best_acc and checkpoint_path and Path(checkpoint_path).exists():
            best = load_checkpoint(checkpoint_path, "lenet5")
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for b, idx in enumerate(epoch_batches(len(x_train), config.batch_size, rng)):
            loss = F.nll_from_log_probs(F.log_softmax(model.logits(x_train[idx])), y_train[idx])
            _guarded_backward(loss, params, epoch, b, f"cross_entropy={float(loss.data)}")
            adam_step(model.params, config.lr_lenet)
            total += float(loss.data) * len(idx)
            count += len(idx)
        acc = float(np.mean(predict(model, x_test) == y_test))
        record = tlog.add(epoch + 1, {"cross_entropy": total / count, "test_accuracy": acc}, time.perf_counter() - t0)
        log.info("lenet5 epoch %d: loss %.4f test accuracy %.4f", epoch + 1, total / count, acc)
        current = capture(model, config.to_dict(), epoch + 1, rng, {"test_accuracy": acc, "best_accuracy": max(acc, best_acc)})
        if acc > best_acc:
            best_acc, best = acc, current
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, best)
            last = Path(checkpoint_path).with_suffix(".last.aick")
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                save_checkpoint(last, current)
        if on_epoch is not None:
            on_epoch(current, record)
    if best is None:
        best = capture(model, config.to_dict(), start, rng, {"best_accuracy": best_acc})
    return best, tlog
