"""AIVAE, AIVAEGAN and LeNet5 networks on the autodiff engine.

All networks are batch-first. Encoders take ``[B, 1, 48, 48]`` spectrograms,
decoders return ``[B, 1, 28, 28]`` images in (0, 1); unbatched inputs are
accepted and return unbatched outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor
from .autodiff import functional as F

LATENT_DIM = 64
SPEC_SHAPE = (1, 48, 48)
IMAGE_SHAPE = (1, 28, 28)
LENET_SHAPE = (1, 32, 32)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class LatentCode:
    mu: np.ndarray
    log_var: np.ndarray
    eps: np.ndarray
    sample: np.ndarray


def reparametrize(mu: Tensor, log_var: Tensor, eps) -> Tensor:
    """``mu + exp(0.5 * log_var) * eps``, differentiable in ``mu`` and ``log_var``."""
    if mu.shape != log_var.shape:
        raise ValueError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=mu.dtype))
    return mu + F.exp(log_var * 0.5) * eps


def _as_batch(x, shape: tuple, what: str) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape == shape:
        return x.reshape((1,) + shape), True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise ValueError(f"{what}: expected input of shape {shape} or [B, {', '.join(map(str, shape))}], got {x.shape}")


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if squeeze else t


class Network:
    """Shared plumbing: parameter registration, train/eval mode, layer calls."""

    arch = "network"

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.training = True

    def stores(self) -> dict[str, ParamStore]:
        raise NotImplementedError

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    # -- initialisation -----------------------------------------------------
    def _uniform(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def _normal(self, shape, mean=0.0, std=0.02):
        return self.rng.normal(mean, std, size=shape).astype(self.dtype)

    def _dense_params(self, store, name, n_in, n_out):
        store.add(f"{name}.weight", self._uniform((n_out, n_in), n_in))
        store.add(f"{name}.bias", self._uniform((n_out,), n_in))

    def _conv_params(self, store, name, c_in, c_out, k, bias=True, dcgan=False, transposed=False):
        shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
        fan_in = shape[1] * k * k
        store.add(f"{name}.weight", self._normal(shape) if dcgan else self._uniform(shape, fan_in))
        if bias:
            store.add(f"{name}.bias", np.zeros(c_out, self.dtype) if dcgan else self._uniform((c_out,), fan_in))

    def _bn_params(self, store, name, c):
        store.add(f"{name}.gamma", self._normal((c,), 1.0, 0.02))
        store.add(f"{name}.beta", np.zeros(c, self.dtype))
        store.add_buffer(f"{name}.running_mean", np.zeros(c, self.dtype))
        store.add_buffer(f"{name}.running_var", np.ones(c, self.dtype))

    # -- layer application --------------------------------------------------
    @staticmethod
    def _get(store, name):
        return store.entries.get(name)

    def dense(self, store, name, x):
        return F.dense(x, store[f"{name}.weight"], self._get(store, f"{name}.bias"))

    def conv(self, store, name, x, stride, padding=0):
        return F.conv2d(x, store[f"{name}.weight"], self._get(store, f"{name}.bias"), stride, padding)

    def deconv(self, store, name, x, stride, padding=0):
        return F.conv_transpose2d(x, store[f"{name}.weight"], self._get(store, f"{name}.bias"), stride, padding)

    def bn(self, store, name, x):
        return F.batchnorm(
            x, store[f"{name}.gamma"], store[f"{name}.beta"],
            store.buffers[f"{name}.running_mean"], store.buffers[f"{name}.running_var"],
            self.training, BN_MOMENTUM, BN_EPS,
        )


class _VaeMixin:
    latent_dim: int

    def encode(self, spectrogram):
        raise NotImplementedError

    def decode(self, f):
        raise NotImplementedError

    def forward(self, spectrogram, eps) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """(reconstruction, mu, log_var, sampled features) for a spectrogram batch."""
        mu, log_var = self.encode(spectrogram)
        f = reparametrize(mu, log_var, eps)
        return self.decode(f), mu, log_var, f


class AivaeModel(Network, _VaeMixin):
    """Conv encoder (48x48 spectrogram -> mu, log_var) and FC/upconv decoder (64 -> 28x28)."""

    arch = "aivae"

    def __init__(self, latent_dim: int = LATENT_DIM, seed: int = 0, dtype=np.float32):
        super().__init__(seed, dtype)
        self.latent_dim = latent_dim
        p = self.params = ParamStore()
        self._conv_params(p, "enc.conv1", 1, 64, 4)
        self._conv_params(p, "enc.conv2", 64, 128, 4)
        self._dense_params(p, "enc.fc1", 128 * 12 * 12, 1024)
        self._dense_params(p, "enc.fc2", 1024, 512)
        self._dense_params(p, "enc.mu", 512, latent_dim)
        self._dense_params(p, "enc.logvar", 512, latent_dim)
        self._dense_params(p, "dec.fc1", latent_dim, 512)
        self._dense_params(p, "dec.fc2", 512, 1024)
        self._dense_params(p, "dec.fc3", 1024, 128 * 7 * 7)
        self._conv_params(p, "dec.up1", 128, 64, 4, transposed=True)
        self._conv_params(p, "dec.up2", 64, 1, 4, transposed=True)

    def stores(self):
        return {"model": self.params}

    def encode(self, spectrogram):
        x, squeeze = _as_batch(spectrogram, SPEC_SHAPE, "encode")
        p = self.params
        h = F.relu(self.conv(p, "enc.conv1", x, 2, 1))
        h = F.relu(self.conv(p, "enc.conv2", h, 2, 1))
        h = h.reshape(h.shape[0], -1)
        h = F.relu(self.dense(p, "enc.fc1", h))
        h = F.relu(self.dense(p, "enc.fc2", h))
        mu, log_var = self.dense(p, "enc.mu", h), self.dense(p, "enc.logvar", h)
        return _unbatch(mu, squeeze), _unbatch(log_var, squeeze)

    def decode(self, f):
        f, squeeze = _as_batch(f, (self.latent_dim,), "decode")
        p = self.params
        h = F.relu(self.dense(p, "dec.fc1", f))
        h = F.relu(self.dense(p, "dec.fc2", h))
        h = F.relu(self.dense(p, "dec.fc3", h))
        h = h.reshape(h.shape[0], 128, 7, 7)
        h = F.relu(self.deconv(p, "dec.up1", h, 2, 1))
        out = F.sigmoid(self.deconv(p, "dec.up2", h, 2, 1))
        return _unbatch(out, squeeze)


class AivaeganModel(Network, _VaeMixin):
    """All-convolutional VAE generator plus a convolutional image discriminator."""

    arch = "aivaegan"

    def __init__(self, latent_dim: int = LATENT_DIM, seed: int = 0, dtype=np.float32):
        super().__init__(seed, dtype)
        self.latent_dim = latent_dim
        g = self.generator = ParamStore()
        for name, cin, cout in (("enc.conv1", 1, 128), ("enc.conv2", 128, 256),
                                ("enc.conv3", 256, 512), ("enc.conv4", 512, 2 * latent_dim)):
            self._conv_params(g, name, cin, cout, 4, bias=False, dcgan=True)
            self._bn_params(g, name.replace("conv", "bn"), cout)
        self._conv_params(g, "enc.head", 2 * latent_dim, 2 * latent_dim, 3, dcgan=True)
        for name, cin, cout, k in (("dec.up1", latent_dim, 512, 3), ("dec.up2", 512, 256, 3),
                                   ("dec.up3", 256, 128, 2)):
            self._conv_params(g, name, cin, cout, k, bias=False, dcgan=True, transposed=True)
            self._bn_params(g, name.replace("up", "bn"), cout)
        self._conv_params(g, "dec.up4", 128, 1, 2, dcgan=True, transposed=True)

        d = self.discriminator = ParamStore()
        self._conv_params(d, "conv1", 1, 128, 4, dcgan=True)
        self._conv_params(d, "conv2", 128, 256, 4, bias=False, dcgan=True)
        self._bn_params(d, "bn2", 256)
        self._conv_params(d, "conv3", 256, 512, 4, bias=False, dcgan=True)
        self._bn_params(d, "bn3", 512)
        self._conv_params(d, "out", 512, 1, 1, dcgan=True)

    def stores(self):
        return {"generator": self.generator, "discriminator": self.discriminator}

    def encode(self, spectrogram):
        x, squeeze = _as_batch(spectrogram, SPEC_SHAPE, "encode")
        g = self.generator
        h = x
        for i in range(1, 5):
            h = F.leaky_relu(self.bn(g, f"enc.bn{i}", self.conv(g, f"enc.conv{i}", h, 2, 1)), 0.2)
        h = self.conv(g, "enc.head", h, 1, 0).reshape(h.shape[0], 2 * self.latent_dim)
        mu, log_var = h[:, : self.latent_dim], h[:, self.latent_dim :]
        return _unbatch(mu, squeeze), _unbatch(log_var, squeeze)

    def decode(self, f):
        f, squeeze = _as_batch(f, (self.latent_dim,), "decode")
        g = self.generator
        h = f.reshape(f.shape[0], self.latent_dim, 1, 1)
        for i in range(1, 4):
            h = F.relu(self.bn(g, f"dec.bn{i}", self.deconv(g, f"dec.up{i}", h, 2)))
        out = F.sigmoid(self.deconv(g, "dec.up4", h, 2))
        return _unbatch(out, squeeze)

    def discriminator_logit(self, image) -> Tensor:
        x, squeeze = _as_batch(image, IMAGE_SHAPE, "discriminate")
        d = self.discriminator
        h = F.leaky_relu(self.conv(d, "conv1", x, 2, 1), 0.2)
        h = F.leaky_relu(self.bn(d, "bn2", self.conv(d, "conv2", h, 2, 1)), 0.2)
        h = F.leaky_relu(self.bn(d, "bn3", self.conv(d, "conv3", h, 2, 1)), 0.2)
        logit = self.conv(d, "out", h, 1, 0).mean(axis=(1, 2, 3))
        return logit.reshape(()) if squeeze else logit

    def discriminate(self, image) -> Tensor:
        """Probability that ``image`` is a real data sample."""
        return F.sigmoid(self.discriminator_logit(image))


class Lenet5Model(Network):
    """Classic LeNet5 on zero-padded 32x32 digits."""

    arch = "lenet5"

    def __init__(self, seed: int = 0, dtype=np.float32):
        super().__init__(seed, dtype)
        p = self.params = ParamStore()
        self._conv_params(p, "conv1", 1, 6, 5)
        self._conv_params(p, "conv2", 6, 16, 5)
        self._conv_params(p, "conv3", 16, 120, 5)
        self._dense_params(p, "fc1", 120, 84)
        self._dense_params(p, "fc2", 84, 10)

    def stores(self):
        return {"model": self.params}

    def logits(self, image) -> Tensor:
        x, squeeze = _as_batch(image, LENET_SHAPE, "lenet5")
        p = self.params
        h = F.maxpool2d(F.relu(self.conv(p, "conv1", x, 1)), 2, 2)
        h = F.maxpool2d(F.relu(self.conv(p, "conv2", h, 1)), 2, 2)
        h = F.relu(self.conv(p, "conv3", h, 1)).reshape(x.shape[0], 120)
        h = F.relu(self.dense(p, "fc1", h))
        return _unbatch(self.dense(p, "fc2", h), squeeze)

    def forward(self, image) -> Tensor:
        """Class probabilities (softmax over the 10 logits)."""
        return F.softmax(self.logits(image), axis=-1)


def pad_to_32(images: np.ndarray) -> np.ndarray:
    """Zero-pad ``[..., 28, 28]`` images by 2 on each side."""
    images = np.asarray(images)
    pad = [(0, 0)] * (images.ndim - 2) + [(2, 2), (2, 2)]
    return np.pad(images, pad)


ARCHITECTURES = {cls.arch: cls for cls in (AivaeModel, AivaeganModel, Lenet5Model)}


def build_model(arch: str, latent_dim: int = LATENT_DIM, seed: int = 0) -> Network:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    cls = ARCHITECTURES[arch]
    return cls(seed=seed) if cls is Lenet5Model else cls(latent_dim=latent_dim, seed=seed)
